import numpy as np
import pytest

from randombsde import (ControlSpace, FiniteMarkMeasure, InitialPath, IntensityField, Numerics,
                        PiecewiseConstantControl, PolicyControl, ProblemSpec, TimeGrid, benchmarks,
                        duality_report, estimate_dual, estimate_primal, krylov_discretize, primal_sweep, snap,
                        standard_family)
from randombsde.bsde import build_population
from randombsde.errors import InvalidInput, UnboundedIntensity
from randombsde.estimators import ValueEstimate

NUM = Numerics(paths=20_000, steps=20, seed=1)


def _spec(name, **params):
    return benchmarks.get(name, **params).spec()


def test_constant_terminal_reward_has_zero_stderr():
    spec = ProblemSpec(1, 1, lambda t, x, a: 0.0, lambda t, x, a: 1.0, lambda t, x: np.full(x.shape[1], 2.5), 1.0,
                       ControlSpace.finite([0.0, 1.0]))
    est = estimate_primal(spec, InitialPath.constant(0.0), PiecewiseConstantControl.constant(0.0), NUM)
    assert (est.value, est.stderr) == (2.5, 0.0)


def test_deterministic_drift_constant_control_is_exact():
    est = estimate_primal(_spec("deterministic-drift"), InitialPath.constant(0.3),
                          PiecewiseConstantControl.constant(1.0), NUM)
    assert est.value == pytest.approx(1.3, abs=1e-12)
    assert est.stderr == 0.0


def test_uncertain_volatility_constant_control():
    est = estimate_primal(_spec("uncertain-volatility"), InitialPath.constant(1.0),
                          PiecewiseConstantControl.constant(0.4), NUM.with_(paths=100_000))
    assert abs(est.value - 1.16) <= 3 * est.stderr
    assert est.label == "primal" and est.paths == 100_000


# --------------------------------------------------------------------------
# Krylov discretization


def test_piecewise_constant_control_on_the_partition_is_unchanged():
    space = ControlSpace.finite([0.0, 0.5, 1.0])
    part = TimeGrid.uniform(0.0, 1.0, 4)
    c = PiecewiseConstantControl((0.25, 0.5, 0.75), (0.0, 1.0, 0.5, 0.5))
    out = krylov_discretize(c, part, [0.0, 0.5, 1.0], space)
    assert [out.value_at(t) for t in (0.1, 0.3, 0.6, 0.9)] == [0.0, 1.0, 0.5, 0.5]


def test_constant_in_subset_is_unchanged():
    space = ControlSpace.finite([0.2, 0.4])
    out = krylov_discretize(PiecewiseConstantControl.constant(0.4), TimeGrid.uniform(0, 1, 5), [0.2, 0.4], space)
    assert all(out.value_at(t) == 0.4 for t in np.linspace(0, 1, 11))


def test_linear_control_is_snapped_at_left_endpoints():
    space = ControlSpace.interval(0.0, 1.0)
    part = TimeGrid.uniform(0.0, 1.0, 4)
    subset = [0.0, 1 / 3, 2 / 3, 1.0]
    ramp = PolicyControl(lambda t, times, values, current: t, deterministic=True)
    out = krylov_discretize(ramp, part, subset, space)
    got = [out.value_at(t) for t in (0.0, 0.25, 0.5, 0.75)]
    assert got == pytest.approx([0.0, 1 / 3, 2 / 3, 2 / 3])
    # exact integral of |snapped - t| per cell, then the metric bound
    s = np.linspace(0, 1, 400_001)
    snapped = np.array(got)[np.minimum((s * 4).astype(int), 3)]
    l1 = np.trapezoid(np.abs(snapped - s), s)
    assert l1 <= 1 / 4 + 1 / 6


def test_snap_prefers_the_numerically_closest_mark_on_finite_spaces():
    space = ControlSpace.finite([-1.0, 0.0, 1.0])
    assert list(snap(space, np.array([-0.9, 0.2, 0.7, 0.0]), [-1.0, 0.0, 1.0])) == [-1.0, 0.0, 1.0, 0.0]


def test_subset_outside_space_is_rejected():
    with pytest.raises(InvalidInput):
        krylov_discretize(PiecewiseConstantControl.constant(0.2), TimeGrid.uniform(0, 1, 2), [0.3],
                          ControlSpace.finite([0.2, 0.4]))


# --------------------------------------------------------------------------
# primal sweep


def test_single_control_family():
    spec = _spec("uncertain-volatility")
    c = PiecewiseConstantControl.constant(0.2)
    best, table = primal_sweep(spec, InitialPath.constant(1.0), [c], NUM)
    assert best == table[0]
    assert best.value == estimate_primal(spec, InitialPath.constant(1.0), c, NUM).value


def test_deterministic_constants_pick_the_largest_drift():
    family = [PiecewiseConstantControl.constant(a) for a in (-1.0, 0.0, 1.0)]
    best, table = primal_sweep(_spec("deterministic-drift"), InitialPath.constant(0.0), family, NUM,
                               ["-1", "0", "1"])
    assert best.name == "1" and best.value == pytest.approx(1.0)
    assert [e.value for e in table] == pytest.approx([-1.0, 0.0, 1.0])


def test_uncertain_volatility_constants():
    family = [PiecewiseConstantControl.constant(a) for a in (0.2, 0.4)]
    best, _ = primal_sweep(_spec("uncertain-volatility"), InitialPath.constant(1.0), family,
                           NUM.with_(paths=100_000), ["0.2", "0.4"])
    assert best.name == "0.4"
    assert abs(best.value - 1.16) <= 3 * best.stderr


def test_standard_family_has_at_least_six_admissible_controls():
    for b in benchmarks.catalog():
        spec = b.spec()
        family, names = standard_family(spec, InitialPath.constant(1.0))
        assert len(family) >= 6 and len(names) == len(family)
        best, table = primal_sweep(spec, InitialPath.constant(1.0), family, NUM.with_(paths=500))
        assert len(table) == len(family)


# --------------------------------------------------------------------------
# dual estimates


def test_unit_intensity_gives_plain_randomized_gain():
    spec, m = _spec("uncertain-volatility"), FiniteMarkMeasure.uniform(ControlSpace.finite([0.2, 0.4]))
    x = InitialPath.constant(1.0)
    est = estimate_dual(spec, x, 0.2, m, IntensityField.constant(1.0), NUM)
    pop = build_population(spec, x, 0.2, m, NUM, max_level=0.0)
    assert est.value == pytest.approx(pop.gains.mean(), rel=1e-12)


def test_mark_independent_problem_ignores_the_intensity():
    spec = _spec("mark-independent")
    m = FiniteMarkMeasure.uniform(spec.control_space)
    x = InitialPath.constant(0.5)
    base = estimate_dual(spec, x, 0.0, m, IntensityField.constant(1.0), NUM)
    nu = IntensityField(lambda past, a: 0.5 + np.asarray(a) + 0 * past.time, bound=1.5)
    other = estimate_dual(spec, x, 0.0, m, nu, NUM)
    assert abs(other.value - base.value) <= 3 * np.hypot(base.stderr, other.stderr)


def test_suppressed_jumps_keep_the_initial_mark():
    spec = _spec("uncertain-volatility")
    m = FiniteMarkMeasure.uniform(spec.control_space)
    est = estimate_dual(spec, InitialPath.constant(1.0), 0.4, m, IntensityField.constant(0.01),
                        NUM.with_(paths=100_000))
    # jumps happen with probability about 1 - exp(-0.01 * 2), each costing at most 0.12
    bias = 0.12 * (1 - np.exp(-0.02))
    assert abs(est.value - 1.16) <= 3 * est.stderr + bias


def test_unbounded_intensity_is_rejected():
    spec = _spec("uncertain-volatility")
    nu = IntensityField(lambda past, a: 1.0 + 0 * past.time)
    with pytest.raises(UnboundedIntensity):
        estimate_dual(spec, InitialPath.constant(1.0), 0.2, FiniteMarkMeasure.uniform(spec.control_space), nu, NUM)


# --------------------------------------------------------------------------
# duality report


def _est(v, se, label):
    return ValueEstimate(v, se, 100, {"steps": 10}, 0, label)


def test_exact_agreement_passes():
    rep = duality_report(_est(2.0, 0.0, "primal"), [_est(2.0, 0.0, "dual")], _est(2.0, 0.0, "bsde"))
    assert rep.passed and len(rep.links) == 2


def test_benchmark_run_values_pass():
    rep = duality_report(_est(1.159, 0.003, "primal"), [], _est(1.162, 0.004, "bsde"))
    assert rep.passed


def test_primal_far_above_bsde_fails_the_first_link():
    se = np.hypot(0.01, 0.01)
    rep = duality_report(_est(1.0 + 10 * se, 0.01, "primal"), [], _est(1.0, 0.01, "bsde"))
    assert not rep.passed
    assert not rep.links[0].passed


def test_estimates_validate_their_fields():
    with pytest.raises(InvalidInput):
        _est(1.0, -1.0, "primal")
    with pytest.raises(InvalidInput):
        _est(1.0, 0.1, "oracle")
