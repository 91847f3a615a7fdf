import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from randombsde import (ControlSpace, FiniteMarkMeasure, InitialPath, Numerics, PenalizationSchedule, ProblemSpec,
                        RegressionBasis, TimeGrid, benchmarks, constraint_violation, dual_representation_value,
                        growth_bound_check, minimal_solution, solve_penalized)
from randombsde.bsde import LeastSquares, bang_bang, build_population, positive_part_energy, stable_steps
from randombsde.control import SamplePath
from randombsde.errors import BudgetExceeded, InvalidInput, SingularRegression

NUM = Numerics(paths=20_000, steps=20, seed=2)


def _bench(name, **params):
    spec = benchmarks.get(name, **params).spec()
    return spec, FiniteMarkMeasure.uniform(spec.control_space)


def test_constant_terminal_reward_is_reproduced_exactly():
    spec = ProblemSpec(1, 1, lambda t, x, a: 0.0, lambda t, x, a: 1.0, lambda t, x: np.full(x.shape[1], 1.75), 1.0,
                       ControlSpace.finite([0.0, 1.0]))
    m = FiniteMarkMeasure.uniform(spec.control_space)
    sol = solve_penalized(spec, InitialPath.constant(0.0), 0.0, m, 8.0, NUM.with_(paths=2000))
    assert np.allclose(sol.Y, 1.75, atol=1e-9)
    assert np.allclose(sol.U, 0.0, atol=1e-9)
    assert np.allclose(sol.K, 0.0, atol=1e-9)
    assert sol.y0 == pytest.approx(1.75, abs=1e-12)


def test_mark_independent_problem_has_no_jump_component():
    spec, m = _bench("mark-independent")
    x = InitialPath.constant(0.5)
    sol = solve_penalized(spec, x, 0.0, m, 16.0, NUM)
    assert np.max(np.abs(sol.U)) < 0.05
    g = sol.population.gains
    assert abs(sol.y0 - g.mean()) <= 3 * g.std(ddof=1) / np.sqrt(g.size)
    assert abs(sol.y0 - 0.5) <= 3 * sol.stderr


def test_mark_independent_minimal_solution_converges_at_once():
    spec, m = _bench("mark-independent")
    ms = minimal_solution(spec, InitialPath.constant(0.5), 0.0, m, PenalizationSchedule(stop_tol=0.01), NUM)
    assert ms.converged_level == 1.0 and ms.stopped_early
    assert abs(ms.y0 - 0.5) <= 3 * ms.stderr


def test_uncertain_volatility_sequence_increases_toward_the_value():
    spec, m = _bench("uncertain-volatility")
    sched = PenalizationSchedule(levels=(1.0, 4.0, 16.0, 64.0), stop_tol=None)
    ms = minimal_solution(spec, InitialPath.constant(1.0), 0.2, m, sched, NUM)
    y = [r.y0 for r in ms.table]
    assert all(b >= a for a, b in zip(y, y[1:]))
    inc = np.diff(y)
    assert inc[-1] < inc[0]
    assert abs(y[-1] - 1.16) <= 3 * ms.stderr + 0.02


def test_deterministic_drift_tends_to_one():
    spec, m = _bench("deterministic-drift")
    sched = PenalizationSchedule(levels=(1.0, 8.0, 64.0), stop_tol=None)
    ms = minimal_solution(spec, InitialPath.constant(0.0), 0.0, m, sched, NUM)
    assert abs(ms.y0 - 1.0) <= 3 * ms.stderr + 0.02


def test_violation_examples():
    dt = np.full(4, 0.25)
    w = np.array([1.0, 2.0])
    assert np.all(positive_part_energy([np.zeros((3, 2))] * 4, dt, w) == 0.0)
    assert np.all(positive_part_energy([-np.ones((3, 2))] * 4, dt, w) == 0.0)
    assert np.allclose(positive_part_energy([np.ones((3, 2))] * 4, dt, w), 3.0)


def test_violation_shrinks_with_the_level():
    spec, m = _bench("uncertain-volatility")
    x = InitialPath.constant(1.0)
    pop = build_population(spec, x, 0.2, m, NUM, max_level=64.0)
    v1 = constraint_violation(solve_penalized(spec, x, 0.2, m, 1.0, NUM, population=pop))
    v64 = constraint_violation(solve_penalized(spec, x, 0.2, m, 64.0, NUM, population=pop))
    assert v1[0] - v64[0] > 3 * np.hypot(v1[1], v64[1])


def test_growth_check_examples():
    grid = TimeGrid.uniform(0.0, 1.0, 4)
    paths = SamplePath(grid, np.zeros((5, 50, 1)), InitialPath.constant(0.0))
    chk = growth_bound_check(np.full((5, 50), -3.0), paths, 2.0)
    assert chk.passed and chk.worst_ratio == 3.0
    ones = SamplePath(grid, np.ones((5, 50, 1)), InitialPath.constant(1.0))
    chk = growth_bound_check(np.full((5, 50), 4.0), ones, 0.0)
    assert chk.passed and chk.worst_ratio == 2.0


def test_growth_check_on_uncertain_volatility():
    spec, m = _bench("uncertain-volatility")
    x = InitialPath.constant(1.0)
    pop = build_population(spec, x, 0.2, m, NUM, max_level=16.0)
    ratios = []
    for n in (1.0, 16.0):
        sol = solve_penalized(spec, x, 0.2, m, n, NUM, population=pop)
        chk = growth_bound_check(sol.Y, pop.path, 2.0)
        assert chk.passed
        ratios.append(chk.tail_ratio)
    assert ratios[1] < 2 * ratios[0]


# --------------------------------------------------------------------------
# dual certificate


@settings(max_examples=50)
@given(st.floats(-5, 5), st.floats(1, 200), st.floats(1e-4, 0.5))
def test_bang_bang_intensity(u, n, eps):
    v = float(bang_bang(np.array([u]), n, eps)[0])
    if u > 0:
        assert v == n
    elif u == 0:
        assert v == 1.0
    elif u > -1:
        assert v == eps
    else:
        assert v == pytest.approx(eps / abs(u))
    assert 0 < v <= max(n, 1.0)


def test_certificate_slack_formula():
    spec, _ = _bench("mark-independent")
    m = FiniteMarkMeasure.uniform(spec.control_space, 1.0)
    sol = solve_penalized(spec, InitialPath.constant(0.0), 0.0, m, 4.0, NUM.with_(paths=2000))
    cert = dual_representation_value(sol, epsilon=1e-3, paths=2000)
    assert cert.slack == pytest.approx(1e-3)


def test_certificate_on_mark_independent_problem():
    spec, m = _bench("mark-independent")
    x = InitialPath.constant(0.5)
    sol = solve_penalized(spec, x, 0.0, m, 16.0, NUM)
    cert = dual_representation_value(sol, epsilon=0.01)
    g = sol.population.gains
    assert abs(cert.estimate - g.mean()) <= 3 * np.hypot(cert.stderr, g.std(ddof=1) / np.sqrt(g.size))


def test_certificate_matches_uncertain_volatility_value():
    spec, m = _bench("uncertain-volatility")
    sol = solve_penalized(spec, InitialPath.constant(1.0), 0.2, m, 128.0, NUM)
    cert = dual_representation_value(sol, epsilon=0.01)
    assert sol.y0 - 0.02 <= cert.estimate <= sol.y0 + 3 * cert.stderr


def test_certificate_needs_the_solution_measure():
    spec, m = _bench("uncertain-volatility")
    sol = solve_penalized(spec, InitialPath.constant(1.0), 0.2, m, 2.0, NUM.with_(paths=2000))
    with pytest.raises(InvalidInput):
        dual_representation_value(sol, measure=m.scaled(2.0))
    with pytest.raises(InvalidInput):
        dual_representation_value(sol, epsilon=0.0)


# --------------------------------------------------------------------------
# regression plumbing


def test_least_squares_recovers_a_polynomial():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(5000)
    F = np.vstack([np.ones_like(x), x, x ** 2])
    y = 1.0 - 2.0 * x + 0.5 * x ** 2
    coef = LeastSquares(F, 1e-10).solve(y[None])
    assert coef[:, 0] == pytest.approx([1.0, -2.0, 0.5], abs=1e-6)


def test_least_squares_drops_constant_duplicates():
    x = np.linspace(-1, 1, 100)
    F = np.vstack([np.ones_like(x), x, np.full_like(x, 3.0)])
    coef = LeastSquares(F, 1e-10).solve((2 * x + 1)[None])
    assert (F.T @ coef)[:, 0] == pytest.approx(2 * x + 1, abs=1e-8)


def test_least_squares_rejects_non_finite_design():
    F = np.vstack([np.ones(10), np.r_[np.nan, np.arange(9.0)]])
    with pytest.raises((SingularRegression, InvalidInput)):
        LeastSquares(F, 1e-8).solve(np.ones((1, 10)))


def test_too_few_paths_for_the_basis():
    spec, m = _bench("uncertain-volatility")
    with pytest.raises(BudgetExceeded):
        solve_penalized(spec, InitialPath.constant(1.0), 0.2, m, 2.0, NUM.with_(paths=50),
                        basis=RegressionBasis(degree=3))


def test_schedule_must_increase():
    with pytest.raises(InvalidInput):
        PenalizationSchedule(levels=(1.0, 4.0, 2.0))


@given(st.integers(1, 100), st.floats(0.5, 512), st.floats(0.1, 2), st.floats(0.1, 4))
def test_stable_steps_bound_the_penalty_step(base, level, duration, mass):
    n = stable_steps(base, level, duration, mass)
    assert n >= base
    assert level * duration / n * mass <= 1 + 1e-12
