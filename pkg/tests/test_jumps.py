import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from randombsde import ControlSpace, FiniteMarkMeasure
from randombsde.errors import InvalidInput
from randombsde.jumps import (BallKernel, ConstantDensity, DensityKernel, MarkedPointProcess, PerturbationScheme,
                              PointMassKernel, PointProcessBatch, TableKernel, build_skorohod_kernel,
                              compensator_martingale_check, perturb_batch, perturb_mpp, sample_poisson_batch,
                              sample_poisson_measure, superpose)
from randombsde.streams import generator

SPACE = ControlSpace.finite([0.0, 0.5, 1.0])


def _uniform(mass):
    return FiniteMarkMeasure.uniform(SPACE, mass)


# --------------------------------------------------------------------------
# Poisson sampling


def test_vanishing_intensity_gives_no_events():
    batch = sample_poisson_batch(_uniform(1e-9), 1_000_000, 0.0, 1.0, seed=1)
    assert batch.counts.sum() == 0


def test_poisson_mean_count():
    batch = sample_poisson_batch(_uniform(2.0), 100_000, 0.0, 3.0, seed=2)
    assert abs(batch.counts.mean() - 6.0) <= 3 * np.sqrt(6.0 / 100_000)


def test_mark_fractions_follow_the_weights():
    m = FiniteMarkMeasure.finite(ControlSpace.finite([1.0, 2.0]), [1, 3])
    batch = sample_poisson_batch(m, 50_000, 0.0, 1.0, seed=3)
    marks = batch.marks[batch.valid]
    frac = np.mean(marks == 1.0)
    assert abs(frac - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / marks.size)


def test_single_realization_is_ordered_inside_the_window():
    mpp = sample_poisson_measure(_uniform(5.0), 2.0, generator(0, 2), start=0.5)
    assert np.all(np.diff(mpp.epochs) > 0)
    assert mpp.count == 0 or (mpp.epochs[0] > 0.5 and mpp.epochs[-1] <= 2.0)


def test_batch_is_independent_of_workers():
    a = sample_poisson_batch(_uniform(3.0), 9000, 0.0, 1.0, seed=4, workers=1)
    b = sample_poisson_batch(_uniform(3.0), 9000, 0.0, 1.0, seed=4, workers=2)
    assert np.array_equal(a.epochs, b.epochs)


def test_epochs_must_increase():
    with pytest.raises(InvalidInput):
        MarkedPointProcess(np.array([0.5, 0.4]), np.array([0.0, 0.0]), 1.0)


# --------------------------------------------------------------------------
# Skorohod kernels


@given(st.floats(-3, 3), st.floats(0, 1, exclude_max=True))
def test_point_mass_kernel_returns_the_source(b, u):
    k = build_skorohod_kernel(PointMassKernel())
    assert float(k(np.array([b]), np.array([u]))[0]) == b


@given(st.floats(0, 1), st.floats(0, 1))
def test_uniform_density_kernel_is_identity(b, u):
    k = build_skorohod_kernel(DensityKernel(0.0, 1.0))
    assert float(k(np.array([b]), np.array([u]))[0]) == pytest.approx(u, abs=1e-9)


def test_table_kernel_threshold():
    k = build_skorohod_kernel(TableKernel([1.0, 2.0], [0.3, 0.7]))
    assert list(k(np.zeros(2), np.array([0.29, 0.31]))) == [1.0, 2.0]


@settings(max_examples=30)
@given(st.floats(0, 1), st.floats(0, 1, exclude_max=True))
def test_ball_kernel_stays_inside_the_ball(b, u):
    m = FiniteMarkMeasure.uniform(ControlSpace.interval(0.0, 1.0))
    k = build_skorohod_kernel(BallKernel(m, 0.25))
    a = float(k(np.array([b]), np.array([u]))[0])
    assert float(m.space.distance(a, b)) < 0.25 + 1e-9


# --------------------------------------------------------------------------
# perturbation


def test_perturbing_nothing_gives_nothing():
    src = MarkedPointProcess(np.array([]), np.array([]), 2.0)
    out, dens = perturb_mpp(src, PerturbationScheme(4), _uniform(1.0), generator(0, 1))
    assert out.count == 0
    assert np.all(dens.evaluate(np.linspace(0, 2, 7)[None], 0.5) == 0.0)


def test_single_event_density_is_hazard_over_ball_mass():
    scheme, m = PerturbationScheme(4), _uniform(3.0)
    src = MarkedPointProcess(np.array([1.0]), np.array([0.5]), 2.0)
    out, dens = perturb_mpp(src, scheme, m, generator(0, 1))
    r1 = out.epochs[0]
    assert 1.0 < r1 < 1.0 + scheme.radius
    t = np.array([[1.0 + 0.3 * (r1 - 1.0), r1]])
    mask, mass = m.ball(0.5, scheme.radius)
    inside = SPACE.points[SPACE.distance(SPACE.points, 0.5) < scheme.radius]
    for a in SPACE.points:
        expect = scheme.hazard(1, t - 1.0) / mass if a in inside else 0.0
        assert np.allclose(dens.evaluate(t, a), expect)
    assert np.all(dens.evaluate(np.array([[0.9, r1 + 1e-9]]), 0.5) == 0.0)
    # the truncated exponential hazard never drops below its rate
    assert np.all(scheme.hazard(1, np.linspace(1e-9, scheme.width * 0.99, 9)) >= scheme.rate)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_perturbation_invariants_hold_on_every_realization(m, seed):
    measure = _uniform(4.0)
    scheme = PerturbationScheme(m)
    src = sample_poisson_batch(measure, 200, 0.0, 1.0, seed)
    out, _ = perturb_batch(src, scheme, measure, seed)
    v = src.valid
    with np.errstate(invalid="ignore"):
        delay = np.where(v, out.epochs - src.epochs, 0.0)
    assert np.all(delay[v] > 0)
    assert np.all(delay.sum(axis=1) < scheme.radius)
    assert np.all(SPACE.distance(src.marks[v], out.marks[v]) < scheme.radius)


def test_perturbed_count_matches_compensator():
    measure = _uniform(2.0)
    scheme = PerturbationScheme(8)

    def gen(seed, c, size):
        src = sample_poisson_batch(measure, size, 0.0, 1.0, seed, stream=c)
        return perturb_batch(src, scheme, measure, seed, stream=c)

    rep = compensator_martingale_check(gen, measure, lambda t, a, n: np.ones(np.broadcast_shapes(
        np.shape(t), np.shape(a))), 100_000, 1.0 + scheme.radius, seed=5)
    assert rep.passed, rep


# --------------------------------------------------------------------------
# superposition and the compensator check


def test_empty_kappa_leaves_pi_unchanged():
    pi = sample_poisson_batch(_uniform(1.0), 10, 0.0, 1.0, seed=6)
    empty = PointProcessBatch(np.full((10, 0), np.inf), np.full((10, 0), np.nan), 1.0)
    merged, dens = superpose((empty, ConstantDensity(10, 0.0)), (pi, ConstantDensity(10, 1.0)))
    assert np.array_equal(merged.epochs[merged.valid], pi.epochs[pi.valid])
    assert np.allclose(dens.evaluate(np.full((10, 3), 0.5), 0.0), 1.0)


def test_superposed_mean_count_and_density():
    p1 = sample_poisson_batch(_uniform(1.0), 100_000, 0.0, 2.0, seed=7, stream=0)
    p2 = sample_poisson_batch(_uniform(0.5), 100_000, 0.0, 2.0, seed=7, stream=1)
    merged, dens = superpose((p1, ConstantDensity(p1.n_paths, 2.0)), (p2, ConstantDensity(p2.n_paths, 3.0)))
    c = merged.counts
    assert abs(c.mean() - 3.0) <= 3 * c.std(ddof=1) / np.sqrt(c.size)
    assert np.allclose(dens.evaluate(np.full((5, 2), 0.7), 0.5)[:5], 5.0)


def test_zero_field_gives_zero_on_both_sides():
    measure = _uniform(1.0)
    gen = lambda seed, c, size: (sample_poisson_batch(measure, size, 0.0, 1.0, seed, stream=c),
                                 ConstantDensity(size, 1.0))
    rep = compensator_martingale_check(gen, measure, lambda t, a, n: 0.0 * np.asarray(t) * np.asarray(a), 2000,
                                       1.0)
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.passed


def test_unit_field_counts_poisson_mass():
    measure = _uniform(1.5)
    gen = lambda seed, c, size: (sample_poisson_batch(measure, size, 0.0, 2.0, seed, stream=c),
                                 ConstantDensity(size, 1.0))
    rep = compensator_martingale_check(gen, measure, lambda t, a, n: np.ones(np.broadcast_shapes(
        np.shape(t), np.shape(a))), 50_000, 2.0, seed=8)
    assert rep.passed
    assert rep.rhs == pytest.approx(3.0, rel=1e-9)
    assert abs(rep.lhs - 3.0) <= 3 * rep.lhs_stderr
