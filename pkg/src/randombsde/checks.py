"""Statistical self-check suites: compensators, likelihood martingales, kernel pushforwards."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .control import ControlSpace, FiniteMarkMeasure, InitialPath, ProblemSpec, TimeGrid
from .girsanov import IntensityField, log_likelihood
from .jumps import (BallKernel, ConstantDensity, DensityKernel, PerturbationScheme, TableKernel,
                    build_skorohod_kernel, compensator_martingale_check, perturb_batch, sample_poisson_batch,
                    superpose)
from .sde import NoiseBundle, node_marks, simulate_population
from .streams import Purpose, generator


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    observed: float
    expected: float
    stderr: float
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def _within(name, observed, expected, stderr, **details) -> CheckResult:
    return CheckResult(name, bool(abs(observed - expected) <= 3 * stderr), float(observed), float(expected),
                       float(stderr), details)


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def probe_field(t, a, count):
    """Bounded predictable test integrand H(t, a, N_{t-})."""
    return (1.0 + np.asarray(a) ** 2) * np.exp(-0.5 * np.asarray(count)) * (1.0 + np.cos(3.0 * np.asarray(t)))


def default_measure() -> FiniteMarkMeasure:
    return FiniteMarkMeasure.finite(ControlSpace.finite([0.0, 0.25, 0.5, 1.0]), [0.5, 1.0, 0.75, 0.25])


# --------------------------------------------------------------------------
# compensators


def compensator_suite(samples: int, seed: int, measure: FiniteMarkMeasure | None = None,
                      horizon: float = 1.0, levels: Sequence[int] = (2, 8, 32)) -> list[CheckResult]:
    """Martingale check for a raw Poisson measure, perturbed processes and a superposition."""
    measure = default_measure() if measure is None else measure
    out = []

    def poisson(seed_, c, size):
        batch = sample_poisson_batch(measure, size, 0.0, horizon, seed_, stream=c, purpose=Purpose.CHECK)
        return batch, ConstantDensity(size, 1.0)

    rep = compensator_martingale_check(poisson, measure, probe_field, samples, horizon, seed)
    out.append(CheckResult("compensator/poisson", rep.passed, rep.lhs, rep.rhs, rep.stderr, rep.as_dict()))

    for m in levels:
        scheme = PerturbationScheme(m)

        def perturbed(seed_, c, size, scheme=scheme):
            src = sample_poisson_batch(measure, size, 0.0, horizon, seed_, stream=c, purpose=Purpose.CHECK)
            return perturb_batch(src, scheme, measure, seed_, stream=c)

        rep = compensator_martingale_check(perturbed, measure, probe_field, samples, horizon + scheme.radius, seed)
        out.append(CheckResult(f"compensator/perturbed-{m}", rep.passed, rep.lhs, rep.rhs, rep.stderr,
                               rep.as_dict()))
        out.append(perturbation_invariants(measure, scheme, samples, seed, horizon))

    def merged(seed_, c, size):
        p1 = sample_poisson_batch(measure, size, 0.0, horizon, seed_, stream=2 * c, purpose=Purpose.CHECK)
        p2 = sample_poisson_batch(measure.scaled(0.5), size, 0.0, horizon, seed_, stream=2 * c + 1,
                                  purpose=Purpose.CHECK)
        return superpose((p1, ConstantDensity(size, 1.0)), (p2, ConstantDensity(size, 0.5)))

    rep = compensator_martingale_check(merged, measure, probe_field, samples, horizon, seed)
    out.append(CheckResult("compensator/superposition", rep.passed, rep.lhs, rep.rhs, rep.stderr, rep.as_dict()))
    return out


def perturbation_invariants(measure: FiniteMarkMeasure, scheme: PerturbationScheme, samples: int, seed: int,
                            horizon: float = 1.0) -> CheckResult:
    """R_n > T_n, sum (R_n - T_n) < 1/m and rho(alpha_n, beta_n) < 1/m on every realization."""
    src = sample_poisson_batch(measure, samples, 0.0, horizon, seed, stream=99, purpose=Purpose.CHECK)
    out, _ = perturb_batch(src, scheme, measure, seed, stream=99)
    valid = src.valid
    with np.errstate(invalid="ignore"):
        delay = np.where(valid, out.epochs - src.epochs, 0.0)
    dist = np.where(valid, measure.space.distance(src.marks, np.where(valid, out.marks, src.marks)), 0.0)
    ok_order = bool(np.all(delay[valid] > 0))
    total = delay.sum(axis=1)
    ok_sum = bool(np.all(total < scheme.radius))
    ok_dist = bool(np.all(dist < scheme.radius))
    return CheckResult(f"perturbation-invariants-{scheme.level}", ok_order and ok_sum and ok_dist,
                       float(max(total.max(initial=0.0), dist.max(initial=0.0))), scheme.radius, 0.0,
                       {"delays_positive": ok_order, "max_total_delay": float(total.max(initial=0.0)),
                        "max_mark_distance": float(dist.max(initial=0.0)), "samples": samples})


# --------------------------------------------------------------------------
# likelihood martingale


def _scalar_state_problem(space: ControlSpace) -> ProblemSpec:
    return ProblemSpec(1, 1, lambda t, x, a: 0.0, lambda t, x, a: 1.0, lambda t, x: x[-1, :, 0], 1.0, space,
                       lipschitz=1.0, growth=1.0, growth_power=1.0, name="brownian")


def state_field() -> IntensityField:
    """Bounded field depending on the state at the latest node, the time and the mark."""
    return IntensityField(lambda past, a: 1.0 + 0.5 * np.tanh(past.state[..., 0]) * np.cos(3.0 * np.asarray(a))
                          + 0.25 * np.sin(past.time), bound=1.75, label="state-dependent")


def girsanov_suite(samples: int, seed: int, measure: FiniteMarkMeasure | None = None,
                   steps: int = 32) -> list[CheckResult]:
    """E L_T = 1 for constant and state-dependent fields, L M = 1 pathwise, and the
    reweighted jump count under nu = 2."""
    measure = default_measure() if measure is None else measure
    grid = TimeGrid.uniform(0.0, 1.0, steps)
    events = sample_poisson_batch(measure, samples, 0.0, 1.0, seed, purpose=Purpose.CHECK)
    a0 = float(measure.nodes[0])
    out = []
    for c in (0.5, 1.0, 2.0):
        w = np.exp(log_likelihood(IntensityField.constant(c), events, measure, grid, initial_mark=a0))
        m, se = _mean_se(w)
        out.append(_within(f"girsanov/mean-L-{c:g}", m, 1.0, se))
    spec = _scalar_state_problem(measure.space)
    noise = NoiseBundle.generate(grid, samples, 1, seed, stream=Purpose.CHECK)
    path = simulate_population(spec, InitialPath.constant(0.0), a0, events, noise)
    w = np.exp(log_likelihood(state_field(), events, measure, grid, node_marks=path.marks, states=path.values))
    m, se = _mean_se(w)
    out.append(_within("girsanov/mean-L-state", m, 1.0, se))

    def stepped(past, a):
        return np.where(past.time < 0.5, 2.0, 0.5) * (1.0 + 0.0 * np.asarray(a))

    nu = IntensityField(stepped, bound=2.0, label="piecewise constant")
    rows = min(samples, 2000)
    sub = events.rows(slice(0, rows))
    g2 = TimeGrid(np.union1d(grid.nodes, [0.5]))
    lw = log_likelihood(nu, sub, measure, g2, initial_mark=a0)
    lm = log_likelihood(nu, sub, measure, g2, initial_mark=a0, inverse=True)
    err = float(np.max(np.abs(np.expm1(lw + lm))))
    out.append(CheckResult("girsanov/L-times-M", err <= 1e-10, err, 0.0, 0.0, {"paths": rows}))

    w = np.exp(log_likelihood(IntensityField.constant(2.0), events, measure, grid, initial_mark=a0))
    m, se = _mean_se(w * events.counts)
    out.append(_within("girsanov/reweighted-count-2", m, 2.0 * measure.total_mass * 1.0, se))
    return out


# --------------------------------------------------------------------------
# kernel pushforward


def probe_kernels(measure: FiniteMarkMeasure | None = None) -> dict:
    measure = default_measure() if measure is None else measure
    return {
        "table": (TableKernel([0.0, 0.5, 1.0], {0.0: [1, 2, 1], 1.0: [0, 1, 3]}), np.array([0.0, 1.0]),
                  np.array([0.0, 0.5, 1.0])),
        "density": (DensityKernel(0.0, 1.0, lambda b, a: 1.0 + b * a), np.array([0.0, 2.0]),
                    np.linspace(0.1, 0.9, 9)),
        "ball": (BallKernel(measure, 0.75), np.array([0.0, 0.5]), measure.space.points),
    }


def kernel_suite(samples: int, seed: int, measure: FiniteMarkMeasure | None = None) -> list[CheckResult]:
    """Empirical cell probabilities of q(b, U) against q(b, cell), per cell, within 3 stderr."""
    out = []
    for name, (desc, sources, cuts) in probe_kernels(measure).items():
        kernel = build_skorohod_kernel(desc)
        for i, b in enumerate(sources):
            u = generator(seed, Purpose.KERNEL, i, len(name)).random(samples)
            draws = kernel(np.full(samples, b), u)
            edges = np.concatenate([[-np.inf], cuts, [np.inf]])
            cdf = np.concatenate([[0.0], kernel.cdf(np.full(cuts.size, b), cuts), [1.0]])
            worst, ok = 0.0, True
            for lo, hi, c_lo, c_hi in zip(edges[:-1], edges[1:], cdf[:-1], cdf[1:]):
                p = float(np.clip(c_hi - c_lo, 0.0, 1.0))
                freq = float(np.mean((draws > lo) & (draws <= hi)))
                if p * (1 - p) > 1e-12:
                    z = abs(freq - p) / np.sqrt(p * (1 - p) / samples)
                else:
                    z = 0.0 if abs(freq - p) <= 1e-12 else np.inf
                worst = max(worst, z)
                ok &= z <= 3
            out.append(CheckResult(f"kernel/{name}-{b:g}", bool(ok), worst, 3.0, 1.0, {"samples": samples}))
    return out


def run_all(samples: int, seed: int) -> list[CheckResult]:
    return compensator_suite(samples, seed) + girsanov_suite(samples, seed) + kernel_suite(samples, seed)
