"""Penalized BSDEs with nonpositive jumps, solved by backward regression Monte Carlo.

The backward step at node k regresses continuation values on polynomial
features of the path (state, running integral, running max) and sets

    U_k(a) = c(X, a) - c(X, I_k)
    Y_k    = c(X, I_k) + n dt int U_k(a)^+ lambda(da)      (no-jump continuation)
    Y_k    = c(X, I_k) + dt int (n U^+ - U) lambda(da)      (continuation including jumps)

The first form is used with ``resimulate``: the step is re-simulated once per
mark with the same Brownian increment, so c(., a) is the value of holding a
over the step.  ``stratified`` and ``pooled`` regress the realized next value,
whose conditional law already includes the base-rate jumps, hence the
correction term in the second form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations_with_replacement
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg

from .control import FiniteMarkMeasure, InitialPath, ProblemSpec, SamplePath, TimeGrid
from .errors import (BudgetExceeded, InvalidInput, MissingU, NonMonotone, SingularRegression)
from .girsanov import IntensityField, log_likelihood, reweighted_expectation
from .jumps import PointProcessBatch, sample_poisson_batch
from .numerics import Numerics
from .sde import DEFAULT_CAP, NoiseBundle, _euler, running_integral, simulate_population
from .streams import Purpose, generator

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# regression


def _monomials(q: int, degree: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = [()]
    for deg in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(q), deg))
    return out


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomials up to ``degree`` in the state, its running integral and its
    running max.  The pooled continuation multiplies state monomials of degree
    <= degree - j by mark^j for j <= ``mark_degree``.  Features that are
    constant across paths (time, time-to-go, initial value) are absorbed by
    the intercept."""

    degree: int = 2
    use_integral: bool = True
    use_max: bool = True
    mark_degree: int = 2

    def variables(self, dim: int) -> int:
        return dim * (1 + self.use_integral + self.use_max)

    def monomials(self, dim: int) -> list[tuple[int, ...]]:
        return _monomials(self.variables(dim), self.degree)

    def n_features(self, dim: int) -> int:
        return len(self.monomials(dim))

    def mark_blocks(self, dim: int) -> list[int]:
        """Number of state monomials multiplying mark^j, j = 0..mark_degree."""
        q = self.variables(dim)
        return [len(_monomials(q, max(self.degree - j, 0))) for j in range(min(self.mark_degree, self.degree) + 1)]

    def stack(self, x: np.ndarray, integral: np.ndarray, maximum: np.ndarray) -> np.ndarray:
        """Variables as a (q, P) array from (P, d) inputs."""
        parts = [x.T]
        if self.use_integral:
            parts.append(integral.T)
        if self.use_max:
            parts.append(maximum.T)
        return np.ascontiguousarray(np.concatenate(parts, axis=0))

    def design(self, V: np.ndarray, monos: Sequence[tuple[int, ...]]) -> np.ndarray:
        """Feature-major design matrix (p, P)."""
        F = np.empty((len(monos), V.shape[1]))
        index = {m: i for i, m in enumerate(monos)}
        F[0] = 1.0
        for i, m in enumerate(monos[1:], start=1):
            np.multiply(F[index[m[:-1]]], V[m[-1]], out=F[i])
        return F


class LeastSquares:
    """Ridge least squares on standardized features, factorized once per design.

    Features whose sample spread vanishes are dropped (their coefficient is
    zero) and the intercept absorbs their mean.
    """

    def __init__(self, F: np.ndarray, ridge: float):
        p, P = F.shape
        self.p, self.P = p, P
        self.mu = F[1:].mean(axis=1)
        Fc = np.subtract(F[1:], self.mu[:, None])
        cov = Fc @ Fc.T / P
        if not np.all(np.isfinite(cov)):
            raise SingularRegression("non-finite regression features")
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        keep = sd > 1e-10 * (1.0 + np.abs(self.mu))
        self.keep = np.flatnonzero(keep)
        self.sd = sd[keep]
        self.Fc = Fc if keep.all() else Fc[keep]
        S = cov[np.ix_(keep, keep)] / np.outer(self.sd, self.sd)
        S[np.diag_indices_from(S)] += ridge
        if not np.all(np.isfinite(S)):
            raise SingularRegression("non-finite regression features")
        try:
            self.factor = linalg.cho_factor(S, check_finite=False) if S.size else None
        except linalg.LinAlgError as exc:
            raise SingularRegression("normal equations are not positive definite after the ridge") from exc

    def solve(self, Y: np.ndarray) -> np.ndarray:
        """Coefficients (p, m) for targets Y of shape (m, P)."""
        Y = np.atleast_2d(Y)
        if not np.all(np.isfinite(Y)):
            raise SingularRegression("non-finite regression targets")
        B = np.zeros((self.p, Y.shape[0]))
        ybar = Y.mean(axis=1)
        if self.keep.size:
            cxy = self.Fc @ Y.T / self.P
            b = linalg.cho_solve(self.factor, cxy / self.sd[:, None], check_finite=False) / self.sd[:, None]
            B[1 + self.keep] = b
            B[0] = ybar - self.mu[self.keep] @ b
        else:
            B[0] = ybar
        return B


# --------------------------------------------------------------------------
# populations


@dataclass(frozen=True, eq=False)
class Population:
    """Randomized (I, X) paths on a common grid plus the path features used by the basis."""

    spec: ProblemSpec
    x: InitialPath
    initial_mark: float
    measure: FiniteMarkMeasure
    path: SamplePath
    noise: NoiseBundle
    events: PointProcessBatch
    integral: np.ndarray
    maximum: np.ndarray
    seed: int
    stream: int

    @property
    def grid(self) -> TimeGrid:
        return self.path.grid

    @property
    def n_paths(self) -> int:
        return self.path.n_paths

    @cached_property
    def mark_index(self) -> Optional[np.ndarray]:
        sp = self.spec.control_space
        return sp.index_of(self.path.marks).astype(np.int16) if sp.is_finite else None

    @cached_property
    def gains(self) -> np.ndarray:
        run = running_integral(self.spec, self.path, self.path.marks)
        return run[-1] + self.spec.g(self.path.full_times, self.path.buffer)


def stable_steps(base_steps: int, level: float, duration: float, mass: float) -> int:
    """Smallest step count >= base_steps with level * dt * lambda(A) <= 1."""
    return max(int(base_steps), int(np.ceil(level * duration * mass - 1e-9)))


def build_population(spec: ProblemSpec, x: InitialPath, a: float, measure: FiniteMarkMeasure,
                     numerics: Numerics, max_level: float = 1.0, stream: int = 0,
                     paths: Optional[int] = None) -> Population:
    if measure.space is not spec.control_space and not _same_space(measure, spec):
        raise InvalidInput("the measure lives on a different control space")
    t0, T = x.t0, spec.horizon
    if not t0 < T:
        raise InvalidInput("t0 must be before the horizon")
    P = numerics.paths if paths is None else paths
    steps = stable_steps(numerics.steps, max_level, T - t0, measure.total_mass)
    grid = TimeGrid.uniform(t0, T, steps)
    noise = NoiseBundle.generate(grid, P, spec.dim_noise, numerics.seed, stream, numerics.workers)
    events = sample_poisson_batch(measure, P, t0, T, numerics.seed, stream, numerics.workers)
    path = simulate_population(spec, x, a, events, noise, numerics.cap)
    integral, maximum = path_features(path)
    return Population(spec, x, float(a), measure, path, noise, events, integral, maximum, numerics.seed, stream)


def _same_space(measure: FiniteMarkMeasure, spec: ProblemSpec) -> bool:
    a, b = measure.space, spec.control_space
    if a.kind != b.kind:
        return False
    if a.is_finite:
        return a.points.shape == b.points.shape and bool(np.all(a.points == b.points))
    return a.bounds == b.bounds


def path_features(path: SamplePath) -> tuple[np.ndarray, np.ndarray]:
    """Running trapezoid integral and running max at the grid nodes, prefix included."""
    M = path.offset
    times, buf = path.full_times, path.buffer
    h = np.diff(times)[:, None, None]
    cum = np.zeros(buf.shape)
    np.cumsum(h * (buf[1:] + buf[:-1]) / 2, axis=0, out=cum[1:])
    mx = np.maximum.accumulate(buf, axis=0)
    return np.ascontiguousarray(cum[M:]), np.ascontiguousarray(mx[M:])


# --------------------------------------------------------------------------
# solutions


class LevelSummary(NamedTuple):
    level: float
    steps: int
    y0: float
    stderr: float
    violation: float
    violation_stderr: float
    k_mean: float


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Discretized (Y, Z, U, K) of the penalized BSDE at one level.

    Y and K are stored per (node, path).  U and Z are reconstructed on demand
    from the stored regression coefficients (``U`` materializes an array of
    shape (N, P, Q); ``iter_U`` yields one node at a time).  ``y_prefix``
    holds the deterministic Y on the prefix nodes [0, t0].
    """

    population: Population
    level: float
    basis: RegressionBasis
    mode: str
    table: Optional[np.ndarray]
    poly: Optional[np.ndarray]
    z_coef: np.ndarray
    Y: np.ndarray
    K: np.ndarray
    y_prefix: np.ndarray
    y0: float
    stderr: float
    residuals: np.ndarray

    @property
    def grid(self) -> TimeGrid:
        return self.population.grid

    @property
    def measure(self) -> FiniteMarkMeasure:
        return self.population.measure

    def _variables(self, pop: Population, k: int, rows: slice = slice(None)) -> np.ndarray:
        return self.basis.stack(pop.path.values[k, rows], pop.integral[k, rows], pop.maximum[k, rows])

    def evaluate(self, k: int, V: np.ndarray, marks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuation at the quadrature marks (Q, P) and at ``marks`` (P,) from variables V (q, P)."""
        dim = self.population.spec.dim_state
        Fs = self.basis.design(V, self.basis.monomials(dim))
        if self.table is not None:
            c = self.table[k].T @ Fs
            idx = self.population.spec.control_space.index_of(marks)
            return c, c[idx, np.arange(c.shape[1])]
        C = self.poly[k] @ Fs
        powers = np.arange(C.shape[0])
        c = (self.measure.nodes[:, None] ** powers[None, :]) @ C
        return c, (np.asarray(marks)[None, :] ** powers[:, None] * C).sum(axis=0)

    def continuation(self, k: int, pop: Optional[Population] = None, rows: slice = slice(None)) -> np.ndarray:
        """c(X_k, a) at the quadrature marks, shape (Q, P)."""
        pop = self.population if pop is None else pop
        monos = self.basis.monomials(pop.spec.dim_state)
        Fs = self.basis.design(self._variables(pop, k, rows), monos)
        if self.table is not None:
            return self.table[k].T @ Fs
        C = self.poly[k] @ Fs
        powers = self.measure.nodes[:, None] ** np.arange(C.shape[0])[None, :]
        return powers @ C

    def mark_polynomial(self, k: int, pop: Optional[Population] = None, rows: slice = slice(None)) -> np.ndarray:
        """Coefficients in the mark of c(X_k, .), shape (J+1, P) (pooled fits only)."""
        if self.poly is None:
            raise InvalidInput("mark polynomial exists only for pooled fits")
        pop = self.population if pop is None else pop
        monos = self.basis.monomials(pop.spec.dim_state)
        return self.poly[k] @ self.basis.design(self._variables(pop, k, rows), monos)

    def current_value(self, k: int, c: np.ndarray, pop: Population, rows: slice = slice(None)) -> np.ndarray:
        """c(X_k, I_k) given the continuation at the quadrature marks."""
        if self.table is not None:
            idx = pop.mark_index[k, rows]
            return c[idx, np.arange(c.shape[1])]
        C = self.mark_polynomial(k, pop, rows)
        marks = pop.path.marks[k, rows]
        return (marks[None, :] ** np.arange(C.shape[0])[:, None] * C).sum(axis=0)

    def U_at(self, k: int, pop: Optional[Population] = None, rows: slice = slice(None)) -> np.ndarray:
        """Jump component at node k for every quadrature mark, shape (P, Q)."""
        pop = self.population if pop is None else pop
        c = self.continuation(k, pop, rows)
        return (c - self.current_value(k, c, pop, rows)).T

    def iter_U(self) -> Iterator[np.ndarray]:
        for k in range(self.grid.steps):
            yield self.U_at(k)

    @cached_property
    def U(self) -> np.ndarray:
        return np.stack(list(self.iter_U()))

    @cached_property
    def Z(self) -> np.ndarray:
        pop = self.population
        monos = self.basis.monomials(pop.spec.dim_state)
        out = np.empty((self.grid.steps, pop.n_paths, self.z_coef.shape[2]))
        for k in range(self.grid.steps):
            out[k] = (self.z_coef[k].T @ self.basis.design(self._variables(pop, k), monos)).T
        return out


def _psi_stderr(psi: np.ndarray) -> float:
    return float(psi.std(ddof=1) / np.sqrt(psi.size)) if psi.size > 1 else 0.0


def _prefix_values(spec: ProblemSpec, x: InitialPath, a: float, y_t0: float) -> np.ndarray:
    """Y on the prefix nodes: Y_t0 plus the running reward collected along x."""
    out = np.full(x.times.size, y_t0)
    if spec.running is None or x.times.size == 1:
        return out
    buf = x.values[:, None, :]
    av = np.full(1, a)
    f = np.array([spec.f(x.times[:j + 1], buf[:j + 1], av)[0] for j in range(x.times.size)])
    seg = np.diff(x.times) * (f[1:] + f[:-1]) / 2
    out[:-1] = y_t0 + np.cumsum(seg[::-1])[::-1]
    return out


def _backward(pop: Population, n: float, basis: RegressionBasis, numerics: Numerics) -> BsdeSolution:
    spec, measure = pop.spec, pop.measure
    space = spec.control_space
    mode = numerics.continuation
    if not space.is_finite and mode != "pooled":
        mode = "pooled"
    grid, path = pop.grid, pop.path
    N, P, M, d = grid.steps, pop.n_paths, path.offset, spec.dim_state
    dt = grid.dt
    lam = measure.node_weights
    marks_q = measure.nodes
    Q = marks_q.size
    monos = basis.monomials(d)
    p = len(monos)
    p_total = sum(basis.mark_blocks(d)) if mode == "pooled" else p
    linear = min(p, 1 + basis.variables(d))
    p_total += spec.dim_noise * (p + linear)
    if P < 10 * p_total:
        raise BudgetExceeded(f"{P} paths for {p_total} features; need at least {10 * p_total}")
    if n * dt.max() * measure.total_mass > 1 + 1e-9:
        raise InvalidInput("explicit penalization is unstable: refine the grid so n dt lambda(A) <= 1")

    times, buf, X = path.full_times, path.buffer, path.values
    dW = pop.noise.increments
    ar = np.arange(P)
    idx = pop.mark_index
    table = np.empty((N, p, Q)) if mode != "pooled" else None
    poly = np.zeros((N, len(basis.mark_blocks(d)), p)) if mode == "pooled" else None
    z_coef = np.empty((N, p, spec.dim_noise))
    residuals = np.empty(N)
    Y = np.empty((N + 1, P))
    Y[N] = spec.g(times, buf)
    pen = np.zeros((N, P))
    jump_sum = np.zeros(P)
    run = running_integral(spec, path, path.marks)
    scalar = d == 1 and spec.dim_noise == 1
    targets = np.empty((Q, P))

    for k in range(N - 1, -1, -1):
        j = M + k
        V = basis.stack(X[k], pop.integral[k], pop.maximum[k])
        Fs = basis.design(V, monos)
        mart = _martingale_features(Fs, dW[k], dt[k], linear)
        if mode == "resimulate":
            ls = LeastSquares(np.concatenate([Fs, mart]), numerics.ridge)
            saved = buf[j + 1].copy()
            tv, xv = times[:j + 1], buf[:j + 1]
            for i, ai in enumerate(marks_q):
                av = np.full(P, ai)
                b = spec.b(tv, xv, av)
                s = spec.sigma(tv, xv, av)
                if scalar:
                    xn = buf[j] + b * dt[k] + s[:, :, 0] * dW[k]
                else:
                    xn = buf[j] + b * dt[k] + np.matmul(s, dW[k][:, :, None])[..., 0]
                buf[j + 1] = xn
                if spec.running is not None:
                    fterm = dt[k] * (spec.f(tv, xv, av) + spec.f(times[:j + 2], buf[:j + 2], av)) / 2
                else:
                    fterm = 0.0
                if k == N - 1:
                    y = spec.g(times, buf)
                else:
                    Vn = basis.stack(xn, pop.integral[k] + (X[k] + xn) * (dt[k] / 2), np.maximum(pop.maximum[k], xn))
                    c = table[k + 1].T @ basis.design(Vn, monos)
                    y = c[i] + (n * dt[k + 1]) * (lam @ np.maximum(c - c[i], 0.0))
                targets[i] = y + fterm
            buf[j + 1] = saved
            B = ls.solve(targets)[:p]
            table[k] = B
            c = B.T @ Fs
            cI = c[idx[k], ar]
            U = c - cI
            pen[k] = (n * dt[k]) * (lam @ np.maximum(U, 0.0))
            Y[k] = cI + pen[k]
            jump_sum += U[idx[k + 1], ar]
            residuals[k] = float(np.sqrt(np.mean((targets[idx[k], ar] - cI) ** 2)))
        else:
            target = Y[k + 1] + (run[k + 1] - run[k])
            if mode == "pooled":
                c, cI, c_next, B, ls = _pooled_step(basis, Fs, mart, d, path.marks[k], path.marks[k + 1],
                                                    marks_q, target, numerics.ridge)
                poly[k] = B
            else:
                c, B, ls = _stratified_step(basis, Fs, mart, d, idx[k], path.marks[k], marks_q, target,
                                            numerics.ridge)
                table[k] = B
                cI = c[idx[k], ar]
                c_next = c[idx[k + 1], ar]
            U = c - cI
            pen[k] = (n * dt[k]) * (lam @ np.maximum(U, 0.0))
            Y[k] = cI + pen[k] - dt[k] * (lam @ U)
            jump_sum += c_next - cI
            residuals[k] = float(np.sqrt(np.mean((target - cI) ** 2)))
        if k == 0:
            # all paths share the state at t0; take one value so Y_0 is exactly common
            Y[0] = Y[0, 0]
        z_coef[k] = ls.solve(Y[k + 1][None, :] * dW[k].T / dt[k])[:p]
    K = np.zeros((N + 1, P))
    np.cumsum(pen, axis=0, out=K[1:])
    psi = Y[N] + run[N] + K[N] - jump_sum
    y0 = float(Y[0, 0])
    y_prefix = _prefix_values(spec, pop.x, pop.initial_mark, y0)
    return BsdeSolution(pop, float(n), basis, mode, table, poly, z_coef, Y, K, y_prefix, y0,
                        _psi_stderr(psi), residuals)


def _martingale_features(Fs: np.ndarray, dw: np.ndarray, h: float, linear: int) -> np.ndarray:
    """Fs * dW_j and (affine features) * (dW_j^2 - h).

    Both have zero conditional mean given the node, so adding them to the
    design leaves the continuation fit consistent while removing most of the
    one-step noise in the targets.
    """
    out = np.empty(((Fs.shape[0] + linear) * dw.shape[1], Fs.shape[1]))
    row = 0
    for j in range(dw.shape[1]):
        np.multiply(Fs, dw[:, j], out=out[row:row + Fs.shape[0]])
        row += Fs.shape[0]
        np.multiply(Fs[:linear], dw[:, j] ** 2 - h, out=out[row:row + linear])
        row += linear
    return out


def _pooled_design(basis: RegressionBasis, Fs: np.ndarray, marks: np.ndarray, blocks: list[int]) -> np.ndarray:
    F = np.empty((sum(blocks), Fs.shape[1]))
    row = 0
    power = np.ones(Fs.shape[1])
    for j, size in enumerate(blocks):
        np.multiply(Fs[:size], power, out=F[row:row + size])
        row += size
        power = power * marks
    return F


def _unflatten(flat: np.ndarray, blocks: list[int], p: int) -> np.ndarray:
    out = np.zeros((len(blocks), p))
    row = 0
    for j, size in enumerate(blocks):
        out[j, :size] = flat[row:row + size]
        row += size
    return out


def _pooled_step(basis, Fs, mart, dim, marks, next_marks, marks_q, target, ridge):
    blocks = basis.mark_blocks(dim)
    F = _pooled_design(basis, Fs, marks, blocks)
    ls = LeastSquares(np.concatenate([F, mart]), ridge)
    B = _unflatten(ls.solve(target[None, :])[:sum(blocks), 0], blocks, Fs.shape[0])
    C = B @ Fs
    powers = np.arange(len(blocks))
    c = (marks_q[:, None] ** powers[None, :]) @ C
    cI = (marks[None, :] ** powers[:, None] * C).sum(axis=0)
    c_next = (next_marks[None, :] ** powers[:, None] * C).sum(axis=0)
    return c, cI, c_next, B, LeastSquares(np.concatenate([Fs, mart]), ridge)


def _stratified_step(basis, Fs, mart, dim, idx, marks, marks_q, target, ridge):
    p = Fs.shape[0]
    Q = marks_q.size
    A = np.concatenate([Fs, mart])
    B = np.empty((p, Q))
    pooled = None
    for i in range(Q):
        rows = np.flatnonzero(idx == i)
        if rows.size >= 50 * A.shape[0]:
            B[:, i] = LeastSquares(A[:, rows], ridge).solve(target[None, rows])[:p, 0]
            continue
        if pooled is None:
            blocks = basis.mark_blocks(dim)
            F = _pooled_design(basis, Fs, marks, blocks)
            flat = LeastSquares(np.concatenate([F, mart]), ridge).solve(target[None, :])[:, 0]
            pooled = _unflatten(flat[:sum(blocks)], blocks, p)
        B[:, i] = (marks_q[i] ** np.arange(pooled.shape[0])) @ pooled
    return B.T @ Fs, B, LeastSquares(A, ridge)


def solve_penalized(spec: ProblemSpec, x: InitialPath, a: float, measure: FiniteMarkMeasure, n: float,
                    numerics: Numerics, basis: Optional[RegressionBasis] = None,
                    population: Optional[Population] = None) -> BsdeSolution:
    """Penalized BSDE at level ``n`` by backward regression on a randomized population.

    The grid is refined so that n dt lambda(A) <= 1.  Pass ``population`` to
    reuse paths across levels (common random numbers).
    """
    if not n > 0:
        raise InvalidInput("penalization level must be positive")
    basis = RegressionBasis(degree=numerics.degree) if basis is None else basis
    pop = build_population(spec, x, a, measure, numerics, n) if population is None else population
    sol = _backward(pop, n, basis, numerics)
    log.info("level %g: Y0 = %.6f (stderr %.2g) on %d steps", n, sol.y0, sol.stderr, pop.grid.steps)
    return sol


# --------------------------------------------------------------------------
# diagnostics


def constraint_violation(solution: BsdeSolution, measure: Optional[FiniteMarkMeasure] = None) -> tuple[float, float]:
    """Estimate of E int int (U^+)^2 lambda(da) dt with its stderr."""
    measure = solution.measure if measure is None else measure
    acc = positive_part_energy(solution.iter_U(), solution.grid.dt, measure.node_weights)
    return float(acc.mean()), _psi_stderr(acc)


def positive_part_energy(U_rows, dt: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-path sum_k dt_k sum_j (U_k(a_j)^+)^2 w_j for U_k of shape (P, Q)."""
    acc = None
    for k, U in enumerate(U_rows):
        term = dt[k] * (np.maximum(U, 0.0) ** 2 @ weights)
        acc = term if acc is None else acc + term
    if acc is None:
        raise InvalidInput("no jump component rows given")
    return acc


class GrowthCheck(NamedTuple):
    passed: bool
    worst_ratio: float
    median_ratio: float
    tail_ratio: float


def growth_bound_check(Y: np.ndarray, paths: SamplePath, m: float) -> GrowthCheck:
    """Ratio sup_k |Y_k| / (1 + sup_s |X_s|^m) per path; passes when the 99.9th
    percentile is below ten times the median."""
    sup_y = np.abs(np.asarray(Y)).max(axis=0)
    sup_x = np.linalg.norm(paths.buffer, axis=2).max(axis=0)
    ratio = sup_y / (1.0 + sup_x ** m)
    med = float(np.median(ratio))
    tail = float(np.quantile(ratio, 0.999))
    passed = bool(tail < 10 * med) or bool(np.all(ratio == 0))
    return GrowthCheck(passed, float(ratio.max()), med, tail)


# --------------------------------------------------------------------------
# dual certificate


class DualCertificate(NamedTuple):
    estimate: float
    stderr: float
    slack: float
    mean_weight: float


class _BangBangField(IntensityField):
    """n where U > 0, 1 where U = 0, eps on -1 < U < 0 and eps/|U| below -1.

    U is evaluated at the latest grid node before t along a given population;
    ``restrict`` precomputes the continuation table for a block of rows.
    """

    def __init__(self, solution: BsdeSolution, pop: Population, n: float, eps: float,
                 rows: Optional[slice] = None):
        object.__setattr__(self, "solution", solution)
        object.__setattr__(self, "pop", pop)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "bound", max(n, 1.0, eps))
        object.__setattr__(self, "predictable", True)
        object.__setattr__(self, "label", "bang-bang")
        object.__setattr__(self, "fn", self._evaluate)
        if rows is not None:
            sol = solution
            N = pop.grid.steps
            if sol.table is not None:
                tab = np.empty((N + 1, rows.stop - rows.start, sol.measure.nodes.size))
                for k in range(N):
                    tab[k] = sol.continuation(k, pop, rows).T
                tab[N] = tab[N - 1]
            else:
                J = sol.poly.shape[1]
                tab = np.empty((N + 1, rows.stop - rows.start, J))
                for k in range(N):
                    tab[k] = sol.mark_polynomial(k, pop, rows).T
                tab[N] = tab[N - 1]
            object.__setattr__(self, "tab", tab)

    def restrict(self, rows: slice) -> "_BangBangField":
        return _BangBangField(self.solution, self.pop, self.n, self.eps, rows)

    def _value(self, node, local, a):
        sol = self.solution
        if sol.table is not None:
            sp = sol.population.spec.control_space
            return self.tab[node, local, sp.index_of(np.broadcast_to(a, node.shape))]
        coef = self.tab[node, local]
        return (np.broadcast_to(a, node.shape)[..., None] ** np.arange(coef.shape[-1]) * coef).sum(axis=-1)

    def _evaluate(self, past, a):
        local = past.path - self.rows.start
        U = self._value(past.node, local, a) - self._value(past.node, local, past.mark)
        return bang_bang(U, self.n, self.eps)


def bang_bang(U: np.ndarray, n: float, eps: float) -> np.ndarray:
    """n where U > 0, 1 where U = 0, eps on -1 < U < 0 and eps/|U| for U <= -1."""
    with np.errstate(divide="ignore"):
        return np.where(U > 0, n, np.where(U == 0, 1.0, np.where(U > -1, eps, -eps / U)))


def _sample_under_field(solution: BsdeSolution, n: float, eps: float, P: int, stream: int) -> np.ndarray:
    """Gains of paths whose marks jump with intensity bang_bang(U) lambda(da) on the solution grid.

    The intensity on (r_k, r_{k+1}] is read at node r_k and at most one jump
    per cell takes effect at r_{k+1}, as in the base population.
    """
    pop0 = solution.population
    spec, grid, measure = pop0.spec, pop0.grid, pop0.measure
    basis = solution.basis
    seed = pop0.seed
    noise = NoiseBundle.generate(grid, P, spec.dim_noise, seed, stream)
    rng = generator(seed, Purpose.FRESH, stream)
    nodes_q, lam = measure.nodes, measure.node_weights
    dt = grid.dt
    state = {"int": np.repeat(pop0.integral[0, :1], P, axis=0), "max": np.repeat(pop0.maximum[0, :1], P, axis=0)}

    def mark_fn(k, tv, xv, cur):
        if k == 0:
            return np.full(P, pop0.initial_mark)
        prev, x_now = xv[-2], xv[-1]
        V = basis.stack(prev, state["int"], state["max"])
        c, cI = solution.evaluate(k - 1, V, cur)
        rates = bang_bang(c - cI, n, eps) * lam[:, None]
        total = rates.sum(axis=0)
        u = rng.random((2, P))
        jump = u[0] < -np.expm1(-dt[k - 1] * total)
        cum = np.cumsum(rates, axis=0) / total
        pick = np.minimum((cum < u[1]).sum(axis=0), nodes_q.size - 1)
        state["int"] = state["int"] + (prev + x_now) * (dt[k - 1] / 2)
        state["max"] = np.maximum(state["max"], x_now)
        return np.where(jump, nodes_q[pick], cur)

    path = _euler(spec, pop0.x, noise, mark_fn, DEFAULT_CAP)
    return running_integral(spec, path, path.marks)[-1] + spec.g(path.full_times, path.buffer)


def dual_representation_value(solution: BsdeSolution, measure: Optional[FiniteMarkMeasure] = None,
                              epsilon: float = 0.01, n: Optional[float] = None,
                              paths: Optional[int] = None, method: str = "direct") -> DualCertificate:
    """Dual gain under the near-optimal intensity nu = bang_bang(U), on independent paths.

    ``direct`` samples the marks under nu itself (likelihood ratio one);
    ``reweight`` samples them under lambda and weights by the Doleans-Dade
    exponential, whose effective sample size shrinks like 1/n.  Expected:
    estimate >= Y0 - epsilon T lambda(A) - 3 stderr.
    """
    if solution.table is None and solution.poly is None:
        raise MissingU("solution carries no jump component")
    if not epsilon > 0:
        raise InvalidInput("epsilon must be positive")
    if method not in ("direct", "reweight"):
        raise InvalidInput("method must be 'direct' or 'reweight'")
    pop0 = solution.population
    measure = pop0.measure if measure is None else measure
    if measure is not pop0.measure:
        raise InvalidInput("the certificate uses the measure the solution was computed with")
    n = solution.level if n is None else float(n)
    P = paths or pop0.n_paths
    stream = Purpose.FRESH * 1000 + pop0.stream
    slack = epsilon * (pop0.grid.T - pop0.grid.t0) * measure.total_mass
    if method == "direct":
        gains = _sample_under_field(solution, n, epsilon, P, stream)
        res = reweighted_expectation(gains, np.ones_like(gains))
        return DualCertificate(res.estimate, res.stderr, slack, 1.0)
    numerics = Numerics(paths=P, steps=pop0.grid.steps, seed=pop0.seed)
    fresh = build_population(pop0.spec, pop0.x, pop0.initial_mark, measure, numerics, stream=stream)
    field_ = _BangBangField(solution, fresh, n, epsilon)
    logw = log_likelihood(field_, fresh.events, measure, fresh.grid, node_marks=fresh.path.marks)
    res = reweighted_expectation(fresh.gains, np.exp(logw))
    return DualCertificate(res.estimate, res.stderr, slack, res.mean_weight)


# --------------------------------------------------------------------------
# minimal solution


@dataclass(frozen=True)
class PenalizationSchedule:
    """Increasing penalization levels with a relative-increment stop rule
    (``stop_tol=None`` runs every level)."""

    levels: tuple = tuple(2.0 ** i for i in range(8))
    stop_tol: Optional[float] = 1e-3
    richardson: bool = False

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        if not levels or levels[0] <= 0 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise InvalidInput("levels must be positive and strictly increasing")
        if self.stop_tol is not None and self.stop_tol < 0:
            raise InvalidInput("stop tolerance must be nonnegative")
        object.__setattr__(self, "levels", levels)


@dataclass(frozen=True, eq=False)
class MinimalSolution:
    solution: BsdeSolution
    table: list
    stopped_early: bool
    converged_level: Optional[float]
    extrapolated: Optional[float] = None

    @property
    def y0(self) -> float:
        return self.solution.y0

    @property
    def stderr(self) -> float:
        return self.solution.stderr


def minimal_solution(spec: ProblemSpec, x: InitialPath, a: float, measure: FiniteMarkMeasure,
                     schedule: PenalizationSchedule, numerics: Numerics,
                     basis: Optional[RegressionBasis] = None) -> MinimalSolution:
    """Run the schedule on one population (common random numbers across levels).

    Raises NonMonotone when Y0 drops by more than five combined stderr
    between consecutive levels.
    """
    basis = RegressionBasis(degree=numerics.degree) if basis is None else basis
    pop = build_population(spec, x, a, measure, numerics, max(schedule.levels))
    table: list[LevelSummary] = []
    sol = None
    stopped, converged = False, None
    for i, n in enumerate(schedule.levels):
        sol = None
        sol = solve_penalized(spec, x, a, measure, n, numerics, basis, pop)
        viol, viol_se = constraint_violation(sol)
        table.append(LevelSummary(n, pop.grid.steps, sol.y0, sol.stderr, viol, viol_se, float(sol.K[-1].mean())))
        if i:
            prev = table[i - 1]
            drop = prev.y0 - sol.y0
            combined = np.hypot(prev.stderr, sol.stderr)
            if drop > 5 * combined:
                raise NonMonotone(f"Y0 fell from {prev.y0:.6g} to {sol.y0:.6g} between levels "
                                  f"{prev.level:g} and {n:g}")
            if schedule.stop_tol is not None and abs(sol.y0 - prev.y0) <= schedule.stop_tol * abs(prev.y0):
                stopped, converged = i < len(schedule.levels) - 1, prev.level
                if stopped:
                    break
    extrapolated = None
    if schedule.richardson and len(table) >= 2 and table[-1].level == 2 * table[-2].level:
        extrapolated = 2 * table[-1].y0 - table[-2].y0
    return MinimalSolution(sol, table, stopped, converged, extrapolated)
