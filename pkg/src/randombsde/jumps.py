"""Marked point processes: Poisson measures, kernels, perturbation, compensators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .control import ControlSpace, FiniteMarkMeasure
from .errors import CommonJump, DegenerateKernel, InvalidInput, SupportError
from .streams import Purpose, generator, map_blocks


# --------------------------------------------------------------------------
# realizations


@dataclass(frozen=True, eq=False)
class MarkedPointProcess:
    """One realization: strictly increasing epochs in (start, horizon] with marks."""

    epochs: np.ndarray
    marks: np.ndarray
    horizon: float
    start: float = 0.0

    def __post_init__(self):
        e = np.asarray(self.epochs, dtype=float).ravel()
        m = np.asarray(self.marks, dtype=float).ravel()
        if e.shape != m.shape:
            raise InvalidInput("one mark per epoch is required")
        if e.size and (e[0] <= self.start or e[-1] > self.horizon or np.any(np.diff(e) <= 0)):
            raise InvalidInput("epochs must be strictly increasing inside (start, horizon]")
        object.__setattr__(self, "epochs", e)
        object.__setattr__(self, "marks", m)

    @property
    def count(self) -> int:
        return self.epochs.size

    def count_before(self, t) -> np.ndarray:
        """Number of epochs strictly before t."""
        return np.searchsorted(self.epochs, t, side="left")

    def truncated(self, t: float) -> "MarkedPointProcess":
        """Events strictly before ``t``."""
        keep = self.epochs < t
        return MarkedPointProcess(self.epochs[keep], self.marks[keep], self.horizon, self.start)


@dataclass(frozen=True, eq=False)
class PointProcessBatch:
    """Many realizations padded to a common width: epochs (P, J) padded with
    +inf, marks (P, J) padded with NaN, each row sorted."""

    epochs: np.ndarray
    marks: np.ndarray
    horizon: float
    start: float = 0.0

    @property
    def n_paths(self) -> int:
        return self.epochs.shape[0]

    @property
    def max_count(self) -> int:
        return self.epochs.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.epochs)

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def realization(self, i: int) -> MarkedPointProcess:
        keep = self.valid[i]
        return MarkedPointProcess(self.epochs[i, keep], self.marks[i, keep], self.horizon, self.start)

    def rows(self, sl: slice) -> "PointProcessBatch":
        return PointProcessBatch(self.epochs[sl], self.marks[sl], self.horizon, self.start)

    @classmethod
    def from_realizations(cls, items: Sequence[MarkedPointProcess]) -> "PointProcessBatch":
        if not items:
            raise InvalidInput("need at least one realization")
        width = max(m.count for m in items)
        ep = np.full((len(items), width), np.inf)
        mk = np.full((len(items), width), np.nan)
        for i, m in enumerate(items):
            ep[i, :m.count] = m.epochs
            mk[i, :m.count] = m.marks
        return cls(ep, mk, max(m.horizon for m in items), items[0].start)


def _pad(arrays: list[np.ndarray], fill: float) -> np.ndarray:
    width = max(a.shape[1] for a in arrays)
    return np.concatenate([np.pad(a, ((0, 0), (0, width - a.shape[1])), constant_values=fill) for a in arrays])


def _trim(ep: np.ndarray, mk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    width = int(np.isfinite(ep).sum(axis=1).max(initial=0))
    return np.ascontiguousarray(ep[:, :width]), np.ascontiguousarray(mk[:, :width])


# --------------------------------------------------------------------------
# Poisson random measures


def sample_poisson_measure(measure: FiniteMarkMeasure, horizon: float, rng: np.random.Generator,
                           start: float = 0.0) -> MarkedPointProcess:
    """Poisson measure with intensity lambda(da)dt on (start, horizon]: exponential
    interarrivals of rate lambda(A), marks i.i.d. from lambda / lambda(A)."""
    if not horizon > start:
        raise InvalidInput("horizon must exceed the start time")
    rate = measure.total_mass
    epochs, marks = [], []
    t = start
    while True:
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        epochs.append(t)
        marks.append(float(measure.sample(rng.random())))
    return MarkedPointProcess(np.array(epochs), np.array(marks), horizon, start)


def _poisson_rows(measure: FiniteMarkMeasure, rng: np.random.Generator, n: int,
                  start: float, horizon: float) -> tuple[np.ndarray, np.ndarray]:
    rate = measure.total_mass
    mean = rate * (horizon - start)
    width = int(np.ceil(mean + 8 * np.sqrt(mean) + 8))
    ep = start + np.cumsum(rng.exponential(1.0 / rate, size=(n, width)), axis=1)
    while np.any(ep[:, -1] <= horizon):
        more = ep[:, -1:] + np.cumsum(rng.exponential(1.0 / rate, size=(n, width)), axis=1)
        ep = np.concatenate([ep, more], axis=1)
    mk = measure.sample(rng.random(size=ep.shape))
    inside = ep <= horizon
    ep = np.where(inside, ep, np.inf)
    mk = np.where(inside, mk, np.nan)
    return _trim(ep, mk)


def sample_poisson_batch(measure: FiniteMarkMeasure, n_paths: int, start: float, horizon: float,
                         seed: int, stream: int = 0, workers: int = 1,
                         purpose: int = Purpose.JUMPS) -> PointProcessBatch:
    """``n_paths`` independent Poisson measures on (start, horizon], drawn per block."""
    if not horizon > start:
        raise InvalidInput("horizon must exceed the start time")

    def block(b, lo, hi):
        return _poisson_rows(measure, generator(seed, purpose, stream, b), hi - lo, start, horizon)

    parts = map_blocks(block, n_paths, workers)
    ep = _pad([p[0] for p in parts], np.inf)
    mk = _pad([p[1] for p in parts], np.nan)
    return PointProcessBatch(ep, mk, horizon, start)


# --------------------------------------------------------------------------
# Skorohod representation of kernels


@dataclass(frozen=True)
class PointMassKernel:
    """q(b, da) = delta_b."""


@dataclass(frozen=True, eq=False)
class TableKernel:
    """Finite target ``points`` with weights given per source mark.

    ``weights`` is a single row used for every source, a mapping from source
    mark to row, or a callable returning the rows for an array of sources.
    """

    points: Sequence[float]
    weights: Union[Sequence[float], Mapping[float, Sequence[float]], Callable]


@dataclass(frozen=True, eq=False)
class DensityKernel:
    """Density family a -> density(b, a) on [lo, hi]; ``density=None`` is uniform."""

    lo: float
    hi: float
    density: Optional[Callable] = None
    resolution: int = 2049


@dataclass(frozen=True, eq=False)
class BallKernel:
    """lambda restricted to the open rho-ball B(b, radius), normalized."""

    measure: FiniteMarkMeasure
    radius: float


KernelDescription = Union[PointMassKernel, TableKernel, DensityKernel, BallKernel]


@dataclass(frozen=True, eq=False)
class MarkKernel:
    """q(b, u) with the kernel it represents.

    ``cdf(b, x)`` returns q(b, (-inf, x]) for testing the pushforward.
    """

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    cdf: Callable[[np.ndarray, np.ndarray], np.ndarray]
    description: KernelDescription

    def __call__(self, b, u) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        u = np.asarray(u, dtype=float)
        b, u = np.broadcast_arrays(b, u)
        out = self.evaluator(b.ravel(), u.ravel()).reshape(b.shape)
        return out


def _table_inverse(rows: np.ndarray, points: np.ndarray, u: np.ndarray) -> np.ndarray:
    total = rows.sum(axis=1)
    if np.any(~(total > 0)):
        raise DegenerateKernel("kernel row with zero total mass")
    cum = np.cumsum(rows, axis=1) / total[:, None]
    # every point after the last charged one sits exactly at 1, so u < 1 never selects it
    last = rows.shape[1] - 1 - np.argmax(rows[:, ::-1] > 0, axis=1)
    cum[np.arange(cum.shape[1])[None, :] >= last[:, None]] = 1.0
    idx = (cum <= u[:, None]).sum(axis=1)
    return points[np.minimum(idx, points.size - 1)]


def _table_rows(desc: TableKernel, points: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = desc.weights
    if callable(w):
        rows = np.asarray(w(b), dtype=float).reshape(b.size, points.size)
    elif isinstance(w, Mapping):
        keys = np.array(list(w.keys()), dtype=float)
        table = np.array([np.asarray(v, dtype=float) for v in w.values()])
        hit = b[:, None] == keys[None, :]
        if not np.all(hit.any(axis=1)):
            raise InvalidInput("kernel table has no row for some source mark")
        rows = table[hit.argmax(axis=1)]
    else:
        rows = np.broadcast_to(np.asarray(w, dtype=float), (b.size, points.size))
    if np.any(rows < 0) or not np.all(np.isfinite(rows)):
        raise InvalidInput("kernel weights must be finite and nonnegative")
    return rows


def _density_tables(desc: DensityKernel, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    grid = np.linspace(desc.lo, desc.hi, desc.resolution)
    dens = np.asarray(desc.density(b[:, None], grid[None, :]), dtype=float)
    dens = np.broadcast_to(dens, (b.size, grid.size))
    if np.any(dens < 0) or not np.all(np.isfinite(dens)):
        raise InvalidInput("kernel density must be finite and nonnegative")
    cum = np.concatenate([np.zeros((b.size, 1)), np.cumsum((dens[:, 1:] + dens[:, :-1]) / 2 * np.diff(grid), axis=1)], axis=1)
    if np.any(~(cum[:, -1] > 0)):
        raise DegenerateKernel("kernel density with zero total mass")
    return grid, cum / cum[:, -1:]


def _rowwise_interp(u: np.ndarray, cdf: np.ndarray, grid: np.ndarray) -> np.ndarray:
    out = np.empty(u.size)
    for i in range(u.size):
        out[i] = np.interp(u[i], cdf[i], grid)
    return out


def build_skorohod_kernel(description: KernelDescription) -> MarkKernel:
    """Map u -> q(b, u): the inverse CDF of q(b, .) in increasing mark order."""
    if isinstance(description, PointMassKernel):
        return MarkKernel(lambda b, u: b.astype(float), lambda b, x: (np.asarray(x) >= np.asarray(b)).astype(float),
                          description)

    if isinstance(description, TableKernel):
        points = np.asarray(description.points, dtype=float)
        if isinstance(description.weights, Mapping):
            for row in description.weights.values():
                if not np.sum(row) > 0:
                    raise DegenerateKernel("kernel row with zero total mass")
        elif not callable(description.weights) and not np.sum(description.weights) > 0:
            raise DegenerateKernel("kernel row with zero total mass")
        order = np.argsort(points, kind="stable")
        sorted_pts = points[order]

        def table_eval(b, u):
            return _table_inverse(_table_rows(description, points, b)[:, order], sorted_pts, u)

        def table_cdf(b, x):
            b, x = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(x, dtype=float))
            rows = _table_rows(description, points, b.ravel())
            rows = rows / rows.sum(axis=1, keepdims=True)
            return ((points[None, :] <= x.ravel()[:, None]) * rows).sum(axis=1).reshape(b.shape)

        return MarkKernel(table_eval, table_cdf, description)

    if isinstance(description, DensityKernel):
        lo, hi = float(description.lo), float(description.hi)
        if not lo < hi:
            raise InvalidInput("density kernel needs lo < hi")
        if description.density is None:
            return MarkKernel(lambda b, u: lo + u * (hi - lo),
                              lambda b, x: np.clip((np.asarray(x) - lo) / (hi - lo), 0, 1) + 0 * np.asarray(b),
                              description)

        def dens_eval(b, u):
            out = np.empty(b.size)
            for s in range(0, b.size, 512):
                grid, cdf = _density_tables(description, b[s:s + 512])
                out[s:s + 512] = _rowwise_interp(u[s:s + 512], cdf, grid)
            return out

        def dens_cdf(b, x):
            b, x = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(x, dtype=float))
            grid, cdf = _density_tables(description, b.ravel())
            return np.array([np.interp(xi, grid, ci) for xi, ci in zip(x.ravel(), cdf)]).reshape(b.shape)

        return MarkKernel(dens_eval, dens_cdf, description)

    if isinstance(description, BallKernel):
        measure, radius = description.measure, float(description.radius)
        space = measure.space
        if not radius > 0:
            raise InvalidInput("ball radius must be positive")
        if space.is_finite:
            order = np.argsort(space.points, kind="stable")
            sorted_pts = space.points[order]

            def ball_rows(b):
                mask, mass = measure.ball(b, radius)
                if np.any(~(mass > 0)):
                    raise SupportError("a ball around a source mark has zero lambda-mass")
                return mask * measure.weights

            def ball_eval(b, u):
                return _table_inverse(ball_rows(b)[:, order], sorted_pts, u)

            def ball_cdf(b, x):
                b, x = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(x, dtype=float))
                rows = ball_rows(b.ravel())
                rows = rows / rows.sum(axis=1, keepdims=True)
                return ((space.points[None, :] <= x.ravel()[:, None]) * rows).sum(axis=1).reshape(b.shape)

            return MarkKernel(ball_eval, ball_cdf, description)

        def interval_eval(b, u):
            ends, mass = measure.ball(b, radius)
            if np.any(~(mass > 0)):
                raise SupportError("a ball around a source mark has zero lambda-mass")
            lo_c, hi_c = measure.cdf(ends[:, 0]), measure.cdf(ends[:, 1])
            out = measure.sample(lo_c + u * (hi_c - lo_c))
            # the tabulated inverse can land a rounding error outside the open ball
            return np.clip(out, np.nextafter(ends[:, 0], np.inf), np.nextafter(ends[:, 1], -np.inf))

        def interval_cdf(b, x):
            b, x = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(x, dtype=float))
            ends, _ = measure.ball(b, radius)
            lo_c, hi_c = measure.cdf(ends[..., 0]), measure.cdf(ends[..., 1])
            return np.clip((measure.cdf(x) - lo_c) / (hi_c - lo_c), 0.0, 1.0)

        return MarkKernel(interval_eval, interval_cdf, description)

    raise InvalidInput(f"unknown kernel description {type(description).__name__}")


# --------------------------------------------------------------------------
# perturbation of a marked point process


@dataclass(frozen=True)
class PerturbationScheme:
    """Delays S_1 < S_2 < ... with sum below 1/level, and the ball kernel of radius 1/level.

    S_n is an exponential of rate ``c0 / width`` truncated to the window
    ((n-1) width, n width), so delays are independent, ordered, and their sum
    over at most ``capacity`` events stays below 1/level.
    """

    level: int
    capacity: int = 64
    c0: float = 4.0
    margin: float = 1e-6

    def __post_init__(self):
        if self.level < 1 or self.capacity < 1 or not self.c0 > 0 or not 0 <= self.margin < 1:
            raise InvalidInput("invalid perturbation scheme parameters")

    @property
    def radius(self) -> float:
        return 1.0 / self.level

    @property
    def width(self) -> float:
        return 2.0 * (1.0 - self.margin) / (self.level * self.capacity * (self.capacity + 1))

    @property
    def rate(self) -> float:
        return self.c0 / self.width

    def window_start(self, n) -> np.ndarray:
        return (np.asarray(n) - 1) * self.width

    def _local(self, n, s):
        return np.asarray(s, dtype=float) - self.window_start(n)

    def cdf(self, n, s) -> np.ndarray:
        x = np.clip(self._local(n, s), 0.0, self.width)
        return np.expm1(-self.rate * x) / np.expm1(-self.c0)

    def density(self, n, s) -> np.ndarray:
        x = self._local(n, s)
        inside = (x > 0) & (x < self.width)
        return np.where(inside, self.rate * np.exp(-self.rate * np.clip(x, 0, self.width)) / -np.expm1(-self.c0), 0.0)

    def hazard(self, n, s) -> np.ndarray:
        """f_n / (1 - F_n), zero outside the window (and where F_n = 1)."""
        x = self._local(n, s)
        inside = (x > 0) & (x < self.width)
        rest = np.where(inside, self.width - x, 1.0)
        return np.where(inside, self.rate / -np.expm1(-self.rate * rest), 0.0)

    def cumulative_hazard(self, n, s) -> np.ndarray:
        return -np.log1p(-self.cdf(n, s))

    def sample(self, index: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Delays for 1-based event indices ``index`` from uniforms ``u``."""
        index = np.asarray(index)
        if np.any(index > self.capacity):
            raise InvalidInput(f"more events than the perturbation capacity {self.capacity}")
        x = -np.log1p(np.asarray(u) * np.expm1(-self.c0)) / self.rate
        return self.window_start(index) + np.clip(x, np.finfo(float).tiny, np.nextafter(self.width, 0))

    def kernel(self, measure: FiniteMarkMeasure) -> MarkKernel:
        return build_skorohod_kernel(BallKernel(measure, self.radius))


# --------------------------------------------------------------------------
# compensator densities (w.r.t. lambda(da) dt), batch-oriented


class CompensatorDensity:
    """phi_t(a) per realization.  ``evaluate(t, a)`` takes times of shape
    (P, Q) and marks broadcastable to it; ``breakpoints()`` lists, per row,
    times where phi is not smooth."""

    n_paths: int

    def evaluate(self, t: np.ndarray, a) -> np.ndarray:
        raise NotImplementedError

    def evaluate_marks(self, t: np.ndarray, marks) -> list[np.ndarray]:
        """``evaluate`` at each mark in turn (densities may share work across marks)."""
        return [self.evaluate(t, a) for a in marks]

    def breakpoints(self) -> np.ndarray:
        return np.empty((self.n_paths, 0))

    def rows(self, sel) -> "CompensatorDensity":
        """Density of the rows selected by a slice or an index array."""
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class ConstantDensity(CompensatorDensity):
    """phi = level everywhere (a Poisson measure with intensity level * lambda)."""

    n_paths: int
    level: float = 1.0

    def evaluate(self, t, a):
        return np.full(np.broadcast_shapes(np.shape(t), np.shape(a)), float(self.level))

    def rows(self, sel):
        return ConstantDensity(np.arange(self.n_paths)[sel].size, self.level)


@dataclass(frozen=True, eq=False)
class SumDensity(CompensatorDensity):
    parts: tuple

    @property
    def n_paths(self) -> int:
        return self.parts[0].n_paths

    def evaluate(self, t, a):
        return sum(p.evaluate(t, a) for p in self.parts)

    def evaluate_marks(self, t, marks):
        return [sum(vals) for vals in zip(*(p.evaluate_marks(t, marks) for p in self.parts))]

    def breakpoints(self):
        return np.concatenate([p.breakpoints() for p in self.parts], axis=1)

    def rows(self, sl):
        return SumDensity(tuple(p.rows(sl) for p in self.parts))


def rowwise_searchsorted(sorted_rows: np.ndarray, values: np.ndarray, side: str = "left") -> np.ndarray:
    out = np.empty(values.shape, dtype=np.int64)
    for i in range(values.shape[0]):
        out[i] = np.searchsorted(sorted_rows[i], values[i], side=side)
    return out


@dataclass(frozen=True, eq=False)
class PerturbedDensity(CompensatorDensity):
    """phi^m_t(a) = sum_n 1{T_n v R_{n-1} < t <= R_n} 1_B(a) / lambda(B) * h_n(t - T_n),
    with B the open ball of radius 1/m around the source mark alpha_n and h_n
    the hazard of the n-th delay."""

    source: np.ndarray
    perturbed: np.ndarray
    source_marks: np.ndarray
    ball_mass: np.ndarray
    scheme: PerturbationScheme
    measure: FiniteMarkMeasure

    @property
    def n_paths(self) -> int:
        return self.source.shape[0]

    def evaluate(self, t, a):
        return self.evaluate_marks(t, [a])[0]

    def evaluate_marks(self, t, marks):
        t = np.asarray(t, dtype=float)
        P, J = self.source.shape
        if J == 0:
            return [np.zeros(np.broadcast_shapes(t.shape, np.shape(a))) for a in marks]
        idx = rowwise_searchsorted(self.perturbed, t, side="left")
        active = idx < J
        i = np.minimum(idx, J - 1)
        Tn = np.take_along_axis(self.source, i, axis=1)
        active &= np.isfinite(Tn) & (t > Tn)
        alpha = np.take_along_axis(self.source_marks, i, axis=1)
        mass = np.take_along_axis(self.ball_mass, i, axis=1)
        h = self.scheme.hazard(i + 1, np.where(active, t - Tn, -1.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            base = np.where(active, h / np.where(active, mass, 1.0), 0.0)
        space = self.measure.space
        return [np.where(space.distance(a, alpha) < self.scheme.radius, base, 0.0) for a in marks]

    def breakpoints(self):
        n = np.arange(1, self.source.shape[1] + 1)
        return np.concatenate([self.source, self.perturbed, self.source + self.scheme.window_start(n)], axis=1)

    def rows(self, sl):
        return PerturbedDensity(self.source[sl], self.perturbed[sl], self.source_marks[sl],
                                self.ball_mass[sl], self.scheme, self.measure)


def _perturb_rows(ep, mk, scheme: PerturbationScheme, measure: FiniteMarkMeasure,
                  rng: np.random.Generator):
    P, J = ep.shape
    valid = np.isfinite(ep)
    n = np.broadcast_to(np.arange(1, J + 1), (P, J))
    if J > scheme.capacity and np.any(valid[:, scheme.capacity:]):
        raise InvalidInput(f"more events than the perturbation capacity {scheme.capacity}")
    u_delay = rng.random((P, J))
    u_mark = rng.random((P, J))
    delays = scheme.sample(np.minimum(n, scheme.capacity), u_delay)
    R = np.where(valid, ep + delays, np.inf)
    kernel = scheme.kernel(measure)
    beta = np.full((P, J), np.nan)
    if valid.any():
        beta[valid] = kernel(mk[valid], u_mark[valid])
    _, mass = measure.ball(np.where(valid, mk, measure.nodes[0]), scheme.radius)
    mass = np.where(valid, mass, np.nan)
    if np.any(valid & ~(mass > 0)):
        raise SupportError("a ball around a source mark has zero lambda-mass")
    return R, beta, mass


def perturb_batch(source: PointProcessBatch, scheme: PerturbationScheme, measure: FiniteMarkMeasure,
                  seed: int, stream: int = 0) -> tuple[PointProcessBatch, PerturbedDensity]:
    """Perturb every row of ``source``: R_n = T_n + S_n, beta_n = q^m(alpha_n, U_n)."""
    rng = generator(seed, Purpose.PERTURB, stream)
    R, beta, mass = _perturb_rows(source.epochs, source.marks, scheme, measure, rng)
    out = PointProcessBatch(R, beta, source.horizon + scheme.radius, source.start)
    return out, PerturbedDensity(source.epochs, R, source.marks, mass, scheme, measure)


def perturb_mpp(source: MarkedPointProcess, scheme: PerturbationScheme, measure: FiniteMarkMeasure,
                rng: np.random.Generator) -> tuple[MarkedPointProcess, PerturbedDensity]:
    """Single-realization version of :func:`perturb_batch`."""
    ep, mk = source.epochs[None, :], source.marks[None, :]
    R, beta, mass = _perturb_rows(ep, mk, scheme, measure, rng)
    out = MarkedPointProcess(R[0], beta[0], source.horizon + scheme.radius, source.start)
    return out, PerturbedDensity(ep, R, mk, mass, scheme, measure)


# --------------------------------------------------------------------------
# superposition


def _merge_rows(ep1, mk1, ep2, mk2):
    ep = np.concatenate([ep1, ep2], axis=1)
    mk = np.concatenate([mk1, mk2], axis=1)
    order = np.argsort(ep, axis=1, kind="stable")
    ep = np.take_along_axis(ep, order, axis=1)
    mk = np.take_along_axis(mk, order, axis=1)
    if ep.shape[1] > 1:
        both = np.isfinite(ep[:, 1:]) & (ep[:, 1:] == ep[:, :-1])
        if np.any(both):
            raise CommonJump("the two processes share an epoch")
    return _trim(ep, mk)


Process = Union[MarkedPointProcess, PointProcessBatch]


def superpose(kappa: tuple[Process, CompensatorDensity], pi: tuple[Process, CompensatorDensity]):
    """Merge two independent marked point processes; the compensator densities add."""
    (p1, d1), (p2, d2) = kappa, pi
    if isinstance(p1, MarkedPointProcess) != isinstance(p2, MarkedPointProcess):
        raise InvalidInput("cannot merge a single realization with a batch")
    density = SumDensity((d1, d2))
    if isinstance(p1, MarkedPointProcess):
        ep, mk = _merge_rows(p1.epochs[None], p1.marks[None], p2.epochs[None], p2.marks[None])
        return MarkedPointProcess(ep[0], mk[0], max(p1.horizon, p2.horizon), min(p1.start, p2.start)), density
    if p1.n_paths != p2.n_paths:
        raise InvalidInput("batches must have the same number of rows")
    ep, mk = _merge_rows(p1.epochs, p1.marks, p2.epochs, p2.marks)
    return PointProcessBatch(ep, mk, max(p1.horizon, p2.horizon), min(p1.start, p2.start)), density


def add_noise_measure(process: PointProcessBatch, density: CompensatorDensity, measure: FiniteMarkMeasure,
                      epsilon: float, seed: int, stream: int = 0) -> tuple[PointProcessBatch, CompensatorDensity]:
    """Superpose an independent Poisson measure of intensity epsilon * lambda."""
    noise = sample_poisson_batch(measure.scaled(epsilon), process.n_paths, process.start, process.horizon,
                                 seed, stream, purpose=Purpose.NOISE_MEASURE)
    return superpose((process, density), (noise, ConstantDensity(process.n_paths, epsilon)))


# --------------------------------------------------------------------------
# statistical check of a compensator


@dataclass(frozen=True)
class CompensatorReport:
    lhs: float
    rhs: float
    lhs_stderr: float
    rhs_stderr: float
    stderr: float
    samples: int

    @property
    def passed(self) -> bool:
        return abs(self.lhs - self.rhs) <= 3 * self.stderr

    def as_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "lhs_stderr": self.lhs_stderr,
                "rhs_stderr": self.rhs_stderr, "stderr": self.stderr, "samples": self.samples,
                "passed": self.passed}


TestField = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def integrate_against(process: PointProcessBatch, density: CompensatorDensity, measure: FiniteMarkMeasure,
                      field_: TestField, horizon: float, base_steps: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (sum_n H(S_n, eta_n), int int H phi lambda(da) dt) over (start, horizon].

    The time integral uses 8-point Gauss-Legendre on every cell of the base
    grid refined by the event epochs and the density's breakpoints.  ``field_``
    is called as H(t, a, count) with count the number of events strictly
    before t.  Rows are processed in groups of equal event count so padding
    costs nothing.
    """
    P = process.n_paths
    lhs, rhs = np.zeros(P), np.zeros(P)
    counts = np.isfinite(process.epochs).sum(axis=1)
    for c in np.unique(counts):
        idx = np.flatnonzero(counts == c)
        sub = PointProcessBatch(process.epochs[idx, :c], process.marks[idx, :c], process.horizon, process.start)
        lhs[idx], rhs[idx] = _integrate_rows(sub, density.rows(idx), measure, field_, horizon, base_steps)
    return lhs, rhs


def _integrate_rows(process, density, measure, field_, horizon, base_steps):
    P = process.n_paths
    start = process.start
    ep = process.epochs
    inside = np.isfinite(ep) & (ep <= horizon)
    count_idx = np.broadcast_to(np.arange(ep.shape[1]), ep.shape)
    lhs = np.zeros(P)
    if inside.any():
        vals = np.asarray(field_(np.where(inside, ep, start), np.where(inside, process.marks, measure.nodes[0]),
                                 count_idx), dtype=float)
        lhs = np.where(inside, np.broadcast_to(vals, ep.shape), 0.0).sum(axis=1)
    base = np.broadcast_to(np.linspace(start, horizon, base_steps + 1), (P, base_steps + 1))
    bp = density.breakpoints()
    bp = bp[:, np.isfinite(bp).any(axis=0)]
    extra = np.concatenate([ep, bp], axis=1)
    extra = np.where(np.isfinite(extra), np.clip(extra, start, horizon), horizon)
    cuts = np.sort(np.concatenate([base, extra], axis=1), axis=1)
    left, h = cuts[:, :-1], np.diff(cuts, axis=1)
    t = left[:, :, None] + h[:, :, None] * (_GL_X + 1) / 2
    t = t.reshape(P, -1)
    w = (h[:, :, None] * _GL_W / 2).reshape(P, -1)
    sorted_ep = np.where(inside, ep, np.inf)
    count = rowwise_searchsorted(sorted_ep, t, side="left")
    rhs = np.zeros(P)
    for a, wa, dens in zip(measure.nodes, measure.node_weights, density.evaluate_marks(t, measure.nodes)):
        integrand = np.asarray(field_(t, np.full(t.shape, a), count), dtype=float) * dens
        rhs += wa * (w * integrand).sum(axis=1)
    return lhs, rhs


def compensator_martingale_check(process_generator: Callable[[int, int, int], tuple[PointProcessBatch, CompensatorDensity]],
                                 measure: FiniteMarkMeasure, test_field: TestField, n_samples: int,
                                 horizon: float, seed: int = 0, chunk: int = 10000,
                                 base_steps: int = 16) -> CompensatorReport:
    """Compare E sum_n H(S_n, eta_n) with E int int H phi lambda(da) dt by Monte Carlo.

    ``process_generator(seed, chunk_index, size)`` returns a batch and its
    compensator density.  The verdict uses the standard error of the paired
    per-sample difference.
    """
    if n_samples < 2:
        raise InvalidInput("need at least two samples")
    lhs, rhs = [], []
    for c, s in enumerate(range(0, n_samples, chunk)):
        batch, density = process_generator(seed, c, min(chunk, n_samples - s))
        lo, ro = integrate_against(batch, density, measure, test_field, horizon, base_steps)
        lhs.append(lo)
        rhs.append(ro)
    lhs = np.concatenate(lhs)
    rhs = np.concatenate(rhs)
    root = np.sqrt(lhs.size)
    return CompensatorReport(float(lhs.mean()), float(rhs.mean()), float(lhs.std(ddof=1) / root),
                             float(rhs.std(ddof=1) / root), float((lhs - rhs).std(ddof=1) / root), int(lhs.size))
