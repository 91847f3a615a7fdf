"""Control spaces, mark measures, problem data, grids and control processes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import GridMismatch, InvalidInput, NonFiniteCoefficient
from .streams import Purpose, generator

Functional = Callable[..., np.ndarray]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# control space and mark measure


@dataclass(frozen=True, eq=False)
class ControlSpace:
    """Finite set of marks or a closed real interval, with a metric bounded by 1.

    ``resolution`` is the number of Gauss-Legendre nodes used for mark
    integrals over an interval; it is ignored for finite sets.
    """

    kind: str
    points: np.ndarray = field(default_factory=lambda: _frozen([]))
    bounds: tuple[float, float] = (0.0, 0.0)
    resolution: int = 64

    def __post_init__(self):
        if self.kind == "finite":
            pts = _frozen(self.points)
            if pts.ndim != 1 or pts.size == 0:
                raise InvalidInput("a finite control space needs at least one point")
            if np.unique(pts).size != pts.size:
                raise InvalidInput("control points must be distinct")
            if not np.all(np.isfinite(pts)):
                raise InvalidInput("control points must be finite")
            object.__setattr__(self, "points", pts)
        elif self.kind == "interval":
            lo, hi = (float(v) for v in self.bounds)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise InvalidInput(f"interval bounds must satisfy lo < hi, got {self.bounds}")
            if self.resolution < 1:
                raise InvalidInput("quadrature resolution must be positive")
            object.__setattr__(self, "bounds", (lo, hi))
        else:
            raise InvalidInput(f"unknown control space kind {self.kind!r}")

    @classmethod
    def finite(cls, points: Sequence[float]) -> "ControlSpace":
        return cls("finite", points=np.asarray(points, dtype=float))

    @classmethod
    def interval(cls, lo: float, hi: float, resolution: int = 64) -> "ControlSpace":
        return cls("interval", bounds=(lo, hi), resolution=resolution)

    @property
    def is_finite(self) -> bool:
        return self.kind == "finite"

    @property
    def size(self) -> int:
        return self.points.size if self.is_finite else self.resolution

    def distance(self, a, b) -> np.ndarray:
        """Default metric: 0.5 x discrete on finite sets, |a-b|/(L+|a-b|) on intervals."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.is_finite:
            return 0.5 * (a != b)
        gap = np.abs(a - b)
        return gap / (self.bounds[1] - self.bounds[0] + gap)

    def contains(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.is_finite:
            return np.isin(a, self.points)
        return (a >= self.bounds[0]) & (a <= self.bounds[1])

    def index_of(self, a) -> np.ndarray:
        """Position of each mark in the point list (finite sets only)."""
        if not self.is_finite:
            raise InvalidInput("mark indices exist only for finite control spaces")
        a = np.asarray(a, dtype=float)
        hit = a[..., None] == self.points
        if not np.all(hit.any(axis=-1)):
            raise InvalidInput("mark outside the control space")
        return hit.argmax(axis=-1)

    def nearest(self, a, subset: Sequence[float]) -> np.ndarray:
        """Snap marks to the rho-nearest element of ``subset`` (first one on ties)."""
        subset = np.asarray(subset, dtype=float)
        a = np.asarray(a, dtype=float)
        d = self.distance(a[..., None], subset)
        return subset[d.argmin(axis=-1)]


@dataclass(frozen=True, eq=False)
class FiniteMarkMeasure:
    """Finite intensity measure lambda on the control space with full support.

    For finite sets ``weights`` holds one positive weight per point.  For
    intervals ``density`` is a positive function of the mark (``None`` means
    uniform with total mass ``mass``).  ``nodes``/``node_weights`` form the
    quadrature used for every mark integral against lambda.
    """

    space: ControlSpace
    weights: Optional[np.ndarray] = None
    density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    mass: Optional[float] = None
    nodes: np.ndarray = field(init=False, repr=False)
    node_weights: np.ndarray = field(init=False, repr=False)
    _cdf_grid: np.ndarray = field(init=False, repr=False)
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sp = self.space
        if sp.is_finite:
            if self.weights is None:
                raise InvalidInput("a finite control space needs one weight per point")
            w = _frozen(self.weights)
            if w.shape != sp.points.shape:
                raise InvalidInput("one weight per control point is required")
            if not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise InvalidInput("weights must be positive (full support)")
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "mass", float(w.sum()))
            object.__setattr__(self, "nodes", sp.points)
            object.__setattr__(self, "node_weights", w)
            cdf = np.cumsum(w) / w.sum()
            cdf[-1] = 1.0
            object.__setattr__(self, "_cdf_grid", sp.points)
            object.__setattr__(self, "_cdf", _frozen(cdf))
            return
        lo, hi = sp.bounds
        gl_x, gl_w = np.polynomial.legendre.leggauss(sp.resolution)
        nodes = lo + (gl_x + 1.0) * (hi - lo) / 2.0
        table = np.linspace(lo, hi, 4097)
        if self.density is None:
            mass = float(self.mass) if self.mass is not None else 1.0
            if not (np.isfinite(mass) and mass > 0):
                raise InvalidInput("total mass must be positive")
            dens_nodes = np.full(nodes.shape, mass / (hi - lo))
            cdf = (table - lo) / (hi - lo)
        else:
            if self.mass is not None:
                raise InvalidInput("give either a density or a uniform mass, not both")
            dens_table = np.asarray(self.density(table), dtype=float)
            if not np.all(np.isfinite(dens_table)) or np.any(dens_table <= 0):
                raise InvalidInput("density must be finite and strictly positive on the interval")
            mass, _ = integrate.quad(lambda s: float(self.density(np.array(s))), lo, hi,
                                     epsabs=0.0, epsrel=1e-13, limit=200)
            dens_nodes = np.asarray(self.density(nodes), dtype=float)
            cum = np.concatenate([[0.0], np.cumsum(np.diff(table) * (dens_table[1:] + dens_table[:-1]) / 2)])
            cdf = cum / cum[-1]
        object.__setattr__(self, "mass", float(mass))
        object.__setattr__(self, "nodes", _frozen(nodes))
        object.__setattr__(self, "node_weights", _frozen(gl_w * (hi - lo) / 2.0 * dens_nodes))
        object.__setattr__(self, "_cdf_grid", _frozen(table))
        object.__setattr__(self, "_cdf", _frozen(cdf))

    @classmethod
    def finite(cls, space: ControlSpace, weights: Sequence[float]) -> "FiniteMarkMeasure":
        return cls(space, weights=np.asarray(weights, dtype=float))

    @classmethod
    def uniform(cls, space: ControlSpace, mass: Optional[float] = None) -> "FiniteMarkMeasure":
        """Unit weight per point (finite) or uniform density with ``mass`` (interval)."""
        if space.is_finite:
            w = np.ones(space.points.size) if mass is None else np.full(space.points.size, mass / space.points.size)
            return cls(space, weights=w)
        return cls(space, mass=1.0 if mass is None else mass)

    @property
    def total_mass(self) -> float:
        return float(self.mass)

    def scaled(self, factor: float) -> "FiniteMarkMeasure":
        """The measure ``factor * lambda`` (same shape)."""
        if not factor > 0:
            raise InvalidInput("scaling factor must be positive")
        if self.space.is_finite:
            return FiniteMarkMeasure(self.space, weights=self.weights * factor)
        if self.density is None:
            return FiniteMarkMeasure(self.space, mass=self.mass * factor)
        dens = self.density
        return FiniteMarkMeasure(self.space, density=lambda a: factor * dens(a))

    def cdf(self, a) -> np.ndarray:
        """Normalized distribution function lambda((-inf, a]) / lambda(A)."""
        a = np.asarray(a, dtype=float)
        if self.space.is_finite:
            below = self.space.points <= a[..., None]
            return (below * self.weights).sum(axis=-1) / self.mass
        return np.interp(a, self._cdf_grid, self._cdf)

    def sample(self, u) -> np.ndarray:
        """Inverse CDF of lambda / lambda(A) in the declared mark ordering."""
        u = np.asarray(u, dtype=float)
        if self.space.is_finite:
            idx = np.searchsorted(self._cdf, u, side="right")
            return self.space.points[np.minimum(idx, self.space.points.size - 1)]
        return np.interp(u, self._cdf, self._cdf_grid)

    def ball(self, center, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """Bounds of the open rho-ball as a mark interval plus its lambda-mass.

        For finite sets the first element is a boolean membership mask of
        shape ``center.shape + (points,)``.
        """
        center = np.asarray(center, dtype=float)
        sp = self.space
        if sp.is_finite:
            mask = sp.distance(center[..., None], sp.points) < radius
            return mask, (mask * self.weights).sum(axis=-1)
        lo, hi = sp.bounds
        if radius >= 1.0:
            half = np.inf
        else:
            half = radius * (hi - lo) / (1.0 - radius)
        left = np.maximum(center - half, lo)
        right = np.minimum(center + half, hi)
        mass = (self.cdf(right) - self.cdf(left)) * self.mass
        return np.stack([left, right], axis=-1), mass


def sample_mark(measure: FiniteMarkMeasure, u) -> np.ndarray | float:
    """Draw marks from lambda / lambda(A) by the inverse CDF at uniforms ``u``."""
    out = measure.sample(u)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# grids, paths and problem data


@dataclass(frozen=True, eq=False)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = _frozen(self.nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise InvalidInput("a time grid needs at least two nodes")
        if not np.all(np.isfinite(nodes)) or nodes[0] < 0 or np.any(np.diff(nodes) <= 0):
            raise InvalidInput("grid nodes must be finite, nonnegative and strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, t0: float, T: float, steps: int) -> "TimeGrid":
        if steps < 1:
            raise InvalidInput("a grid needs at least one step")
        nodes = np.linspace(t0, T, steps + 1)
        nodes[0], nodes[-1] = t0, T
        return cls(nodes)

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    def refine(self, times) -> "TimeGrid":
        """Grid with ``times`` strictly inside (t0, T) inserted as extra nodes."""
        times = np.asarray(times, dtype=float).ravel()
        times = times[(times > self.nodes[0]) & (times < self.nodes[-1])]
        if times.size == 0:
            return self
        return TimeGrid(np.union1d(self.nodes, times))

    def summary(self) -> dict:
        return {"t0": self.t0, "T": self.T, "steps": self.steps}


@dataclass(frozen=True, eq=False)
class InitialPath:
    """The fixed trajectory on [0, t0], sampled at ``times`` (shape (M+1,) and (M+1, d))."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = _frozen(self.times)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        values.setflags(write=False)
        if times.ndim != 1 or values.shape[0] != times.size:
            raise InvalidInput("initial path needs one value row per time")
        if times[0] != 0 or np.any(np.diff(times) <= 0):
            raise InvalidInput("initial path times must start at 0 and increase")
        if not np.all(np.isfinite(values)):
            raise InvalidInput("initial path values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value, t0: float = 0.0, dim: int = 1) -> "InitialPath":
        v = np.broadcast_to(np.asarray(value, dtype=float), (dim,))
        if t0 < 0:
            raise InvalidInput("t0 must be nonnegative")
        if t0 == 0:
            return cls(np.array([0.0]), v[None, :])
        return cls(np.array([0.0, t0]), np.stack([v, v]))

    @classmethod
    def ramp(cls, start, end, t0: float, dim: int = 1) -> "InitialPath":
        """Linear path from ``start`` at time 0 to ``end`` at ``t0``."""
        if t0 <= 0:
            return cls.constant(end, 0.0, dim)
        a = np.broadcast_to(np.asarray(start, dtype=float), (dim,))
        b = np.broadcast_to(np.asarray(end, dtype=float), (dim,))
        return cls(np.array([0.0, t0]), np.stack([a, b]))

    @property
    def t0(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def state(self) -> np.ndarray:
        return self.values[-1]


@dataclass(frozen=True, eq=False)
class SamplePath:
    """A population of simulated paths.

    ``buffer`` has shape (M + N + 1, P, d): the prefix nodes of ``prefix``
    followed by the grid nodes after t0.  ``values`` is the view on the grid
    nodes, shape (N + 1, P, d), time-major.  ``marks`` holds the mark used on
    [r_k, r_{k+1}) at row k, shape (N + 1, P).
    """

    grid: TimeGrid
    buffer: np.ndarray
    prefix: InitialPath
    marks: Optional[np.ndarray] = None

    @property
    def offset(self) -> int:
        return self.prefix.times.size - 1

    @property
    def values(self) -> np.ndarray:
        return self.buffer[self.offset:]

    @property
    def full_times(self) -> np.ndarray:
        return np.concatenate([self.prefix.times[:-1], self.grid.nodes])

    @property
    def n_paths(self) -> int:
        return self.buffer.shape[1]

    def path(self, i: int) -> "SamplePath":
        marks = None if self.marks is None else self.marks[:, i:i + 1]
        return SamplePath(self.grid, self.buffer[:, i:i + 1], self.prefix, marks)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Path-dependent control problem.

    Every coefficient is called as ``fn(times, values, a)`` where ``times``
    has shape (k+1,) and ``values`` (k+1, P, d) hold the observed path up to
    the current time ``times[-1]``, and ``a`` has shape (P,).  Returns are
    broadcast to (P, d) for the drift, (P, d, n) for the diffusion and (P,)
    for the running reward.  ``terminal(times, values)`` sees the whole path.
    ``running=None`` means a zero running reward.
    """

    dim_state: int
    dim_noise: int
    drift: Functional
    diffusion: Functional
    terminal: Functional
    horizon: float
    control_space: ControlSpace
    running: Optional[Functional] = None
    lipschitz: float = 0.0
    growth: float = 0.0
    growth_power: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise InvalidInput("state and noise dimensions must be positive")
        if not self.horizon > 0:
            raise InvalidInput("horizon must be positive")
        if min(self.lipschitz, self.growth, self.growth_power) < 0:
            raise InvalidInput("declared constants must be nonnegative")

    def b(self, times, values, a) -> np.ndarray:
        P = values.shape[1]
        return np.broadcast_to(np.asarray(self.drift(times, values, a), dtype=float), (P, self.dim_state))

    def sigma(self, times, values, a) -> np.ndarray:
        P = values.shape[1]
        return np.broadcast_to(np.asarray(self.diffusion(times, values, a), dtype=float),
                               (P, self.dim_state, self.dim_noise))

    def f(self, times, values, a) -> np.ndarray:
        P = values.shape[1]
        if self.running is None:
            return np.zeros(P)
        return np.broadcast_to(np.asarray(self.running(times, values, a), dtype=float), (P,))

    def g(self, times, values) -> np.ndarray:
        P = values.shape[1]
        return np.broadcast_to(np.asarray(self.terminal(times, values), dtype=float), (P,))


# --------------------------------------------------------------------------
# control processes


class ControlProcess:
    """A control: ``decide(t, times, values, current)`` returns the marks (P,)
    used from time ``t`` on, given the path observed on [0, t] and the marks
    in force just before ``t`` (``None`` at the first node)."""

    deterministic: bool = False

    def decide(self, t: float, times: np.ndarray, values: np.ndarray, current) -> np.ndarray:
        raise NotImplementedError

    def switch_times(self) -> np.ndarray:
        """Times at which a deterministic switch can happen (inserted into grids)."""
        return np.empty(0)


@dataclass(frozen=True, eq=False)
class PiecewiseConstantControl(ControlProcess):
    """Value ``values[i]`` on [times[i-1], times[i]), ``values[0]`` before ``times[0]``."""

    times: tuple = ()
    values: tuple = (0.0,)
    deterministic: bool = field(default=True, init=False)

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        values = tuple(float(v) for v in self.values)
        if len(values) != len(times) + 1:
            raise InvalidInput("need one more value than switch time")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidInput("switch times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, a: float) -> "PiecewiseConstantControl":
        return cls((), (a,))

    def value_at(self, t: float) -> float:
        return self.values[int(np.searchsorted(self.times, t, side="right"))]

    def decide(self, t, times, values, current):
        return np.full(values.shape[1], self.value_at(t))

    def switch_times(self):
        return np.asarray(self.times, dtype=float)


@dataclass(frozen=True, eq=False)
class PolicyControl(ControlProcess):
    """Feedback control ``fn(t, times, values, current) -> marks``."""

    fn: Callable = None
    deterministic: bool = False
    label: str = ""

    def decide(self, t, times, values, current):
        out = np.asarray(self.fn(t, times, values, current), dtype=float)
        return np.broadcast_to(out, (values.shape[1],))


def _control_marks(control: ControlProcess, space: ControlSpace, times, buffer, nodes) -> np.ndarray:
    """Marks of ``control`` at ``nodes`` along the paths in ``buffer``.

    ``times`` are the full observation times; each decision at time s sees
    the observations at times <= s.
    """
    out = np.empty((nodes.size, buffer.shape[1]))
    current = None
    for j, s in enumerate(nodes):
        upto = int(np.searchsorted(times, s, side="right"))
        current = control.decide(float(s), times[:upto], buffer[:upto], current)
        if not np.all(space.contains(current)):
            raise InvalidInput("control produced a mark outside the control space")
        out[j] = current
    return out


def control_distance(alpha1: ControlProcess, alpha2: ControlProcess, grid: TimeGrid,
                     paths: SamplePath, space: ControlSpace) -> tuple[float, float]:
    """Monte Carlo estimate of E int rho(alpha1_t, alpha2_t) dt and its stderr.

    Deterministic switch times are inserted into the grid so piecewise-constant
    controls are integrated exactly; controls see the scenario path up to the
    latest sampled time.
    """
    for c in (alpha1, alpha2):
        st = c.switch_times()
        if st.size and (st.min() < grid.t0 or st.max() > grid.T):
            raise GridMismatch("control switch times fall outside the grid interval")
    if paths.grid.nodes.size != grid.nodes.size or np.any(paths.grid.nodes != grid.nodes):
        raise GridMismatch("scenario paths live on a different grid")
    fine = grid.refine(np.concatenate([alpha1.switch_times(), alpha2.switch_times()]))
    times = paths.full_times
    m1 = _control_marks(alpha1, space, times, paths.buffer, fine.nodes[:-1])
    m2 = _control_marks(alpha2, space, times, paths.buffer, fine.nodes[:-1])
    per_path = fine.dt @ space.distance(m1, m2)
    stderr = per_path.std(ddof=1) / np.sqrt(per_path.size) if per_path.size > 1 else 0.0
    return float(per_path.mean()), float(stderr)


# --------------------------------------------------------------------------
# validation of the declared constants


@dataclass(frozen=True)
class ClauseCheck:
    name: str
    observed: float
    declared: float

    @property
    def passed(self) -> bool:
        return self.observed <= self.declared * (1 + 1e-9)


@dataclass(frozen=True)
class ValidationReport:
    clauses: tuple[ClauseCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def __getitem__(self, name: str) -> ClauseCheck:
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)


def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteCoefficient(f"{name} returned a non-finite value")
    return arr


def validate_problem(spec: ProblemSpec, samples: int, rng_seed: int,
                     nodes: int = 33) -> ValidationReport:
    """Check the declared Lipschitz and growth constants on random paths.

    Reports the worst observed ratio for: the Lipschitz bound on (b, sigma)
    against the running sup distance, the bound on |b(0,a)| + |sigma(0,a)|,
    and the polynomial growth of |f| + |g|.
    """
    if samples < 1:
        raise InvalidInput("samples must be positive")
    rng = generator(rng_seed, Purpose.VALIDATE)
    d, sp = spec.dim_state, spec.control_space
    times = np.linspace(0.0, spec.horizon, nodes)
    P = samples
    scale = rng.uniform(0.1, 3.0, size=(1, P, 1))
    x = rng.normal(size=(1, P, d)) * 2 + np.cumsum(
        rng.normal(size=(nodes, P, d)) * np.sqrt(spec.horizon / nodes), axis=0) * scale
    # half of the perturbations are constant shifts, for which the sup distance is attained at every time
    shift = rng.normal(size=(1, P, d))
    wiggle = shift + np.cumsum(rng.normal(size=(nodes, P, d)), axis=0) * 0.3
    pert = np.where(np.arange(P)[None, :, None] % 2 == 0, shift, wiggle) * rng.uniform(1e-3, 2.0, size=(1, P, 1))
    xp = x + pert
    zero = np.zeros_like(x)
    if sp.is_finite:
        a = sp.points[rng.integers(0, sp.points.size, size=P)]
    else:
        a = rng.uniform(*sp.bounds, size=P)
    sup_x = np.abs(x).max(axis=(0, 2)) if d == 1 else np.linalg.norm(x, axis=2).max(axis=0)
    g = _finite("terminal", spec.g(times, x))
    lip = bound = growth = 0.0
    for k in np.unique(np.linspace(0, nodes - 1, 8).round().astype(int)):
        t = times[:k + 1]
        b1 = _finite("drift", spec.b(t, x[:k + 1], a))
        b2 = _finite("drift", spec.b(t, xp[:k + 1], a))
        s1 = _finite("diffusion", spec.sigma(t, x[:k + 1], a))
        s2 = _finite("diffusion", spec.sigma(t, xp[:k + 1], a))
        dist = np.linalg.norm(pert[:k + 1], axis=2).max(axis=0)
        num = np.linalg.norm(b1 - b2, axis=1) + np.linalg.norm(s1 - s2, axis=(1, 2))
        lip = max(lip, float(np.max(num / dist)))
        b0 = _finite("drift", spec.b(t, zero[:k + 1], a))
        s0 = _finite("diffusion", spec.sigma(t, zero[:k + 1], a))
        bound = max(bound, float(np.max(np.linalg.norm(b0, axis=1) + np.linalg.norm(s0, axis=(1, 2)))))
        f = _finite("running", spec.f(t, x[:k + 1], a))
        growth = max(growth, float(np.max((np.abs(f) + np.abs(g)) / (1 + sup_x ** spec.growth_power))))
    return ValidationReport((
        ClauseCheck("lipschitz", lip, spec.lipschitz),
        ClauseCheck("origin-bound", bound, spec.lipschitz),
        ClauseCheck("growth", growth, spec.growth),
    ))
