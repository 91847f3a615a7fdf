"""Euler-Maruyama simulation of path-dependent controlled SDEs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .control import (ControlProcess, InitialPath, ProblemSpec, SamplePath, TimeGrid,
                      _control_marks)
from .errors import BlowUp, GridMismatch, InvalidInput, NonFiniteGain
from .jumps import MarkedPointProcess, PointProcessBatch
from .streams import BLOCK, Purpose, generator, map_blocks

DEFAULT_CAP = 1e12


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Brownian increments, shape (N, P, n), time-major, with seed provenance."""

    grid: TimeGrid
    increments: np.ndarray
    seed: int
    stream: int = 0

    def __post_init__(self):
        if self.increments.ndim != 3 or self.increments.shape[0] != self.grid.steps:
            raise InvalidInput("need one increment row per grid interval")

    @classmethod
    def generate(cls, grid: TimeGrid, n_paths: int, dim: int, seed: int, stream: int = 0,
                 workers: int = 1) -> "NoiseBundle":
        """Gaussian increments with variance dt, drawn block by block from keyed streams."""
        if n_paths < 1 or dim < 1:
            raise InvalidInput("path count and noise dimension must be positive")
        scale = np.sqrt(grid.dt)[:, None, None]
        out = np.empty((grid.steps, n_paths, dim))

        def fill(b, start, stop):
            rng = generator(seed, Purpose.BROWNIAN, stream, b)
            out[:, start:stop] = rng.standard_normal((grid.steps, stop - start, dim)) * scale

        map_blocks(fill, n_paths, workers)
        return cls(grid, out, seed, stream)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[1]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]

    def refine(self, grid: TimeGrid) -> "NoiseBundle":
        """Increments on a finer grid containing every current node, by Brownian bridge.

        The Brownian path at the existing nodes is unchanged; the bridge draws
        come from a stream keyed by the bundle's seed and stream id.
        """
        old = self.grid.nodes
        if grid.nodes.size == old.size:
            if np.any(grid.nodes != old):
                raise GridMismatch("refined grid must contain the original nodes")
            return self
        pos = np.searchsorted(grid.nodes, old)
        if np.any(pos >= grid.nodes.size) or np.any(grid.nodes[np.minimum(pos, grid.nodes.size - 1)] != old):
            raise GridMismatch("refined grid must contain the original nodes")
        rng = generator(self.seed, Purpose.BRIDGE, self.stream)
        out = np.empty((grid.steps,) + self.increments.shape[1:])
        for k in range(self.grid.steps):
            lo, hi = pos[k], pos[k + 1]
            if hi == lo + 1:
                out[lo] = self.increments[k]
                continue
            remaining = self.increments[k].copy()
            for j in range(lo, hi - 1):
                span = grid.nodes[hi] - grid.nodes[j]
                h = grid.nodes[j + 1] - grid.nodes[j]
                theta = h / span
                step = theta * remaining + np.sqrt(theta * (1 - theta) * span) * rng.standard_normal(remaining.shape)
                out[j] = step
                remaining = remaining - step
            out[hi - 1] = remaining
        return NoiseBundle(grid, out, self.seed, self.stream)

    def coarsen(self, factor: int) -> "NoiseBundle":
        """Sum groups of ``factor`` consecutive increments (same Brownian path)."""
        if self.grid.steps % factor:
            raise GridMismatch("step count is not divisible by the coarsening factor")
        inc = self.increments.reshape((self.grid.steps // factor, factor) + self.increments.shape[1:]).sum(axis=1)
        return NoiseBundle(TimeGrid(self.grid.nodes[::factor]), inc, self.seed, self.stream)


@dataclass(frozen=True, eq=False)
class JumpControlPath:
    """Pure-jump control path: ``initial`` up to the first epoch, then the mark of the
    latest epoch <= t (right-continuous, with left limits used as I_{t-})."""

    initial: float
    epochs: np.ndarray
    marks: np.ndarray
    start: float
    end: float

    def __post_init__(self):
        e = np.asarray(self.epochs, dtype=float)
        if e.size and (e[0] <= self.start or e[-1] > self.end or np.any(np.diff(e) <= 0)):
            raise InvalidInput("jump epochs must be strictly increasing inside (t0, T]")
        object.__setattr__(self, "epochs", e)
        object.__setattr__(self, "marks", np.asarray(self.marks, dtype=float))

    def value_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.epochs, t, side="right")
        return np.where(idx == 0, self.initial, self.marks[np.maximum(idx - 1, 0)] if self.marks.size else self.initial)

    def left_limit(self, t) -> np.ndarray:
        idx = np.searchsorted(self.epochs, t, side="left")
        return np.where(idx == 0, self.initial, self.marks[np.maximum(idx - 1, 0)] if self.marks.size else self.initial)

    def on_grid(self, nodes: np.ndarray) -> np.ndarray:
        return np.asarray(self.value_at(nodes), dtype=float)


def _euler(spec: ProblemSpec, x: InitialPath, noise: NoiseBundle,
           mark_fn: Callable, cap: float) -> SamplePath:
    grid = noise.grid
    if x.dim != spec.dim_state or noise.dim != spec.dim_noise:
        raise InvalidInput("initial path or noise dimension does not match the problem")
    if grid.t0 != x.t0 or grid.T != spec.horizon:
        raise GridMismatch("noise grid must run from t0 to the horizon")
    M, N, P, d = x.times.size - 1, grid.steps, noise.n_paths, spec.dim_state
    times = np.concatenate([x.times[:-1], grid.nodes])
    buf = np.empty((M + N + 1, P, d))
    buf[:M + 1] = x.values[:, None, :]
    marks = np.empty((N + 1, P))
    dt = grid.dt
    scalar = d == 1 and spec.dim_noise == 1
    current = None
    for k in range(N):
        j = M + k
        tv, xv = times[:j + 1], buf[:j + 1]
        a = mark_fn(k, tv, xv, current)
        marks[k] = a
        current = marks[k]
        b = spec.b(tv, xv, current)
        s = spec.sigma(tv, xv, current)
        if scalar:
            buf[j + 1, :, 0] = buf[j, :, 0] + b[:, 0] * dt[k] + s[:, 0, 0] * noise.increments[k, :, 0]
        else:
            buf[j + 1] = buf[j] + b * dt[k] + np.matmul(s, noise.increments[k][:, :, None])[..., 0]
        if not np.all(np.abs(buf[j + 1]) <= cap):
            raise BlowUp(f"state left the cap {cap:g} at t={grid.nodes[k + 1]:.6g}")
    marks[N] = mark_fn(N, times, buf, current)
    return SamplePath(grid, buf, x, marks)


def simulate_primal(spec: ProblemSpec, x: InitialPath, control: ControlProcess,
                    noise: NoiseBundle, cap: float = DEFAULT_CAP) -> SamplePath:
    """Euler scheme driven by a control process evaluated at the left node of each step."""
    space = spec.control_space

    def mark_fn(k, tv, xv, current):
        out = control.decide(float(tv[-1]), tv, xv, current)
        if not np.all(space.contains(out)):
            raise InvalidInput("control produced a mark outside the control space")
        return out

    return _euler(spec, x, noise, mark_fn, cap)


def simulate_randomized(spec: ProblemSpec, x: InitialPath, a: float, mpp: MarkedPointProcess,
                        noise: NoiseBundle, cap: float = DEFAULT_CAP) -> tuple[JumpControlPath, SamplePath]:
    """Euler scheme driven by the pure-jump control built from ``mpp``.

    Jump epochs are inserted into the grid; the Brownian increments are
    refined by Brownian bridge so the path at the original nodes is kept.
    """
    grid = noise.grid
    if mpp.count and (mpp.epochs[0] <= grid.t0 or mpp.epochs[-1] > grid.T):
        raise InvalidInput("jump epochs must lie in (t0, T]")
    if not spec.control_space.contains(a):
        raise InvalidInput("initial mark is outside the control space")
    path = JumpControlPath(a, mpp.epochs, mpp.marks, grid.t0, grid.T)
    fine = grid.refine(mpp.epochs)
    noise = noise.refine(fine)
    node_marks = path.on_grid(fine.nodes)
    P = noise.n_paths
    return path, _euler(spec, x, noise, lambda k, tv, xv, cur: np.full(P, node_marks[k]), cap)


def node_marks(events: PointProcessBatch, nodes: np.ndarray, initial: float) -> np.ndarray:
    """Mark in force at each node, shape (N+1, P): an event at time s is
    seen from the first node >= s on."""
    N1, P = nodes.size, events.n_paths
    out = np.full((N1, P), float(initial))
    if events.max_count == 0:
        return out
    valid = events.valid
    at = np.searchsorted(nodes, np.where(valid, events.epochs, nodes[-1]), side="left")
    counts = np.zeros((N1 + 1, P), dtype=np.int32)
    path, event = np.nonzero(valid)
    np.add.at(counts, (at[path, event], path), 1)
    np.cumsum(counts, axis=0, out=counts)
    counts = counts[:N1]
    jumped = counts > 0
    idx = np.maximum(counts - 1, 0)
    picked = np.take_along_axis(events.marks.T, idx, axis=0)
    np.copyto(out, picked, where=jumped)
    return out


def simulate_population(spec: ProblemSpec, x: InitialPath, a: float, events: PointProcessBatch,
                        noise: NoiseBundle, cap: float = DEFAULT_CAP) -> SamplePath:
    """Vectorized randomized simulation of many paths on one common grid.

    Each path carries its own marked point process; a jump at time s takes
    effect from the first grid node >= s.
    """
    if events.n_paths != noise.n_paths:
        raise InvalidInput("one point process per path is required")
    if not spec.control_space.contains(a):
        raise InvalidInput("initial mark is outside the control space")
    marks = node_marks(events, noise.grid.nodes, a)
    return _euler(spec, x, noise, lambda k, tv, xv, cur: marks[k], cap)


MarkSource = Union[None, np.ndarray, JumpControlPath, ControlProcess]


def _resolve_marks(spec: ProblemSpec, path: SamplePath, marks: MarkSource) -> np.ndarray:
    if marks is None:
        if path.marks is None:
            raise InvalidInput("path carries no marks; pass them explicitly")
        return path.marks
    if isinstance(marks, JumpControlPath):
        return np.broadcast_to(marks.on_grid(path.grid.nodes)[:, None], (path.grid.nodes.size, path.n_paths))
    if isinstance(marks, ControlProcess):
        return _control_marks(marks, spec.control_space, path.full_times, path.buffer, path.grid.nodes)
    arr = np.asarray(marks, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return np.broadcast_to(arr, (path.grid.nodes.size, path.n_paths))


def running_integral(spec: ProblemSpec, path: SamplePath, marks: np.ndarray) -> np.ndarray:
    """Trapezoid in time of f(X, I_{r_k}) on each step, cumulated, shape (N+1, P)."""
    N, P, M = path.grid.steps, path.n_paths, path.offset
    out = np.zeros((N + 1, P))
    if spec.running is None:
        return out
    times, buf, dt = path.full_times, path.buffer, path.grid.dt
    for k in range(N):
        j = M + k
        left = spec.f(times[:j + 1], buf[:j + 1], marks[k])
        right = spec.f(times[:j + 2], buf[:j + 2], marks[k])
        out[k + 1] = out[k] + dt[k] * (left + right) / 2
    return out


def gain(spec: ProblemSpec, path: SamplePath, marks: MarkSource = None) -> np.ndarray:
    """Per-path gain: trapezoid of the running reward plus the terminal reward, shape (P,)."""
    m = _resolve_marks(spec, path, marks)
    total = running_integral(spec, path, m)[-1] + spec.g(path.full_times, path.buffer)
    if not np.all(np.isfinite(total)):
        raise NonFiniteGain("running or terminal reward is not finite")
    return np.array(total, dtype=float)


def moment_diagnostic(paths: SamplePath, p: float) -> tuple[float, float]:
    """Mean and stderr of sup_s |X_s|^p over the population (prefix included)."""
    if p < 1:
        raise InvalidInput("moment order must be at least 1")
    norm = np.linalg.norm(paths.buffer, axis=2).max(axis=0) ** p
    if norm.size < 2:
        return float(norm.mean()), 0.0
    return float(norm.mean()), float(norm.std(ddof=1) / np.sqrt(norm.size))
