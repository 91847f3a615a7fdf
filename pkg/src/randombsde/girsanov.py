"""Doleans-Dade exponentials for changes of the jump intensity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .control import FiniteMarkMeasure, TimeGrid
from .errors import InvalidInput, LikelihoodOverflow, NonPositiveIntensity
from .jumps import MarkedPointProcess, PointProcessBatch

LOG_GUARD = 700.0


@dataclass(frozen=True, eq=False)
class Past:
    """What an intensity may look at when evaluated at ``time``.

    ``mark`` is I_{t-} and ``count`` is N_{t-}.  ``node`` is the index of the
    latest grid node strictly before ``time``; ``path`` the row in the
    population; ``state`` the state at that node (``None`` when no state is
    attached).  All arrays share one shape (``state`` has a trailing axis).
    """

    time: np.ndarray
    mark: np.ndarray
    count: np.ndarray
    node: np.ndarray
    path: np.ndarray
    state: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class IntensityField:
    """Positive predictable field nu_t(a) given as ``fn(past, a)``; ``bound`` is its
    essential supremum (``inf`` for unbounded fields)."""

    fn: Callable[[Past, np.ndarray], np.ndarray]
    bound: float = np.inf
    predictable: bool = True
    label: str = ""

    @classmethod
    def constant(cls, c: float) -> "IntensityField":
        if not c > 0:
            raise NonPositiveIntensity("intensity must be positive")
        return cls(lambda past, a: np.full(np.broadcast_shapes(np.shape(past.time), np.shape(a)), float(c)),
                   bound=float(c), label=f"constant {c:g}")

    def __call__(self, past: Past, a) -> np.ndarray:
        out = np.asarray(self.fn(past, a), dtype=float)
        out = np.broadcast_to(out, np.broadcast_shapes(np.shape(past.time), np.shape(a)))
        if not np.all(out > 0):
            raise NonPositiveIntensity("intensity evaluated to a nonpositive or non-finite value")
        if np.any(out > self.bound * (1 + 1e-12)):
            raise InvalidInput("intensity exceeds its declared bound")
        return out

    def restrict(self, rows: slice) -> "IntensityField":
        """Field specialised to a block of population rows (hook for cached fields)."""
        return self


def truncate_intensity(nu: IntensityField, k: float) -> IntensityField:
    """nu wedge k."""
    if not k > 0:
        raise InvalidInput("truncation level must be positive")
    return _Truncated(nu, float(k))


class _Truncated(IntensityField):
    def __init__(self, base: IntensityField, k: float):
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "fn", lambda past, a: np.minimum(base.fn(past, a), k))
        object.__setattr__(self, "bound", min(base.bound, k))
        object.__setattr__(self, "predictable", base.predictable)
        object.__setattr__(self, "label", f"{base.label} wedge {k:g}")

    def restrict(self, rows):
        return _Truncated(self.base.restrict(rows), self.k)


@dataclass(frozen=True, eq=False)
class LikelihoodPath:
    """L on the grid refined by the jump epochs, kept in the log domain."""

    times: np.ndarray
    log_values: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    @property
    def terminal(self) -> float:
        return float(np.exp(self.log_values[-1]))

    @property
    def log_terminal(self) -> float:
        return float(self.log_values[-1])


def _terms(nu: IntensityField, epochs: np.ndarray, marks: np.ndarray, measure: FiniteMarkMeasure,
           grid: TimeGrid, node_marks: Optional[np.ndarray], initial_mark: float,
           states: Optional[np.ndarray], rows: np.ndarray, inverse: bool):
    """Per-cell compensator increments and per-event log factors for a block of rows.

    Returns the sorted cut times (P, K), cell increments (P, K-1), the
    position of each event among the cuts (P, J) and the event log factors.
    """
    nodes = grid.nodes
    P, J = epochs.shape
    valid = np.isfinite(epochs)
    cuts = np.concatenate([np.broadcast_to(nodes, (P, nodes.size)), np.where(valid, epochs, nodes[-1])], axis=1)
    is_event = np.concatenate([np.zeros((P, nodes.size), bool), valid], axis=1)
    is_node = np.concatenate([np.ones((P, nodes.size), bool), np.zeros((P, J), bool)], axis=1)
    order = np.argsort(cuts, axis=1, kind="stable")
    cuts = np.take_along_axis(cuts, order, axis=1)
    is_event = np.take_along_axis(is_event, order, axis=1)
    is_node = np.take_along_axis(is_node, order, axis=1)
    h = np.diff(cuts, axis=1)
    mid = cuts[:, :-1] + h / 2
    count = np.cumsum(is_event, axis=1)[:, :-1]
    node = np.cumsum(is_node, axis=1)[:, :-1] - 1
    path = np.broadcast_to(rows[:, None], mid.shape)

    def mark_of(count_, node_, path_):
        if node_marks is not None:
            return node_marks[node_, path_]
        if J == 0:
            return np.full(count_.shape, float(initial_mark))
        prev = np.take_along_axis(marks, np.maximum(count_ - 1, 0), axis=1)
        return np.where(count_ > 0, prev, float(initial_mark))

    def state_of(node_, path_):
        return None if states is None else states[node_, path_]

    past = Past(mid, mark_of(count, node, path), count, node, path, state_of(node, path))
    integrand = np.zeros(mid.shape)
    for a, w in zip(measure.nodes, measure.node_weights):
        v = nu(past, a)
        integrand += w * ((v - 1.0) if inverse else (1.0 - v))
    cells = h * integrand
    log_jumps = np.zeros((P, J))
    pos = np.zeros((P, J), dtype=np.int64)
    if J:
        ev_node = np.searchsorted(nodes, np.where(valid, epochs, nodes[-1]), side="left") - 1
        ev_node = np.maximum(ev_node, 0)
        ev_count = np.broadcast_to(np.arange(J), (P, J))
        ev_path = np.broadcast_to(rows[:, None], (P, J))
        safe_t = np.where(valid, epochs, nodes[-1])
        past_e = Past(safe_t, mark_of(ev_count, ev_node, ev_path), ev_count, ev_node, ev_path,
                      state_of(ev_node, ev_path))
        safe_marks = np.where(valid, marks, measure.nodes[0])
        lv = np.log(nu(past_e, safe_marks))
        log_jumps = np.where(valid, -lv if inverse else lv, 0.0)
        inv_order = np.argsort(order, axis=1)
        pos = inv_order[:, nodes.size:]
    return cuts, cells, pos, log_jumps


def _check_grid(grid: TimeGrid, epochs: np.ndarray):
    valid = np.isfinite(epochs)
    if np.any(valid & ((epochs <= grid.t0) | (epochs > grid.T))):
        raise InvalidInput("jump epochs must lie in (t0, T] of the grid")


def _path_version(nu, mpp: MarkedPointProcess, measure, grid, initial_mark, inverse) -> LikelihoodPath:
    ep, mk = mpp.epochs[None, :], mpp.marks[None, :]
    _check_grid(grid, ep)
    mark0 = np.nan if initial_mark is None else initial_mark
    cuts, cells, pos, log_jumps = _terms(nu, ep, mk, measure, grid, None, mark0, None,
                                         np.zeros(1, dtype=np.int64), inverse)
    inc = np.concatenate([[0.0], cells[0]])
    if mpp.count:
        np.add.at(inc, pos[0], log_jumps[0])
    logs = np.cumsum(inc)
    if np.any(np.abs(logs) > LOG_GUARD):
        raise LikelihoodOverflow("|log L| exceeds 700")
    return LikelihoodPath(cuts[0], logs)


def doleans_exponential(nu: IntensityField, mpp: MarkedPointProcess, measure: FiniteMarkMeasure,
                        grid: TimeGrid, initial_mark: Optional[float] = None) -> LikelihoodPath:
    """L_t = exp(int_0^t int_A (1 - nu) lambda(da) ds) prod_{S_n <= t} nu_{S_n}(eta_n).

    The time integral uses the midpoint of each cell of ``grid`` refined by
    the epochs, exact for fields that are constant between cuts.
    ``initial_mark`` is reported to the field as I_{t-} before the first jump.
    """
    return _path_version(nu, mpp, measure, grid, initial_mark, inverse=False)


def inverse_density(nu: IntensityField, mpp: MarkedPointProcess, measure: FiniteMarkMeasure,
                    grid: TimeGrid, initial_mark: Optional[float] = None) -> LikelihoodPath:
    """M_t = exp(int int (1 - 1/nu) nu lambda(da) ds) prod nu_{S_n}(eta_n)^{-1}, the inverse of L."""
    return _path_version(nu, mpp, measure, grid, initial_mark, inverse=True)


def log_likelihood(nu: IntensityField, events: PointProcessBatch, measure: FiniteMarkMeasure, grid: TimeGrid,
                   initial_mark: float = np.nan, node_marks: Optional[np.ndarray] = None,
                   states: Optional[np.ndarray] = None, inverse: bool = False, chunk: int = 4096) -> np.ndarray:
    """log L_T (or log M_T) for every row of a batch, shape (P,).

    With ``node_marks`` (N+1, P) the field sees the mark in force on the
    grid cell (as in populations simulated on a common grid); otherwise the
    exact mark of the latest event.  ``states`` (N+1, P, d) attaches the
    state at the latest node.
    """
    _check_grid(grid, events.epochs)
    P = events.n_paths
    out = np.empty(P)
    for s in range(0, P, chunk):
        sl = slice(s, min(s + chunk, P))
        rows = np.arange(sl.start, sl.stop)
        field_ = nu.restrict(sl)
        nm = None if node_marks is None else node_marks
        _, cells, _, log_jumps = _terms(field_, events.epochs[sl], events.marks[sl], measure, grid, nm,
                                        initial_mark, states, rows, inverse)
        out[sl] = cells.sum(axis=1) + log_jumps.sum(axis=1)
    if np.any(np.abs(out) > LOG_GUARD):
        raise LikelihoodOverflow("|log L_T| exceeds 700")
    return out


class Reweighted(NamedTuple):
    estimate: float
    stderr: float
    mean_weight: float


def reweighted_expectation(payoffs, weights) -> Reweighted:
    """Mean of weight * payoff with its stderr, plus the mean weight."""
    payoffs = np.asarray(payoffs, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if payoffs.size == 0 or payoffs.shape != weights.shape:
        raise InvalidInput("need matching, nonempty payoffs and weights")
    if not (np.all(np.isfinite(payoffs)) and np.all(np.isfinite(weights))) or np.any(weights <= 0):
        raise InvalidInput("payoffs must be finite and weights finite and positive")
    prod = payoffs * weights
    se = float(prod.std(ddof=1) / np.sqrt(prod.size)) if prod.size > 1 else 0.0
    return Reweighted(float(prod.mean()), se, float(weights.mean()))
