"""Primal and dual value estimates and the duality-gap report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bsde import build_population
from .control import (ControlProcess, ControlSpace, FiniteMarkMeasure, InitialPath, PiecewiseConstantControl,
                      PolicyControl, ProblemSpec, TimeGrid)
from .errors import InvalidInput, UnboundedIntensity
from .girsanov import IntensityField, log_likelihood, reweighted_expectation
from .numerics import Numerics
from .sde import NoiseBundle, gain, simulate_primal

LABELS = ("primal", "dual", "bsde", "closed-form")


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    stderr: float
    paths: int
    grid: dict
    seed: Optional[int]
    label: str
    name: str = ""

    def __post_init__(self):
        if not self.stderr >= 0:
            raise InvalidInput("stderr must be nonnegative")
        if self.paths < 1:
            raise InvalidInput("an estimate needs at least one path")
        if self.label not in LABELS:
            raise InvalidInput(f"label must be one of {LABELS}")

    def as_row(self) -> dict:
        return {"label": self.label, "name": self.name, "value": self.value, "stderr": self.stderr,
                "paths": self.paths, "steps": self.grid.get("steps"), "seed": self.seed}


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


# --------------------------------------------------------------------------
# primal side


def primal_grid(spec: ProblemSpec, x: InitialPath, controls: Sequence[ControlProcess], steps: int) -> TimeGrid:
    """Uniform grid on [t0, T] refined by every deterministic switch time of ``controls``."""
    grid = TimeGrid.uniform(x.t0, spec.horizon, steps)
    switches = [c.switch_times() for c in controls]
    return grid.refine(np.concatenate(switches)) if switches else grid


def estimate_primal(spec: ProblemSpec, x: InitialPath, control: ControlProcess, numerics: Numerics,
                    noise: Optional[NoiseBundle] = None, name: str = "") -> ValueEstimate:
    """Monte Carlo gain of one control (a lower bound on the value).

    Pass ``noise`` to share Brownian increments between controls; it is
    refined by Brownian bridge when the control switches off its grid.
    """
    if noise is None:
        grid = primal_grid(spec, x, [control], numerics.steps)
        noise = NoiseBundle.generate(grid, numerics.paths, spec.dim_noise, numerics.seed, 0, numerics.workers)
    else:
        grid = noise.grid.refine(control.switch_times())
        noise = noise.refine(grid)
    path = simulate_primal(spec, x, control, noise, numerics.cap)
    value, se = _mean_se(gain(spec, path, path.marks))
    return ValueEstimate(value, se, path.n_paths, grid.summary(), numerics.seed, "primal", name)


@dataclass(frozen=True, eq=False)
class SampledControl(ControlProcess):
    """``base`` read at the start of each partition cell and snapped to the
    nearest mark of ``subset``; held constant inside the cell."""

    base: ControlProcess = None
    partition: TimeGrid = None
    subset: tuple = ()
    space: ControlSpace = None
    initial: Optional[float] = None
    deterministic: bool = False

    def decide(self, t, times, values, current):
        nodes = self.partition.nodes
        cell = min(max(int(np.searchsorted(nodes, t, side="right")) - 1, 0), nodes.size - 2)
        if current is not None and t != nodes[cell]:
            return current
        if cell == 0 and self.initial is not None:
            return np.full(values.shape[1], float(self.initial))
        return snap(self.space, self.base.decide(t, times, values, current), self.subset)

    def switch_times(self):
        return self.partition.nodes[1:-1].copy()


def snap(space: ControlSpace, raw, subset: Sequence[float]) -> np.ndarray:
    """Nearest element of ``subset`` in the control metric; ties go to the
    numerically closest, then to the first listed.  On a finite set every
    non-member is equidistant from all marks, so the tie rule decides."""
    subset = np.asarray(subset, dtype=float)
    raw = np.asarray(raw, dtype=float)
    d = space.distance(raw[..., None], subset)
    gap = np.where(d <= d.min(axis=-1, keepdims=True), np.abs(raw[..., None] - subset), np.inf)
    return subset[gap.argmin(axis=-1)]


def _deterministic_value(control: ControlProcess, t: float, dim: int) -> float:
    if isinstance(control, PiecewiseConstantControl):
        return control.value_at(t)
    dummy = np.zeros((1, 1, dim))
    return float(np.asarray(control.decide(t, np.array([t]), dummy, None)).ravel()[0])


def krylov_discretize(control: ControlProcess, partition: TimeGrid, subset: Sequence[float],
                      space: ControlSpace, initial: Optional[float] = None, dim: int = 1) -> ControlProcess:
    """Piecewise-constant, finitely valued approximation of ``control``.

    On each cell of ``partition`` the value at the left endpoint is snapped
    to the nearest mark of ``subset`` (see :func:`snap`); ``initial`` forces the
    first cell.  Deterministic controls give a PiecewiseConstantControl.
    """
    subset = tuple(float(s) for s in subset)
    if not subset:
        raise InvalidInput("the mark subset must be nonempty")
    if not np.all(space.contains(np.asarray(subset))):
        raise InvalidInput("the mark subset must lie in the control space")
    if control.deterministic:
        starts = partition.nodes[:-1]
        raw = np.array([_deterministic_value(control, float(t), dim) for t in starts])
        snapped = snap(space, raw, subset)
        if initial is not None:
            snapped[0] = float(initial)
        return PiecewiseConstantControl(tuple(partition.nodes[1:-1]), tuple(snapped))
    return SampledControl(control, partition, subset, space, initial)


def primal_sweep(spec: ProblemSpec, x: InitialPath, family: Sequence[ControlProcess], numerics: Numerics,
                 names: Optional[Sequence[str]] = None) -> tuple[ValueEstimate, list[ValueEstimate]]:
    """Evaluate every control on common Brownian increments; best is the first argmax."""
    family = list(family)
    if not family:
        raise InvalidInput("the control family is empty")
    names = list(names) if names is not None else [f"control-{i}" for i in range(len(family))]
    grid = primal_grid(spec, x, family, numerics.steps)
    noise = NoiseBundle.generate(grid, numerics.paths, spec.dim_noise, numerics.seed, 0, numerics.workers)
    table = [estimate_primal(spec, x, c, numerics, noise, nm) for c, nm in zip(family, names)]
    best = int(np.argmax([e.value for e in table]))
    return table[best], table


# --------------------------------------------------------------------------
# dual side


def estimate_dual(spec: ProblemSpec, x: InitialPath, a: float, measure: FiniteMarkMeasure, nu: IntensityField,
                  numerics: Numerics, name: str = "") -> ValueEstimate:
    """Randomized gain reweighted by the Doleans-Dade exponential of ``nu``.

    Paths are simulated under the base Poisson measure on (t0, T] with
    common-grid jump snapping; the field sees the snapped mark and the state
    at the latest node.
    """
    if not np.isfinite(nu.bound):
        raise UnboundedIntensity("dual estimates need a bounded intensity; use truncate_intensity")
    pop = build_population(spec, x, a, measure, numerics, max_level=0.0)
    logw = log_likelihood(nu, pop.events, measure, pop.grid, initial_mark=a, node_marks=pop.path.marks,
                          states=pop.path.values)
    res = reweighted_expectation(pop.gains, np.exp(logw))
    return ValueEstimate(res.estimate, res.stderr, pop.n_paths, pop.grid.summary(), numerics.seed, "dual", name)


# --------------------------------------------------------------------------
# duality report


@dataclass(frozen=True)
class DualityLink:
    name: str
    lhs: float
    rhs: float
    tolerance: float
    passed: bool


@dataclass(frozen=True)
class DualityReport:
    links: tuple
    primal: ValueEstimate
    duals: tuple
    bsde: ValueEstimate
    allowance: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(link.passed for link in self.links)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "allowance": self.allowance,
                "links": [asdict(link) for link in self.links],
                "primal": asdict(self.primal), "duals": [asdict(d) for d in self.duals],
                "bsde": asdict(self.bsde), **self.details}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def duality_report(primal: ValueEstimate, duals: Sequence[ValueEstimate], bsde: ValueEstimate,
                   allowance: float = 0.0) -> DualityReport:
    """Check primal <= Y0 + tol and |best dual - Y0| <= tol, tol = 3 combined stderr + allowance.

    The dual link is omitted when no dual estimate is given.
    """
    if allowance < 0:
        raise InvalidInput("allowance must be nonnegative")
    duals = tuple(duals)
    tol = 3 * float(np.hypot(primal.stderr, bsde.stderr)) + allowance
    links = [DualityLink("primal<=bsde", primal.value, bsde.value, tol, primal.value <= bsde.value + tol)]
    if duals:
        best = max(duals, key=lambda d: d.value)
        tol2 = 3 * float(np.hypot(best.stderr, bsde.stderr)) + allowance
        links.append(DualityLink("dual=bsde", best.value, bsde.value, tol2, abs(best.value - bsde.value) <= tol2))
    return DualityReport(tuple(links), primal, duals, bsde, allowance)


def standard_family(spec: ProblemSpec, x: InitialPath, cells: int = 4) -> tuple[list[ControlProcess], list[str]]:
    """Constant controls on every mark plus snapped ramps and snapped threshold feedbacks.

    Ramps run between the smallest and largest marks in both directions; the
    feedbacks pick one extreme when the state is above its value at t0 and
    the other otherwise.  On an interval the constants are a 5-point grid.
    """
    space = spec.control_space
    if space.is_finite:
        marks = np.sort(space.points)
    else:
        marks = np.linspace(*space.bounds, 5)
    lo, hi = float(marks[0]), float(marks[-1])
    t0, T = x.t0, spec.horizon
    partition = TimeGrid.uniform(t0, T, cells)
    x0 = float(x.state[0])
    family: list[ControlProcess] = [PiecewiseConstantControl.constant(float(m)) for m in marks]
    names = [f"constant {m:g}" for m in marks]
    for a, b in ((lo, hi), (hi, lo)):
        ramp = PolicyControl(lambda t, times, values, current, a=a, b=b: a + (b - a) * (t - t0) / (T - t0),
                             deterministic=True, label="ramp")
        family.append(krylov_discretize(ramp, partition, marks, space, dim=spec.dim_state))
        names.append(f"ramp {a:g}->{b:g}")
    for above, below in ((hi, lo), (lo, hi)):
        policy = PolicyControl(lambda t, times, values, current, u=above, d=below:
                               np.where(values[-1, :, 0] > x0, u, d), label="threshold")
        family.append(krylov_discretize(policy, partition, marks, space))
        names.append(f"threshold {above:g}/{below:g}")
    return family, names
