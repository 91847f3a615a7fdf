"""Problems with known value functions, used as oracles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .control import ControlSpace, InitialPath, ProblemSpec
from .errors import InvalidInput, NoClosedForm


def _prefix_integral(x: InitialPath) -> float:
    if x.times.size < 2:
        return 0.0
    return float(np.trapezoid(x.values[:, 0], x.times))


def _path_integral(times, values):
    return np.trapezoid(values[:, :, 0], times, axis=0)


@dataclass(frozen=True, eq=False)
class Benchmark:
    """A named problem factory with its value function v(t, x) (``None`` when unknown)."""

    name: str
    build: Callable[..., ProblemSpec]
    closed_form: Optional[Callable[..., float]]
    provenance: str
    defaults: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def with_params(self, **params) -> "Benchmark":
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise InvalidInput(f"unknown parameters for {self.name}: {sorted(unknown)}")
        return Benchmark(self.name, self.build, self.closed_form, self.provenance, self.defaults,
                         {**self.params, **params})

    @property
    def settings(self) -> dict:
        return {**self.defaults, **self.params}

    def spec(self) -> ProblemSpec:
        return self.build(**self.settings)

    def value(self, t: float, x: InitialPath) -> float:
        return closed_form_value(self, t, x)


def closed_form_value(bench: Benchmark, t: float, x: InitialPath) -> float:
    """v(t, x) for a trajectory ``x`` observed on [0, t]."""
    if bench.closed_form is None:
        raise NoClosedForm(f"{bench.name} has no closed-form value")
    s = bench.settings
    if not 0 <= t <= s["horizon"]:
        raise InvalidInput("t must lie in [0, T]")
    if abs(x.t0 - t) > 1e-12:
        raise InvalidInput("the trajectory must be observed exactly up to t")
    return float(bench.closed_form(t, x, **s))


# --------------------------------------------------------------------------
# the catalog


def _uncertain_volatility(marks=(0.2, 0.4), horizon=1.0) -> ProblemSpec:
    marks = tuple(float(m) for m in marks)
    if min(marks) <= 0:
        raise InvalidInput("volatility marks must be positive")
    top = max(marks)
    return ProblemSpec(1, 1, lambda t, x, a: 0.0, lambda t, x, a: a[:, None, None],
                       lambda t, x: x[-1, :, 0] ** 2, horizon, ControlSpace.finite(marks),
                       lipschitz=top, growth=max(1.0, top ** 2 * horizon), growth_power=2.0,
                       name="uncertain-volatility")


def _uncertain_volatility_value(t, x, marks, horizon):
    return x.state[0] ** 2 + max(m * m for m in marks) * (horizon - t)


def _deterministic_drift(marks=(-1.0, 0.0, 1.0), horizon=1.0) -> ProblemSpec:
    marks = tuple(float(m) for m in marks)
    top = max(abs(m) for m in marks)
    return ProblemSpec(1, 1, lambda t, x, a: a[:, None], lambda t, x, a: 0.0,
                       lambda t, x: x[-1, :, 0], horizon, ControlSpace.finite(marks),
                       lipschitz=top, growth=max(1.0, top * horizon), growth_power=1.0,
                       name="deterministic-drift")


def _deterministic_drift_value(t, x, marks, horizon):
    return x.state[0] + max(marks) * (horizon - t)


def _path_integral_drift(marks=(0.0, 1.0), horizon=1.0) -> ProblemSpec:
    marks = tuple(float(m) for m in marks)
    top = max(abs(m) for m in marks)
    return ProblemSpec(1, 1, lambda t, x, a: a[:, None], lambda t, x, a: 0.0,
                       _path_integral, horizon, ControlSpace.finite(marks),
                       lipschitz=top, growth=max(1.0, horizon, top * horizon ** 2 / 2), growth_power=1.0,
                       name="path-integral-drift")


def _path_integral_drift_value(t, x, marks, horizon):
    rest = horizon - t
    return _prefix_integral(x) + x.state[0] * rest + max(marks) * rest ** 2 / 2


def _mark_independent(marks=(0.0, 1.0), horizon=1.0, volatility=1.0) -> ProblemSpec:
    marks = tuple(float(m) for m in marks)
    return ProblemSpec(1, 1, lambda t, x, a: 0.0, lambda t, x, a: float(volatility),
                       lambda t, x: x[-1, :, 0], horizon, ControlSpace.finite(marks),
                       lipschitz=abs(float(volatility)), growth=1.0, growth_power=1.0,
                       name="mark-independent")


def _mark_independent_value(t, x, marks, horizon, volatility):
    return x.state[0]


def _lookback(marks=(0.5, 1.0), horizon=1.0) -> ProblemSpec:
    marks = tuple(float(m) for m in marks)
    if min(marks) <= 0:
        raise InvalidInput("volatility marks must be positive")
    return ProblemSpec(1, 1, lambda t, x, a: 0.0, lambda t, x, a: a[:, None, None],
                       lambda t, x: x[:, :, 0].max(axis=0), horizon, ControlSpace.finite(marks),
                       lipschitz=max(marks), growth=1.0, growth_power=1.0, name="lookback-invariance")


_CATALOG = (
    Benchmark("uncertain-volatility", _uncertain_volatility, _uncertain_volatility_value,
              "E[X_T^2] = x(t)^2 + int E[alpha_s^2] ds by Ito isometry, maximized by the largest constant mark",
              {"marks": (0.2, 0.4), "horizon": 1.0}),
    Benchmark("deterministic-drift", _deterministic_drift, _deterministic_drift_value,
              "sigma = 0: X_T = x(t) + int alpha ds, maximized by the largest mark at every time",
              {"marks": (-1.0, 0.0, 1.0), "horizon": 1.0}),
    Benchmark("path-integral-drift", _path_integral_drift, _path_integral_drift_value,
              "sigma = 0: int_t^T X ds = x(t)(T-t) + int_t^T (T-s) alpha_s ds, maximized by the largest mark",
              {"marks": (0.0, 1.0), "horizon": 1.0}),
    Benchmark("mark-independent", _mark_independent, _mark_independent_value,
              "X is a martingale whatever the control, so E[X_T] = x(t)",
              {"marks": (0.0, 1.0), "horizon": 1.0, "volatility": 1.0}),
    Benchmark("lookback-invariance", _lookback, None,
              "no closed form; used for invariance checks only",
              {"marks": (0.5, 1.0), "horizon": 1.0}),
)


def catalog() -> list[Benchmark]:
    return list(_CATALOG)


def get(name: str, **params) -> Benchmark:
    for bench in _CATALOG:
        if bench.name == name:
            return bench.with_params(**params) if params else bench
    raise InvalidInput(f"unknown benchmark {name!r}; known: {[b.name for b in _CATALOG]}")
