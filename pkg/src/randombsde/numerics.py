"""Numerical settings shared by the estimators and the BSDE solver."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import InvalidInput

CONTINUATIONS = ("resimulate", "stratified", "pooled")


@dataclass(frozen=True)
class Numerics:
    """Monte Carlo and regression settings.

    ``continuation`` selects how per-mark continuation values are regressed:
    ``resimulate`` re-runs each step once per mark on the same Brownian
    increment (finite control spaces), ``stratified`` fits one regression
    per mark on the paths currently holding it, ``pooled`` puts the mark into
    the basis.  ``fresh_paths`` sizes the independent population used by the
    dual certificate (defaults to ``paths``).
    """

    paths: int = 10000
    steps: int = 50
    seed: int = 0
    degree: int = 2
    ridge: float = 1e-8
    workers: int = 1
    cap: float = 1e12
    continuation: str = "resimulate"
    fresh_paths: int = 0

    def __post_init__(self):
        if self.paths < 1 or self.steps < 1 or self.degree < 0 or self.workers < 1:
            raise InvalidInput("path count, step count and workers must be positive, degree nonnegative")
        if self.ridge < 0 or not self.cap > 0:
            raise InvalidInput("ridge must be nonnegative and the cap positive")
        if self.continuation not in CONTINUATIONS:
            raise InvalidInput(f"continuation must be one of {CONTINUATIONS}")
        if self.fresh_paths < 0:
            raise InvalidInput("fresh_paths must be nonnegative")

    def with_(self, **changes) -> "Numerics":
        return replace(self, **changes)
