"""Run configuration: built-in defaults < JSON config file < command-line flags."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .bkt import BktParams
from .errors import ValidationError

_OBJECTIVES = {"sum": "sum_sentiment", "terminal": "terminal_sentiment"}


def _default_truth() -> dict:
    return {"s1": {"l0": 0.3, "learn": 0.2, "slip": 0.1, "guess": 0.2}}


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    # signal pipeline
    alpha: float = 0.3
    window: int = 10
    # flywheel
    eta: float = 0.05
    lam: float = 0.0
    band_low: float = 0.4
    band_high: float = 0.8
    curve_sharpness: float = 2.0
    curve_peak: float = 1.0
    curve_target: float = 0.5
    # fitting and evaluation
    em_restarts: int = 5
    em_max_iter: int = 200
    em_tol: float = 1e-6
    train_fraction: float = 0.8
    threshold: float = 0.5
    # ingest
    max_errors: int = 100
    min_interactions: int = 10
    # simulation
    students: int = 500
    steps: int = 50
    true_params: dict = field(default_factory=_default_truth)
    # allocation
    objective: str = "sum"
    influence: str = "linear"
    exponent: float = 1.0
    solver_tol: float = 1e-8

    def validate(self) -> "RunConfig":
        def check(cond: bool, msg: str):
            if not cond:
                raise ValidationError(msg)

        check(isinstance(self.seed, int) and self.seed >= 0, "seed must be a nonnegative integer")
        check(isinstance(self.threads, int) and self.threads >= 1, "threads must be >= 1")
        check(0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]")
        check(isinstance(self.window, int) and self.window >= 1, "window must be a positive integer")
        check(self.eta > 0, "eta must be positive")
        check(self.lam >= 0, "lam must be nonnegative")
        check(0.0 <= self.band_low <= self.band_high <= 1.0, "bands must satisfy 0 <= band_low <= band_high <= 1")
        check(self.curve_sharpness > 0, "curve_sharpness must be positive")
        check(0.0 < self.curve_target < 1.0, "curve_target must lie in (0, 1)")
        check(isinstance(self.em_restarts, int) and self.em_restarts >= 1, "em_restarts must be >= 1")
        check(isinstance(self.em_max_iter, int) and self.em_max_iter >= 1, "em_max_iter must be >= 1")
        check(self.em_tol > 0, "em_tol must be positive")
        check(0.0 < self.train_fraction <= 1.0, "train_fraction must lie in (0, 1]")
        check(0.0 <= self.threshold <= 1.0, "threshold must lie in [0, 1]")
        check(isinstance(self.max_errors, int) and self.max_errors >= 0, "max_errors must be a nonnegative integer")
        check(isinstance(self.min_interactions, int) and self.min_interactions >= 1, "min_interactions must be >= 1")
        check(isinstance(self.students, int) and self.students >= 1, "students must be >= 1")
        check(isinstance(self.steps, int) and self.steps >= 1, "steps must be >= 1")
        check(self.objective in _OBJECTIVES, f"objective must be one of {sorted(_OBJECTIVES)}")
        check(self.influence in ("linear", "power"), "influence must be linear or power")
        check(0.0 < self.exponent <= 1.0, "exponent must lie in (0, 1]")
        check(self.influence == "power" or self.exponent == 1.0, "exponent applies to the power influence only")
        check(self.solver_tol > 0, "solver_tol must be positive")
        self.truth()
        return self

    @property
    def objective_mode(self) -> str:
        return _OBJECTIVES[self.objective]

    def truth(self) -> dict[str, BktParams]:
        if not isinstance(self.true_params, dict) or not self.true_params:
            raise ValidationError("true_params must map skill ids to parameter objects")
        try:
            return {str(k): BktParams(**v) for k, v in sorted(self.true_params.items())}
        except TypeError as exc:
            raise ValidationError(f"bad true_params: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def load(cls, path: str | None = None, **overrides) -> "RunConfig":
        data: dict = {}
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                try:
                    data = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ValidationError("config file must hold a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data).validate()
