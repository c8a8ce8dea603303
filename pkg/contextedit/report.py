try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import tomli_w

from contextedit.config import (
    BETA_END,
    BETA_START,
    REFERENCE_ITERATIONS,
    TIMESTEPS,
    TrainConfig,
)
from contextedit.errors import ConfigError


def sampler_settings(config: TrainConfig) -> dict[str, Any]:
    return {
        "timesteps": TIMESTEPS,
        "beta_start": BETA_START,
        "beta_end": BETA_END,
        "eta": 0.0,
        "image_scale": config.image_scale,
        "text_scale": config.text_scale,
    }


@dataclass
class RunReport:
    """
    Record of one training phase or evaluation run.

    Serialized as TOML with a stable key order; every value is a string,
    number, list or table, so `load(save(report)) == report`.
    """

    kind: str  # "train" or "eval"
    seed: int
    config: dict[str, Any]
    phases: list[str] = field(default_factory=list)
    losses: dict[str, list[dict[str, float]]] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    per_task: dict[str, dict[str, float]] = field(default_factory=dict)
    sampler: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, kind: str, config: TrainConfig, **kwargs) -> "RunReport":
        return cls(
            kind=kind,
            seed=config.seed,
            config=config.as_dict(),
            sampler=sampler_settings(config),
            provenance={
                "reference_iterations": dict(REFERENCE_ITERATIONS),
                "desk_iterations": {
                    "main": config.main_steps,
                    "surrogate": config.surrogate_steps,
                    "refine": config.refine_steps,
                },
            },
            **kwargs,
        )

    def dumps(self) -> str:
        return tomli_w.dumps(asdict(self))

    @classmethod
    def loads(cls, text: str) -> "RunReport":
        try:
            values = tomllib.loads(text)
            return cls(**values)
        except (tomllib.TOMLDecodeError, TypeError) as e:
            raise ConfigError(f"Not a run report: {e}") from e

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())

    @classmethod
    def load(cls, path: Path) -> "RunReport":
        try:
            return cls.loads(path.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"Report '{path}' does not exist") from e
