try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any

from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    TaskProgressColumn,
    TextColumn,
    TimeElapsedColumn,
    TimeRemainingColumn,
)

from contextedit.errors import ConfigError


class FileType(str, Enum):
    """File types used in contextedit."""

    PPM = ".ppm"
    PGM = ".pgm"
    TOML = ".toml"
    SAFETENSORS = ".safetensors"


class Category(str, Enum):
    """Instruction categories, following the add/replace/remove/change split."""

    ADD = "add"
    REMOVE = "remove"
    REPLACE = "replace"
    CHANGE = "change"


class Task(str, Enum):
    """Editing tasks an episode belongs to."""

    SINGLE = "single"
    MULTI = "multi"
    CONTEXT = "context"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Phase(str, Enum):
    """Training phases, in the only order they may run."""

    MAIN = "main"
    SURROGATE = "surrogate"
    REFINE = "refine"


class TokenLabel(str, Enum):
    """Classes of the per-instruction output tokens. Logit column order is MASK, NEG."""

    MASK = "[MASK]"
    NEG = "[NEG]"


class ProgressConfig:
    """
    Rich progress bar default configurations.

    Example uses:
    >>> Progress(*ProgressConfig.FULL)
    >>> with Progress(*ProgressConfig.STEPS) as progress:
    >>>     ...
    """

    DEFAULT = Progress.get_default_columns()
    FULL = (
        TextColumn("[progress.description]{task.description}"),
        TimeElapsedColumn(),
        BarColumn(),
        TaskProgressColumn(),
        TimeRemainingColumn(),
    )
    STEPS = (
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
    )


# Image and grid geometry
IMAGE_SIZE = 64  # Height and width of every scene
GRID = 8  # Object boxes and patches are aligned to this many pixels
PATCH_GRID = IMAGE_SIZE // GRID  # 8x8 patches
NUM_PATCHES = PATCH_GRID * PATCH_GRID
LATENT_SIZE = 16  # Spatial size of the latent, also the only attention resolution
LATENT_CHANNELS = 4
LATENT_BLOCK = IMAGE_SIZE // LATENT_SIZE

# Model widths
EMBED_DIM = 32  # d_T, d_V, d_O, d_s and the latent projection dimension d
HEAD_HEADS = 4
HEAD_BLOCKS = 2
MAX_PROMPT_LENGTH = 48  # Longest prompt the position tables and mask summary support
MASK_THRESHOLD = 0.5
DICE_SMOOTHING = 1.0
NORM_EPSILON = 1e-12  # Added inside vector norms for gradient stability

# Frozen encoders are pure functions of these seeds
ENCODER_SEED = 17
PROXY_CLIP_SEED = 29
PROXY_ANCHOR = 0.25  # Constant feature keeping proxy embeddings of empty scenes non-zero
PALETTE_DISTANCE = 0.3  # Pixels further than this from every palette colour count as background

# Diffusion schedule
TIMESTEPS = 10
BETA_START = 0.02
BETA_END = 0.5

# Provenance of the desk-scale reductions
REFERENCE_SPLIT_TOTALS = {"single-turn": 1053, "multi-turn": 535, "multi": 717, "context-aware": 2624}
REFERENCE_ITERATIONS = {"main": 400_000, "surrogate": 1_000, "refine": 400_000}
REFERENCE_CATEGORY_SHARES = {
    Category.ADD: 0.343,
    Category.REPLACE: 0.205,
    Category.REMOVE: 0.211,
    Category.CHANGE: 0.241,
}

DEFAULT_SPLIT_COUNTS = {Split.TRAIN: 256, Split.VAL: 32, Split.TEST: 64}
CHECKPOINT_FORMAT_VERSION = "1"
SURROGATE_VARIANTS = ["predicted", "ground_truth", "empty"]
# Keys that shape the parameter set; a resumed run always keeps the checkpoint's values
ARCHITECTURE_KEYS = ("seed", "lora_rank", "lora_scale", "lora_targets")


@dataclass(frozen=True)
class SceneConfig:
    """Bounds for synthetic scene generation."""

    min_objects: int = 1
    max_objects: int = 4
    min_box: int = 8
    max_retries: int = 200

    def validate(self) -> None:
        if not 1 <= self.min_objects <= self.max_objects <= 4:
            raise ConfigError(
                f"Object count bounds must satisfy 1 <= min <= max <= 4, got {self.min_objects}..{self.max_objects}"
            )
        if self.min_box < GRID or self.min_box % GRID:
            raise ConfigError(f"Minimum box must be a multiple of {GRID} and at least {GRID}")


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance scales for the image and text conditions."""

    image_scale: float = 1.5
    text_scale: float = 7.5


@dataclass
class TrainConfig:
    """Every knob of a training or evaluation run. All keys may appear in a config file."""

    seed: int = 0
    lambda_token: float = 1.0
    lambda_broadcast: float = 1.0
    lambda_dice: float = 1.0
    lambda_bce: float = 1.0
    lambda_mse: float = 10.0
    lr_main: float = 3e-4
    lr_surrogate: float = 3e-4
    lr_refine: float = 1e-4
    weight_decay: float = 0.0
    main_steps: int = 2000
    surrogate_steps: int = 500
    refine_steps: int = 500
    batch_size: int = 16
    lora_rank: int = 4
    lora_scale: float = 1.0
    lora_targets: list[str] = field(default_factory=lambda: ["q", "k", "v", "o"])
    cond_dropout: float = 0.1
    oracle_score: float = 1.0
    surrogate_variants: list[str] = field(default_factory=lambda: list(SURROGATE_VARIANTS))
    image_scale: float = 1.5
    text_scale: float = 7.5
    log_every: int = 50

    def validate(self) -> None:
        for name in ("lr_main", "lr_surrogate", "lr_refine"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"Learning rate '{name}' must be positive")
        for name in ("lambda_token", "lambda_broadcast", "lambda_dice", "lambda_bce", "lambda_mse"):
            if getattr(self, name) < 0:
                raise ConfigError(f"Loss weight '{name}' must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("Batch size must be at least 1")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("Condition dropout must lie in [0, 1)")
        for name in ("main_steps", "surrogate_steps", "refine_steps", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"'{name}' must be at least 1")
        if unknown := set(self.surrogate_variants) - set(SURROGATE_VARIANTS):
            raise ConfigError(
                f"Unknown surrogate mask variants {sorted(unknown)}, choose from {SURROGATE_VARIANTS}"
            )
        if not self.surrogate_variants:
            raise ConfigError("At least one surrogate mask variant is required")

    @property
    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(image_scale=self.image_scale, text_scale=self.text_scale)

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)

    def resumed_from(self, stored: "TrainConfig") -> "TrainConfig":
        """This config with the architecture keys of a checkpoint's config."""
        values = self.as_dict()
        values.update({key: getattr(stored, key) for key in ARCHITECTURE_KEYS})
        return TrainConfig.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "TrainConfig":
        """Build a config from `key = value` pairs, rejecting unknown keys and wrong types."""
        known = {f.name: f for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"Unknown config key '{key}'")
            kwargs[key] = _coerce(key, known[key].type, value)
        config = cls(**kwargs)
        config.validate()
        return config


def _coerce(key: str, expected: Any, value: Any) -> Any:
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"Config key '{key}' expects an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"Config key '{key}' expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, list) or not all(isinstance(item, str) for item in value):
        raise ConfigError(f"Config key '{key}' expects a list of strings, got {value!r}")
    return list(value)


def load_train_config(path: Path | None) -> TrainConfig:
    """Read a TOML `key = value` config file. `None` gives the defaults."""
    if path is None:
        return TrainConfig()
    try:
        with path.open("rb") as f:
            values = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file '{path}' does not exist") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Can't parse config file '{path}': {e}") from e
    return TrainConfig.from_dict(values)
