"""Model and run configuration, plus the flat ``key = value`` text format.

The text format is deliberately strict: unknown keys are errors, so a
misspelled hyperparameter can never silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

HEAD_VERSIONS = ("v1", "v2", "v3", "v4", "v5")


@dataclass
class ModelConfig:
    """Architectural hyperparameters of the counting network."""

    base_width: int = 32
    rm_per_phase: tuple = (1, 2, 2)
    head_version: str = "v5"
    count_weights: tuple = (0.1, 0.1, 0.1, 0.7)
    use_prior_i1: bool = True
    use_prior_i3: bool = True
    use_auxiliary_heads: bool = True
    patch_side: int = 128

    def validate(self):
        self.rm_per_phase = tuple(self.rm_per_phase)
        self.count_weights = tuple(self.count_weights)
        if self.base_width < 1:
            raise ValueError(f"base_width must be positive, got {self.base_width}")
        if len(self.rm_per_phase) != 3 or any(n < 1 for n in self.rm_per_phase):
            raise ValueError(
                f"rm_per_phase needs three entries >= 1, got {self.rm_per_phase}")
        if self.head_version not in HEAD_VERSIONS:
            raise ValueError(f"unknown head_version {self.head_version!r}")
        if len(self.count_weights) != 4 or any(w < 0 for w in self.count_weights):
            raise ValueError(
                f"count_weights needs four non-negative entries, got "
                f"{self.count_weights}")
        if abs(sum(self.count_weights) - 1.0) > 1e-9:
            raise ValueError(
                f"count_weights must sum to 1, got sum {sum(self.count_weights)!r}")
        if self.patch_side < 16 or self.patch_side % 16:
            raise ValueError(
                f"patch_side must be a positive multiple of 16, got {self.patch_side}")
        return self


@dataclass
class RunConfig:
    """Everything a command needs: the model plus data/training settings."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train_annotations: Optional[str] = None
    eval_annotations: Optional[str] = None
    out_dir: str = "run"
    seed: int = 0
    batch_size: int = 32
    epochs: int = 100
    lr: float = 0.001
    lr_halve_every: int = 25
    momentum: float = 0.9
    weight_decay: float = 0.0001
    val_fraction: float = 0.1
    train_patches: int = 60000
    augment_flip: bool = True
    precision: str = "f32"

    def validate(self):
        self.model.validate()
        if not (0 <= self.seed < 2 ** 64):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 < self.val_fraction < 1):
            raise ValueError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        return self


# -- text round trip ----------------------------------------------------------

def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_MODEL_PARSERS = {
    "base_width": int,
    "rm_per_phase": lambda s: tuple(int(v) for v in s.split(",")),
    "head_version": str,
    "count_weights": lambda s: tuple(float(v) for v in s.split(",")),
    "use_prior_i1": None,  # bool, handled below
    "use_prior_i3": None,
    "use_auxiliary_heads": None,
    "patch_side": int,
}

_RUN_PARSERS = {
    "train_annotations": str,
    "eval_annotations": str,
    "out_dir": str,
    "seed": int,
    "batch_size": int,
    "epochs": int,
    "lr": float,
    "lr_halve_every": int,
    "momentum": float,
    "weight_decay": float,
    "val_fraction": float,
    "train_patches": int,
    "augment_flip": None,
    "precision": str,
}


def _parse_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def parse_kv_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def model_config_to_text(cfg: ModelConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in fields(ModelConfig)]
    return "\n".join(lines) + "\n"


def model_config_from_items(items: dict) -> ModelConfig:
    cfg = ModelConfig()
    for key, raw in items.items():
        if key not in _MODEL_PARSERS:
            raise ValueError(f"unknown model config key {key!r}")
        parser = _MODEL_PARSERS[key] or _parse_bool
        setattr(cfg, key, parser(raw))
    return cfg.validate()


def model_config_from_text(text: str) -> ModelConfig:
    return model_config_from_items(parse_kv_text(text))


def run_config_to_text(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg.model, f.name))}"
             for f in fields(ModelConfig)]
    for f in fields(RunConfig):
        if f.name == "model":
            continue
        value = getattr(cfg, f.name)
        if value is None:
            continue
        lines.append(f"{f.name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def run_config_from_text(text: str) -> RunConfig:
    items = parse_kv_text(text)
    model_items = {k: v for k, v in items.items() if k in _MODEL_PARSERS}
    cfg = RunConfig(model=model_config_from_items(model_items))
    for key, raw in items.items():
        if key in _MODEL_PARSERS:
            continue
        if key not in _RUN_PARSERS:
            raise ValueError(f"unknown config key {key!r}")
        parser = _RUN_PARSERS[key] or _parse_bool
        setattr(cfg, key, parser(raw))
    return cfg.validate()
