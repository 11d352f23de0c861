"""Flat key=value run configuration.

One key per line, ``#`` starts a comment, blank lines are ignored.
Unknown or duplicate keys are rejected so a manifest diff is always
meaningful. ``render_config`` materializes every key with its resolved
value; feeding that text back through ``parse_config`` reproduces the
run exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .data import DatasetSpec
from .encoder import EncoderSpec


class ConfigError(ValueError):
    """Configuration text violates the schema."""


@dataclass
class RunConfig:
    # data source: explicit store path wins over the synthetic schema
    store: str | None = None
    classes_base: int = 10
    classes_incremental: int = 6
    sessions: int = 3
    ways: int = 2
    shots: int = 5
    input_dim: int = 32
    train_per_class: int = 200
    test_per_class: int = 50
    separation: float = 3.0

    # encoder
    hidden_dims: tuple[int, ...] = (64,)
    feature_dim: int = 32
    projection_dim: int = 16

    # optimization
    epochs_base: int = 40
    epochs_incremental: int = 10
    batch: int = 64
    lr: float = 0.05
    sgd_momentum: float = 0.9

    # method
    transforms: int = 1
    delta: float = 0.5
    tau: float = 0.07
    queue: int = 1024
    ema: float = 0.999
    jitter: float = 0.05
    noise_scale: float = 1.0
    ablation: str = "full"
    mixture: str = "aug+aug"
    aggregation: str = "sum"
    finetune_incremental: bool = False

    # run control
    seed: int = 0
    baseline: str | None = None
    sweep_deltas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    out: str = "runs/latest"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_opt_str(text: str) -> str | None:
    return text.strip() or None


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(part) for part in text.split(","))


def _render_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELDS = {f.name: f for f in fields(RunConfig)}

_PARSERS = {
    "str": str.strip,
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str | None": _parse_opt_str,
    "tuple[int, ...]": _parse_int_tuple,
    "tuple[float, ...]": _parse_float_tuple,
}


def _parser_for(name: str):
    f = _FIELDS[name]
    key = f.type if isinstance(f.type, str) else f.type.__name__
    return _PARSERS[key]


def parse_config(text: str) -> RunConfig:
    """Parse key=value text into a fully defaulted RunConfig."""
    values: dict[str, object] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        try:
            values[key] = _parser_for(key)(value)
        except ValueError as e:
            raise ConfigError(f"line {line_no}: bad value for {key!r}: {e}") from None
    config = RunConfig(**values)
    validate_config(config)
    return config


def load_config(path) -> RunConfig:
    try:
        with open(path, "r") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None


def render_config(config: RunConfig) -> str:
    """Materialize every key in declaration order, one per line."""
    lines = [f"{f.name}={_render_value(getattr(config, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def validate_config(config: RunConfig) -> None:
    positive = (
        "classes_base", "sessions", "ways", "shots", "input_dim", "train_per_class",
        "test_per_class", "feature_dim", "projection_dim", "epochs_incremental",
        "queue",
    )
    for name in positive:
        if getattr(config, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(config, name)}")
    if config.classes_incremental < 0:
        raise ConfigError(f"classes_incremental must be >= 0, got {config.classes_incremental}")
    if config.epochs_base < 0:
        raise ConfigError(f"epochs_base must be >= 0, got {config.epochs_base}")
    if config.batch < 2:
        raise ConfigError(f"batch must be >= 2, got {config.batch}")
    if config.transforms < 0:
        raise ConfigError(f"transforms must be >= 0, got {config.transforms}")
    if config.lr <= 0:
        raise ConfigError(f"lr must be positive, got {config.lr}")
    if not 0.0 <= config.sgd_momentum < 1.0:
        raise ConfigError(f"sgd_momentum must lie in [0, 1), got {config.sgd_momentum}")
    if not 0.0 <= config.delta <= 1.0:
        raise ConfigError(f"delta must lie in [0, 1], got {config.delta}")
    if config.tau <= 0:
        raise ConfigError(f"tau must be positive, got {config.tau}")
    if not 0.0 <= config.ema <= 1.0:
        raise ConfigError(f"ema must lie in [0, 1], got {config.ema}")
    if config.jitter < 0 or config.noise_scale < 0:
        raise ConfigError("jitter and noise_scale must be non-negative")
    if config.seed < 0:
        raise ConfigError(f"seed must be non-negative, got {config.seed}")
    if config.aggregation not in ("sum", "max"):
        raise ConfigError(f"aggregation must be sum or max, got {config.aggregation!r}")
    for d in config.sweep_deltas:
        if not 0.0 <= d <= 1.0:
            raise ConfigError(f"sweep delta {d} outside [0, 1]")
    try:
        dataset_spec(config)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def dataset_spec(config: RunConfig) -> DatasetSpec:
    return DatasetSpec(
        base_classes=config.classes_base,
        incremental_classes=config.classes_incremental,
        sessions=config.sessions,
        ways=config.ways,
        shots=config.shots,
        input_dim=config.input_dim,
        train_per_class=config.train_per_class,
        test_per_class=config.test_per_class,
    )


def encoder_spec(config: RunConfig) -> EncoderSpec:
    return EncoderSpec(
        input_dim=config.input_dim,
        hidden_dims=config.hidden_dims,
        feature_dim=config.feature_dim,
        projection_dim=config.projection_dim,
    )


def with_overrides(config: RunConfig, **overrides) -> RunConfig:
    updated = replace(config, **overrides)
    validate_config(updated)
    return updated
