"""Run configuration: one flat dataclass, a key=value file format, and the
defaults < file < flags merge."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .dataset import MaskSpec
from .losses import LossWeights
from .network import NetworkConfig
from .training import TrainConfig, default_schedule

CONFIG_HEADER = "deoccl-config v1"
DATA_ROOT_ENV = "DEOCCL_DATA_ROOT"


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    data_root: str = "data"
    out_root: str = "runs/default"
    generic_root: str = ""
    holdout: str = ""  # comma-separated appearance tags; empty = last tag per subject
    image_size: int = 256
    base_filters: int = 64
    bottleneck_dim: int = 99
    batchnorm: bool = True
    batch_size: int = 50
    learning_rate: float = 2e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_rec: float = 1.0
    lambda_adv: float = 0.25
    lambda_ssim: float = 60.0
    lambda_mask: float = 1.0
    epoch_scale: float = 1.0
    checkpoint_every: int = 0
    mask_horizontal_margin: float = 0.15
    mask_vertical_margin: float = 0.60
    mask_shape: str = "rectangle"
    fill: float = -1.0
    landmark_provider: str = "synthetic"
    seed: int = 0
    device: str = "cpu"

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            image_size=self.image_size,
            base_filters=self.base_filters,
            bottleneck_dim=self.bottleneck_dim,
            batchnorm=self.batchnorm,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            schedule=default_schedule(self.epoch_scale),
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            weights=LossWeights(self.lambda_rec, self.lambda_adv, self.lambda_ssim, self.lambda_mask),
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            checkpoint_dir=str(Path(self.out_root) / "checkpoints"),
        )

    def mask_spec(self) -> MaskSpec:
        return MaskSpec(self.mask_horizontal_margin, self.mask_vertical_margin, self.mask_shape)

    def validate(self) -> "RunConfig":
        """Build every derived config once so invalid values fail early."""
        self.network()
        self.train()
        self.mask_spec()
        return self

    def to_text(self) -> str:
        lines = [CONFIG_HEADER]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def coerce(key: str, raw: Any) -> Any:
    """Convert ``raw`` (usually a string) to the declared type of ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigFileError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CONFIG_HEADER:
        raise ConfigFileError(f"{source}: first line must be '{CONFIG_HEADER}'")
    out = {}
    for n, line in enumerate(lines[1:], start=2):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigFileError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = coerce(key, value)
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def resolve(file_values: Mapping[str, Any] | None = None, flags: Mapping[str, Any] | None = None, env=None) -> RunConfig:
    """defaults < environment (data root only) < file < flags; ``None`` flags are ignored."""
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    if env.get(DATA_ROOT_ENV):
        values["data_root"] = env[DATA_ROOT_ENV]
    values.update(file_values or {})
    values.update({k: coerce(k, v) for k, v in (flags or {}).items() if v is not None})
    try:
        return RunConfig(**values).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(str(exc)) from None
