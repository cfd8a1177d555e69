"""Run configuration: flat dotted-key text files plus command-line overrides.

Config files hold one `key = value` assignment per line (# starts a
comment). Every key is validated against the schema below; unknown keys are
rejected. The fully resolved configuration is echoed into the run directory
before any work starts, and that echo is itself a loadable config file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .loss import LossConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """A configuration file or override is invalid."""


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_str(raw: str) -> str:
    return raw.strip().strip('"').strip("'")


# key -> (parser, default). None defaults mean "optional, may stay unset".
SCHEMA: dict[str, tuple] = {
    "model.tree_depth": (int, 2),
    "model.branching": (int, 2),
    "model.residual_groups": (int, 2),
    "model.blocks_per_group": (int, 4),
    "model.channels": (int, 64),
    "model.scale": (int, 4),
    "model.reduction": (int, 16),
    "model.deep_residual": (_parse_bool, True),
    "loss.alpha": (float, 0.1),
    "loss.margin": (float, 0.1),
    "loss.theta": (float, 0.5),
    "loss.distance": (_parse_str, "mean-squared"),
    "loss.use_abs": (_parse_bool, True),
    "loss.sigma_epsilon": (float, 1e-8),
    "train.batch_size": (int, 4),
    "train.lr_patch": (int, 24),
    "train.initial_lr": (float, 1e-4),
    "train.halve_every": (int, 2000),
    "train.adam_beta1": (float, 0.9),
    "train.adam_beta2": (float, 0.999),
    "train.adam_epsilon": (float, 1e-8),
    "train.max_epochs": (int, 1),
    "train.max_steps": (int, None),
    "train.grad_clip": (float, None),
    "train.checkpoint_every": (int, None),
    "data.train_manifest": (_parse_str, None),
    "data.test_manifest": (_parse_str, None),
    "run.seed": (int, 0),
    "run.output_root": (_parse_str, "runs"),
    "run.name": (_parse_str, "run"),
}


@dataclass
class RunConfig:
    """All resolved keys, with typed views over each module's slice."""

    values: dict

    @property
    def model(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            tree_depth=v["model.tree_depth"],
            branching=v["model.branching"],
            residual_groups=v["model.residual_groups"],
            blocks_per_group=v["model.blocks_per_group"],
            channels=v["model.channels"],
            scale=v["model.scale"],
            reduction=v["model.reduction"],
            deep_residual=v["model.deep_residual"],
        )

    @property
    def loss(self) -> LossConfig:
        v = self.values
        return LossConfig(
            alpha=v["loss.alpha"],
            margin=v["loss.margin"],
            theta=v["loss.theta"],
            distance=v["loss.distance"],
            use_abs=v["loss.use_abs"],
            sigma_epsilon=v["loss.sigma_epsilon"],
        )

    def train(self, stage: str) -> TrainConfig:
        v = self.values
        return TrainConfig(
            stage=stage,
            batch_size=v["train.batch_size"],
            lr_patch=v["train.lr_patch"],
            initial_lr=v["train.initial_lr"],
            halve_every=v["train.halve_every"],
            adam_beta1=v["train.adam_beta1"],
            adam_beta2=v["train.adam_beta2"],
            adam_epsilon=v["train.adam_epsilon"],
            max_epochs=v["train.max_epochs"],
            max_steps=v["train.max_steps"],
            grad_clip=v["train.grad_clip"],
            checkpoint_every=v["train.checkpoint_every"],
            seed=v["run.seed"],
            loss=self.loss,
        )

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def run_dir(self) -> Path:
        return Path(self.values["run.output_root"]) / self.values["run.name"]

    def manifest_path(self, which: str) -> Path:
        key = f"data.{which}_manifest"
        if self.values.get(key) is None:
            raise ConfigError(f"config key {key} is required for this command")
        return Path(self.values[key])

    def echo_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if value is None:
                continue
            if isinstance(value, bool):
                rendered = "true" if value else "false"
            elif isinstance(value, float):
                rendered = repr(value)
            else:
                rendered = str(value)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"


def parse_assignments(lines, source: str) -> dict[str, str]:
    """Parse `key = value` lines into a raw-string mapping."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(
    config_path: str | Path | None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """Load a config file, apply --set overrides, and validate the schema."""
    raw: dict[str, str] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"{path}: no such config file")
        raw.update(parse_assignments(path.read_text().splitlines(), str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()

    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    values: dict = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            text = raw[key]
            if text.lower() == "none":
                values[key] = None
                continue
            try:
                values[key] = parser(text)
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
        else:
            values[key] = default

    cfg = RunConfig(values)
    try:
        _ = cfg.model
        _ = cfg.loss
    except ValueError as exc:  # bad combinations fail at resolve time
        raise ConfigError(str(exc)) from exc
    return cfg
