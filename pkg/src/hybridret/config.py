"""Flat ``key = value`` run configuration with presets and command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Union

from hybridret.codetok import AugmentConfig
from hybridret.losses import LossConfig
from hybridret.trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # training
    batch_tuples: int = 8
    steps: int = 300
    lr: float = 1e-3
    momentum: float = 0.999
    queue_size: int = 1024
    dim: int = 64
    max_vocab: int = 8192
    weight_decay: float = 0.01
    queue_exclude_same_problem: bool = False
    disable_mpcl_intra: bool = False
    disable_rpcl: bool = False
    disable_augmentation: bool = False
    # losses
    temperature: float = 0.07
    sigmas: tuple[float, ...] = (0.6, 1.2, 2.4)
    nl2code_bidirectional: bool = True
    # augmentation
    p_mask: float = 0.15
    rename_fraction: float = 0.5
    comment_swap_p: float = 0.5
    use_comments: bool = True
    # corpus preparation
    cap_per_problem: int = 10
    dataset: str = "dataset"
    # evaluation
    alpha: float = 0.5
    alpha_step: float = 0.01
    significance_resamples: int = 100_000
    # paths and seed
    corpus: str = ""
    checkpoint: str = ""
    store: str = ""
    out: str = "."
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_tuples=self.batch_tuples,
            steps=self.steps,
            lr=self.lr,
            momentum=self.momentum,
            queue_size=self.queue_size,
            dim=self.dim,
            max_vocab=self.max_vocab,
            weight_decay=self.weight_decay,
            loss=LossConfig(self.temperature, tuple(self.sigmas), self.nl2code_bidirectional),
            augment=AugmentConfig(self.p_mask, self.rename_fraction, self.comment_swap_p, self.use_comments),
            seed=self.seed,
            disable_mpcl_intra=self.disable_mpcl_intra,
            disable_rpcl=self.disable_rpcl,
            disable_augmentation=self.disable_augmentation,
            queue_exclude_same_problem=self.queue_exclude_same_problem,
        )

    def replace(self, **changes: Any) -> "RunConfig":
        return with_overrides(self, changes)


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    # backbone-scale hyperparameters, kept for reference runs
    "paper": {"lr": 2e-5, "batch_tuples": 40},
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, raw: str) -> Any:
    default = _FIELDS[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def _render_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def with_overrides(cfg: RunConfig, changes: Mapping[str, Any]) -> RunConfig:
    clean = {}
    for k, v in changes.items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        clean[k] = _parse_value(k, v) if isinstance(v, str) else v
    try:
        new = dataclasses.replace(cfg, **clean)
        new.train_config()  # validates ranges
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return new


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``preset = name`` applies a preset first."""
    pairs: dict[str, str] = {}
    preset = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            preset = value
            continue
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    cfg = base or RunConfig()
    if preset is not None:
        cfg = apply_preset(cfg, preset)
    return with_overrides(cfg, pairs)


def render_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_render_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def apply_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (known: {', '.join(sorted(PRESETS))})")
    return with_overrides(cfg, PRESETS[name])


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def config_from_train(tc: TrainConfig) -> RunConfig:
    """Inverse of :meth:`RunConfig.train_config` for the training fields."""
    return RunConfig(
        batch_tuples=tc.batch_tuples, steps=tc.steps, lr=tc.lr, momentum=tc.momentum,
        queue_size=tc.queue_size, dim=tc.dim, max_vocab=tc.max_vocab, weight_decay=tc.weight_decay,
        queue_exclude_same_problem=tc.queue_exclude_same_problem,
        disable_mpcl_intra=tc.disable_mpcl_intra, disable_rpcl=tc.disable_rpcl,
        disable_augmentation=tc.disable_augmentation,
        temperature=tc.loss.temperature, sigmas=tuple(tc.loss.sigmas),
        nl2code_bidirectional=tc.loss.nl2code_bidirectional,
        p_mask=tc.augment.p_mask, rename_fraction=tc.augment.rename_fraction,
        comment_swap_p=tc.augment.comment_swap_p, use_comments=tc.augment.use_comments,
        seed=tc.seed,
    )
