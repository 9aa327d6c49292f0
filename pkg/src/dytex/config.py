"""Line-oriented run configuration (``key = value`` under section headers).

Unknown sections or keys are errors so typos never silently fall back
to defaults. Every numeric default matches the documented run
settings; tests and small runs override the training budgets.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .forecaster import ForecasterConfig, ForecasterTrainConfig, SamplerConfig
from .patch_grid import MergeConfig, PatchSpec
from .patchmatch import PatchMatchConfig
from .vqvae import VqvaeConfig, VqvaeTrainConfig

_PADDING_MODES = ("reflect", "edge")


@dataclass
class PipelineConfig:
    source_video: Path
    source_mask: Path
    target_mask: Path
    output: Path
    patchmatch: PatchMatchConfig = field(default_factory=PatchMatchConfig)
    patches: PatchSpec = field(default_factory=lambda: PatchSpec(patch_size=16, stride=4))
    merge: MergeConfig = field(default_factory=MergeConfig)
    vqvae_model: VqvaeConfig = field(default_factory=VqvaeConfig)
    vqvae_train: VqvaeTrainConfig = field(default_factory=VqvaeTrainConfig)
    forecaster_model: ForecasterConfig = field(default_factory=ForecasterConfig)
    forecaster_train: ForecasterTrainConfig = field(default_factory=ForecasterTrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    padding: str = "reflect"

    def __post_init__(self):
        if self.padding not in _PADDING_MODES:
            raise ConfigError(f"padding must be one of {_PADDING_MODES}, got {self.padding!r}")

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Re-derive all stage seeds from one global seed."""
        return replace(
            self,
            seed=seed,
            patchmatch=replace(self.patchmatch, rng_seed=seed),
            vqvae_train=replace(self.vqvae_train, seed=seed + 1),
            forecaster_train=replace(self.forecaster_train, seed=seed + 2),
            sampler=replace(self.sampler, rng_seed=seed + 3),
        )

    def validate_paths(self) -> None:
        if not self.source_video.is_dir():
            raise ConfigError(f"source video directory not found: {self.source_video}")
        for label, p in (("source mask", self.source_mask), ("target mask", self.target_mask)):
            if not p.is_file():
                raise ConfigError(f"{label} not found: {p}")

    def manifest_items(self) -> list[tuple[str, str]]:
        items: list[tuple[str, str]] = [
            ("config.paths.source_video", str(self.source_video)),
            ("config.paths.source_mask", str(self.source_mask)),
            ("config.paths.target_mask", str(self.target_mask)),
            ("config.paths.output", str(self.output)),
            ("config.run.seed", str(self.seed)),
            ("config.run.padding", self.padding),
        ]
        for section, obj in (("patchmatch", self.patchmatch), ("patches", self.patches),
                             ("merge", self.merge), ("vqvae_model", self.vqvae_model),
                             ("vqvae_train", self.vqvae_train),
                             ("forecaster_model", self.forecaster_model),
                             ("forecaster_train", self.forecaster_train),
                             ("sampler", self.sampler)):
            for f in fields(obj):
                if f.name.startswith("_"):
                    continue
                items.append((f"config.{section}.{f.name}", str(getattr(obj, f.name))))
        return items


def _parse_value(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from exc


_SCHEMA: dict[str, dict[str, type]] = {
    "paths": {"source_video": str, "source_mask": str, "target_mask": str, "output": str},
    "patchmatch": {"patch_size": int, "iterations": int, "random_search_decay": float,
                   "w_sem": float, "w_dist": float},
    "patches": {"patch_size": int, "stride": int},
    "merge": {"sigma": float},
    "vqvae": {"hidden": int, "embed_dim": int, "codebook_size": int, "beta": float,
              "steps": int, "batch_size": int, "lr": float, "holdout_fraction": float,
              "log_every": int},
    "forecaster": {"layers": int, "heads": int, "d_model": int, "lr": float,
                   "batch_size": int, "steps": int, "warmup_steps": int,
                   "eval_every": int, "val_fraction": float, "target_accuracy": float},
    "sampler": {"mode": str, "temperature": float},
    "run": {"seed": int, "padding": str},
}


def load_config(path: str | Path, validate: bool = True) -> PipelineConfig:
    """Parse a config file into a ``PipelineConfig``.

    Raises ``ConfigError`` for missing files, unknown sections/keys,
    unparseable values, or (with ``validate``) unresolvable paths.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            values[section][key] = _parse_value(section, key, raw, _SCHEMA[section][key])

    paths = values.get("paths", {})
    for required in ("source_video", "source_mask", "target_mask", "output"):
        if required not in paths:
            raise ConfigError(f"{path}: [paths] must define {required}")

    base = path.parent

    def resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else (base / candidate)

    run = values.get("run", {})
    pm = values.get("patchmatch", {})
    seed = int(run.get("seed", 0))
    try:
        cfg = PipelineConfig(
            source_video=resolve(paths["source_video"]),
            source_mask=resolve(paths["source_mask"]),
            target_mask=resolve(paths["target_mask"]),
            output=resolve(paths["output"]),
            patchmatch=PatchMatchConfig(**pm),
            patches=PatchSpec(**values.get("patches", {})) if "patches" in values
            else PatchSpec(patch_size=16, stride=4),
            merge=MergeConfig(**values.get("merge", {})),
            vqvae_model=VqvaeConfig(**{k: v for k, v in values.get("vqvae", {}).items()
                                       if k in ("hidden", "embed_dim", "codebook_size", "beta")}),
            vqvae_train=VqvaeTrainConfig(**{k: v for k, v in values.get("vqvae", {}).items()
                                            if k in ("steps", "batch_size", "lr",
                                                     "holdout_fraction", "log_every")}),
            forecaster_model=ForecasterConfig(**{k: v for k, v in values.get("forecaster", {}).items()
                                                 if k in ("layers", "heads", "d_model")}),
            forecaster_train=ForecasterTrainConfig(
                **{k: v for k, v in values.get("forecaster", {}).items()
                   if k in ("steps", "batch_size", "lr", "warmup_steps", "eval_every",
                            "val_fraction", "target_accuracy")}),
            sampler=SamplerConfig(**values.get("sampler", {})),
            padding=str(run.get("padding", "reflect")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = cfg.with_seed(seed)
    if validate:
        cfg.validate_paths()
    return cfg
