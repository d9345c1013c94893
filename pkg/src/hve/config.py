"""Run configuration: one JSON document, strict keys, defaults from the reference setup."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from hve.errors import ConfigError

FUSION_MODES = ("text_only", "concat", "image_attention", "object_attention", "image_object", "full")
DISTANCE_VARIANTS = ("weighted_embeddings", "scalar_mean_alpha")


@dataclass
class ModelConfig:
    d_proj: int = 256
    d_att: int | None = None  # None -> d_proj
    d_o: int = 50
    d_text: int = 768
    d_image: int = 512
    k_obj: int = 2
    k_shot: int = 1  # rows of the hybrid-attention kernel; synced from EpisodeConfig
    fusion_mode: str = "full"
    distance_variant: str = "weighted_embeddings"
    dropout: float = 0.2
    ball_eps: float = 1e-5
    ln_eps: float = 1e-5

    @property
    def att_dim(self):
        return self.d_proj if self.d_att is None else self.d_att

    def validate(self):
        errs = []
        for name in ("d_proj", "d_o", "d_text", "d_image", "k_obj", "k_shot"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                errs.append(f"model.{name}: must be a positive integer")
        if self.d_att is not None and (not isinstance(self.d_att, int) or self.d_att < 1):
            errs.append("model.d_att: must be a positive integer or null")
        if self.fusion_mode not in FUSION_MODES:
            errs.append(f"model.fusion_mode: {self.fusion_mode!r} not in {FUSION_MODES}")
        if self.distance_variant not in DISTANCE_VARIANTS:
            errs.append(f"model.distance_variant: {self.distance_variant!r} not in {DISTANCE_VARIANTS}")
        if not 0.0 <= self.dropout < 1.0:
            errs.append("model.dropout: must be in [0, 1)")
        if not 0.0 < self.ball_eps < 1.0:
            errs.append("model.ball_eps: must be in (0, 1)")
        return errs


@dataclass
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 1

    def validate(self):
        errs = []
        if not isinstance(self.n_way, int) or self.n_way < 2:
            errs.append("episode.n_way: must be an integer >= 2")
        for name in ("k_shot", "q_query"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                errs.append(f"episode.{name}: must be an integer >= 1")
        return errs


@dataclass
class OptimConfig:
    lr: float = 0.1
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        errs = []
        if not self.lr > 0:
            errs.append("optim.lr: must be positive")
        if self.weight_decay < 0:
            errs.append("optim.weight_decay: must be non-negative")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errs.append(f"optim.{name}: must be in [0, 1)")
        if not self.eps > 0:
            errs.append("optim.eps: must be positive")
        return errs


@dataclass
class TrainConfig:
    episodes: int = 2000
    val_every: int = 200
    val_episodes: int = 200
    workers: int = 1

    def validate(self):
        errs = []
        if not isinstance(self.episodes, int) or self.episodes < 0:
            errs.append("train.episodes: must be a non-negative integer")
        for name in ("val_every", "val_episodes", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                errs.append(f"train.{name}: must be a positive integer")
        return errs


@dataclass
class PathsConfig:
    train_manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None
    glove: str | None = None
    out_dir: str = "runs/default"

    def validate(self):
        return []


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def __post_init__(self):
        self.model.k_shot = self.episode.k_shot

    def validate(self):
        errs = []
        for sec in (self.model, self.episode, self.optim, self.train, self.paths):
            errs.extend(sec.validate())
        if not isinstance(self.seed, int) or self.seed < 0:
            errs.append("seed: must be a non-negative integer")
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        del d["model"]["k_shot"]
        return d


_SECTIONS = {
    "model": ModelConfig,
    "episode": EpisodeConfig,
    "optim": OptimConfig,
    "train": TrainConfig,
    "paths": PathsConfig,
}
_FLOAT_KEYS = {"dropout", "ball_eps", "ln_eps", "lr", "weight_decay", "beta1", "beta2", "eps"}


def config_from_dict(doc, base_dir=None):
    """Build a validated :class:`RunConfig`; every unknown or ill-typed key is reported."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a JSON object")
    errs = []
    sections = {}
    for key, value in doc.items():
        if key == "seed":
            continue
        if key not in _SECTIONS:
            errs.append(f"{key}: unknown key")
            continue
        cls = _SECTIONS[key]
        if not isinstance(value, dict):
            errs.append(f"{key}: must be an object")
            continue
        known = {f.name for f in dataclasses.fields(cls)} - {"k_shot" if key == "model" else ""}
        kwargs = {}
        for k, v in value.items():
            if k not in known:
                errs.append(f"{key}.{k}: unknown key")
            elif k in _FLOAT_KEYS:
                if isinstance(v, (int, float)) and not isinstance(v, bool):
                    kwargs[k] = float(v)
                else:
                    errs.append(f"{key}.{k}: must be a number")
            else:
                kwargs[k] = v
        sections[key] = cls(**kwargs)
    cfg = RunConfig(**sections, seed=doc.get("seed", 0))
    if base_dir is not None:
        for name in ("train_manifest", "val_manifest", "test_manifest", "glove", "out_dir"):
            p = getattr(cfg.paths, name)
            if p is not None and not Path(p).is_absolute():
                setattr(cfg.paths, name, str(Path(base_dir) / p))
    try:
        cfg.validate()
    except ConfigError as exc:
        errs.extend(exc.problems)
    if errs:
        raise ConfigError(errs)
    return cfg


def load_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(doc, base_dir=path.parent)
