"""Run configuration: TOML loading, validation, defaults.

Unknown keys anywhere in the file are an error — a typo like
``autoencoder_lr`` vs ``autoencoer_lr`` silently reverting to a default
is exactly the failure mode this guards against.

Defaults describe a full-scale run: 5-way 5-shot episodes with 15
queries, Adam at 1e-4, a separate 1e-6 rate for the reconstruction
objective, 5 epochs of 10000 episodes.  Desk-scale runs shrink the
episode budgets (see ``scale_config``) rather than these values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "DataConfig",
    "EpisodeConfig",
    "TrainConfig",
    "MetaTaskConfig",
    "RunConfig",
    "load_config",
    "config_from_dict",
    "scale_config",
]


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class DataConfig:
    kind: str = "synthetic"
    image_size: int = 28
    channels: int = 1
    train_classes: int = 20
    val_classes: int = 8
    test_classes: int = 8
    images_per_class: int = 40
    noise_sigma: float = 0.05
    path: str | None = None  # directory kind
    manifest: str | None = None


@dataclass
class EpisodeConfig:
    way: int = 5
    shot: int = 5
    query: int = 15


@dataclass
class TrainConfig:
    epochs: int = 5
    episodes_per_epoch: int = 10000
    lr: float = 1e-4
    autoencoder_lr: float = 1e-6
    inner_lr: float = 0.01
    inner_steps: int = 5
    eval_interval: int = 500
    eval_episodes: int = 200
    test_episodes: int = 10000
    mixed_validation: bool = False
    log_dir: str = "runs/default"


@dataclass
class MetaTaskConfig:
    name: str = "autoencoder"
    lam: float = 1.0  # TOML key: "lambda"
    decoder: str = "shallow"
    images: str = "all"


@dataclass
class RunConfig:
    seed: int = 0
    algo: str = "protonet"
    mode: str = "two-step"
    precision: str = "float64"
    metric: str = "squared"
    loss_reduction: str = "sum"
    ae_after_adaptation: bool = False  # maml only: auxiliary loss on adapted params
    data: DataConfig = field(default_factory=DataConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metatasks: list[MetaTaskConfig] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for mt in d["metatasks"]:
            mt["lambda"] = mt.pop("lam")
        return d


_TOML_KEY_RENAMES = {"lambda": "lam"}


def _fill(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _TOML_KEY_RENAMES.get(key, key)
        where = f"{path}.{key}" if path else key
        if name not in fields:
            raise ConfigError(f"unknown configuration key: {where}")
        if name in ("data", "episode", "train"):
            sub = {"data": DataConfig, "episode": EpisodeConfig, "train": TrainConfig}[name]
            kwargs[name] = _fill(sub, value, where)
        elif name == "metatasks":
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected an array of tables")
            kwargs[name] = [_fill(MetaTaskConfig, item, f"{where}[{i}]") for i, item in enumerate(value)]
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    cfg = _fill(RunConfig, data, "")
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(data)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: RunConfig) -> None:
    _require(cfg.algo in ("protonet", "maml"), f"algo must be 'protonet' or 'maml', got {cfg.algo!r}")
    _require(cfg.mode in ("two-step", "combined"), f"mode must be 'two-step' or 'combined', got {cfg.mode!r}")
    _require(
        cfg.precision in ("float64", "float32"),
        f"precision must be 'float64' or 'float32', got {cfg.precision!r}",
    )
    _require(cfg.metric in ("squared", "euclidean"), f"metric must be 'squared' or 'euclidean', got {cfg.metric!r}")
    _require(
        cfg.loss_reduction in ("sum", "mean"),
        f"loss_reduction must be 'sum' or 'mean', got {cfg.loss_reduction!r}",
    )
    _require(cfg.seed >= 0, f"seed must be >= 0, got {cfg.seed}")

    ep = cfg.episode
    _require(ep.way >= 2, f"episode.way must be >= 2, got {ep.way}")
    _require(ep.shot >= 1, f"episode.shot must be >= 1, got {ep.shot}")
    _require(ep.query >= 1, f"episode.query must be >= 1, got {ep.query}")

    tr = cfg.train
    _require(tr.lr > 0, f"train.lr must be positive, got {tr.lr}")
    _require(tr.inner_lr > 0, f"train.inner_lr must be positive, got {tr.inner_lr}")
    _require(tr.inner_steps >= 1, f"train.inner_steps must be >= 1, got {tr.inner_steps}")
    # 0 disables the auxiliary update pass without removing the task
    _require(tr.autoencoder_lr >= 0, f"train.autoencoder_lr must be >= 0, got {tr.autoencoder_lr}")
    _require(tr.epochs >= 1, f"train.epochs must be >= 1, got {tr.epochs}")
    _require(tr.episodes_per_epoch >= 1, f"train.episodes_per_epoch must be >= 1, got {tr.episodes_per_epoch}")
    _require(tr.eval_interval >= 1, f"train.eval_interval must be >= 1, got {tr.eval_interval}")
    _require(tr.eval_episodes >= 1, f"train.eval_episodes must be >= 1, got {tr.eval_episodes}")
    _require(tr.test_episodes >= 1, f"train.test_episodes must be >= 1, got {tr.test_episodes}")

    d = cfg.data
    _require(d.kind in ("synthetic", "directory"), f"data.kind must be 'synthetic' or 'directory', got {d.kind!r}")
    if d.kind == "synthetic":
        _require(d.image_size in (28, 32), f"data.image_size must be 28 or 32, got {d.image_size}")
        _require(d.channels >= 1, f"data.channels must be >= 1, got {d.channels}")
        _require(d.train_classes >= ep.way, f"data.train_classes ({d.train_classes}) must be >= episode.way ({ep.way})")
        _require(d.val_classes == 0 or d.val_classes >= ep.way, "data.val_classes must be 0 or >= episode.way")
        _require(d.test_classes == 0 or d.test_classes >= ep.way, "data.test_classes must be 0 or >= episode.way")
        _require(
            d.images_per_class >= ep.shot + ep.query,
            f"data.images_per_class ({d.images_per_class}) must cover shot+query ({ep.shot + ep.query})",
        )
        _require(d.noise_sigma >= 0, f"data.noise_sigma must be >= 0, got {d.noise_sigma}")
    else:
        _require(bool(d.path), "data.path is required when data.kind = 'directory'")

    for i, mt in enumerate(cfg.metatasks):
        _require(mt.name == "autoencoder", f"metatasks[{i}].name: unknown meta-task {mt.name!r}")
        _require(mt.lam >= 0, f"metatasks[{i}].lambda must be >= 0, got {mt.lam}")
        _require(
            mt.decoder in ("shallow", "deep"),
            f"metatasks[{i}].decoder must be 'shallow' or 'deep', got {mt.decoder!r}",
        )
        _require(mt.images in ("all", "support"), f"metatasks[{i}].images must be 'all' or 'support', got {mt.images!r}")


def scale_config(cfg: RunConfig, factor: float) -> RunConfig:
    """A copy with episode budgets multiplied by ``factor`` (min 1 each).

    Scales episodes per epoch and the evaluation budgets/interval; leaves
    model, episode shape, and learning rates untouched.
    """
    if factor <= 0:
        raise ConfigError(f"scale factor must be positive, got {factor}")
    out = dataclasses.replace(cfg)
    out.data = dataclasses.replace(cfg.data)
    out.episode = dataclasses.replace(cfg.episode)
    out.metatasks = [dataclasses.replace(mt) for mt in cfg.metatasks]
    tr = dataclasses.replace(cfg.train)
    for name in ("episodes_per_epoch", "eval_interval", "eval_episodes", "test_episodes"):
        setattr(tr, name, max(1, round(getattr(tr, name) * factor)))
    out.train = tr
    return out
