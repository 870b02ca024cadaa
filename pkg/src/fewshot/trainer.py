"""Episodic training loop, evaluation, and run artifacts.

Two update schedules are supported per episode:

* ``two-step``: update on the classification loss first, then run the
  auxiliary (reconstruction) objective as a separate forward/backward
  with its own optimizer and learning rate.
* ``combined``: one backward pass on ``task + sum(lambda * aux)`` and a
  single optimizer over all parameters.

Auxiliary terms never run during evaluation: test-time behaviour is the
plain classifier.  Every run writes ``metrics.jsonl`` (one JSON object
per logged event), ``summary.csv``, and ``checkpoint.npz`` under the
run's log directory; identical config and seed reproduce these byte for
byte.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ConfigError, DataConfig, RunConfig
from .episodes import (
    ClassIndexedDataset,
    Episode,
    generate_synthetic,
    load_image_folder,
    sample_episode,
)
from .maml import AdaptConfig, inner_adapt, query_result
from .metatask import LossBreakdown, ReconstructionTask, RegTerm, composite_loss
from .metrics import PredictionRecord, RunningStats
from .models import (
    ArchSpec,
    Encoder,
    LinearHead,
    build_decoder,
    build_encoder,
    build_head,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from .optim import Adam
from .protonet import episode_loss, episode_loss_from_embeddings
from .tensor import NonFiniteError, Tape, Tensor, backward, no_grad, scale

__all__ = [
    "TrainState",
    "TrainResult",
    "TrainingAborted",
    "EvalSummary",
    "build_datasets",
    "build_state",
    "train",
    "evaluate_embeddings",
    "evaluate_protonet",
    "evaluate_maml",
    "evaluate_checkpoint",
]


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss stops a run; the last saved
    checkpoint remains valid."""

    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ----------------------------------------------------------------------
# state construction
# ----------------------------------------------------------------------


def build_datasets(data: DataConfig, seed: int) -> dict[str, ClassIndexedDataset]:
    if data.kind == "synthetic":
        rng = np.random.default_rng([seed, 101])
        out = {}
        for split, count in (
            ("train", data.train_classes),
            ("val", data.val_classes),
            ("test", data.test_classes),
        ):
            if count > 0:
                out[split] = generate_synthetic(
                    count,
                    data.images_per_class,
                    data.noise_sigma,
                    rng,
                    image_size=data.image_size,
                    channels=data.channels,
                    name=split,
                    class_prefix=split,
                )
        return out
    datasets = load_image_folder(data.path, data.manifest, channels=data.channels)
    if "train" not in datasets:
        raise ConfigError(f"directory dataset at {data.path} has no 'train' split")
    return datasets


@dataclass
class TrainState:
    cfg: RunConfig
    arch: ArchSpec
    dtype: type
    datasets: dict[str, ClassIndexedDataset]
    encoder: Encoder
    head: LinearHead | None
    regs: list[ReconstructionTask]
    opt_main: Adam
    opt_aux: Adam | None
    adapt_cfg: AdaptConfig | None
    n_model_params: int  # encoder (+head) tensors at the front of opt_main

    def active_regs(self) -> list[ReconstructionTask]:
        return [r for r in self.regs if r.lam > 0]


def build_state(cfg: RunConfig) -> TrainState:
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    datasets = build_datasets(cfg.data, cfg.seed)
    c, h, w = datasets["train"].image_shape
    if h != w:
        raise ConfigError(f"images must be square, got {h}x{w}")
    arch = ArchSpec(image_size=h, in_channels=c, channels=64)
    if cfg.episode.way > datasets["train"].num_classes:
        raise ConfigError(
            f"train split has {datasets['train'].num_classes} classes, "
            f"need at least episode.way={cfg.episode.way}"
        )

    # one stream, fixed draw order: encoder, head, then decoders — adding
    # or removing auxiliary tasks never changes the model initialization
    rng = np.random.default_rng([cfg.seed, 0])
    encoder = build_encoder(arch, rng, dtype)
    head = build_head(arch, cfg.episode.way, rng, dtype) if cfg.algo == "maml" else None
    regs = [
        ReconstructionTask(build_decoder(arch, mt.decoder, rng, dtype), lam=mt.lam, images=mt.images)
        for mt in cfg.metatasks
    ]

    model_params = encoder.parameters() + (head.parameters() if head else [])
    main_params = list(model_params)
    active = [r for r in regs if r.lam > 0]
    if cfg.mode == "combined":
        for r in active:
            main_params.extend(r.parameters())
    opt_main = Adam(main_params, cfg.train.lr)

    opt_aux = None
    if cfg.mode == "two-step" and active and cfg.train.autoencoder_lr > 0:
        aux_params = encoder.parameters() + [p for r in active for p in r.parameters()]
        opt_aux = Adam(aux_params, cfg.train.autoencoder_lr)

    adapt_cfg = (
        AdaptConfig(inner_lr=cfg.train.inner_lr, inner_steps=cfg.train.inner_steps)
        if cfg.algo == "maml"
        else None
    )
    return TrainState(
        cfg=cfg,
        arch=arch,
        dtype=dtype,
        datasets=datasets,
        encoder=encoder,
        head=head,
        regs=regs,
        opt_main=opt_main,
        opt_aux=opt_aux,
        adapt_cfg=adapt_cfg,
        n_model_params=len(model_params),
    )


# ----------------------------------------------------------------------
# per-episode updates
# ----------------------------------------------------------------------


def _reg_images(reg: ReconstructionTask, episode: Episode, dtype) -> Tensor:
    if reg.image_mode == "support":
        arr = episode.support_images
    else:
        arr = np.concatenate([episode.support_images, episode.query_images])
    return Tensor(arr.astype(dtype))


def _aux_enabled(state: TrainState) -> bool:
    return state.opt_aux is not None


def _breakdown(task_value: float, pairs) -> LossBreakdown:
    terms = []
    total = task_value
    for reg, raw in pairs:
        if raw is None:
            terms.append(RegTerm(name=reg.name, lam=0.0, raw=None, weighted=0.0))
        else:
            value = float(raw.data)
            terms.append(RegTerm(name=reg.name, lam=reg.lam, raw=value, weighted=reg.lam * value))
            total += reg.lam * value
    return LossBreakdown(task=task_value, terms=terms, total=total)


def _aux_pass(state: TrainState, episode: Episode) -> list:
    """Separate forward/backward/update for the auxiliary objective
    (two-step mode).  Returns (regularizer, raw loss) pairs for logging."""
    pairs = []
    with Tape():
        aux_total = None
        for reg in state.regs:
            if reg.lam > 0:
                raw = reg.loss(_reg_images(reg, episode, state.dtype), state.encoder)
                pairs.append((reg, raw))
                term = scale(raw, reg.lam)
                aux_total = term if aux_total is None else aux_total + term
            else:
                pairs.append((reg, None))
        backward(aux_total)
    state.opt_aux.step()
    state.opt_aux.zero_grad()
    return pairs


def _protonet_step(state: TrainState, episode: Episode) -> tuple[LossBreakdown, float]:
    cfg = state.cfg
    if cfg.mode == "combined":
        with Tape():
            res = episode_loss(state.encoder, episode, cfg.metric, cfg.loss_reduction, state.dtype)
            pairs = []
            for reg in state.regs:
                raw = (
                    reg.loss(_reg_images(reg, episode, state.dtype), state.encoder)
                    if reg.lam > 0
                    else None
                )
                pairs.append((reg, raw))
            total, breakdown = composite_loss([res.loss], pairs)
            backward(total)
        state.opt_main.step()
        state.opt_main.zero_grad()
        return breakdown, res.accuracy

    with Tape():
        res = episode_loss(state.encoder, episode, cfg.metric, cfg.loss_reduction, state.dtype)
        backward(res.loss)
    state.opt_main.step()
    state.opt_main.zero_grad()
    if _aux_enabled(state):
        pairs = _aux_pass(state, episode)
    else:
        pairs = [(reg, None) for reg in state.regs]
    return _breakdown(res.loss_value, pairs), res.accuracy


def _maml_step(state: TrainState, episode: Episode) -> tuple[LossBreakdown, float]:
    cfg = state.cfg
    adapted_enc, adapted_head = inner_adapt(
        state.encoder, state.head, episode, state.adapt_cfg, state.dtype
    )
    adapted_params = adapted_enc.parameters() + adapted_head.parameters()
    model_params = state.opt_main.params[: state.n_model_params]

    if cfg.mode == "combined":
        with Tape():
            qres = query_result(adapted_enc, adapted_head, episode, cfg.loss_reduction, state.dtype)
            pairs = []
            for reg in state.regs:
                if reg.lam > 0:
                    base = adapted_enc if cfg.ae_after_adaptation else state.encoder
                    raw = reg.loss(_reg_images(reg, episode, state.dtype), base)
                    pairs.append((reg, raw))
                else:
                    pairs.append((reg, None))
            total, breakdown = composite_loss([qres.loss], pairs)
            backward(total)
        grads = []
        for orig, adapted in zip(model_params, adapted_params):
            g = adapted.grad
            if orig.grad is not None:  # auxiliary path touches the originals
                g = orig.grad if g is None else g + orig.grad
            grads.append(g)
        grads.extend(p.grad for p in state.opt_main.params[state.n_model_params :])
        state.opt_main.step(grads)
        state.opt_main.zero_grad()
        return breakdown, qres.accuracy

    with Tape():
        qres = query_result(adapted_enc, adapted_head, episode, cfg.loss_reduction, state.dtype)
        backward(qres.loss)
    state.opt_main.step([p.grad for p in adapted_params])
    state.opt_main.zero_grad()
    if _aux_enabled(state):
        pairs = _aux_pass(state, episode)
    else:
        pairs = [(reg, None) for reg in state.regs]
    return _breakdown(qres.loss_value, pairs), qres.accuracy


def train_episode(state: TrainState, episode: Episode) -> tuple[LossBreakdown, float]:
    if state.cfg.algo == "maml":
        return _maml_step(state, episode)
    return _protonet_step(state, episode)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------


@dataclass
class EvalSummary:
    episodes: int
    way: int
    shot: int
    query: int
    mean_loss: float
    std_loss: float
    mean_accuracy: float
    std_accuracy: float

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "way": self.way,
            "shot": self.shot,
            "query": self.query,
            "mean_loss": self.mean_loss,
            "std_loss": self.std_loss,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
        }


def evaluate_embeddings(
    embed_fn: Callable[[np.ndarray], np.ndarray],
    dataset: ClassIndexedDataset,
    way: int,
    shot: int,
    query: int,
    episodes: int,
    seed,
    metric: str = "squared",
    reduction: str = "sum",
    collect_records: bool = False,
) -> tuple[EvalSummary, list[PredictionRecord]]:
    """Prototype-based evaluation over freshly sampled episodes.

    ``embed_fn`` maps an image batch to embedding rows; injecting it
    keeps this routine testable with hand-built embeddings.
    """
    rng = np.random.default_rng(seed)
    acc_stats, loss_stats = RunningStats(), RunningStats()
    records: list[PredictionRecord] = []
    for e in range(episodes):
        ep = sample_episode(dataset, way, shot, query, rng)
        with no_grad():
            res = episode_loss_from_embeddings(
                Tensor(embed_fn(ep.support_images)),
                Tensor(embed_fn(ep.query_images)),
                ep.query_labels,
                way,
                shot,
                metric=metric,
                reduction=reduction,
            )
        acc_stats.push(res.accuracy)
        loss_stats.push(res.loss_value)
        if collect_records:
            for true, pred in zip(ep.query_labels, res.predictions):
                records.append(
                    PredictionRecord(
                        episode=e,
                        true_class=ep.class_map[int(true)],
                        predicted_class=ep.class_map[int(pred)],
                    )
                )
    summary = EvalSummary(
        episodes=episodes,
        way=way,
        shot=shot,
        query=query,
        mean_loss=loss_stats.mean,
        std_loss=loss_stats.std,
        mean_accuracy=acc_stats.mean,
        std_accuracy=acc_stats.std,
    )
    return summary, records


def evaluate_protonet(
    encoder: Encoder,
    dataset: ClassIndexedDataset,
    way: int,
    shot: int,
    query: int,
    episodes: int,
    seed,
    metric: str = "squared",
    reduction: str = "sum",
    dtype=np.float64,
    collect_records: bool = False,
) -> tuple[EvalSummary, list[PredictionRecord]]:
    def embed_fn(images: np.ndarray) -> np.ndarray:
        with no_grad():
            return encode(encoder, Tensor(images.astype(dtype))).data

    return evaluate_embeddings(
        embed_fn, dataset, way, shot, query, episodes, seed,
        metric=metric, reduction=reduction, collect_records=collect_records,
    )


def evaluate_maml(
    encoder: Encoder,
    head: LinearHead,
    dataset: ClassIndexedDataset,
    shot: int,
    query: int,
    episodes: int,
    seed,
    adapt_cfg: AdaptConfig,
    reduction: str = "sum",
    dtype=np.float64,
    collect_records: bool = False,
) -> tuple[EvalSummary, list[PredictionRecord]]:
    """Adapt to each episode's support set, then score its queries.

    Adaptation works on copies; the passed-in parameters are unchanged.
    The episode way is fixed by the head's output size.
    """
    way = head.b.shape[0]
    rng = np.random.default_rng(seed)
    acc_stats, loss_stats = RunningStats(), RunningStats()
    records: list[PredictionRecord] = []
    for e in range(episodes):
        ep = sample_episode(dataset, way, shot, query, rng)
        a_enc, a_head = inner_adapt(encoder, head, ep, adapt_cfg, dtype)
        with no_grad():
            qres = query_result(a_enc, a_head, ep, reduction, dtype)
        acc_stats.push(qres.accuracy)
        loss_stats.push(qres.loss_value)
        if collect_records:
            for true, pred in zip(ep.query_labels, qres.predictions):
                records.append(
                    PredictionRecord(
                        episode=e,
                        true_class=ep.class_map[int(true)],
                        predicted_class=ep.class_map[int(pred)],
                    )
                )
    summary = EvalSummary(
        episodes=episodes,
        way=way,
        shot=shot,
        query=query,
        mean_loss=loss_stats.mean,
        std_loss=loss_stats.std,
        mean_accuracy=acc_stats.mean,
        std_accuracy=acc_stats.std,
    )
    return summary, records


def _evaluate_state(
    state: TrainState,
    dataset: ClassIndexedDataset,
    episodes: int,
    seed,
    collect_records: bool = False,
) -> tuple[EvalSummary, list[PredictionRecord]]:
    cfg = state.cfg
    if cfg.algo == "maml":
        return evaluate_maml(
            state.encoder,
            state.head,
            dataset,
            cfg.episode.shot,
            cfg.episode.query,
            episodes,
            seed,
            state.adapt_cfg,
            reduction=cfg.loss_reduction,
            dtype=state.dtype,
            collect_records=collect_records,
        )
    return evaluate_protonet(
        state.encoder,
        dataset,
        cfg.episode.way,
        cfg.episode.shot,
        cfg.episode.query,
        episodes,
        seed,
        metric=cfg.metric,
        reduction=cfg.loss_reduction,
        dtype=state.dtype,
        collect_records=collect_records,
    )


def evaluate_checkpoint(
    checkpoint_path,
    cfg: RunConfig,
    split: str = "test",
    episodes: int | None = None,
    seed: int | None = None,
    collect_records: bool = False,
) -> tuple[EvalSummary, list[PredictionRecord]]:
    """Evaluate saved parameters on one split of the configured dataset."""
    ck = load_checkpoint(checkpoint_path)
    datasets = build_datasets(cfg.data, cfg.seed)
    if split not in datasets:
        raise ConfigError(f"split {split!r} not present in dataset (have {sorted(datasets)})")
    episodes = episodes if episodes is not None else cfg.train.test_episodes
    seed = cfg.seed if seed is None else seed
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    if cfg.algo == "maml":
        if ck.head is None:
            raise ConfigError("checkpoint has no classifier head; was it trained with algo='maml'?")
        adapt_cfg = AdaptConfig(inner_lr=cfg.train.inner_lr, inner_steps=cfg.train.inner_steps)
        return evaluate_maml(
            ck.encoder,
            ck.head,
            datasets[split],
            cfg.episode.shot,
            cfg.episode.query,
            episodes,
            [seed, 900],
            adapt_cfg,
            reduction=cfg.loss_reduction,
            dtype=dtype,
            collect_records=collect_records,
        )
    return evaluate_protonet(
        ck.encoder,
        datasets[split],
        cfg.episode.way,
        cfg.episode.shot,
        cfg.episode.query,
        episodes,
        [seed, 900],
        metric=cfg.metric,
        reduction=cfg.loss_reduction,
        dtype=dtype,
        collect_records=collect_records,
    )


# ----------------------------------------------------------------------
# the training loop
# ----------------------------------------------------------------------


@dataclass
class TrainResult:
    log_dir: Path
    checkpoint_path: Path
    metrics_path: Path
    summary_path: Path
    episodes_run: int
    train_mean_loss: float
    train_mean_accuracy: float
    final_val: EvalSummary | None
    final_test: EvalSummary | None
    wall_seconds: float


def _train_line(i, breakdown, accuracy, acc_stats, loss_stats, logged_lam):
    first_raw = next((t.raw for t in breakdown.terms if t.raw is not None), None)
    return {
        "episode": i,
        "split": "train",
        "loss_total": breakdown.total,
        "loss_task": breakdown.task,
        "loss_ae_raw": first_raw,
        "lambda": logged_lam,
        "accuracy": accuracy,
        "acc_running_mean": acc_stats.mean,
        "acc_running_std": acc_stats.std,
        "loss_running_mean": loss_stats.mean,
        "loss_running_std": loss_stats.std,
    }


def _eval_line(i, split, summary: EvalSummary):
    return {
        "episode": i,
        "split": split,
        "episodes": summary.episodes,
        "mean_loss": summary.mean_loss,
        "std_loss": summary.std_loss,
        "mean_accuracy": summary.mean_accuracy,
        "std_accuracy": summary.std_accuracy,
    }


def train(cfg: RunConfig, log_dir=None, quiet: bool = True) -> TrainResult:
    t0 = time.perf_counter()
    state = build_state(cfg)
    out_dir = Path(log_dir if log_dir is not None else cfg.train.log_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    summary_path = out_dir / "summary.csv"
    ckpt_path = out_dir / "checkpoint.npz"

    def save(episode: int) -> None:
        save_checkpoint(
            ckpt_path,
            state.encoder,
            decoder=state.regs[0].decoder if state.regs else None,
            head=state.head,
            meta={"config": cfg.to_dict(), "episode": episode},
        )

    # the reconstruction pass is skipped when its weight or rate is zero,
    # so only then is a lambda value meaningful in the log
    logged_lam = None
    if state.active_regs() and (cfg.mode == "combined" or _aux_enabled(state)):
        logged_lam = state.active_regs()[0].lam

    ep_rng = np.random.default_rng([cfg.seed, 1])
    acc_stats, loss_stats = RunningStats(), RunningStats()
    total = cfg.train.epochs * cfg.train.episodes_per_epoch
    train_ds = state.datasets["train"]
    val_ds = state.datasets.get("val")
    final_val: EvalSummary | None = None
    status = "completed"

    save(0)  # a loadable checkpoint exists from the start
    with open(metrics_path, "w", encoding="utf-8") as log:
        try:
            for i in range(1, total + 1):
                ep = sample_episode(
                    train_ds, cfg.episode.way, cfg.episode.shot, cfg.episode.query, ep_rng
                )
                breakdown, accuracy = train_episode(state, ep)
                if not math.isfinite(breakdown.total):
                    raise NonFiniteError(f"episode loss is {breakdown.total}")
                acc_stats.push(accuracy)
                loss_stats.push(breakdown.task)
                log.write(
                    json.dumps(_train_line(i, breakdown, accuracy, acc_stats, loss_stats, logged_lam))
                    + "\n"
                )
                if i % cfg.train.eval_interval == 0 or i == total:
                    if val_ds is not None:
                        final_val, _ = _evaluate_state(
                            state, val_ds, cfg.train.eval_episodes, [cfg.seed, 2, i]
                        )
                        log.write(json.dumps(_eval_line(i, "val", final_val)) + "\n")
                        if cfg.train.mixed_validation:
                            seen, _ = _evaluate_state(
                                state, train_ds, cfg.train.eval_episodes, [cfg.seed, 3, i]
                            )
                            log.write(json.dumps(_eval_line(i, "val_seen", seen)) + "\n")
                    save(i)
                    if not quiet:
                        msg = f"episode {i}/{total}  loss {loss_stats.mean:.4f}  acc {acc_stats.mean:.3f}"
                        if final_val is not None:
                            msg += f"  val acc {final_val.mean_accuracy:.3f}"
                        print(msg, flush=True)
        except NonFiniteError as e:
            status = "aborted"
            _write_summary(summary_path, status, acc_stats, loss_stats, final_val, None, cfg)
            raise TrainingAborted(
                f"training stopped: {e}; last checkpoint: {ckpt_path}", checkpoint=ckpt_path
            ) from e

    final_test = None
    if "test" in state.datasets:
        final_test, _ = _evaluate_state(
            state, state.datasets["test"], cfg.train.test_episodes, [cfg.seed, 4]
        )
        with open(metrics_path, "a", encoding="utf-8") as log:
            log.write(json.dumps(_eval_line(total, "test", final_test)) + "\n")

    _write_summary(summary_path, status, acc_stats, loss_stats, final_val, final_test, cfg)
    return TrainResult(
        log_dir=out_dir,
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        summary_path=summary_path,
        episodes_run=total,
        train_mean_loss=loss_stats.mean,
        train_mean_accuracy=acc_stats.mean,
        final_val=final_val,
        final_test=final_test,
        wall_seconds=time.perf_counter() - t0,
    )


def _write_summary(path, status, acc_stats, loss_stats, final_val, final_test, cfg) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["phase", "split", "episodes", "mean_loss", "std_loss", "mean_accuracy", "std_accuracy", "status"]
        )
        writer.writerow(
            ["train", "train", acc_stats.n, loss_stats.mean, loss_stats.std, acc_stats.mean, acc_stats.std, status]
        )
        if final_val is not None:
            writer.writerow(
                ["eval", "val", final_val.episodes, final_val.mean_loss, final_val.std_loss,
                 final_val.mean_accuracy, final_val.std_accuracy, status]
            )
        if final_test is not None:
            writer.writerow(
                ["eval", "test", final_test.episodes, final_test.mean_loss, final_test.std_loss,
                 final_test.mean_accuracy, final_test.std_accuracy, status]
            )
