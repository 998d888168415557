"""Training loop, validation loss, checkpoints and run bookkeeping."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from contrastlab.corpus import CaseLabel, CaseLabelMode, Corpus, Study, case_labels, corpus_hash
from contrastlab.model import (
    PARAM_NAMES,
    TAU_MAX,
    TAU_MIN,
    EncoderParams,
    ModelDims,
    check_compatible,
    encode_backward,
    encode_batch,
    init_params,
)
from contrastlab.objective import (
    LossReport,
    NonFiniteError,
    OptimizerState,
    ScheduleSpec,
    adamw_step,
    clip_gradients,
    infonce_backward,
    infonce_loss,
    lr_at_step,
    similarity_matrix,
)
from contrastlab.sampler import (
    FULL_REPORT,
    Batch,
    BatchPlan,
    SamplerKind,
    case_balanced_batches,
    ratio_from_percent,
    section_balanced_batches,
    shuffled_batches,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_HEADER = ("epoch", "global_step", "train_loss", "val_loss", "lr", "grad_norm", "tau")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        self.last_checkpoint = last_checkpoint
        super().__init__(f"{message}; last good checkpoint: {last_checkpoint}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 300
    peak_lr: float = 1e-5
    sampler: SamplerKind = SamplerKind.SHUFFLED
    ratio_pct: int | None = None
    eval_every: int = 1
    seed: int = 0
    early_stop_patience: int | None = None
    label_mode: CaseLabelMode = CaseLabelMode.ANY_ABNORMAL
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_fraction: float = 0.10
    warmup_start_divisor: float = 25.0
    max_grad_norm: float = 1.0
    d_txt: int = 32
    hidden: int = 64
    embed_dim: int = 64
    verbose: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sampler", SamplerKind(self.sampler))
        object.__setattr__(self, "label_mode", CaseLabelMode(self.label_mode))
        object.__setattr__(self, "betas", tuple(self.betas))

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (a 1-pair batch has identically zero loss), "
                             f"got {self.batch_size}")
        if self.max_epochs < 1 or self.eval_every < 1:
            raise ValueError("max_epochs and eval_every must be positive")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if self.sampler is SamplerKind.SHUFFLED:
            if self.ratio_pct is not None:
                raise ValueError("ratio_pct is only meaningful for balanced samplers")
        elif self.ratio_pct is None or not 0 <= self.ratio_pct <= 100:
            raise ValueError(f"{self.sampler.value} sampler needs ratio_pct in [0, 100]")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be positive or None")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sampler"] = self.sampler.value
        out["label_mode"] = self.label_mode.value
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**dict(data))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def model_dims(self, corpus: Corpus) -> ModelDims:
        return ModelDims(corpus.config.d_img, corpus.config.vocab_size, self.d_txt, self.hidden,
                         self.embed_dim, self.embed_dim)


@dataclass(frozen=True)
class MetricRow:
    epoch: int
    global_step: int
    train_loss_mean: float
    val_loss_mean: float
    lr: float
    pre_clip_grad_norm_mean: float
    tau: float

    def as_csv_row(self) -> list[str]:
        return [str(self.epoch), str(self.global_step), repr(self.train_loss_mean), repr(self.val_loss_mean),
                repr(self.lr), repr(self.pre_clip_grad_norm_mean), repr(self.tau)]


@dataclass
class CheckpointRecord:
    epoch: int
    path: Path
    val_loss: float
    zero_shot_macro_f1: float | None = None


class Criterion(str, Enum):
    VAL_LOSS = "val_loss"
    MACRO_F1 = "macro_f1"


@dataclass
class TrainResult:
    run_dir: Path
    metrics: list[MetricRow]
    checkpoints: list[CheckpointRecord]
    params: EncoderParams
    stopped_early: bool = False


# ------------------------------------------------------------ gradients


def batch_loss_and_grads(params: EncoderParams, studies: Sequence[Study], framing
                         ) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Symmetric InfoNCE on one batch and its gradient for every parameter."""
    batch, cache = encode_batch(params, studies, framing)
    sim = similarity_matrix(batch, params.tau)
    report = infonce_loss(sim)
    d_img, d_txt, d_log_tau = infonce_backward(sim, batch)
    grads = encode_backward(params, cache, d_img, d_txt)
    grads["log_temperature"] = np.array(d_log_tau)
    return report, grads


def batch_loss(params: EncoderParams, studies: Sequence[Study], framing) -> float:
    batch, _ = encode_batch(params, studies, framing)
    return infonce_loss(similarity_matrix(batch, params.tau)).total


# --------------------------------------------------------------- plans


def build_plan(corpus: Corpus, ids: Sequence[int], config: TrainConfig, epoch: int, step_offset: int) -> BatchPlan:
    bs = config.batch_size
    if config.sampler is SamplerKind.SHUFFLED:
        return shuffled_batches(ids, bs, config.seed, epoch, step_offset)
    ratio = ratio_from_percent(config.ratio_pct, bs)
    if config.sampler is SamplerKind.SECTION_BALANCED:
        labels = {i: corpus.study(i).section_abnormal for i in ids}
        return section_balanced_batches(labels, ratio, bs, config.seed, epoch, step_offset)
    labels = case_labels(corpus, ids, config.label_mode)
    return case_balanced_batches(labels, ratio, bs, config.seed, epoch, step_offset,
                                 normal_label=CaseLabel.NORMAL)


def validation_plan(ids: Sequence[int], batch_size: int, seed: int) -> list[Batch]:
    if len(ids) < batch_size:
        return [Batch(tuple(ids), FULL_REPORT, 0)]
    return list(shuffled_batches(ids, batch_size, seed, epoch=0, step_offset=0))


def evaluate_validation_loss(params: EncoderParams, corpus: Corpus, val_ids: Sequence[int], batch_size: int,
                             seed: int = 0) -> float:
    """Mean loss over a fixed seeded set of validation batches.

    The batches and their alternating framings depend only on ``seed``, so
    successive evaluations measure the same objective.
    """
    if not val_ids:
        raise ValueError("validation split is empty")
    losses = [batch_loss(params, corpus.get_studies(b.ids), b.framing)
              for b in validation_plan(val_ids, batch_size, seed)]
    return float(np.mean(losses))


# ----------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: EncoderParams
    optimizer: OptimizerState
    meta: dict


def save_checkpoint(path: Path, params: EncoderParams, state: OptimizerState, meta: Mapping) -> None:
    payload = {"meta": np.array(json.dumps({**meta, "version": CHECKPOINT_VERSION,
                                            "dims": asdict(params.dims),
                                            "optimizer": {"step": state.step, "beta1": state.beta1,
                                                          "beta2": state.beta2, "eps": state.eps,
                                                          "weight_decay": state.weight_decay,
                                                          "no_decay": sorted(state.no_decay)}},
                                           sort_keys=True))}
    for name in PARAM_NAMES:
        payload[f"param/{name}"] = params.arrays[name]
        payload[f"exp_avg/{name}"] = state.exp_avg[name]
        payload[f"exp_avg_sq/{name}"] = state.exp_avg_sq[name]
    buf = io.BytesIO()
    np.savez(buf, **payload)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        params = EncoderParams(ModelDims(**meta["dims"]),
                               {n: np.array(data[f"param/{n}"]) for n in PARAM_NAMES})
        opt = meta["optimizer"]
        state = OptimizerState(
            {n: np.array(data[f"exp_avg/{n}"]) for n in PARAM_NAMES},
            {n: np.array(data[f"exp_avg_sq/{n}"]) for n in PARAM_NAMES},
            step=opt["step"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
            weight_decay=opt["weight_decay"], no_decay=frozenset(opt["no_decay"]),
        )
    return Checkpoint(params, state, meta)


def checkpoint_path(run_dir: Path, epoch: int) -> Path:
    return run_dir / "checkpoints" / f"epoch_{epoch:04d}"


# ------------------------------------------------------------- metrics io


def write_metrics(path: Path, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.as_csv_row())


def read_metrics(path: str | Path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricRow(int(r[0]), int(r[1]), *(float(x) for x in r[2:])) for r in reader]


# -------------------------------------------------------------- training


def run_training(
    corpus: Corpus,
    config: TrainConfig,
    run_dir: str | Path,
    *,
    train_ids: Sequence[int] | None = None,
    val_ids: Sequence[int] | None = None,
    on_eval: Callable[[EncoderParams, int], float | None] | None = None,
    resume_from: str | Path | None = None,
    extra_manifest: Mapping | None = None,
) -> TrainResult:
    """Train the dual encoder and write metrics, checkpoints and a manifest to ``run_dir``.

    ``on_eval(params, epoch)`` runs after each checkpoint and may return a
    zero-shot macro F1 that is stored on the checkpoint record.
    """
    config.validate()
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    train_ids = list(corpus.split("train") if train_ids is None else train_ids)
    val_ids = list(corpus.split("val") if val_ids is None else val_ids)
    if not val_ids:
        raise ValueError("validation split is empty")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    first_plan = build_plan(corpus, train_ids, config, epoch=1, step_offset=0)
    steps_per_epoch = len(first_plan)
    schedule = ScheduleSpec(config.peak_lr, steps_per_epoch * config.max_epochs, config.warmup_fraction,
                            config.warmup_start_divisor)
    val_seed = config.seed + 1

    metrics: list[MetricRow] = []
    records: list[CheckpointRecord] = []
    best_val = math.inf
    bad_epochs = 0
    start_epoch = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.meta["config_hash"] != config.config_hash():
            raise ValueError(f"{resume_from}: checkpoint was written under a different config")
        params, state = ckpt.params, ckpt.optimizer
        start_epoch = ckpt.meta["epoch"] + 1
        best_val, bad_epochs = ckpt.meta["best_val"], ckpt.meta["bad_epochs"]
        global_step = ckpt.meta["global_step"]
        if (run_dir / "metrics.csv").exists():
            metrics = [m for m in read_metrics(run_dir / "metrics.csv") if m.epoch < start_epoch]
    else:
        params = init_params(config.model_dims(corpus), config.seed)
        state = OptimizerState.zeros_like(params.arrays, beta1=config.betas[0], beta2=config.betas[1],
                                          eps=config.adam_eps, weight_decay=config.weight_decay)
        global_step = 0
    check_compatible(params, corpus)

    step_log = open(run_dir / "steps.csv", "a" if resume_from else "w", newline="") if config.verbose else None
    if step_log is not None and resume_from is None:
        step_log.write("global_step,framing,loss,lr,grad_norm\n")

    last_ckpt: Path | None = Path(resume_from) if resume_from else None
    stopped_early = False
    try:
        for epoch in range(start_epoch, config.max_epochs + 1):
            plan = first_plan if epoch == 1 else build_plan(corpus, train_ids, config, epoch, global_step)
            losses, norms = [], []
            lr = 0.0
            for batch in plan:
                report, grads = batch_loss_and_grads(params, corpus.get_studies(batch.ids), batch.framing)
                if not math.isfinite(report.total):
                    raise TrainingAborted(f"non-finite loss at step {global_step}", last_ckpt)
                grads, norm = clip_gradients(grads, config.max_grad_norm)
                lr = lr_at_step(schedule, global_step)
                try:
                    adamw_step(params.arrays, grads, state, lr)
                except NonFiniteError as exc:
                    raise TrainingAborted(str(exc), last_ckpt) from exc
                params.clamp_temperature(TAU_MIN, TAU_MAX)
                losses.append(report.total)
                norms.append(norm)
                if step_log is not None:
                    step_log.write(f"{global_step},{batch.framing},{report.total!r},{lr!r},{norm!r}\n")
                global_step += 1

            val_loss = evaluate_validation_loss(params, corpus, val_ids, config.batch_size, val_seed)
            row = MetricRow(epoch, global_step, float(np.mean(losses)), val_loss, lr, float(np.mean(norms)),
                            params.tau)
            metrics.append(row)
            write_metrics(run_dir / "metrics.csv", metrics)
            logger.info("epoch %d step %d train %.4f val %.4f tau %.4f", epoch, global_step,
                        row.train_loss_mean, val_loss, row.tau)

            if val_loss < best_val:
                best_val, bad_epochs = val_loss, 0
            else:
                bad_epochs += 1
            stop = config.early_stop_patience is not None and bad_epochs >= config.early_stop_patience

            if epoch % config.eval_every == 0 or epoch == config.max_epochs or stop:
                path = checkpoint_path(run_dir, epoch)
                save_checkpoint(path, params, state, {
                    "epoch": epoch, "global_step": global_step, "config_hash": config.config_hash(),
                    "best_val": best_val, "bad_epochs": bad_epochs,
                })
                last_ckpt = path
                f1 = on_eval(params, epoch) if on_eval is not None else None
                records.append(CheckpointRecord(epoch, path, val_loss, f1))
            if stop:
                stopped_early = True
                logger.info("early stop after epoch %d (patience %d)", epoch, config.early_stop_patience)
                break
    finally:
        if step_log is not None:
            step_log.close()

    manifest = {
        "config": config.to_dict(),
        "corpus_hash": corpus_hash(corpus),
        "seed": config.seed,
        "start_time": started,
        "end_time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "steps_per_epoch": steps_per_epoch,
        "train_size": len(train_ids),
        "val_size": len(val_ids),
        **(extra_manifest or {}),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return TrainResult(run_dir, metrics, records, params, stopped_early)


# ------------------------------------------------------- selection rules


def select_best_checkpoint(records: Sequence[CheckpointRecord], criterion: Criterion | str) -> CheckpointRecord:
    """Lowest val loss or highest macro F1; ties go to the earliest epoch."""
    if not records:
        raise ValueError("no checkpoint records to select from")
    criterion = Criterion(criterion)
    ordered = sorted(records, key=lambda r: r.epoch)
    if criterion is Criterion.VAL_LOSS:
        return min(ordered, key=lambda r: r.val_loss)
    if any(r.zero_shot_macro_f1 is None for r in ordered):
        raise ValueError("macro F1 selection needs every record's zero_shot_macro_f1")
    return max(ordered, key=lambda r: r.zero_shot_macro_f1)


@dataclass(frozen=True)
class OverfitFlag:
    flagged: bool
    epoch: int | None = None


def detect_overfitting(metrics: Sequence[MetricRow], k: int) -> OverfitFlag:
    """First epoch after which val loss rose ``k`` times in a row while train loss fell."""
    if k < 1:
        raise ValueError("k must be positive")
    rows = list(metrics)
    for i in range(len(rows) - k):
        window = rows[i:i + k + 1]
        val_up = all(b.val_loss_mean > a.val_loss_mean for a, b in zip(window, window[1:]))
        train_down = all(b.train_loss_mean < a.train_loss_mean for a, b in zip(window, window[1:]))
        if val_up and train_down:
            return OverfitFlag(True, window[0].epoch)
    return OverfitFlag(False)
