"""Training stages: supervised teacher, label-free distillation, hard-label finetune.

Every stage is minibatch SGD with momentum, coupled L2 decay on weights and a
cosine learning-rate schedule. A stage is a pure function of its inputs and
``TrainConfig.seed``: parameter init, and the shuffle of every epoch, come from
named random streams (see :mod:`softdistill.rng`), so a run can be resumed from
any epoch boundary and reproduce the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .curation import SoftLabelSet
from .data import LabeledDataset, UnlabeledGallery, batch_iterator
from .losses import DISTILL_LOSSES, LossKind, cross_entropy_hard, distill_loss
from .nn import (
    MlpSpec,
    ModelParams,
    forward_tensors,
    generalization_bound_proxy,
    init_mlp,
    predict_logits,
    softmax_rows,
)
from .optim import OptimState, ScheduleConfig, lr_at, sgd_momentum_step

METRICS_HEADER = ("stage", "epoch", "train_loss", "val_acc", "val_loss", "lr", "bound_proxy", "seconds")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class ConfigurationError(ValueError):
    """A stage was asked to run with settings it does not accept."""


class TeacherQualityError(RuntimeError):
    """The teacher's validation loss exceeds the allowed bound."""


@dataclass(frozen=True)
class TrainConfig:
    loss: LossKind = LossKind.HARD_CE
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    warmup_epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 1
    record_wall_clock: bool = False

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind.parse(self.loss))
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("epochs and warmup_epochs must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("batch_size and eval_every must be >= 1")

    def digest(self, stage: str) -> bytes:
        doc = asdict(self)
        doc["loss"] = self.loss.value
        doc["stage"] = stage
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()


@dataclass
class MetricsRecord:
    stage: str
    epoch: int
    train_loss: float
    val_acc: float
    val_loss: float
    lr: float
    bound_proxy: float
    seconds: float

    def row(self) -> list[str]:
        return [
            self.stage,
            str(self.epoch),
            repr(self.train_loss),
            repr(self.val_acc),
            repr(self.val_loss),
            repr(self.lr),
            repr(self.bound_proxy),
            repr(self.seconds),
        ]


def metrics_csv(records, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_metrics_csv(path, records, append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if not fresh else "w", newline="") as fh:
        fh.write(metrics_csv(records, header=fresh))


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricsRecord(
            r["stage"],
            int(r["epoch"]),
            *(float(r[k]) for k in METRICS_HEADER[2:]),
        )
        for r in rows
    ]


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params: ModelParams, dataset: LabeledDataset) -> tuple[float, float]:
    """Top-1 accuracy (ties to the lowest class index) and mean cross-entropy."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(params, dataset.features)
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == dataset.labels))
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-np.mean(logp[np.arange(len(dataset)), dataset.labels]))
    return acc, loss


@dataclass
class QualityCheck:
    passed: bool
    val_loss: float
    bound: float


def assert_teacher_quality(teacher: ModelParams, val: LabeledDataset, r0: float) -> QualityCheck:
    """Pass iff the teacher's mean validation cross-entropy is at most ``r0``."""
    if r0 <= 0:
        raise ValueError("r0 must be positive")
    _, loss = evaluate(teacher, val)
    return QualityCheck(loss <= r0, loss, r0)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SDLABCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint file."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before all declared fields were read."""


@dataclass
class Checkpoint:
    """Everything needed to continue a stage from the end of ``epoch``.

    The shuffle of epoch ``e`` is drawn from the stream ``(seed, "shuffle", e)``,
    so ``seed`` together with ``epoch`` is the complete random state.
    """

    params: ModelParams
    optim: OptimState
    stage: str
    epoch: int
    config_hash: bytes
    seed: int

    @property
    def spec(self) -> MlpSpec:
        return self.params.spec


def checkpoint_bytes(cp: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    widths = cp.spec.layer_widths
    buf.write(struct.pack(f"<I{len(widths)}I", len(widths), *widths))
    for a in cp.params.arrays():
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    buf.write(struct.pack("<ddQ", cp.optim.momentum, cp.optim.weight_decay, cp.optim.step))
    for v in cp.optim.velocities:
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    stage = cp.stage.encode("utf-8")
    buf.write(struct.pack("<I", len(stage)) + stage)
    buf.write(struct.pack("<I", cp.epoch))
    if len(cp.config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    buf.write(cp.config_hash)
    buf.write(struct.pack("<Q", cp.seed))
    return buf.getvalue()


def save_checkpoint(path, cp: Checkpoint) -> None:
    """Write ``cp``: magic, u32 version, then spec, params, optimizer, stage, epoch,
    config hash and seed in that order (little-endian)."""
    Path(path).write_bytes(checkpoint_bytes(cp))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointTruncatedError(f"truncated checkpoint at offset {self.off}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) >= 8 and data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not a checkpoint: magic {data[:8]!r}")
    r.take(8)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (nw,) = r.unpack("<I")
    spec = MlpSpec(r.unpack(f"<{nw}I"))
    w = spec.layer_widths
    shapes = []
    for j in range(spec.depth):
        shapes.extend([(w[j], w[j + 1]), (w[j + 1],)])
    arrays = [r.array(s) for s in shapes]
    params = ModelParams(spec, arrays[0::2], arrays[1::2])
    momentum, wd, step = r.unpack("<ddQ")
    vel = [r.array(s) for s in shapes]
    (slen,) = r.unpack("<I")
    stage = r.take(slen).decode("utf-8")
    (epoch,) = r.unpack("<I")
    chash = r.take(32)
    (seed,) = r.unpack("<Q")
    if r.off != len(data):
        raise CheckpointError(f"{len(data) - r.off} unexpected trailing bytes")
    return Checkpoint(params, OptimState(vel, momentum, wd, step), stage, epoch, chash, seed)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# the SGD loop shared by all stages


def _schedule(cfg: TrainConfig, steps_per_epoch: int) -> ScheduleConfig:
    # short runs cannot hold the full warmup; keep at least one cosine epoch
    warm = min(cfg.warmup_epochs, cfg.epochs - 1)
    return ScheduleConfig(cfg.base_lr, warm, cfg.epochs, steps_per_epoch)


def _run_sgd(
    stage: str,
    params: ModelParams,
    features: np.ndarray,
    loss_fn: Callable[[Tensor, np.ndarray], Tensor],
    cfg: TrainConfig,
    val: LabeledDataset | None,
    resume: Checkpoint | None,
    on_epoch: Callable[[Checkpoint, MetricsRecord | None], None] | None,
) -> tuple[ModelParams, list[MetricsRecord]]:
    params = params.copy()
    metrics: list[MetricsRecord] = []
    if cfg.epochs == 0:
        return params, metrics
    n = features.shape[0]
    if n == 0:
        raise ConfigurationError(f"{stage}: no training samples")
    steps_per_epoch = -(-n // cfg.batch_size)
    sched = _schedule(cfg, steps_per_epoch)
    chash = cfg.digest(stage)

    if resume is not None:
        if resume.stage != stage or resume.config_hash != chash or resume.seed != cfg.seed:
            raise ConfigurationError(f"checkpoint does not belong to this {stage} run")
        if resume.spec != params.spec:
            raise ConfigurationError("checkpoint architecture differs from the requested one")
        params = resume.params.copy()
        state = resume.optim.copy()
        start = resume.epoch
    else:
        state = OptimState.zeros_like(params.arrays(), cfg.momentum, cfg.weight_decay)
        start = 0

    arrays = params.arrays()
    t0 = time.perf_counter()
    for epoch in range(start, cfg.epochs):
        total, count = 0.0, 0
        lr = 0.0
        for idx in batch_iterator(n, cfg.batch_size, cfg.seed, epoch):
            leaves = [Tensor._wrap(a, True, None) for a in arrays]
            # overflow surfaces as NonFiniteError from the result checks, not as warnings
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = forward_tensors(leaves[0::2], leaves[1::2], Tensor._wrap(features[idx], False, None))
                    loss = loss_fn(logits, idx)
                    ag.backward(loss)
                    lr = lr_at(state.step, sched)
                    sgd_momentum_step(arrays, [t.grad for t in leaves], state, lr)
            except ag.NonFiniteError as exc:
                raise DivergenceError(f"{stage}: training diverged at epoch {epoch + 1}: {exc}") from exc
            total += loss.item() * len(idx)
            count += len(idx)

        done = epoch + 1
        record = None
        if done % cfg.eval_every == 0 or done == cfg.epochs:
            acc, vloss = evaluate(params, val) if val is not None else (float("nan"), float("nan"))
            record = MetricsRecord(
                stage=stage,
                epoch=done,
                train_loss=total / count,
                val_acc=acc,
                val_loss=vloss,
                lr=lr,
                bound_proxy=generalization_bound_proxy(params, n),
                seconds=time.perf_counter() - t0 if cfg.record_wall_clock else 0.0,
            )
            metrics.append(record)
        if on_epoch is not None:
            on_epoch(Checkpoint(params.copy(), state.copy(), stage, done, chash, cfg.seed), record)
    return params, metrics


# ---------------------------------------------------------------------------
# stages


def train_teacher(
    train: LabeledDataset,
    val: LabeledDataset | None,
    spec: MlpSpec,
    cfg: TrainConfig,
    *,
    stage: str = "teacher",
    resume: Checkpoint | None = None,
    on_epoch=None,
) -> tuple[ModelParams, list[MetricsRecord]]:
    """Supervised training on hard labels (cross-entropy plus weight decay)."""
    if cfg.loss is not LossKind.HARD_CE:
        raise ConfigurationError(f"{stage} training uses hard_ce, got {cfg.loss.value}")
    if spec.input_dim != train.dim or spec.num_classes != train.num_classes:
        raise ag.ShapeError("model spec does not match the training data")
    labels = train.labels

    def loss_fn(logits, idx):
        return cross_entropy_hard(logits, labels[idx])

    params = init_mlp(spec, cfg.seed)
    return _run_sgd(stage, params, train.features, loss_fn, cfg, val, resume, on_epoch)


def train_supervised(train, val, spec, cfg, **kw):
    """Hard-label baseline student; same loop as the teacher."""
    return train_teacher(train, val, spec, cfg, stage=kw.pop("stage", "baseline"), **kw)


def precompute_soft_labels(
    teacher: ModelParams, train: LabeledDataset, unlabeled: UnlabeledGallery | None
) -> SoftLabelSet:
    """Teacher probabilities for every row of ``T`` followed by every row of ``U``.

    Ids are positions in the concatenation. Labels of ``T`` are not read.
    """
    x = _distill_inputs(train, unlabeled)
    if x.shape[1] != teacher.spec.input_dim:
        raise ag.ShapeError("teacher input dim does not match the data")
    return SoftLabelSet(np.arange(len(x)), softmax_rows(predict_logits(teacher, x)))


def _distill_inputs(train: LabeledDataset, unlabeled: UnlabeledGallery | None) -> np.ndarray:
    if unlabeled is None or len(unlabeled) == 0:
        return train.features
    if unlabeled.dim != train.dim:
        raise ag.ShapeError("labelled and unlabelled features differ in width")
    return np.concatenate([train.features, unlabeled.features], axis=0)


def distill(
    teacher: ModelParams,
    student_spec: MlpSpec,
    train: LabeledDataset,
    unlabeled: UnlabeledGallery | None,
    cfg: TrainConfig,
    *,
    val: LabeledDataset | None = None,
    max_teacher_loss: float | None = None,
    override_quality: bool = False,
    init: ModelParams | None = None,
    online_teacher: bool = False,
    resume: Checkpoint | None = None,
    on_epoch=None,
) -> tuple[ModelParams, list[MetricsRecord]]:
    """Train ``student_spec`` to match the teacher's distributions on ``T + U``.

    Only the features of ``train`` are used. With ``max_teacher_loss`` set and
    ``val`` given, the teacher must pass :func:`assert_teacher_quality` first
    unless ``override_quality`` is true. ``online_teacher`` recomputes targets
    per batch instead of caching them (kept as a cross-check of the cache).
    """
    if cfg.loss not in DISTILL_LOSSES:
        raise ConfigurationError(
            f"distillation accepts only soft targets ({', '.join(k.value for k in DISTILL_LOSSES)}), "
            f"got {cfg.loss.value}"
        )
    if teacher.spec.num_classes != student_spec.num_classes:
        raise ag.ShapeError("teacher and student disagree on the number of classes")
    if student_spec.input_dim != train.dim:
        raise ag.ShapeError("student input dim does not match the data")
    if max_teacher_loss is not None and val is not None and not override_quality:
        check = assert_teacher_quality(teacher, val, max_teacher_loss)
        if not check.passed:
            raise TeacherQualityError(
                f"teacher validation loss {check.val_loss:.4f} exceeds bound {max_teacher_loss}"
            )

    x = _distill_inputs(train, unlabeled)
    if online_teacher:
        def targets(idx):
            return softmax_rows(predict_logits(teacher, x[idx]))
    else:
        cache = precompute_soft_labels(teacher, train, unlabeled).probs

        def targets(idx):
            return cache[idx]

    kind = cfg.loss

    def loss_fn(logits, idx):
        return distill_loss(kind, logits, Tensor._wrap(targets(idx), False, None))

    params = init.copy() if init is not None else init_mlp(student_spec, cfg.seed)
    if params.spec != student_spec:
        raise ConfigurationError("initial parameters do not match the student spec")
    return _run_sgd("distill", params, x, loss_fn, cfg, val, resume, on_epoch)


def finetune(
    params: ModelParams,
    train: LabeledDataset,
    cfg: TrainConfig,
    *,
    val: LabeledDataset | None = None,
    resume: Checkpoint | None = None,
    on_epoch=None,
) -> tuple[ModelParams, list[MetricsRecord]]:
    """Hard-label cross-entropy on ``T`` starting from ``params``; no warmup."""
    if cfg.loss is not LossKind.HARD_CE:
        raise ConfigurationError(f"finetune uses hard_ce, got {cfg.loss.value}")
    cfg = replace(cfg, warmup_epochs=0)
    labels = train.labels

    def loss_fn(logits, idx):
        return cross_entropy_hard(logits, labels[idx])

    return _run_sgd("finetune", params, train.features, loss_fn, cfg, val, resume, on_epoch)


def finetune_config(distill_cfg: TrainConfig, epochs: int = 10) -> TrainConfig:
    """Default finetune settings: hard labels, peak lr a tenth of distillation's, no warmup."""
    return replace(
        distill_cfg,
        loss=LossKind.HARD_CE,
        base_lr=0.1 * distill_cfg.base_lr,
        epochs=epochs,
        warmup_epochs=0,
    )
