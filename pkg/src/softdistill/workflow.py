"""File-backed pipeline stages and the ablation sweep.

Each stage reads the artifacts of earlier stages from an output directory and
writes its own under fixed names, so stages can be run one at a time from the
command line. Training stages checkpoint after every epoch and resume from a
partial checkpoint if one is present.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .curation import CurationConfig, curate
from .data import SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .nn import MlpSpec
from .optim import OptimState
from .pipelines import (
    Checkpoint,
    TrainConfig,
    distill,
    checkpoint_bytes,
    evaluate,
    finetune,
    load_checkpoint,
    metrics_csv,
    train_teacher,
)

ARTIFACTS = {
    "train": "train.bin",
    "val": "val.bin",
    "gallery": "gallery.bin",
    "oracle": "oracle.json",
    "teacher": "teacher.ckpt",
    "curated": "curated.bin",
    "report": "curation_report.json",
    "distilled": "student_distilled.ckpt",
    "student": "student.ckpt",
    "evaluation": "evaluation.csv",
    "resolved": "resolved_config.ini",
    "sweep": "sweep.csv",
}

STAGES = ("gen-data", "train-teacher", "curate", "distill", "finetune", "evaluate")


class DependencyError(RuntimeError):
    """A stage needs an artifact that an earlier stage has not produced."""


# ---------------------------------------------------------------------------
# config -> objects


def synthetic_config(cfg: ExperimentConfig) -> SyntheticConfig:
    return SyntheticConfig(seed=cfg.seed, **cfg["dataset"])


def teacher_spec(cfg: ExperimentConfig) -> MlpSpec:
    ds = cfg["dataset"]
    return MlpSpec([ds["dim"], *cfg["teacher"]["hidden"], ds["num_classes"]])


def student_spec(cfg: ExperimentConfig) -> MlpSpec:
    ds = cfg["dataset"]
    return MlpSpec([ds["dim"], *cfg["student"]["hidden"], ds["num_classes"]])


def _train_cfg(section: dict, cfg: ExperimentConfig, **kw) -> TrainConfig:
    fields = dict(
        base_lr=section["base_lr"],
        momentum=section["momentum"],
        weight_decay=section["weight_decay"],
        epochs=section["epochs"],
        warmup_epochs=section.get("warmup_epochs", 0),
        batch_size=section["batch_size"],
        eval_every=section["eval_every"],
        seed=cfg.seed,
        record_wall_clock=cfg["run"]["record_wall_clock"],
    )
    fields.update(kw)
    return TrainConfig(**fields)


def teacher_train_config(cfg: ExperimentConfig) -> TrainConfig:
    return _train_cfg(cfg["teacher"], cfg, loss="hard_ce")


def distill_train_config(cfg: ExperimentConfig, **kw) -> TrainConfig:
    return _train_cfg(cfg["distill"], cfg, loss=cfg["distill"]["loss"], **kw)


def finetune_train_config(cfg: ExperimentConfig, **kw) -> TrainConfig:
    return _train_cfg(cfg["finetune"], cfg, loss="hard_ce", warmup_epochs=0, **kw)


def curation_config(cfg: ExperimentConfig, k: int | None = None) -> CurationConfig:
    c = cfg["curation"]
    return CurationConfig(c["similarity_threshold"], c["k"] if k is None else k)


# ---------------------------------------------------------------------------
# small file helpers


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _need(out: Path, name: str, stage: str) -> Path:
    path = out / ARTIFACTS[name]
    if not path.exists():
        raise DependencyError(f"{stage} needs {path.name}; run the stage that produces it first")
    return path


def _teacher_path(cfg: ExperimentConfig, out: Path, stage: str) -> Path:
    explicit = cfg["teacher"]["checkpoint"]
    if explicit:
        path = Path(explicit)
        if not path.exists():
            raise DependencyError(f"{stage} needs teacher checkpoint {path}, which does not exist")
        return path
    return _need(out, "teacher", stage)


def echo_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / ARTIFACTS["resolved"], cfg.resolved_text().encode())


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(cfg: ExperimentConfig, out: Path) -> list[Path]:
    T, V, G, oracle = generate_synthetic(synthetic_config(cfg))
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / ARTIFACTS[k] for k in ("train", "val", "gallery", "oracle")]
    save_dataset(paths[0], T)
    save_dataset(paths[1], V)
    save_dataset(paths[2], G)
    doc = {
        "noise_std": oracle.noise_std,
        "num_classes": oracle.num_classes,
        "means": oracle.means.tolist(),
        "planted_ids": oracle.planted_ids.tolist(),
        "planted_val_rows": oracle.planted_val_rows.tolist(),
        "bayes_val_accuracy": oracle.bayes_accuracy(V),
    }
    _atomic_write(paths[3], (json.dumps(doc, sort_keys=True) + "\n").encode())
    return paths


def _resumable_train(out: Path, stage: str, tcfg: TrainConfig, final_name: str, run) -> Path:
    """Run ``run(resume, on_epoch)`` with per-epoch metrics and partial checkpoints.

    A partial checkpoint written by a run with a different config is discarded.
    """
    metrics_path = out / f"metrics_{stage}.csv"
    partial = out / f"{stage}.partial.ckpt"
    chash = tcfg.digest(stage)
    resume = None
    if partial.exists():
        try:
            resume = load_checkpoint(partial)
        except ValueError:
            resume = None
        if resume is not None and (resume.config_hash != chash or resume.seed != tcfg.seed):
            resume = None
    rows = metrics_csv([], header=True)
    if resume is not None and metrics_path.exists():
        # drop rows written after the checkpoint we resume from
        with open(metrics_path, newline="") as fh:
            kept = list(csv.reader(fh))[1:]
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(r for r in kept if int(r[1]) <= resume.epoch)
        rows += buf.getvalue()
    _atomic_write(metrics_path, rows.encode())

    last: list[Checkpoint] = []

    def on_epoch(cp: Checkpoint, record) -> None:
        if record is not None:
            with open(metrics_path, "a", newline="") as fh:
                fh.write(metrics_csv([record], header=False))
        _atomic_write(partial, checkpoint_bytes(cp))
        last[:] = [cp]

    params, _ = run(resume, on_epoch)
    if last:
        cp = last[0]
    elif resume is not None:
        cp = resume
    else:
        cp = Checkpoint(params, OptimState.zeros_like(params.arrays()), stage, 0, chash, tcfg.seed)
    final = out / final_name
    _atomic_write(final, checkpoint_bytes(cp))
    if partial.exists():
        partial.unlink()
    return final


def stage_train_teacher(cfg: ExperimentConfig, out: Path) -> list[Path]:
    T = load_dataset(_need(out, "train", "train-teacher"))
    V = load_dataset(_need(out, "val", "train-teacher"))
    spec, tcfg = teacher_spec(cfg), teacher_train_config(cfg)

    def run(resume, on_epoch):
        return train_teacher(T, V, spec, tcfg, resume=resume, on_epoch=on_epoch)

    return [_resumable_train(out, "teacher", tcfg, ARTIFACTS["teacher"], run), out / "metrics_teacher.csv"]


def stage_curate(cfg: ExperimentConfig, out: Path) -> list[Path]:
    G = load_dataset(_need(out, "gallery", "curate"))
    V = load_dataset(_need(out, "val", "curate"))
    teacher = load_checkpoint(_teacher_path(cfg, out, "curate")).params
    U, report = curate(G, V, teacher, curation_config(cfg))
    paths = [out / ARTIFACTS["curated"], out / ARTIFACTS["report"]]
    save_dataset(paths[0], U)
    _atomic_write(paths[1], report.to_json().encode())
    return paths


def stage_distill(cfg: ExperimentConfig, out: Path) -> list[Path]:
    teacher = load_checkpoint(_teacher_path(cfg, out, "distill")).params
    U = load_dataset(_need(out, "curated", "distill"))
    T = load_dataset(_need(out, "train", "distill"))
    V = load_dataset(_need(out, "val", "distill"))
    dcfg = distill_train_config(cfg)
    gate = cfg["teacher"]["max_val_loss"]
    override = cfg["distill"]["override_quality"]

    def run(resume, on_epoch):
        return distill(
            teacher, student_spec(cfg), T, U, dcfg, val=V, max_teacher_loss=gate,
            override_quality=override, resume=resume, on_epoch=on_epoch,
        )

    return [_resumable_train(out, "distill", dcfg, ARTIFACTS["distilled"], run), out / "metrics_distill.csv"]


def stage_finetune(cfg: ExperimentConfig, out: Path) -> list[Path]:
    student = load_checkpoint(_need(out, "distilled", "finetune")).params
    T = load_dataset(_need(out, "train", "finetune"))
    V = load_dataset(_need(out, "val", "finetune"))
    fcfg = finetune_train_config(cfg)

    def run(resume, on_epoch):
        return finetune(student, T, fcfg, val=V, resume=resume, on_epoch=on_epoch)

    return [_resumable_train(out, "finetune", fcfg, ARTIFACTS["student"], run), out / "metrics_finetune.csv"]


def stage_evaluate(cfg: ExperimentConfig, out: Path) -> list[Path]:
    V = load_dataset(_need(out, "val", "evaluate"))
    T = load_dataset(_need(out, "train", "evaluate"))
    models = {
        "teacher": out / ARTIFACTS["teacher"],
        "student_distilled": out / ARTIFACTS["distilled"],
        "student": out / ARTIFACTS["student"],
    }
    present = {name: p for name, p in models.items() if p.exists()}
    if not present:
        raise DependencyError("evaluate needs at least one trained model checkpoint")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "split", "accuracy", "loss"))
    for name, path in present.items():
        params = load_checkpoint(path).params
        for split, data in (("val", V), ("train", T)):
            acc, loss = evaluate(params, data)
            w.writerow((name, split, repr(acc), repr(loss)))
    target = out / ARTIFACTS["evaluation"]
    _atomic_write(target, buf.getvalue().encode())
    return [target]


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train-teacher": stage_train_teacher,
    "curate": stage_curate,
    "distill": stage_distill,
    "finetune": stage_finetune,
    "evaluate": stage_evaluate,
}


def run_stage(stage: str, cfg: ExperimentConfig, out: Path | None = None) -> list[Path]:
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    out = Path(out) if out is not None else cfg.output_dir
    echo_config(cfg, out)
    return STAGE_FUNCS[stage](cfg, out)


# ---------------------------------------------------------------------------
# sweep

SWEEP_AXES = ("weight_decay", "teacher_checkpoint", "unlabeled_volume", "epochs")
SWEEP_HEADER = (
    "key", *SWEEP_AXES, "seed", "n_unlabeled", "teacher_val_acc",
    "distill_val_acc", "val_acc", "train_loss", "bound_proxy", "runtime",
)


@dataclass(frozen=True)
class SweepPoint:
    weight_decay: float
    teacher_checkpoint: str
    unlabeled_volume: int | None
    epochs: int
    seed: int


def _base_hash_text(cfg: ExperimentConfig) -> str:
    sections = {s: v for s, v in cfg.sections.items() if s != "sweep"}
    sections["run"] = {k: v for k, v in sections["run"].items() if k != "output_dir"}
    return json.dumps(sections, sort_keys=True, default=str)


def point_key(cfg: ExperimentConfig, point: SweepPoint) -> str:
    text = _base_hash_text(cfg) + json.dumps(point.__dict__, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def sweep_grid(cfg: ExperimentConfig) -> list[SweepPoint]:
    axes = cfg.sweep_axes()
    if not axes:
        raise ConfigError("sweep needs at least one non-empty axis in [sweep]")
    d = cfg["distill"]
    values = {
        "weight_decay": axes.get("weight_decay", [d["weight_decay"]]),
        "teacher_checkpoint": axes.get("teacher_checkpoint", [cfg["teacher"]["checkpoint"]]),
        "unlabeled_volume": axes.get("unlabeled_volume", [None]),
        "epochs": axes.get("epochs", [d["epochs"]]),
    }
    grid = []
    for combo in itertools.product(*(values[a] for a in SWEEP_AXES)):
        for seed in cfg["sweep"]["seeds"]:
            grid.append(SweepPoint(*combo, seed))
    return grid


def run_sweep_point(cfg: ExperimentConfig, out: Path, point: SweepPoint) -> list[str]:
    t0 = time.perf_counter()
    T = load_dataset(_need(out, "train", "sweep"))
    V = load_dataset(_need(out, "val", "sweep"))
    G = load_dataset(_need(out, "gallery", "sweep"))
    if point.teacher_checkpoint:
        tpath = Path(point.teacher_checkpoint)
        if not tpath.exists():
            raise DependencyError(f"sweep needs teacher checkpoint {tpath}, which does not exist")
    else:
        tpath = _need(out, "teacher", "sweep")
    teacher = load_checkpoint(tpath).params

    K = T.num_classes
    if point.unlabeled_volume is None:
        k = None
    else:
        k = math.ceil(point.unlabeled_volume / K)
    U, _ = curate(G, V, teacher, curation_config(cfg, k))
    if point.unlabeled_volume is not None and len(U) > point.unlabeled_volume:
        U = U.subset(U.ids[: point.unlabeled_volume])

    dcfg = distill_train_config(cfg, weight_decay=point.weight_decay, epochs=point.epochs, seed=point.seed)
    student, dm = distill(
        teacher, student_spec(cfg), T, U, dcfg, val=V,
        max_teacher_loss=cfg["teacher"]["max_val_loss"],
        override_quality=cfg["distill"]["override_quality"],
    )
    distill_acc, _ = evaluate(student, V)
    fcfg = finetune_train_config(cfg, seed=point.seed, weight_decay=point.weight_decay)
    student, _ = finetune(student, T, fcfg, val=V)
    acc, _ = evaluate(student, V)
    runtime = time.perf_counter() - t0 if cfg["run"]["record_wall_clock"] else 0.0
    return [
        point_key(cfg, point),
        repr(point.weight_decay),
        point.teacher_checkpoint,
        "" if point.unlabeled_volume is None else str(point.unlabeled_volume),
        str(point.epochs),
        str(point.seed),
        str(len(U)),
        repr(evaluate(teacher, V)[0]),
        repr(distill_acc),
        repr(acc),
        repr(dm[-1].train_loss if dm else float("nan")),
        repr(dm[-1].bound_proxy if dm else float("nan")),
        repr(runtime),
    ]


def _worker(args):
    sections, out, point = args
    return run_sweep_point(ExperimentConfig(sections), Path(out), point)


def read_sweep_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_sweep(cfg: ExperimentConfig, out: Path | None = None, jobs: int = 1) -> Path:
    """Run every grid point x seed not already present in ``sweep.csv``.

    Rows are appended in grid order as soon as every earlier point is done, so
    the finished file does not depend on ``jobs`` or on completion order.
    """
    out = Path(out) if out is not None else cfg.output_dir
    echo_config(cfg, out)
    grid = sweep_grid(cfg)
    target = out / ARTIFACTS["sweep"]
    done = {r["key"] for r in read_sweep_csv(target)}
    todo = [p for p in grid if point_key(cfg, p) not in done]
    if not target.exists():
        _atomic_write(target, (",".join(SWEEP_HEADER) + "\n").encode())

    def append(row: list[str]) -> None:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(row)
        with open(target, "a", newline="") as fh:
            fh.write(buf.getvalue())
            fh.flush()
            os.fsync(fh.fileno())

    if jobs <= 1:
        for p in todo:
            append(run_sweep_point(cfg, out, p))
        return target

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_worker, (cfg.sections, str(out), p)) for p in todo]
        for fut in futures:
            append(fut.result())
    return target
