import math
import struct

import numpy as np
import pytest
from scipy.optimize import linprog

from softdistill.data import LabeledDataset, UnlabeledGallery
from softdistill.losses import LossKind
from softdistill.nn import MlpSpec, ModelParams, init_mlp, zeros_like_spec
from softdistill.pipelines import (
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    DivergenceError,
    TeacherQualityError,
    TrainConfig,
    assert_teacher_quality,
    checkpoint_bytes,
    distill,
    evaluate,
    finetune,
    finetune_config,
    parse_checkpoint,
    precompute_soft_labels,
    read_metrics_csv,
    train_teacher,
    write_metrics_csv,
)

JS = TrainConfig(loss=LossKind.JS_DIV, epochs=4, warmup_epochs=1, batch_size=32, seed=5)


def _same(a: ModelParams, b: ModelParams) -> bool:
    return a.equals(b)


@pytest.fixture(scope="module")
def task(small_task):
    T, V, G, _ = small_task
    return T, V, G.subset(G.ids[:200])


@pytest.fixture(scope="module")
def teacher(task):
    T, V, _ = task
    params, _ = train_teacher(T, V, MlpSpec([T.dim, 48, T.num_classes]), TrainConfig(epochs=10, warmup_epochs=1, seed=1))
    return params


def _student(T):
    return MlpSpec([T.dim, 16, T.num_classes])


def test_zero_epochs_returns_init(task):
    T, V, _ = task
    spec = _student(T)
    params, metrics = train_teacher(T, V, spec, TrainConfig(epochs=0))
    assert params.equals(init_mlp(spec, 0)) and metrics == []


def test_training_is_deterministic(task):
    T, V, _ = task
    cfg = TrainConfig(epochs=3, warmup_epochs=1, seed=8)
    a, ma = train_teacher(T, V, _student(T), cfg)
    b, mb = train_teacher(T, V, _student(T), cfg)
    assert a.equals(b) and ma == mb


def test_separable_blobs_fit_perfectly():
    r = np.random.default_rng(0)
    x = np.concatenate([r.normal([-3, 0], 0.5, (50, 2)), r.normal([3, 0], 0.5, (50, 2))])
    y = np.repeat([0, 1], 50)
    # linear separability by LP: find (w, b) with s_i (w.x_i + b) >= 1
    s = np.where(y == 1, 1.0, -1.0)
    A = -s[:, None] * np.hstack([x, np.ones((100, 1))])
    lp = linprog(np.zeros(3), A_ub=A, b_ub=-np.ones(100), bounds=[(None, None)] * 3)
    assert lp.status == 0
    data = LabeledDataset(x, y, 2)
    params, _ = train_teacher(data, None, MlpSpec([2, 2]), TrainConfig(epochs=30, warmup_epochs=0, weight_decay=0.0, batch_size=10))
    assert evaluate(params, data)[0] == 1.0


def test_quality_gate(task):
    _, V, _ = task
    zero = zeros_like_spec(MlpSpec([V.dim, 4, 10]))
    check = assert_teacher_quality(zero, V, 1.0)
    assert abs(check.val_loss - math.log(10)) < 1e-12 and not check.passed
    assert assert_teacher_quality(zero, V, 2.5).passed


def test_distill_refuses_weak_teacher_unless_overridden(task):
    T, V, U = task
    zero = zeros_like_spec(MlpSpec([T.dim, 4, T.num_classes]))
    cfg = TrainConfig(loss="js_div", epochs=1, warmup_epochs=0)
    with pytest.raises(TeacherQualityError):
        distill(zero, _student(T), T, U, cfg, val=V, max_teacher_loss=1.0)
    distill(zero, _student(T), T, U, cfg, val=V, max_teacher_loss=1.0, override_quality=True)


def test_distill_rejects_hard_labels(task, teacher):
    T, _, U = task
    with pytest.raises(ConfigurationError):
        distill(teacher, _student(T), T, U, TrainConfig(loss="hard_ce", epochs=1))


@pytest.mark.parametrize("loss", ["js_div", "soft_ce"])
def test_student_equal_to_teacher_does_not_move(task, teacher, loss):
    T, _, U = task
    cfg = TrainConfig(loss=loss, epochs=1, warmup_epochs=0, weight_decay=0.0, seed=3)
    params, metrics = distill(teacher, teacher.spec, T, U, cfg, init=teacher)
    drift = max(np.max(np.abs(a - b)) for a, b in zip(params.arrays(), teacher.arrays()))
    assert drift < 1e-10
    if loss == "js_div":
        assert metrics[0].train_loss < 1e-12


def test_empty_unlabeled_equals_train_only(task, teacher):
    T, _, _ = task
    empty = UnlabeledGallery(np.zeros((0, T.dim)), np.zeros(0, dtype=np.int64))
    a, _ = distill(teacher, _student(T), T, None, JS)
    b, _ = distill(teacher, _student(T), T, empty, JS)
    assert a.equals(b)


def test_cached_and_online_targets_agree(task, teacher):
    T, _, U = task
    a, _ = distill(teacher, _student(T), T, U, JS)
    b, _ = distill(teacher, _student(T), T, U, JS, online_teacher=True)
    assert max(np.max(np.abs(x - y)) for x, y in zip(a.arrays(), b.arrays())) < 1e-10


def test_distillation_never_reads_train_labels(task, teacher):
    T, _, U = task
    scrambled = LabeledDataset(T.features, np.roll(T.labels, 7), T.num_classes)
    a, _ = distill(teacher, _student(T), T, U, JS)
    b, _ = distill(teacher, _student(T), scrambled, U, JS)
    assert a.equals(b)
    soft = precompute_soft_labels(teacher, T, U)
    assert len(soft) == len(T) + len(U)


def test_evaluation_examples(task):
    T, V, _ = task
    zero = zeros_like_spec(MlpSpec([V.dim, 3, V.num_classes]))
    all_zero = LabeledDataset(V.features, np.zeros(len(V), dtype=np.int64), V.num_classes)
    assert evaluate(zero, all_zero)[0] == 1.0
    accs = [evaluate(init_mlp(MlpSpec([V.dim, 16, V.num_classes]), s), V)[0] for s in range(20)]
    assert abs(np.mean(accs) - 0.10) <= 0.05


def test_checkpoint_round_trip_and_resume(task):
    T, V, _ = task
    cfg = TrainConfig(epochs=10, warmup_epochs=2, seed=4)
    saved = {}

    def keep(cp, rec):
        saved[cp.epoch] = checkpoint_bytes(cp)

    straight, m_straight = train_teacher(T, V, _student(T), cfg, on_epoch=keep)
    cp5 = parse_checkpoint(saved[5])
    assert checkpoint_bytes(cp5) == saved[5]
    resumed, m_resumed = train_teacher(T, V, _student(T), cfg, resume=cp5)
    assert resumed.equals(straight)
    assert m_resumed == m_straight[5:]

    other = TrainConfig(epochs=10, warmup_epochs=2, seed=4, weight_decay=0.0)
    with pytest.raises(ConfigurationError):
        train_teacher(T, V, _student(T), other, resume=cp5)

    blob = saved[5]
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(blob[:8] + struct.pack("<I", 2) + blob[12:])
    with pytest.raises(CheckpointTruncatedError):
        parse_checkpoint(blob[:-3])


def test_divergence_is_reported(task):
    T, V, _ = task
    with pytest.raises(DivergenceError):
        train_teacher(T, V, _student(T), TrainConfig(epochs=5, warmup_epochs=0, base_lr=1e12))


def test_finetune_defaults(task, teacher):
    T, V, _ = task
    ft = finetune_config(JS, epochs=2)
    assert ft.loss is LossKind.HARD_CE and ft.base_lr == pytest.approx(0.1 * JS.base_lr) and ft.warmup_epochs == 0
    params, metrics = finetune(teacher, T, ft, val=V)
    assert [m.epoch for m in metrics] == [1, 2] and metrics[0].stage == "finetune"
    with pytest.raises(ConfigurationError):
        finetune(teacher, T, JS)


def test_metrics_csv_round_trip(tmp_path, task):
    T, V, _ = task
    _, metrics = train_teacher(T, V, _student(T), TrainConfig(epochs=3, warmup_epochs=1))
    path = tmp_path / "m.csv"
    write_metrics_csv(path, metrics[:1])
    write_metrics_csv(path, metrics[1:], append=True)
    assert read_metrics_csv(path) == metrics
    assert all(m.seconds == 0.0 for m in metrics)
