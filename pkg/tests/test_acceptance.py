"""Acceptance suite: every criterion prints a PASS/FAIL line in the terminal summary.

The heavy criteria (4-7, 9) share one synthetic task, one set of teachers and a
cache of distilled students, so each training run happens at most once.
"""

import math
import shutil
import time
import zlib

import numpy as np
import pytest

from softdistill import autograd as ag
from softdistill.autograd import Tensor, grad_check
from softdistill.cli import main as cli_main
from softdistill.curation import CurationConfig, SoftLabelSet, curate, select_top_k_per_class
from softdistill.data import (
    LabeledDataset,
    SyntheticConfig,
    dataset_bytes,
    generate_synthetic,
    load_dataset,
    parse_dataset,
    save_dataset,
)
from softdistill.losses import (
    cross_entropy_hard,
    entropy,
    js_divergence,
    one_hot,
    soft_cross_entropy,
)
from softdistill.nn import MlpSpec, bound_proxy_from_norms, forward_tensors, init_mlp
from softdistill.optim import ScheduleConfig, lr_at
from softdistill.pipelines import (
    TrainConfig,
    checkpoint_bytes,
    distill,
    evaluate,
    finetune,
    finetune_config,
    metrics_csv,
    parse_checkpoint,
    train_supervised,
    train_teacher,
)

DATA = SyntheticConfig(mean_scale=0.65)
STUDENT = MlpSpec([32, 32, 10])
TEACHERS = {
    "weak": (MlpSpec([32, 256, 256, 10]), TrainConfig(epochs=1, base_lr=0.01, warmup_epochs=0, weight_decay=5e-4)),
    "default": (MlpSpec([32, 256, 256, 10]), TrainConfig(epochs=100, weight_decay=5e-4)),
    "wide": (MlpSpec([32, 512, 512, 10]), TrainConfig(epochs=100, weight_decay=5e-4)),
}
DISTILL_EPOCHS, FINETUNE_EPOCHS = 120, 10
VOLUMES = (0, 2000, 4000, 8000)
BETAS = (3e-4, 1e-4, 3e-5)
SEEDS5, SEEDS3 = range(5), range(3)


def distill_cfg(seed, wd=1e-4):
    return TrainConfig(loss="js_div", epochs=DISTILL_EPOCHS, weight_decay=wd, seed=seed)


class Lab:
    """Lazily trained models on the default task, each computed once."""

    def __init__(self):
        self.T, self.V, self.G, self.oracle = generate_synthetic(DATA)
        self.bayes = self.oracle.bayes_accuracy(self.V)
        self._teachers, self._curated, self._distilled, self._final = {}, {}, {}, {}
        self._baseline = {}

    def teacher(self, name):
        if name not in self._teachers:
            spec, cfg = TEACHERS[name]
            self._teachers[name] = train_teacher(self.T, self.V, spec, cfg)[0]
        return self._teachers[name]

    def curated(self, name, volume):
        key = (name, volume)
        if key not in self._curated:
            k = math.ceil(volume / self.T.num_classes)
            U, report = curate(self.G, self.V, self.teacher(name), CurationConfig(k=k))
            self._curated[key] = (U.subset(U.ids[:volume]), report)
        return self._curated[key][0]

    def distilled(self, name, volume, seed, wd=1e-4):
        key = (name, volume, seed, wd)
        if key not in self._distilled:
            self._distilled[key] = distill(
                self.teacher(name), STUDENT, self.T, self.curated(name, volume), distill_cfg(seed, wd)
            )
        return self._distilled[key]

    def distill_acc(self, name, volume, seed):
        return evaluate(self.distilled(name, volume, seed)[0], self.V)[0]

    def final_acc(self, volume, seed):
        key = (volume, seed)
        if key not in self._final:
            student, _ = self.distilled("default", volume, seed)
            student, _ = finetune(student, self.T, finetune_config(distill_cfg(seed), FINETUNE_EPOCHS))
            self._final[key] = evaluate(student, self.V)[0]
        return self._final[key]

    def baseline_acc(self, seed):
        if seed not in self._baseline:
            cfg = TrainConfig(epochs=DISTILL_EPOCHS + FINETUNE_EPOCHS, weight_decay=1e-4, seed=seed)
            self._baseline[seed] = evaluate(train_supervised(self.T, self.V, STUDENT, cfg)[0], self.V)[0]
        return self._baseline[seed]


@pytest.fixture(scope="module")
def lab():
    return Lab()


def _fmt(x):
    return f"{x:.4f}"


# ---------------------------------------------------------------------------
# 1


def _loss_fns():
    def hard(logits, y, q):
        return cross_entropy_hard(logits, y)

    def soft(logits, y, q):
        return soft_cross_entropy(logits, q)

    def js(logits, y, q):
        return js_divergence(logits, q)

    return {"hard_ce": hard, "soft_ce": soft, "js_div": js}


@pytest.mark.criterion(1, "gradient correctness vs central differences")
def test_criterion_01_gradients(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    specs = [MlpSpec([4, 3]), MlpSpec([5, 8, 4]), MlpSpec([6, 16, 12, 5])]
    for spec in specs:
        for loss_name, loss in _loss_fns().items():
            for beta in (0.0, 1e-2):
                seed = zlib.crc32(f"{spec.layer_widths}{loss_name}{beta}".encode())
                r = np.random.default_rng(seed)
                params = init_mlp(spec, seed)
                params.biases = [r.standard_normal(b.shape) * 0.1 for b in params.biases]
                x = Tensor(r.standard_normal((7, spec.input_dim)))
                y = r.integers(0, spec.num_classes, size=7)
                q = r.dirichlet(np.ones(spec.num_classes), size=7)
                arrays = params.arrays()
                for j in range(len(arrays)):
                    def f(p, j=j):
                        leaves = [Tensor(a) for a in arrays]
                        leaves[j] = p
                        out = loss(forward_tensors(leaves[0::2], leaves[1::2], x), y, q)
                        for W in leaves[0::2]:
                            if beta:
                                out = ag.add(out, ag.scale(ag.sum(ag.mul(W, W)), beta / 2))
                        return out

                    worst = max(worst, grad_check(f, arrays[j], h=1e-5))
    elapsed = time.perf_counter() - t0
    record_property("max_rel_err", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.2f}")
    assert worst < 1e-4
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2

JS_ORACLE = 0.2157615543388357  # direct definition evaluated in 40-digit arithmetic


@pytest.mark.criterion(2, "loss properties over 10^4 random trials")
def test_criterion_02_loss_properties(record_property):
    r = np.random.default_rng(2024)
    trials = 10_000
    worst = {"sym": 0.0, "self": 0.0, "entropy": 0.0, "uniform": 0.0}
    lo, hi = np.inf, -np.inf
    for _ in range(trials):
        K = int(r.integers(2, 11))
        zp = r.standard_normal((1, K)) * r.uniform(0.1, 5)
        zq = r.standard_normal((1, K)) * r.uniform(0.1, 5)
        p = np.exp(ag.log_softmax(Tensor(zp)).data)
        q = np.exp(ag.log_softmax(Tensor(zq)).data)
        a = js_divergence(Tensor(zp), q).item()
        b = js_divergence(Tensor(zq), p).item()
        worst["sym"] = max(worst["sym"], abs(a - b))
        lo, hi = min(lo, a), max(hi, a)
        worst["self"] = max(worst["self"], abs(js_divergence(Tensor(zp), p).item()))
        log_q = np.log(q)
        worst["entropy"] = max(worst["entropy"], abs(soft_cross_entropy(Tensor(log_q), q).item() - entropy(q)[0]))
        c = r.uniform(-50, 50)
        y = r.integers(0, K, size=1)
        worst["uniform"] = max(
            worst["uniform"], abs(cross_entropy_hard(Tensor(np.full((1, K), c)), y).item() - math.log(K))
        )
    onehot = js_divergence(Tensor([[0.0, -800.0]]), np.array([[0.5, 0.5]])).item()
    for k, v in worst.items():
        record_property(k, f"{v:.1e}")
    record_property("js_range", f"[{lo:.3g},{hi:.4f}]")
    assert worst["sym"] < 1e-12
    assert 0.0 <= lo and hi <= math.log(2)
    assert worst["self"] < 1e-12
    assert worst["entropy"] < 1e-12
    assert worst["uniform"] < 1e-12
    assert abs(onehot - JS_ORACLE) < 1e-9
    # one-hot target route through soft CE agrees with hard CE
    z = r.standard_normal((5, 4))
    yy = r.integers(0, 4, size=5)
    assert abs(soft_cross_entropy(Tensor(z), one_hot(yy, 4)).item() - cross_entropy_hard(Tensor(z), yy).item()) < 1e-12


# ---------------------------------------------------------------------------
# 3


@pytest.mark.criterion(3, "learning-rate schedule exactness")
def test_criterion_03_schedule():
    for base, warm, epochs, spe in ((0.1, 5, 120, 32), (0.01, 3, 10, 7), (1.0, 1, 2, 1)):
        cfg = ScheduleConfig(base, warm, epochs, spe)
        W, S = cfg.warmup_steps, cfg.total_steps
        assert abs(lr_at(W, cfg) - base) < 1e-12
        if (S - W) % 2 == 0:
            assert abs(lr_at(W + (S - W) // 2, cfg) - base / 2) < 1e-12
        assert abs(lr_at(S, cfg)) < 1e-12
        for s in range(W):
            assert abs(lr_at(s, cfg) - base * (s + 1) / W) < 1e-12


# ---------------------------------------------------------------------------
# 4


@pytest.mark.criterion(4, "distillation beats supervised baseline by >= 1 point")
def test_criterion_04_distill_beats_baseline(lab, record_property):
    t0 = time.perf_counter()
    teacher_acc = evaluate(lab.teacher("default"), lab.V)[0]
    distilled = [lab.final_acc(8000, s) for s in SEEDS5]
    baseline = [lab.baseline_acc(s) for s in SEEDS5]
    elapsed = time.perf_counter() - t0
    gain = np.mean(distilled) - np.mean(baseline)
    record_property("bayes", _fmt(lab.bayes))
    record_property("teacher", _fmt(teacher_acc))
    record_property("distilled", _fmt(np.mean(distilled)))
    record_property("baseline", _fmt(np.mean(baseline)))
    record_property("seconds", f"{elapsed:.0f}")
    assert 0.85 <= teacher_acc < lab.bayes
    assert gain >= 0.010
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# 5


@pytest.mark.criterion(5, "final accuracy nondecreasing in unlabeled volume")
def test_criterion_05_volume_trend(lab, record_property):
    means = [np.mean([lab.final_acc(v, s) for s in SEEDS5]) for v in VOLUMES]
    for v, m in zip(VOLUMES, means):
        record_property(f"U={v}", _fmt(m))
    assert [len(lab.curated("default", v)) for v in VOLUMES] == list(VOLUMES)
    for a, b in zip(means, means[1:]):
        assert b >= a - 0.005


# ---------------------------------------------------------------------------
# 6 and 9 share the same runs


def _beta_runs(lab):
    out = {}
    for beta in BETAS:
        runs = [lab.distilled("default", 8000, s, beta)[1][-1] for s in SEEDS3]
        out[beta] = ([m.train_loss for m in runs], [m.bound_proxy for m in runs])
    return out


@pytest.mark.criterion(6, "lower weight decay reaches lower training loss")
def test_criterion_06_weight_decay_trend(lab, record_property):
    runs = _beta_runs(lab)
    losses = [np.mean(runs[b][0]) for b in BETAS]
    for b, v in zip(BETAS, losses):
        record_property(f"beta={b:g}", f"{v:.5f}")
    assert losses[0] > losses[1] > losses[2]


# ---------------------------------------------------------------------------
# 7


@pytest.mark.criterion(7, "teacher-quality saturation")
def test_criterion_07_teacher_saturation(lab, record_property):
    names = ("weak", "default", "wide")
    teacher_acc = [evaluate(lab.teacher(n), lab.V)[0] for n in names]
    student_acc = [np.mean([lab.distill_acc(n, 8000, s) for s in SEEDS5]) for n in names]
    for n, t, s in zip(names, teacher_acc, student_acc):
        record_property(n, f"teacher {t:.4f} student {s:.4f}")
    assert teacher_acc[0] < teacher_acc[1] < teacher_acc[2]
    assert min(student_acc[1:]) - student_acc[0] >= 0.010
    assert abs(student_acc[1] - student_acc[2]) <= 0.005


# ---------------------------------------------------------------------------
# 8


def _brute_top_k(ids, probs, k):
    chosen = []
    for c in range(probs.shape[1]):
        members = [i for i in range(len(ids)) if int(np.argmax(probs[i])) == c]
        members.sort(key=lambda i: (-probs[i].max(), ids[i]))
        chosen += [int(ids[i]) for i in members[:k]]
    return sorted(chosen)


@pytest.mark.criterion(8, "curation exactness")
def test_criterion_08_curation(lab, record_property):
    k = 800
    U, report = curate(lab.G, lab.V, lab.teacher("default"), CurationConfig(k=k))
    u = U.features / np.linalg.norm(U.features, axis=1, keepdims=True)
    v = lab.V.features / np.linalg.norm(lab.V.features, axis=1, keepdims=True)
    max_sim = (u @ v.T).max()
    record_property("max_cos_selected_vs_val", f"{max_sim:.4f}")
    record_property("selected", str(len(U)))
    assert max_sim < 0.995
    assert not np.isin(lab.oracle.planted_ids, U.ids).any()
    assert all(n <= k for n in report.per_class_selected.values())

    r = np.random.default_rng(8)
    probs = np.round(r.dirichlet(np.full(10, 0.3), size=1000), 2)  # rounding creates ties
    probs /= probs.sum(axis=1, keepdims=True)
    ids = r.permutation(5000)[:1000]
    soft = SoftLabelSet(ids, probs)
    for kk in (0, 1, 17, 100, 1000):
        assert select_top_k_per_class(soft, kk).tolist() == _brute_top_k(ids, soft.probs, kk)


# ---------------------------------------------------------------------------
# 9


@pytest.mark.criterion(9, "generalization proxy arithmetic and tradeoff")
def test_criterion_09_bound_proxy(lab, record_property):
    assert bound_proxy_from_norms([2.0, 3.0], 100) == 2.4
    assert bound_proxy_from_norms([2.0, 3.0], 400) == 2.4 / 2
    runs = _beta_runs(lab)
    for b in BETAS:
        record_property(f"beta={b:g}", f"{np.mean(runs[b][1]):.3f}")
    for s in range(len(SEEDS3)):
        proxies = [runs[b][1][s] for b in BETAS]
        assert proxies[0] < proxies[1] < proxies[2]
    losses = [np.mean(runs[b][0]) for b in BETAS]
    assert losses[0] > losses[1] > losses[2]


# ---------------------------------------------------------------------------
# 10 and 11 run the pipeline end to end on a small config

SMALL_INI = """\
[run]
seed = 4

[dataset]
n_train = 300
n_val = 300
n_gallery = 1500

[teacher]
hidden = 64
epochs = 6
warmup_epochs = 1

[curation]
k = 60

[distill]
epochs = 5
warmup_epochs = 1
override_quality = true

[finetune]
epochs = 2
"""


def _cli(stage, cfg, out):
    assert cli_main([stage, "--config", str(cfg), "--out", str(out)]) == 0, stage


@pytest.mark.criterion(10, "determinism and persistence")
def test_criterion_10_determinism(tmp_path, small_task):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(SMALL_INI)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for stage in ("gen-data", "train-teacher", "curate", "distill", "finetune", "evaluate"):
            _cli(stage, cfg, out)
        runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert runs[0].keys() == runs[1].keys()
    assert {"teacher.ckpt", "student.ckpt", "metrics_teacher.csv", "metrics_distill.csv"} <= runs[0].keys()
    for name in runs[0]:
        assert runs[0][name] == runs[1][name], name

    # resume from every epoch boundary equals the uninterrupted run
    T, V, _, _ = small_task
    spec, tcfg = MlpSpec([T.dim, 32, T.num_classes]), TrainConfig(epochs=6, warmup_epochs=2, seed=9)
    saved = {}
    straight, m_straight = train_teacher(
        T, V, spec, tcfg, on_epoch=lambda cp, rec: saved.__setitem__(cp.epoch, checkpoint_bytes(cp))
    )
    for epoch in range(1, 6):
        resumed, m_tail = train_teacher(T, V, spec, tcfg, resume=parse_checkpoint(saved[epoch]))
        assert resumed.equals(straight)
        assert metrics_csv(m_straight[:epoch]) + metrics_csv(m_tail, header=False) == metrics_csv(m_straight)
        assert checkpoint_bytes(parse_checkpoint(saved[epoch])) == saved[epoch]

    # dataset files round-trip bitwise
    for obj in small_task[:3]:
        path = tmp_path / f"{obj.name}.bin"
        save_dataset(path, obj)
        assert load_dataset(path).equals(obj)
        assert dataset_bytes(parse_dataset(path.read_bytes())) == path.read_bytes()


@pytest.mark.criterion(11, "distillation is blind to training labels")
def test_criterion_11_label_blindness(tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(SMALL_INI)
    a, b = tmp_path / "a", tmp_path / "b"
    for stage in ("gen-data", "train-teacher", "curate"):
        _cli(stage, cfg, a)
    shutil.copytree(a, b)
    T = load_dataset(b / "train.bin")
    perm = np.random.default_rng(11).permutation(len(T))
    shuffled = LabeledDataset(T.features, T.labels[perm], T.num_classes, T.name)
    assert not np.array_equal(shuffled.labels, T.labels)
    save_dataset(b / "train.bin", shuffled)
    for out in (a, b):
        _cli("distill", cfg, out)
    for name in ("student_distilled.ckpt", "metrics_distill.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
