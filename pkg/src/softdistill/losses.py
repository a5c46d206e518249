"""Classification objectives built from autograd primitives.

All losses are batch means in nats. Targets given as probability rows are
treated as constants: no gradient flows into them.
"""

from __future__ import annotations

import enum

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class LossKind(str, enum.Enum):
    HARD_CE = "hard_ce"
    SOFT_CE = "soft_ce"
    JS_DIV = "js_div"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        aliases = {"hardce": cls.HARD_CE, "softce": cls.SOFT_CE, "jsdiv": cls.JS_DIV}
        key = str(value).strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown loss kind {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


DISTILL_LOSSES = (LossKind.SOFT_CE, LossKind.JS_DIV)


class TargetError(ValueError):
    """Labels or target distributions are malformed."""


def _const(x) -> Tensor:
    return x.detach() if isinstance(x, Tensor) else Tensor(x)


def check_distributions(q: np.ndarray, atol: float = 1e-6) -> None:
    if q.ndim != 2:
        raise TargetError(f"target distributions must be 2-D, got shape {q.shape}")
    if np.any(q < 0.0):
        raise TargetError("target distributions contain negative entries")
    sums = q.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > atol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise TargetError(f"target rows must sum to 1 (worst deviation {worst:.3g})")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy_hard(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise TargetError(f"expected {n} labels, got shape {labels.shape}")
    if n < 1:
        raise TargetError("empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TargetError("labels must be integer class indices")
    if np.any(labels < 0) or np.any(labels >= k):
        raise TargetError(f"labels must lie in [0, {k})")
    logp = ag.log_softmax(logits)
    picked = ag.mul(logp, Tensor._wrap(one_hot(labels, k), False, None))
    return ag.scale(ag.sum(picked), -1.0 / n)


def soft_cross_entropy(student_logits: Tensor, teacher_probs) -> Tensor:
    """Mean of ``-sum_k q_k log p_k`` with ``p = softmax(student_logits)``."""
    q = _const(teacher_probs)
    if q.shape != student_logits.shape:
        raise TargetError(f"target shape {q.shape} != logits shape {student_logits.shape}")
    check_distributions(q.data)
    n = student_logits.shape[0]
    logp = ag.log_softmax(student_logits)
    return ag.scale(ag.sum(ag.mul(q, logp)), -1.0 / n)


def _xlogx(q: np.ndarray) -> np.ndarray:
    out = np.zeros_like(q)
    pos = q > 0.0
    out[pos] = q[pos] * np.log(q[pos])
    return out


def js_divergence(p_logits: Tensor, q_probs) -> Tensor:
    """Mean Jensen-Shannon divergence between ``softmax(p_logits)`` and ``q_probs``.

    JS = 1/2 KL(p || m) + 1/2 KL(q || m) with m = (p + q) / 2, which expands to
    1/2 sum[p log p + q log q] - sum[m log m]. Zero-probability entries of q
    contribute 0 (0 log 0 = 0). The value lies in [0, ln 2].
    """
    q = _const(q_probs)
    if q.shape != p_logits.shape:
        raise TargetError(f"target shape {q.shape} != logits shape {p_logits.shape}")
    check_distributions(q.data)
    n = p_logits.shape[0]
    logp = ag.log_softmax(p_logits)
    p = ag.exp(logp)
    m = ag.scale(ag.add(p, q), 0.5)
    p_logp = ag.mul(p, logp)
    q_logq = float(np.sum(_xlogx(q.data)))
    m_logm = ag.mul(m, ag.log(m))
    total = ag.sub(ag.scale(ag.sum(p_logp), 0.5), ag.sum(m_logm))
    return ag.scale(ag.add(total, Tensor._wrap(np.asarray(0.5 * q_logq), False, None)), 1.0 / n)


def js_divergence_probs(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row JS divergence of two probability arrays, without autograd."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    m = 0.5 * (p + q)
    return 0.5 * _xlogx(p).sum(axis=1) + 0.5 * _xlogx(q).sum(axis=1) - _xlogx(m).sum(axis=1)


def entropy(q: np.ndarray) -> np.ndarray:
    return -_xlogx(np.atleast_2d(q)).sum(axis=1)


def distill_loss(kind: LossKind, logits: Tensor, targets) -> Tensor:
    kind = LossKind.parse(kind)
    if kind is LossKind.SOFT_CE:
        return soft_cross_entropy(logits, targets)
    if kind is LossKind.JS_DIV:
        return js_divergence(logits, targets)
    raise ValueError("hard-label cross-entropy is not a distillation loss")
