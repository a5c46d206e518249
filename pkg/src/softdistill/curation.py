"""Teacher-driven selection of unlabelled data.

Three stages, in order:

1. drop gallery rows whose cosine similarity to any validation row reaches
   ``similarity_threshold`` (keeps evaluation honest),
2. score the survivors with the teacher (softmax rows),
3. keep, for every predicted class, the ``k`` highest-scoring rows.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import ShapeError
from .data import LabeledDataset, UnlabeledGallery
from .nn import ModelParams, predict_logits, softmax_rows


@dataclass(frozen=True)
class CurationConfig:
    similarity_threshold: float = 0.995
    k: int = 400
    metric: str = "cosine"

    def __post_init__(self):
        if not 0.0 < self.similarity_threshold <= 1.0:
            raise ValueError(
                f"similarity_threshold must lie in (0, 1], got {self.similarity_threshold}"
            )
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.metric != "cosine":
            raise ValueError(f"only cosine similarity is supported, got {self.metric!r}")


@dataclass
class SoftLabelSet:
    ids: np.ndarray
    probs: np.ndarray
    argmax: np.ndarray = field(init=False)
    max_score: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.ids.shape[0]:
            raise ValueError("need one probability row per id")
        # np.argmax returns the first maximum, i.e. ties go to the lowest class index
        self.argmax = np.argmax(self.probs, axis=1) if len(self.ids) else np.zeros(0, np.int64)
        self.max_score = (
            self.probs[np.arange(len(self.ids)), self.argmax] if len(self.ids) else np.zeros(0)
        )

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class CurationReport:
    gallery_in: int
    dedup_removed: int
    dedup_out: int
    scored: int
    selected: int
    removed_ids: list[int]
    per_class_selected: dict[int, int]
    per_class_min_score: dict[int, float]
    similarity_threshold: float
    k: int

    def to_json(self) -> str:
        doc = asdict(self)
        doc["per_class_selected"] = {str(c): n for c, n in sorted(self.per_class_selected.items())}
        doc["per_class_min_score"] = {
            str(c): s for c, s in sorted(self.per_class_min_score.items())
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CurationReport":
        doc = json.loads(text)
        doc["per_class_selected"] = {int(c): n for c, n in doc["per_class_selected"].items()}
        doc["per_class_min_score"] = {int(c): s for c, s in doc["per_class_min_score"].items()}
        return cls(**doc)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    out = np.zeros_like(x)
    nz = norms > 0.0
    out[nz] = x[nz] / norms[nz, None]
    return out


def max_cosine_similarity(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """For every row of ``a`` the largest cosine similarity to any row of ``b``.

    Zero-norm rows have similarity 0 to everything.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot compare rows of shape {a.shape} with {b.shape}")
    if b.shape[0] == 0:
        return np.full(a.shape[0], -np.inf)
    ua, ub = _unit_rows(a), _unit_rows(b)
    out = np.empty(a.shape[0])
    for s in range(0, a.shape[0], chunk):
        out[s : s + chunk] = (ua[s : s + chunk] @ ub.T).max(axis=1)
    return out


def dedup_against_validation(
    gallery: UnlabeledGallery, val: LabeledDataset, cfg: CurationConfig
) -> tuple[UnlabeledGallery, np.ndarray]:
    if gallery.dim != val.dim:
        raise ShapeError(f"gallery dim {gallery.dim} != validation dim {val.dim}")
    sim = max_cosine_similarity(gallery.features, val.features)
    drop = sim >= cfg.similarity_threshold
    kept = UnlabeledGallery(gallery.features[~drop], gallery.ids[~drop], gallery.name)
    return kept, np.sort(gallery.ids[drop])


def score_gallery(teacher: ModelParams, gallery: UnlabeledGallery) -> SoftLabelSet:
    if gallery.dim != teacher.spec.input_dim:
        raise ShapeError(f"gallery dim {gallery.dim} != teacher input dim {teacher.spec.input_dim}")
    if len(gallery) == 0:
        return SoftLabelSet(gallery.ids, np.zeros((0, teacher.spec.num_classes)))
    return SoftLabelSet(gallery.ids, softmax_rows(predict_logits(teacher, gallery.features)))


def select_top_k_per_class(soft: SoftLabelSet, k: int) -> np.ndarray:
    """Ids of the ``k`` best-scored samples of every predicted class, ascending.

    Within a class samples are ranked by max score descending, ties by id ascending.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    chosen = []
    for c in np.unique(soft.argmax):
        members = np.flatnonzero(soft.argmax == c)
        order = np.lexsort((soft.ids[members], -soft.max_score[members]))
        chosen.append(soft.ids[members[order[:k]]])
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen))


def curate(
    gallery: UnlabeledGallery,
    val: LabeledDataset,
    teacher: ModelParams,
    cfg: CurationConfig,
) -> tuple[UnlabeledGallery, CurationReport]:
    kept, removed = dedup_against_validation(gallery, val, cfg)
    soft = score_gallery(teacher, kept)
    selected = select_top_k_per_class(soft, cfg.k)
    U = kept.subset(selected, name="curated")

    sel_mask = np.isin(soft.ids, selected)
    per_class, min_score = {}, {}
    for c in range(teacher.spec.num_classes):
        m = sel_mask & (soft.argmax == c)
        per_class[c] = int(m.sum())
        if m.any():
            min_score[c] = float(soft.max_score[m].min())

    report = CurationReport(
        gallery_in=len(gallery),
        dedup_removed=int(len(removed)),
        dedup_out=len(kept),
        scored=len(soft),
        selected=len(U),
        removed_ids=[int(i) for i in removed],
        per_class_selected=per_class,
        per_class_min_score=min_score,
        similarity_threshold=cfg.similarity_threshold,
        k=cfg.k,
    )
    return U, report
