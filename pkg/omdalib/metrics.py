"""
Ordinal evaluation: confusion matrix, accuracy, Macro-F1, quadratic weighted kappa,
PCA export of embeddings and the class-wise cross-domain alignment score.
"""
import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from omdalib import errors

logger = logging.getLogger(__name__)

PCA_CSV_HEADER = ("domain", "bag_id", "instance_id", "true_label", "pred_label", "pc1", "pc2")


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], k: int) -> np.ndarray:
    """Rows are true labels, columns predicted labels, both ``1..K``."""
    if len(y_true) != len(y_pred):
        raise errors.ValidationError("{} true labels vs {} predictions".format(len(y_true), len(y_pred)))
    if len(y_true) == 0:
        raise errors.ValidationError("confusion matrix of an empty sample")
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    for name, arr in (("true", t), ("predicted", p)):
        bad = arr[(arr < 1) | (arr > k)]
        if bad.size:
            raise errors.LabelError("{} label {} outside 1..{}".format(name, int(bad[0]), k))
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t - 1, p - 1), 1)
    return cm


def accuracy_macro_f1(cm: np.ndarray) -> Tuple[float, float]:
    """
    A class with precision + recall = 0 contributes F1 = 0 and stays in the mean,
    including classes that are never true and never predicted.
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.size == 0 or total == 0:
        raise errors.ValidationError("confusion matrix is empty")
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    actual = cm.sum(axis=1).astype(float)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(tp.sum() / total), float(f1.mean())


def qwk(cm: np.ndarray, k: int) -> Optional[float]:
    """
    Quadratic weighted kappa. Returns None when chance disagreement is zero (undefined).
    """
    if k < 2:
        raise errors.ValidationError("kappa needs K >= 2, got {}".format(k))
    o = np.asarray(cm, dtype=float)
    if o.shape != (k, k):
        raise errors.ShapeError("confusion matrix {} for K={}".format(o.shape, k))
    n = o.sum()
    if n == 0:
        raise errors.ValidationError("confusion matrix is empty")
    idx = np.arange(k)
    w = (idx[:, None] - idx[None, :]) ** 2 / float((k - 1) ** 2)
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / n
    expected = float(np.sum(w * e))
    if expected == 0:
        return None
    return 1.0 - float(np.sum(w * o)) / expected


@dataclass
class EvalReport:
    k: int
    confusion: np.ndarray
    accuracy: float
    macro_f1: float
    qwk: Optional[float]
    count: int
    level: str = "instance"

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "k": self.k,
            "count": self.count,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "qwk": self.qwk,
            "confusion": self.confusion.tolist(),
        }


def evaluate_labels(y_true: Sequence[int], y_pred: Sequence[int], k: int, level: str = "instance") -> EvalReport:
    cm = confusion_matrix(y_true, y_pred, k)
    acc, f1 = accuracy_macro_f1(cm)
    return EvalReport(k=k, confusion=cm, accuracy=acc, macro_f1=f1, qwk=qwk(cm, k), count=int(cm.sum()), level=level)


@dataclass
class PcaProjection:
    coordinates: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    rank_deficient: bool


def pca_project(embeddings: np.ndarray, dims: int = 2) -> PcaProjection:
    """
    Mean-centred projection on the top principal directions, largest eigenvalue first.
    Each direction is signed so its first non-zero loading is positive. Directions beyond
    the data rank project to 0 and ``rank_deficient`` is set.
    """
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2:
        raise errors.ShapeError("expected a 2-D sample matrix, got shape {}".format(x.shape))
    if x.shape[0] < dims:
        raise errors.ValidationError("{} samples cannot give {} components".format(x.shape[0], dims))
    if not np.all(np.isfinite(x)):
        raise errors.NumericalError("embeddings contain non-finite values")
    centred = x - x.mean(axis=0, keepdims=True)
    cov = centred.T @ centred / max(x.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    tol = max(eigvals.max(initial=0.0), 1.0) * 1e-12 * x.shape[1]
    comps = np.zeros((x.shape[1], dims))
    variances = np.zeros(dims)
    rank_deficient = False
    for i in range(dims):
        if i >= eigvals.size or eigvals[i] <= tol:
            rank_deficient = True
            continue
        vec = eigvecs[:, i]
        nz = np.flatnonzero(np.abs(vec) > 1e-12)
        if nz.size and vec[nz[0]] < 0:
            vec = -vec
        comps[:, i] = vec
        variances[i] = eigvals[i]
    if rank_deficient:
        logger.info("PCA input has rank below %d; trailing coordinates are zero", dims)
    return PcaProjection(coordinates=centred @ comps, components=comps, explained_variance=variances,
                         rank_deficient=rank_deficient)


@dataclass
class PcaRow:
    domain: str
    bag_id: str
    instance_id: str
    true_label: Optional[int]
    pred_label: int


def export_pca_csv(path: str, rows: Sequence[PcaRow], projection: PcaProjection) -> None:
    """Labels are written 0-based; a missing true label is written empty."""
    if len(rows) != projection.coordinates.shape[0]:
        raise errors.ShapeError("{} rows for {} projected points".format(len(rows), projection.coordinates.shape[0]))
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(PCA_CSV_HEADER)
        for row, (pc1, pc2) in zip(rows, projection.coordinates[:, :2]):
            true = "" if row.true_label is None else row.true_label - 1
            writer.writerow([row.domain, row.bag_id, row.instance_id, true, row.pred_label - 1,
                             repr(float(pc1)), repr(float(pc2))])


@dataclass
class AlignmentScore:
    distances: Dict[int, float]
    mean: float
    excluded: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"distances": {str(c): d for c, d in sorted(self.distances.items())}, "mean": self.mean,
                "excluded": list(self.excluded)}


def group_by_class(embeddings: np.ndarray, labels: Sequence[int]) -> Dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(c): embeddings[labels == c] for c in np.unique(labels)}


def alignment_score(source_by_class: Mapping[int, np.ndarray],
                    target_by_class: Mapping[int, np.ndarray]) -> AlignmentScore:
    """Euclidean distance between source and target class centroids, averaged over the shared classes."""
    present_s = {c for c, e in source_by_class.items() if len(e)}
    present_t = {c for c, e in target_by_class.items() if len(e)}
    shared = sorted(present_s & present_t)
    if not shared:
        raise errors.ValidationError("no class has embeddings in both domains")
    distances = {}
    for c in shared:
        mu_s = np.asarray(source_by_class[c], dtype=float).mean(axis=0)
        mu_t = np.asarray(target_by_class[c], dtype=float).mean(axis=0)
        distances[c] = float(np.linalg.norm(mu_s - mu_t))
    excluded = sorted(present_s - present_t)
    return AlignmentScore(distances=distances, mean=float(np.mean(list(distances.values()))), excluded=excluded)
