"""Classification, segmentation and significance statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import UsageError

# ---------------------------------------------------------------- classification


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: ground truth, columns: prediction

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        k = self.n_classes
        lines = ["truth\\pred," + ",".join(str(j) for j in range(k))]
        lines += [f"{i}," + ",".join(str(int(v)) for v in self.counts[i]) for i in range(k)]
        return "\n".join(lines) + "\n"


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise UsageError(f"{len(preds)} predictions vs {len(labels)} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise UsageError(f"{name} out of range for {n_classes} classes")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def per_class_scores(cm: ConfusionMatrix) -> dict[str, np.ndarray]:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    support = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return {"precision": precision, "recall": recall, "f1": f1, "support": support}


def classification_metrics(cm: ConfusionMatrix, average: str = "weighted") -> dict[str, float]:
    """Accuracy plus precision/recall/F1 averaged by support ("weighted") or uniformly ("macro").

    Classes with no ground-truth samples carry no weight.
    """
    total = cm.total
    if total == 0:
        raise UsageError("empty confusion matrix")
    s = per_class_scores(cm)
    present = s["support"] > 0
    if average == "weighted":
        w = s["support"] / total
    elif average == "macro":
        w = present / present.sum()
    else:
        raise UsageError(f"unknown averaging mode {average!r}")
    return {
        "accuracy": float(np.trace(cm.counts) / total),
        "precision": float(np.sum(w * s["precision"])),
        "recall": float(np.sum(w * s["recall"])),
        "f1": float(np.sum(w * s["f1"])),
    }


# ---------------------------------------------------------------- segmentation


def region_overlap(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int | None = None) -> tuple[float, float]:
    """(Dice, Jaccard) of one class; masks are label maps, or boolean when ``class_id`` is None.

    Two empty masks count as a perfect match.
    """
    p = np.asarray(pred_mask)
    g = np.asarray(gt_mask)
    if p.shape != g.shape:
        raise UsageError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if class_id is not None:
        p, g = p == class_id, g == class_id
    p, g = p.astype(bool), g.astype(bool)
    inter = int(np.logical_and(p, g).sum())
    union = int(np.logical_or(p, g).sum())
    size = int(p.sum() + g.sum())
    if size == 0:
        return 1.0, 1.0
    return 2.0 * inter / size, inter / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask (or the image)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


@dataclass
class SurfaceDistance:
    hd: float
    asd: float
    empty: bool = False  # one side had no surface; hd/asd hold the image diagonal


def boundary_distance(pred_mask: np.ndarray, gt_mask: np.ndarray) -> SurfaceDistance:
    """Hausdorff and average symmetric surface distance between 4-connected boundaries, in pixels."""
    p, g = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise UsageError(f"mask shapes differ: {p.shape} vs {g.shape}")
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bg = np.argwhere(boundary(g)).astype(np.float64)
    if len(bp) == 0 and len(bg) == 0:
        return SurfaceDistance(0.0, 0.0)
    if len(bp) == 0 or len(bg) == 0:
        diag = float(math.hypot(*p.shape))
        return SurfaceDistance(diag, diag, empty=True)
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    hd = float(max(d_pg.max(), d_gp.max()))
    asd = float((d_pg.sum() + d_gp.sum()) / (len(d_pg) + len(d_gp)))
    return SurfaceDistance(hd, asd)


SEG_CLASS_NAMES = {1: "ovary", 2: "follicle"}


def segmentation_metrics(pred: np.ndarray, gt: np.ndarray, classes=SEG_CLASS_NAMES) -> dict[str, dict[str, float]]:
    """Mean DSC/JC/HD/ASD over images, per foreground class."""
    out = {}
    for cid, name in classes.items():
        rows = []
        for pm, gm in zip(pred, gt):
            dsc, jc = region_overlap(pm, gm, cid)
            sd = boundary_distance(pm == cid, gm == cid)
            rows.append((dsc, jc, sd.hd, sd.asd))
        arr = np.array(rows)
        out[name] = {"dsc": float(arr[:, 0].mean()), "jc": float(arr[:, 1].mean()),
                     "hd": float(arr[:, 2].mean()), "asd": float(arr[:, 3].mean())}
    return out


# ---------------------------------------------------------------- paired t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    dof: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"t": self.t, "p": self.p, "dof": self.dof, "degenerate": self.degenerate}


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on a - b with n - 1 degrees of freedom.

    Zero-variance differences cannot be tested: the result is flagged
    ``degenerate`` with t and p set to NaN.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError("paired samples must be 1-d and of equal length")
    n = len(a)
    if n < 2:
        raise UsageError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        return TTestResult(float("nan"), float("nan"), n - 1, degenerate=True)
    t = d.mean() / (sd / math.sqrt(n))
    return TTestResult(float(t), float(t_two_sided_p(t, n - 1)), n - 1)
