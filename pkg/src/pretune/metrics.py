"""Segmentation, classification and reconstruction metrics for test-split evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

FOREGROUND = (1, 2)


def _labels(x) -> np.ndarray:
    return np.asarray(getattr(x, "labels", x))


def dice_score(pred, target, labels: Sequence[int] = FOREGROUND) -> dict[str, float]:
    """Per-label ``2|P & G| / (|P| + |G|)`` plus ``"avg"``; a label absent from both scores 1.0."""
    p, g = _labels(pred), _labels(target)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    out = {}
    for lab in labels:
        pm, gm = p == lab, g == lab
        denom = int(pm.sum()) + int(gm.sum())
        out[str(lab)] = 1.0 if denom == 0 else 2.0 * int((pm & gm).sum()) / denom
    out["avg"] = float(np.mean([out[str(lab)] for lab in labels]))
    return out


_SIX = ndimage.generate_binary_structure(3, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (grid edge counts as outside)."""
    mask = mask.astype(bool)
    inner = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~inner


def _directed(a: np.ndarray, b: np.ndarray, spacing: np.ndarray) -> float:
    """max over voxels ``a`` of the distance to the nearest voxel of ``b`` (integer coordinates)."""
    tree = cKDTree(b * spacing)
    approx, _ = tree.query(a * spacing)
    # near-ties are resolved on distances recomputed from integer offsets, so the
    # value does not depend on where the spacing was applied
    candidates = tree.query_ball_point(a * spacing, approx * (1 + 1e-9) + 1e-12)
    best = 0.0
    for i, idx in enumerate(candidates):
        offsets = (a[i] - b[idx]) * spacing
        best = max(best, float(np.sqrt((offsets**2).sum(axis=1)).min()))
    return best


def hausdorff_distance(
    pred, target, spacing: Sequence[float] = (1.0, 1.0, 1.0), labels: Sequence[int] = FOREGROUND
) -> dict[str, float]:
    """Symmetric Hausdorff distance in mm between boundary voxels, per label plus ``"avg"``.

    Both sides empty gives 0.0; exactly one side empty is undefined and
    reported as NaN. ``"avg"`` averages the defined labels (NaN if none).
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,) or not (spacing > 0).all():
        raise ValueError(f"spacing must be three positive values, got {spacing.tolist()}")
    p, g = _labels(pred), _labels(target)
    out = {}
    for lab in labels:
        pb = np.argwhere(boundary(p == lab))
        gb = np.argwhere(boundary(g == lab))
        if len(pb) == 0 and len(gb) == 0:
            out[str(lab)] = 0.0
        elif len(pb) == 0 or len(gb) == 0:
            out[str(lab)] = math.nan
        else:
            out[str(lab)] = max(_directed(pb, gb, spacing), _directed(gb, pb, spacing))
    defined = [out[str(lab)] for lab in labels if not math.isnan(out[str(lab)])]
    out["avg"] = float(np.mean(defined)) if defined else math.nan
    return out


def confusion_matrix(pred: Sequence[int], target: Sequence[int], n_classes: int = 3) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    pred, target = np.asarray(pred, dtype=np.int64), np.asarray(target, dtype=np.int64)
    return np.bincount(target * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def classification_metrics(logits, labels: Sequence[int], n_classes: int = 3) -> dict:
    """Argmax accuracy, macro-F1 and confusion matrix.

    Macro-F1 averages over classes that occur in the labels or the
    predictions, so perfect predictions score 1.0 even when a class is absent.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return {"accuracy": math.nan, "macro_f1": math.nan, "confusion": np.zeros((n_classes, n_classes), int).tolist()}
    pred = logits.argmax(axis=1)
    cm = confusion_matrix(pred, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    support, predicted = cm.sum(axis=1), cm.sum(axis=0)
    present = (support + predicted) > 0
    f1 = 2 * tp[present] / (support[present] + predicted[present])
    return {
        "accuracy": float(tp.sum() / cm.sum()),
        "macro_f1": float(f1.mean()),
        "confusion": cm.tolist(),
    }


@dataclass
class MetricReport:
    dice: dict[str, float] = field(default_factory=dict)
    hausdorff_mm: dict[str, float] = field(default_factory=dict)
    ms_ssim: float = math.nan
    cls_accuracy: float = math.nan
    cls_macro_f1: float = math.nan
    confusion: list[list[int]] | None = None
    history_path: str | None = None

    @property
    def dice_avg(self) -> float:
        return self.dice.get("avg", math.nan)

    @property
    def hausdorff_avg_mm(self) -> float:
        return self.hausdorff_mm.get("avg", math.nan)

    def to_dict(self) -> dict:
        return asdict(self)


def mean_per_label(rows: Sequence[dict[str, float]]) -> dict[str, float]:
    """Subject-wise mean of per-label dicts, ignoring NaN entries."""
    if not rows:
        return {}
    out = {}
    for k in rows[0]:
        vals = [r[k] for r in rows if not math.isnan(r[k])]
        out[k] = float(np.mean(vals)) if vals else math.nan
    return out
