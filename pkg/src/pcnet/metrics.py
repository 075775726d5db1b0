"""Segmentation metrics: rank-based AUC, threshold counts, Dice, and
connected-component post-filtering.

All operations are pure; undefined ratios (zero denominators, single-class
AUC) are reported as None and serialized as "undefined", never as NaN.
"""

import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import Tensor

CSV_FIELDS = ("case", "region", "auc", "acc", "sp", "se", "dice",
              "tp", "fp", "tn", "fn")


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    auc: float | None
    region: str = "all"
    note: str = ""

    @property
    def acc(self):
        n = self.tp + self.fp + self.tn + self.fn
        return (self.tp + self.tn) / n if n else None

    @property
    def sp(self):
        d = self.tn + self.fp
        return self.tn / d if d else None

    @property
    def se(self):
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def dice(self):
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else None

    def to_text(self):
        buf = io.StringIO()
        buf.write(f"region: {self.region}\n")
        for k in ("tp", "fp", "tn", "fn"):
            buf.write(f"{k}: {getattr(self, k)}\n")
        for k in ("auc", "acc", "sp", "se", "dice"):
            v = getattr(self, k)
            buf.write(f"{k}: {'undefined' if v is None else f'{v:.6f}'}\n")
        if self.note:
            buf.write(f"note: {self.note}\n")
        return buf.getvalue()

    def csv_row(self, case="-"):
        vals = [case, self.region]
        for k in ("auc", "acc", "sp", "se", "dice"):
            v = getattr(self, k)
            vals.append("undefined" if v is None else f"{v:.6f}")
        vals += [str(self.tp), str(self.fp), str(self.tn), str(self.fn)]
        return ",".join(vals)


def _rankdata(x):
    """Average ranks (1-based) with ties sharing the mean rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(pred, truth):
    """Probability a random positive outranks a random negative (ties 1/2).

    Equivalent to trapezoidal integration of the ROC curve over all
    distinct thresholds.
    """
    p = _as_array(pred).reshape(-1).astype(np.float64)
    t = _as_array(truth).reshape(-1)
    n_pos = int((t == 1).sum())
    n_neg = int((t == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("single-class ground truth")
    ranks = _rankdata(p)
    pos_rank_sum = ranks[t == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(pred, truth):
    """(fpr, tpr) arrays over all distinct thresholds, for plotting."""
    p = _as_array(pred).reshape(-1).astype(np.float64)
    t = _as_array(truth).reshape(-1).astype(bool)
    order = np.argsort(-p, kind="stable")
    ps = p[order]
    ts = t[order]
    distinct = np.nonzero(np.diff(ps))[0]
    cut = np.concatenate([distinct, [len(ps) - 1]])
    tps = np.cumsum(ts)[cut].astype(np.float64)
    fps = (cut + 1 - tps).astype(np.float64)
    n_pos = ts.sum()
    n_neg = len(ts) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("single-class ground truth")
    tpr = np.concatenate([[0.0], tps / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fps / n_neg, [1.0]])
    return fpr, tpr


def threshold_metrics(pred, truth, threshold=0.5):
    """Confusion counts from pred >= threshold."""
    p = _as_array(pred)
    t = _as_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    pb = p >= threshold
    tb = t != 0
    tp = int(np.count_nonzero(pb & tb))
    fp = int(np.count_nonzero(pb & ~tb))
    tn = int(np.count_nonzero(~pb & ~tb))
    fn = int(np.count_nonzero(~pb & tb))
    return tp, fp, tn, fn


def remove_small_components(mask, min_size=40, connectivity=None):
    """Drop connected components smaller than min_size voxels.

    Connectivity defaults to full (8 in 2D, 26 in 3D).  Surviving voxels
    are bit-identical to the input; idempotent.
    """
    m = _as_array(mask)
    binary = m != 0
    structure = np.ones((3,) * binary.ndim) if connectivity is None else connectivity
    labels, n = ndimage.label(binary, structure=structure)
    if n == 0:
        out = np.zeros_like(m, dtype=np.uint8)
        return Tensor(out) if isinstance(mask, Tensor) else out
    sizes = np.bincount(labels.reshape(-1))
    keep = sizes >= min_size
    keep[0] = False
    out = np.where(keep[labels], m.astype(np.uint8, copy=False), 0).astype(np.uint8)
    return Tensor(out) if isinstance(mask, Tensor) else out


def evaluate_region(pred, truth, region_mask=None, threshold=0.5, region="all"):
    """EvalReport over the voxels where region_mask is 1 (all when absent).

    A region whose ground truth is single-class yields auc = None with an
    explanatory note instead of an error for the other counts.
    """
    p = _as_array(pred)
    t = _as_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if region_mask is not None:
        r = _as_array(region_mask)
        if r.shape != p.shape:
            raise ValueError(f"region mask shape {r.shape} != {p.shape}")
        sel = r != 0
        if not sel.any():
            raise ValueError("empty region")
        p = p[sel]
        t = t[sel]
    tp, fp, tn, fn = threshold_metrics(p, t, threshold)
    note = ""
    try:
        auc = roc_auc(p, t)
    except ValueError:
        auc = None
        note = "auc undefined: single-class ground truth"
    return EvalReport(tp, fp, tn, fn, auc, region=region, note=note)
