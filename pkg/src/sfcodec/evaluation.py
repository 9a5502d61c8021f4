"""Verification accuracy, image quality metrics and rate curves."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
METRIC_RANGES = {"accuracy": (0.0, 1.0), "AUC": (0.0, 1.0), "MS-SSIM": (0.0, 1.0), "PSNR": (0.0, math.inf)}


# ---------------------------------------------------------------------------
# face verification


def pair_distances(emb_a, emb_b, metric="cosine"):
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    if metric == "cosine":
        return 1.0 - np.sum(a * b, axis=1)
    if metric == "euclidean":
        return np.sum((a - b) ** 2, axis=1)
    raise ValueError(f"unknown distance metric {metric!r}")


def roc_auc(scores, positive):
    """Mann-Whitney estimate of the ROC area; higher score means 'positive'."""
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def best_threshold(dist, same):
    """Threshold maximizing accuracy of the rule ``same iff dist <= t``."""
    u = np.unique(dist)
    cands = np.concatenate([[u[0] - 1e-6], (u[:-1] + u[1:]) / 2, [u[-1] + 1e-6]])
    d_same = np.sort(dist[same])
    d_diff = np.sort(dist[~same])
    tp = np.searchsorted(d_same, cands, side="right")
    tn = len(d_diff) - np.searchsorted(d_diff, cands, side="right")
    acc = (tp + tn) / len(dist)
    i = int(np.argmax(acc))
    return float(cands[i]), float(acc[i])


@dataclass
class VerificationResult:
    accuracy: float
    auc: float
    threshold: float
    fold_accuracies: list[float]


def verification_accuracy(emb_a, emb_b, same, folds=10, metric="cosine"):
    """k-fold protocol: pick the threshold on k-1 folds, score the held-out fold.

    Pairs are assumed to be listed fold by fold (contiguous, equal-sized),
    as in an LFW pairs file.
    """
    same = np.asarray(same, dtype=bool)
    dist = pair_distances(emb_a, emb_b, metric)
    n = len(dist)
    if n < folds:
        raise ValueError("fewer pairs than folds")
    bounds = np.linspace(0, n, folds + 1).astype(int)
    accs, thresholds = [], []
    for k in range(folds):
        test = np.zeros(n, dtype=bool)
        test[bounds[k] : bounds[k + 1]] = True
        t, _ = best_threshold(dist[~test], same[~test])
        pred = dist[test] <= t
        accs.append(float(np.mean(pred == same[test])))
        thresholds.append(t)
    return VerificationResult(float(np.mean(accs)), roc_auc(-dist, same), float(np.mean(thresholds)), accs)


def resolve_pairs(folds, lookup):
    """Turn pair folds into flat ``(path_a, path_b, same)`` lists via a manifest lookup."""
    from .errors import DataError

    paths_a, paths_b, same = [], [], []
    for fold in folds:
        for p in fold:
            try:
                paths_a.append(lookup[(p.name_a, p.index_a)])
                paths_b.append(lookup[(p.name_b, p.index_b)])
            except KeyError as exc:
                raise DataError(f"pair references unknown image {exc.args[0]}") from None
            same.append(p.same)
    return paths_a, paths_b, np.asarray(same)


# ---------------------------------------------------------------------------
# image quality


def _to_np(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, max_value=1.0):
    """PSNR in dB; identical inputs return the 99 dB cap."""
    a, b = _to_np(a), _to_np(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_value**2 / mse))


def _gaussian_window(size, sigma=1.5):
    g = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(g**2) / (2 * sigma**2))
    g = g / g.sum()
    return g


def _ssim_terms(x, y, win, c1, c2):
    c = x.shape[1]
    k = len(win)
    wh = win.view(1, 1, 1, k).repeat(c, 1, 1, 1)
    wv = win.view(1, 1, k, 1).repeat(c, 1, 1, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, wh, groups=c), wv, groups=c)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return (lum * cs).mean(), cs.mean()


def ms_ssim(a, b, max_value=1.0, weights=MS_SSIM_WEIGHTS):
    """Five-scale MS-SSIM on ``(C, H, W)`` images.

    The 11-tap Gaussian window is truncated to the image size at coarse scales
    so small images still get every scale. Negative per-scale terms are
    clipped at zero before exponentiation.
    """
    x = torch.as_tensor(_to_np(a))
    y = torch.as_tensor(_to_np(b))
    if x.shape != y.shape:
        raise ValueError(f"ms_ssim shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    x, y = x[None], y[None]
    c1, c2 = (0.01 * max_value) ** 2, (0.03 * max_value) ** 2
    levels = len(weights)
    if min(x.shape[-2:]) < 2 ** (levels - 1):
        raise ValueError("image too small for the number of MS-SSIM scales")
    vals = []
    for i in range(levels):
        size = min(11, *x.shape[-2:])
        size -= 1 - size % 2
        ssim_val, cs = _ssim_terms(x, y, _gaussian_window(size), c1, c2)
        vals.append(ssim_val if i == levels - 1 else cs)
        if i < levels - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    out = 1.0
    for v, w in zip(vals, weights):
        out *= max(float(v), 0.0) ** w
    return float(out)


def mean_metric(fn, batch_a, batch_b):
    """Per-image metric averaged over a batch."""
    return float(np.mean([fn(a, b) for a, b in zip(batch_a, batch_b)]))


# ---------------------------------------------------------------------------
# rate curves


@dataclass
class RatePoint:
    bpp: float
    metric_name: str
    metric_value: float
    layer: str = "base"
    operating_point_id: int = 0

    def __post_init__(self):
        if self.bpp < 0:
            raise ValueError("bpp must be >= 0")
        lo, hi = METRIC_RANGES.get(self.metric_name, (-math.inf, math.inf))
        if not lo <= self.metric_value <= hi:
            raise ValueError(f"{self.metric_name}={self.metric_value} outside [{lo}, {hi}]")
        if self.layer not in ("base", "total", "enhancement"):
            raise ValueError(f"unknown layer {self.layer!r}")


def saturation_point(points, epsilon=0.001):
    """Smallest-bpp point whose metric is within ``epsilon`` of the best one."""
    if not points:
        raise ValueError("empty sweep")
    best = max(p.metric_value for p in points)
    ok = [p for p in points if p.metric_value >= best - epsilon]
    return min(ok, key=lambda p: (p.bpp, -p.metric_value))


def fixed_base_budgeting(base_sweep, epsilon=0.001):
    """Pick the base operating point that later total-rate figures are built on."""
    return saturation_point(base_sweep, epsilon)


def count_inversions(xs, ys, increasing=True):
    """Adjacent order violations of ``ys`` after sorting by ``xs``."""
    order = np.argsort(np.asarray(xs, dtype=np.float64), kind="stable")
    v = np.asarray(ys, dtype=np.float64)[order]
    d = np.diff(v)
    return int(np.sum(d < 0 if increasing else d > 0))


CSV_FIELDS = ("bpp", "layer", "metric", "value", "operating_point_id")


def write_rate_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for p in sorted(points, key=lambda p: (p.metric_name, p.bpp)):
            w.writerow([f"{p.bpp:.8f}", p.layer, p.metric_name, f"{p.metric_value:.6f}", p.operating_point_id])


def read_rate_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        RatePoint(float(r["bpp"]), r["metric"], float(r["value"]), r["layer"], int(r["operating_point_id"]))
        for r in rows
    ]


def plot_rate_curve(points, path, title=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted({p.metric_name for p in points})
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.2), squeeze=False)
    for ax, name in zip(axes[0], names):
        pts = sorted((p for p in points if p.metric_name == name), key=lambda p: p.bpp)
        ax.plot([p.bpp for p in pts], [p.metric_value for p in pts], "o-")
        ax.set_xlabel("bpp")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def rate_curve(operating_points, evaluate, out_dir=None, name="rate_curve", epsilon=0.001):
    """Evaluate each operating point, write CSV/plot, report the saturation point.

    ``evaluate(op)`` returns one RatePoint or a list of them. The saturation
    point is computed over base-layer accuracy points when present.
    """
    ops = list(operating_points)
    if len(ops) < 2:
        raise ValueError("a rate curve needs at least two operating points")
    points = []
    for op in ops:
        r = evaluate(op)
        points.extend(r if isinstance(r, list) else [r])
    points.sort(key=lambda p: p.bpp)
    acc = [p for p in points if p.metric_name == "accuracy" and p.layer == "base"]
    sat = saturation_point(acc, epsilon) if acc else None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rate_csv(points, out_dir / f"{name}.csv")
        plot_rate_curve(points, out_dir / f"{name}.png", name)
    return points, sat
