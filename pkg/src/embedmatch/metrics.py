"""Quantitative measures: PSNR, SSIM, cosine similarity, attack aggregates.

PSNR runs on float images with peak 1.0 and returns +inf for identical
inputs; infinite values are excluded from dataset means (the exclusion count
is reported).  SSIM follows the canonical definition: 11x11 Gaussian window
with sigma 1.5, K1=0.01, K2=0.03, valid windows only, channels averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, ShapeError
from .model import embed, predict

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf sentinel for identical images."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: dims {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)


def _windowed_mean(x: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    return np.tensordot(windows, _KERNEL, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity over valid Gaussian windows, in [-1, 1]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: dims {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"ssim: expected (H, W, C) images, got {a.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ContractError(
            f"ssim: image {a.shape[:2]} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    values = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch].astype(np.float64)
        y = b[:, :, ch].astype(np.float64)
        mx, my = _windowed_mean(x), _windowed_mean(y)
        vx = _windowed_mean(x * x) - mx * mx
        vy = _windowed_mean(y * y) - my * my
        cxy = _windowed_mean(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        values.append(float(np.mean(num / den)))
    return float(np.mean(values))


def cosine(u, v) -> float:
    """Normalized dot product of two embedding vectors, in [-1, 1]."""
    u = np.asarray(getattr(u, "values", u), dtype=np.float64)
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cosine: lengths {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ContractError("cosine: zero vector")
    return float(u @ v / (nu * nv))


def match_success_rate(records, weights, kind: str) -> float:
    """Fraction of optimized images classified as the target's true label.

    Recomputes every prediction from the stored image; independent of the
    labels cached on the records.
    """
    if not records:
        raise ValueError("no records")
    hits = sum(int(predict(r.image, weights, kind) == r.label_target_true) for r in records)
    return hits / len(records)


@dataclass
class MetricsReport:
    clean_accuracy: float
    attacked_accuracy: float
    accuracy_drop: float
    msr: float
    mean_psnr_original: float
    std_psnr_original: float
    mean_psnr_target: float
    std_psnr_target: float
    psnr_excluded: int
    mean_ssim_original: float
    std_ssim_original: float
    mean_ssim_target: float
    std_ssim_target: float
    mean_cosine_original: float
    mean_cosine_target: float
    n_records: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RecordMetrics:
    source_id: str
    target_id: str
    psnr_original: float
    psnr_target: float
    ssim_original: float
    ssim_target: float
    cosine_original: float
    cosine_target: float
    label_after: int


def per_record_metrics(records, *, items_by_id, weights, kind: str) -> list[RecordMetrics]:
    """Image-quality and embedding-similarity metrics for each attack record."""
    rows = []
    for r in records:
        x0 = items_by_id[r.source_id].image
        xt = items_by_id[r.target_id].image
        e_opt = embed(r.image, weights, kind)
        rows.append(RecordMetrics(
            source_id=r.source_id,
            target_id=r.target_id,
            psnr_original=psnr(x0, r.image),
            psnr_target=psnr(xt, r.image),
            ssim_original=ssim(x0, r.image),
            ssim_target=ssim(xt, r.image),
            cosine_original=cosine(e_opt, embed(x0, weights, kind)),
            cosine_target=cosine(e_opt, embed(xt, weights, kind)),
            label_after=r.label_after,
        ))
    return rows


def _mean_std_excluding_inf(values):
    finite = [v for v in values if math.isfinite(v)]
    excluded = len(values) - len(finite)
    if not finite:
        return math.nan, math.nan, excluded
    arr = np.asarray(finite, dtype=np.float64)
    return float(arr.mean()), float(arr.std()), excluded


def aggregate(records, clean_accuracy: float, *, items_by_id, weights, kind: str) -> MetricsReport:
    """Dataset-level report over attack records.

    Needs the source/target images (by id) and the model to recompute image
    quality and embedding similarities; label-based rates come from the
    records themselves.  attacked_accuracy is measured over the attacked
    subset (the records), not the full test split.
    """
    if not records:
        raise ValueError("no records")
    rows = per_record_metrics(records, items_by_id=items_by_id, weights=weights, kind=kind)
    psnr_orig = [m.psnr_original for m in rows]
    psnr_tgt = [m.psnr_target for m in rows]
    ssim_orig = [m.ssim_original for m in rows]
    ssim_tgt = [m.ssim_target for m in rows]
    cos_orig = [m.cosine_original for m in rows]
    cos_tgt = [m.cosine_target for m in rows]
    attacked = sum(int(r.label_after == r.label_source_true) for r in records) / len(records)
    msr = sum(int(r.label_after == r.label_target_true) for r in records) / len(records)
    mpo, spo, excl_o = _mean_std_excluding_inf(psnr_orig)
    mpt, spt, excl_t = _mean_std_excluding_inf(psnr_tgt)
    return MetricsReport(
        clean_accuracy=float(clean_accuracy),
        attacked_accuracy=attacked,
        accuracy_drop=float(clean_accuracy) - attacked,
        msr=msr,
        mean_psnr_original=mpo,
        std_psnr_original=spo,
        mean_psnr_target=mpt,
        std_psnr_target=spt,
        psnr_excluded=excl_o + excl_t,
        mean_ssim_original=float(np.mean(ssim_orig)),
        std_ssim_original=float(np.std(ssim_orig)),
        mean_ssim_target=float(np.mean(ssim_tgt)),
        std_ssim_target=float(np.std(ssim_tgt)),
        mean_cosine_original=float(np.mean(cos_orig)),
        mean_cosine_target=float(np.mean(cos_tgt)),
        n_records=len(records),
    )
