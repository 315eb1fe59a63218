"""Micro/Macro-F1 and the NSD-vs-MMD discrepancy report."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, RangeError
from .rng import substream
from .sampler import SamplerParams, fixed_band_frequencies, sample_frequencies
from .spectral import alignment_loss, median_bandwidth, mmd_rbf

REPORT_BANDS = ((0.0, 1.0), (1.0, 10.0), (10.0, 20.0))
REPORT_FREQS = 8192


def confusion_counts(y_true, y_pred, num_classes: int | None = None) -> np.ndarray:
    """C x C counts; rows are true classes, columns predictions."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ContractError(f"label vectors differ in shape: {y_true.shape} vs {y_pred.shape}")
    if num_classes is None:
        num_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= num_classes):
        raise RangeError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return counts


def micro_f1(y_true, y_pred, num_classes: int | None = None) -> float:
    # single-label multiclass: micro precision = micro recall = accuracy
    cm = confusion_counts(y_true, y_pred, num_classes)
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def macro_f1(y_true, y_pred, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1.

    Classes absent from both vectors are skipped; a class whose F1
    denominator is zero scores 0.
    """
    cm = confusion_counts(y_true, y_pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    present = (support + predicted) > 0
    if not present.any():
        return 0.0
    denom = support + predicted  # 2TP + FP + FN
    f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    return float(f1[present].mean())


def discrepancy_report(
    Z_s,
    Z_t,
    kappa: float = 0.7,
    seed: int = 0,
    sampler: SamplerParams | None = None,
    num_freqs: int = REPORT_FREQS,
) -> dict[str, float]:
    """NSD, its amplitude-only and phase-only variants, MMD, and per-band NSD.

    NSD uses ``num_freqs`` draws from ``sampler`` (an isotropic unit-scale
    sampler when omitted). Band entries draw frequencies with uniform radius
    in each band of ``REPORT_BANDS``. MMD is the unbiased RBF estimate with
    the median-heuristic bandwidth, clamped at zero.
    """
    zs = np.asarray(getattr(Z_s, "values", Z_s), dtype=np.float64)
    zt = np.asarray(getattr(Z_t, "values", Z_t), dtype=np.float64)
    dim = zs.shape[1]
    if sampler is None:
        sampler = SamplerParams.init(1, dim)
    batch = sample_frequencies(sampler, num_freqs, substream(seed, "report_adaptive"), dim, differentiable=False)

    def nsd(T, w, k):
        return alignment_loss(zs, zt, T, w, k).item()

    report = {
        "nsd": nsd(batch.T, batch.weights, kappa),
        "nsd_amplitude": nsd(batch.T, batch.weights, 1.0),
        "nsd_phase": nsd(batch.T, batch.weights, 0.0),
    }
    h = median_bandwidth(zs, zt)
    # the unbiased estimate dips below zero for near-identical sets
    report["mmd"] = max(mmd_rbf(zs, zt, h), 0.0)
    report["mmd_bandwidth"] = h
    for lo, hi in REPORT_BANDS:
        rng = substream(seed, f"report_band_{lo:g}_{hi:g}")
        fb = fixed_band_frequencies("band", (lo, hi), num_freqs, dim, rng)
        report[f"nsd_band_{lo:g}_{hi:g}"] = nsd(fb.T, fb.weights, kappa)
    return report


def format_report(report: dict[str, float]) -> str:
    return " ".join(f"{k}:{v!r}" for k, v in report.items())


def report_csv(report: dict[str, float]) -> tuple[str, str]:
    keys = list(report)
    return ",".join(keys), ",".join(repr(float(report[k])) for k in keys)
