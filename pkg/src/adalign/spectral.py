"""Empirical characteristic functions and the spectral alignment loss.

For embeddings ``Z`` (N x d) and frequencies ``T`` (M x d) the empirical CF
at ``t_m`` is ``mean_n exp(i t_m . z_n)``, carried as separate real and
imaginary tensors so every quantity stays differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError


@dataclass
class CfEvaluation:
    real: Tensor
    imag: Tensor

    @property
    def amplitude(self) -> np.ndarray:
        return np.hypot(self.real.values, self.imag.values)

    @property
    def phase(self) -> np.ndarray:
        """Phase in (-pi, pi]."""
        ph = np.arctan2(self.imag.values, self.real.values)
        return np.where(ph == -np.pi, np.pi, ph)

    @property
    def num_freqs(self) -> int:
        return self.real.shape[0]

    def as_complex(self) -> np.ndarray:
        return self.real.values + 1j * self.imag.values


def empirical_cf(Z, T) -> CfEvaluation:
    Z, T = ad.as_tensor(Z), ad.as_tensor(T)
    if Z.ndim != 2 or T.ndim != 2 or Z.shape[1] != T.shape[1]:
        raise DimensionError(f"empirical_cf: embeddings {Z.shape} vs frequencies {T.shape}")
    moments = ad.cf_moments(Z, T)  # 2 x M
    m = T.shape[0]
    return CfEvaluation(ad.reshape(ad.gather_rows(moments, [0]), (m,)), ad.reshape(ad.gather_rows(moments, [1]), (m,)))


def _check_pair(cf_s: CfEvaluation, cf_t: CfEvaluation) -> None:
    if cf_s.real.shape != cf_t.real.shape:
        raise DimensionError(f"CF evaluations differ in length: {cf_s.real.shape} vs {cf_t.real.shape}")


def pointwise_loss(cf_s: CfEvaluation, cf_t: CfEvaluation) -> Tensor:
    """|Psi_S(t_m) - Psi_T(t_m)|^2 per frequency."""
    _check_pair(cf_s, cf_t)
    dr = ad.sub(cf_s.real, cf_t.real)
    di = ad.sub(cf_s.imag, cf_t.imag)
    return ad.add(ad.elementwise_mul(dr, dr), ad.elementwise_mul(di, di))


def amplitude_phase_terms(cf_s: CfEvaluation, cf_t: CfEvaluation) -> tuple[Tensor, Tensor]:
    """``(|Ps| - |Pt|)^2`` and ``2|Ps||Pt|(1 - cos(dtheta))``.

    The phase term is evaluated as ``2(|Ps||Pt| - Re Ps Re Pt - Im Ps Im Pt)``,
    which equals the angular form but has no wrap-around discontinuity.
    Amplitudes use ``sqrt_eps`` so both terms stay differentiable when a CF
    vanishes; this inflates their sum over ``pointwise_loss`` by at most 2e-12.
    """
    _check_pair(cf_s, cf_t)
    amp_s = ad.sqrt_eps(ad.add(ad.elementwise_mul(cf_s.real, cf_s.real), ad.elementwise_mul(cf_s.imag, cf_s.imag)))
    amp_t = ad.sqrt_eps(ad.add(ad.elementwise_mul(cf_t.real, cf_t.real), ad.elementwise_mul(cf_t.imag, cf_t.imag)))
    da = ad.sub(amp_s, amp_t)
    amp_term = ad.elementwise_mul(da, da)
    dot = ad.add(ad.elementwise_mul(cf_s.real, cf_t.real), ad.elementwise_mul(cf_s.imag, cf_t.imag))
    phase_term = ad.scalar_mul(ad.sub(ad.elementwise_mul(amp_s, amp_t), dot), 2.0)
    return amp_term, phase_term


def weighted_pointwise_loss(cf_s: CfEvaluation, cf_t: CfEvaluation, kappa: float) -> Tensor:
    if not 0.0 <= kappa <= 1.0:
        raise ConfigError(f"kappa must lie in [0, 1], got {kappa}")
    amp_term, phase_term = amplitude_phase_terms(cf_s, cf_t)
    return ad.add(ad.scalar_mul(amp_term, kappa), ad.scalar_mul(phase_term, 1.0 - kappa))


def aggregate_discrepancy(ell, weights) -> Tensor:
    """``sum_m weights_m * sqrt_eps(ell_m)``."""
    ell = ad.as_tensor(ell)
    weights = ad.as_tensor(weights)
    if weights.shape != ell.shape:
        raise DimensionError(f"{weights.shape} weights for {ell.shape} frequencies")
    w = weights.values
    if np.any(w < 0):
        raise ContractError("frequency weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ContractError(f"frequency weights must sum to 1 (got {w.sum():.12g})")
    return ad.sum(ad.elementwise_mul(weights, ad.sqrt_eps(ell)))


def alignment_loss(Z_s, Z_t, T, weights, kappa: float) -> Tensor:
    """Monte Carlo spectral alignment loss between two embedding sets."""
    if not 0.0 <= kappa <= 1.0:
        raise ConfigError(f"kappa must lie in [0, 1], got {kappa}")
    cf_s = empirical_cf(Z_s, T)
    cf_t = empirical_cf(Z_t, T)
    return aggregate_discrepancy(weighted_pointwise_loss(cf_s, cf_t, kappa), weights)


def uniform_weights(m: int) -> np.ndarray:
    return np.full(m, 1.0 / m)


# ---------------------------------------------------------------------------
# MMD baseline


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def mmd_rbf(Z_s, Z_t, bandwidth: float) -> float:
    """Unbiased MMD^2 with kernel exp(-||x - y||^2 / (2 h^2)).

    The unbiased estimate can be slightly negative; callers that display it
    should clamp at zero themselves.
    """
    x = np.asarray(Z_s.values if isinstance(Z_s, Tensor) else Z_s, dtype=np.float64)
    y = np.asarray(Z_t.values if isinstance(Z_t, Tensor) else Z_t, dtype=np.float64)
    if not bandwidth > 0:
        raise ContractError("bandwidth must be positive")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ContractError("mmd_rbf needs at least two samples per side")
    if np.isinf(bandwidth):
        return 0.0
    g = -0.5 / bandwidth**2
    kxx = np.exp(g * _sq_dists(x, x))
    kyy = np.exp(g * _sq_dists(y, y))
    kxy = np.exp(g * _sq_dists(x, y))
    n, m = x.shape[0], y.shape[0]
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def median_bandwidth(Z_s, Z_t, max_points: int = 2000) -> float:
    """Median pairwise distance of the pooled sample (first ``max_points`` rows)."""
    x = np.asarray(Z_s.values if isinstance(Z_s, Tensor) else Z_s, dtype=np.float64)
    y = np.asarray(Z_t.values if isinstance(Z_t, Tensor) else Z_t, dtype=np.float64)
    pooled = np.concatenate([x, y], axis=0)[:max_points]
    d = np.sqrt(_sq_dists(pooled, pooled))
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(d[iu])) if iu[0].size else 1.0
    return med if med > 0 else 1.0
