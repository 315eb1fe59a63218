"""Learnable normal-scale-mixture frequency sampler and fixed-band baselines.

The mixing distribution over covariances is a K-component mixture of
diagonal scales: component k draws ``t = sigma_k * eps`` with
``eps ~ N(0, I)`` and ``sigma_k = exp(rho_k)``. Draws are stratified, M_k
per component, and each draw carries the estimator weight ``w_k / M_k`` so
``sum_m weight_m f(t_m)`` is unbiased for ``E[f(t)]`` and differentiable in
both ``rho`` (pathwise through ``t``) and the mixture logits (through ``w``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .spectral import alignment_loss

log = logging.getLogger(__name__)

LOG_SCALE_BOUND = 6.0
DEFAULT_BANDS = {"low": (1.0, 10.0), "high": (10.0, 20.0)}
SAMPLER_KINDS = ("adaptive", "random", "low", "high")


@dataclass
class SamplerParams:
    log_scales: Tensor  # K x d
    mixture_logits: Tensor  # K

    @classmethod
    def init(cls, num_components: int, dim: int) -> SamplerParams:
        """Isotropic start: sigma = 1 for every component, equal weights."""
        if num_components < 1:
            raise ConfigError("num_components must be >= 1")
        return cls(
            Tensor(np.zeros((num_components, dim)), requires_grad=True),
            Tensor(np.zeros(num_components), requires_grad=True),
        )

    @property
    def num_components(self) -> int:
        return self.mixture_logits.shape[0]

    @property
    def dim(self) -> int:
        return self.log_scales.shape[1]

    def mixture_weights(self) -> np.ndarray:
        z = self.mixture_logits.values - self.mixture_logits.values.max()
        e = np.exp(z)
        return e / e.sum()

    def scales(self) -> np.ndarray:
        return np.exp(np.clip(self.log_scales.values, -LOG_SCALE_BOUND, LOG_SCALE_BOUND))

    def tensors(self) -> list[Tensor]:
        return [self.log_scales, self.mixture_logits]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [("sampler.log_scales", self.log_scales), ("sampler.mixture_logits", self.mixture_logits)]

    def clamp_(self) -> int:
        """Project log-scales back into [-6, 6]; returns how many were clipped."""
        v = self.log_scales.values
        active = int(np.count_nonzero(np.abs(v) > LOG_SCALE_BOUND))
        if active:
            np.clip(v, -LOG_SCALE_BOUND, LOG_SCALE_BOUND, out=v)
            log.info("sampler scale clamp active on %d entries", active)
        return active


@dataclass
class FrequencyBatch:
    T: Tensor  # M x d
    component_of: np.ndarray  # M
    weights: Tensor  # M

    @property
    def num_freqs(self) -> int:
        return self.T.shape[0]


def stratify(mixture_weights: np.ndarray, m: int) -> np.ndarray:
    """Largest-remainder allocation of ``m`` draws, at least one per component."""
    k = mixture_weights.shape[0]
    if m < k:
        raise ConfigError(f"need at least one frequency per component (M={m} < K={k})")
    quota = mixture_weights * m
    counts = np.floor(quota).astype(np.int64)
    short = m - counts.sum()
    if short:
        # stable sort keeps ties in component order
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    while np.any(counts == 0):
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1
    return counts


def sample_frequencies(
    params: SamplerParams,
    num_freqs: int,
    rng: np.random.Generator,
    dim: int | None = None,
    differentiable: bool = True,
) -> FrequencyBatch:
    """Stratified reparameterised draw of ``num_freqs`` frequency vectors.

    With ``differentiable=False`` the batch is built from plain values, so no
    gradient reaches the sampler parameters.
    """
    if dim is not None and dim != params.dim:
        raise ConfigError(f"sampler dimension {params.dim} != embedding dimension {dim}")
    k = params.num_components
    w = params.mixture_weights()
    counts = stratify(w, num_freqs)
    component_of = np.repeat(np.arange(k), counts)
    eps = rng.standard_normal((num_freqs, params.dim))
    inv_counts = 1.0 / counts[component_of]

    if not differentiable:
        T = Tensor(params.scales()[component_of] * eps)
        weights = Tensor(w[component_of] * inv_counts)
        return FrequencyBatch(T, component_of, weights)

    # clip happens on the values in clamp_(), so exp(rho) here is the clamped scale
    sigma = ad.exp(params.log_scales)
    T = ad.elementwise_mul(ad.gather_rows(sigma, component_of), eps)
    log_w = ad.log_softmax_rows(ad.reshape(params.mixture_logits, (1, k)))
    w_t = ad.reshape(ad.exp(log_w), (k,))
    weights = ad.elementwise_mul(ad.gather_rows(w_t, component_of), inv_counts)
    return FrequencyBatch(T, component_of, weights)


def fixed_band_frequencies(
    kind: str,
    band: tuple[float, float] | None,
    num_freqs: int,
    dim: int,
    rng: np.random.Generator,
) -> FrequencyBatch:
    """Non-learnable baseline draws.

    ``random``: t ~ N(0, I). ``low``/``high``: uniform direction on the unit
    sphere with radius uniform in ``band`` (defaults [1, 10] and [10, 20]).
    """
    if num_freqs < 1:
        raise ConfigError("num_freqs must be >= 1")
    if kind == "random":
        T = rng.standard_normal((num_freqs, dim))
    elif kind in ("low", "high", "band"):
        if band is None:
            if kind == "band":
                raise ConfigError("band kind needs explicit limits")
            band = DEFAULT_BANDS[kind]
        lo, hi = float(band[0]), float(band[1])
        if not 0 <= lo < hi:
            raise ConfigError(f"invalid band [{lo}, {hi}]: need 0 <= lo < hi")
        direction = rng.standard_normal((num_freqs, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.uniform(lo, hi, num_freqs)
        T = direction * radius[:, None]
    else:
        raise ConfigError(f"unknown fixed sampler kind {kind!r}")
    return FrequencyBatch(
        Tensor(T), np.zeros(num_freqs, dtype=np.int64), Tensor(np.full(num_freqs, 1.0 / num_freqs))
    )


def sampler_ascent_objective(batch: FrequencyBatch, Z_s, Z_t, kappa: float) -> Tensor:
    """The alignment loss on ``batch``; the sampler maximises this."""
    return alignment_loss(Z_s, Z_t, batch.T, batch.weights, kappa)
