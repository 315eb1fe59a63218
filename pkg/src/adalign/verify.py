"""Fixed-seed property suites behind ``adalign verify``.

Each suite returns a list of :class:`Check` results; nothing here raises on
failure, so callers decide how to report.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .encoder import EncoderParams, classify, encode, source_loss
from .graph import CsbmSpec, generate_csbm, normalize_adjacency
from .rng import substream
from .sampler import SamplerParams, sample_frequencies, sampler_ascent_objective
from .spectral import (
    CfEvaluation,
    alignment_loss,
    amplitude_phase_terms,
    empirical_cf,
    pointwise_loss,
    uniform_weights,
    weighted_pointwise_loss,
)

GRAD_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class Check:
    name: str
    value: float
    tolerance: str
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} ({self.tolerance})"


# ---------------------------------------------------------------------------
# gradient suite


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """Scalar-valued probes, one per differentiable op, each with a random input."""
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    adj = normalize_adjacency_dense(rng, 4)
    w = rng.standard_normal((4, 3))
    row = rng.standard_normal(3)
    idx = np.array([2, 0, 2, 1])
    # weighting by a fixed random matrix keeps each probe sensitive to every entry
    def probe(shape):
        return rng.standard_normal(shape)

    p43, p42, p3 = probe((4, 3)), probe((3, 2)), probe(3)
    p33, p34, p83 = probe((3, 3)), probe((3, 4)), probe((8, 3))
    p43g = probe((4, 3))
    p25 = probe((2, 5))
    freqs, z_cf = rng.standard_normal((5, 4)), rng.standard_normal((6, 4))
    return {
        "matmul": (lambda x: ad.sum(ad.elementwise_mul(ad.matmul(x, B), p42)), A),
        "sparse_dense_matmul": (lambda x: ad.sum(ad.elementwise_mul(ad.sparse_dense_matmul(adj, x), p43)), w),
        "add": (lambda x: ad.sum(ad.elementwise_mul(ad.add(x, row), p33)), rng.standard_normal((3, 3))),
        "sub": (lambda x: ad.sum(ad.elementwise_mul(ad.sub(p33, x), x)), rng.standard_normal((3, 3))),
        "elementwise_mul": (lambda x: ad.sum(ad.elementwise_mul(x, x)), rng.standard_normal((3, 4))),
        "scalar_mul": (lambda x: ad.sum(ad.elementwise_mul(ad.scalar_mul(x, -2.5), p34)), A),
        # keep inputs away from the kink at 0
        "relu": (lambda x: ad.sum(ad.elementwise_mul(ad.relu(x), p34)), _away_from_zero(rng, (3, 4))),
        "exp": (lambda x: ad.sum(ad.elementwise_mul(ad.exp(x), p34)), A),
        "cos": (lambda x: ad.sum(ad.elementwise_mul(ad.cos(x), p34)), 2 * A),
        "sin": (lambda x: ad.sum(ad.elementwise_mul(ad.sin(x), p34)), 2 * A),
        "sqrt_eps": (lambda x: ad.sum(ad.elementwise_mul(ad.sqrt_eps(x), p34)), rng.uniform(0.1, 3.0, (3, 4))),
        "mean": (lambda x: ad.sum(ad.elementwise_mul(ad.mean(x, axis=0), p3)), rng.standard_normal((5, 3))),
        "sum": (lambda x: ad.mean(ad.elementwise_mul(ad.sum(x, axis=1), p3)), rng.standard_normal((3, 5))),
        "log_softmax_rows": (lambda x: ad.sum(ad.elementwise_mul(ad.log_softmax_rows(x), p34)), A),
        "gather_rows": (lambda x: ad.sum(ad.elementwise_mul(ad.gather_rows(x, idx), p43g)), rng.standard_normal((3, 3))),
        "concat_rows": (lambda x: ad.sum(ad.elementwise_mul(ad.concat_rows(x, ad.scalar_mul(x, 2.0)), p83)), rng.standard_normal((4, 3))),
        "transpose": (lambda x: ad.sum(ad.elementwise_mul(ad.transpose(x), p43)), A),
        "reshape": (lambda x: ad.sum(ad.elementwise_mul(ad.reshape(x, (4, 3)), p43)), A),
        "cf_moments[z]": (lambda x: ad.sum(ad.elementwise_mul(ad.cf_moments(x, freqs), p25)), 0.7 * A),
        "cf_moments[t]": (lambda x: ad.sum(ad.elementwise_mul(ad.cf_moments(z_cf, x), p25)), freqs),
    }


def _away_from_zero(rng, shape):
    x = rng.uniform(0.2, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def normalize_adjacency_dense(rng, n: int):
    """Sparse normalised adjacency of a small random graph (for op probes)."""
    from .graph import DomainGraph

    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
    g = DomainGraph(n, np.array(pairs, dtype=np.int64).reshape(-1, 2), np.zeros((n, 1)))
    return normalize_adjacency(g).matrix


def op_gradient_errors(seed: int = 0, repeats: int = 10) -> dict[str, float]:
    """Worst grad_check error per op over ``repeats`` random inputs."""
    worst: dict[str, float] = {}
    for r in range(repeats):
        cases = _op_cases(substream(seed, f"opcheck{r}"))
        for name, (f, x) in cases.items():
            worst[name] = max(worst.get(name, 0.0), grad_check(f, x, FD_STEP))
    return worst


def _small_pair(rng, n=12, d=3):
    return rng.standard_normal((n, d)), 0.5 + 1.3 * rng.standard_normal((n + 3, d))


def pipeline_gradient_errors(seed: int = 0) -> dict[str, float]:
    rng = substream(seed, "pipeline_check")
    zs, zt = _small_pair(rng)
    T = rng.standard_normal((6, 3))
    w = uniform_weights(6)
    k = 0.7
    errs = {
        "alignment_loss wrt Z_S": grad_check(lambda x: alignment_loss(x, zt, T, w, k), zs),
        "alignment_loss wrt Z_T": grad_check(lambda x: alignment_loss(zs, x, T, w, k), zt),
        "alignment_loss wrt T": grad_check(lambda x: alignment_loss(zs, zt, x, w, k), T),
    }

    spec = CsbmSpec(num_nodes=10, feature_dim=3, num_classes=2, p_in=0.5, p_out=0.1, seed=seed)
    g, _ = generate_csbm(spec)
    adj = normalize_adjacency(g)
    params = EncoderParams.init(3, 2, substream(seed, "init"), hidden_dim=4, emb_dim=3, num_layers=2)
    worst = 0.0
    for i, t in enumerate(params.tensors()):
        def f(x, i=i):
            swapped = params.tensors()
            swapped[i] = x
            p = _rebuild(params, swapped)
            return source_loss(classify(encode(adj, g.features, p), p), g.labels)

        worst = max(worst, grad_check(f, t.values))
    errs["source_loss wrt encoder params"] = worst

    sampler = SamplerParams.init(2, 3)
    sampler.log_scales.values[:] = 0.3 * rng.standard_normal((2, 3))
    sampler.mixture_logits.values[:] = [0.4, -0.2]

    def objective(log_scales=None, logits=None):
        p = SamplerParams(log_scales or sampler.log_scales, logits or sampler.mixture_logits)
        # same eps stream for every evaluation
        batch = sample_frequencies(p, 8, substream(seed, "fixed_eps"))
        return sampler_ascent_objective(batch, zs, zt, k)

    errs["sampler objective wrt log_scales"] = grad_check(lambda x: objective(log_scales=x), sampler.log_scales.values)
    errs["sampler objective wrt mixture_logits"] = grad_check(lambda x: objective(logits=x), sampler.mixture_logits.values)
    return errs


def _rebuild(template: EncoderParams, tensors: list[Tensor]) -> EncoderParams:
    n = template.num_layers
    return EncoderParams(tensors[0 : 2 * n : 2], tensors[1 : 2 * n : 2], tensors[2 * n], tensors[2 * n + 1])


def suite_gradcheck(seed: int = 0) -> list[Check]:
    checks = []
    for name, err in {**op_gradient_errors(seed), **pipeline_gradient_errors(seed)}.items():
        checks.append(Check(f"grad {name}", err, f"< {GRAD_TOL:g}", err < GRAD_TOL))
    return checks


# ---------------------------------------------------------------------------
# characteristic function suite


def direct_cf(Z: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Per-sample summation of exp(i t.z) with Python complex arithmetic."""
    out = np.empty(T.shape[0], dtype=complex)
    for m, t in enumerate(T):
        acc = 0j
        for z in Z:
            acc += cmath.exp(1j * math.fsum(float(a) * float(b) for a, b in zip(t, z)))
        out[m] = acc / Z.shape[0]
    return out


def suite_cf(seed: int = 0, instances: int = 100) -> list[Check]:
    worst_err, worst_amp, worst_origin = 0.0, 0.0, 0.0
    for i in range(instances):
        rng = substream(seed, f"cf{i}")
        n, m, d = rng.integers(1, 30), rng.integers(1, 12), rng.integers(1, 5)
        Z = rng.standard_normal((n, d)) * rng.uniform(0.1, 3.0)
        T = rng.standard_normal((m, d)) * rng.uniform(0.1, 3.0)
        cf = empirical_cf(Z, T)
        worst_err = max(worst_err, float(np.max(np.abs(cf.as_complex() - direct_cf(Z, T)))))
        worst_amp = max(worst_amp, float(cf.amplitude.max()))
        origin = empirical_cf(Z, np.zeros((1, d)))
        worst_origin = max(worst_origin, abs(origin.real.values[0] - 1.0) + abs(origin.imag.values[0]))
    return [
        Check("empirical_cf vs direct summation", worst_err, "<= 1e-12", worst_err <= 1e-12),
        Check("Psi(0) == (1, 0)", worst_origin, "== 0 within 1e-15", worst_origin <= 1e-15),
        Check("max CF amplitude", worst_amp, "<= 1 + 1e-9", worst_amp <= 1 + 1e-9),
    ]


# ---------------------------------------------------------------------------
# decomposition suite


def random_cf_pairs(rng: np.random.Generator, count: int) -> tuple[CfEvaluation, CfEvaluation]:
    """``count`` random pairs of complex values inside the closed unit disk."""
    def draw():
        r = np.sqrt(rng.uniform(0, 1, count))
        th = rng.uniform(-np.pi, np.pi, count)
        return CfEvaluation(Tensor(r * np.cos(th)), Tensor(r * np.sin(th)))

    return draw(), draw()


def suite_decomposition(seed: int = 0, count: int = 1000) -> list[Check]:
    cf_s, cf_t = random_cf_pairs(substream(seed, "decomposition"), count)
    oracle = np.abs(cf_s.as_complex() - cf_t.as_complex()) ** 2
    amp, phase = amplitude_phase_terms(cf_s, cf_t)
    ell = pointwise_loss(cf_s, cf_t).values
    half = weighted_pointwise_loss(cf_s, cf_t, 0.5).values
    e1 = float(np.max(np.abs(amp.values + phase.values - oracle)))
    e2 = float(np.max(np.abs(half - 0.5 * ell)))
    e3 = float(np.max(np.abs(ell - oracle)))
    return [
        Check("amplitude + phase == |Ps - Pt|^2", e1, "<= 1e-10", e1 <= 1e-10),
        Check("kappa=0.5 loss == pointwise / 2", e2, "<= 1e-10", e2 <= 1e-10),
        Check("pointwise loss vs complex modulus", e3, "<= 1e-14", e3 <= 1e-14),
    ]


# ---------------------------------------------------------------------------
# Monte Carlo suite


def mc_fixture(seed: int = 0, n: int = 400, d: int = 4) -> tuple[np.ndarray, np.ndarray]:
    rng = substream(seed, "mc_fixture")
    zs = rng.standard_normal((n, d))
    zt = 0.3 + 1.2 * rng.standard_normal((n, d))
    return zs, zt


def mc_estimates(zs, zt, num_freqs: int, redraws: int, seed: int, kappa: float = 0.7) -> np.ndarray:
    sampler = SamplerParams.init(1, zs.shape[1])
    out = np.empty(redraws)
    for r in range(redraws):
        batch = sample_frequencies(sampler, num_freqs, substream(seed, f"mc{num_freqs}_{r}"), differentiable=False)
        out[r] = alignment_loss(zs, zt, batch.T, batch.weights, kappa).item()
    return out


def suite_mc(seed: int = 0) -> list[Check]:
    zs, zt = mc_fixture(seed)
    small = mc_estimates(zs, zt, 512, 50, seed)
    large = mc_estimates(zs, zt, 2048, 50, seed)
    ref = mc_estimates(zs, zt, 65536, 1, seed + 1)[0]
    ratio = float(large.std(ddof=1) / small.std(ddof=1))
    se = float(large.std(ddof=1))
    z = abs(large[0] - ref) / se
    return [
        Check("std(M=2048) / std(M=512)", ratio, "in [0.35, 0.65]", 0.35 <= ratio <= 0.65),
        Check("|L(M=2048) - L(M=65536)| / SE", z, "<= 3", z <= 3.0),
    ]


# ---------------------------------------------------------------------------
# beyond-moment sensitivity


def _standardise(x: np.ndarray) -> np.ndarray:
    return ((x - x.mean()) / x.std())[:, None]


def moment_matched_sets(seed: int = 0, n: int = 2000):
    """Gaussian draws, a symmetric two-point set, and a second Gaussian draw.

    All three have sample mean 0 and sample variance 1 exactly (up to
    rounding); the two-point set places n/2 samples at each of -1 and +1.
    """
    if n % 2:
        raise ValueError("n must be even")
    rng = substream(seed, "moment_matched")
    gauss = _standardise(rng.standard_normal(n))
    other = _standardise(rng.standard_normal(n))
    two_point = np.repeat([-1.0, 1.0], n // 2)[:, None]
    return gauss, two_point, other


def beyond_moment_ratio(seed: int = 0, n: int = 2000, num_freqs: int = 4096, kappa: float = 0.7):
    """NSD(gauss, two-point) / NSD(gauss, gauss'), plus the moment gaps."""
    gauss, two_point, other = moment_matched_sets(seed, n)
    batch = sample_frequencies(SamplerParams.init(1, 1), num_freqs, substream(seed, "moment_freqs"), differentiable=False)
    shaped = alignment_loss(gauss, two_point, batch.T, batch.weights, kappa).item()
    floor = alignment_loss(gauss, other, batch.T, batch.weights, kappa).item()
    gaps = (abs(gauss.mean() - two_point.mean()), abs(gauss.var() - two_point.var()))
    return shaped / floor, gaps


SUITES = {
    "gradcheck": suite_gradcheck,
    "cf": suite_cf,
    "decomposition": suite_decomposition,
    "mc": suite_mc,
}
