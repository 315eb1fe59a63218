import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adalign.autodiff import Tape, Tensor, backward
from adalign.errors import ConfigError
from adalign.sampler import (
    SamplerParams,
    fixed_band_frequencies,
    sample_frequencies,
    sampler_ascent_objective,
    stratify,
)
from adalign.spectral import alignment_loss, empirical_cf, weighted_pointwise_loss
from adalign.verify import pipeline_gradient_errors


def _shifted_pair(seed=0, n=300, d=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), 0.4 + 1.3 * rng.standard_normal((n, d))


def test_unit_scale_covariance_is_identity():
    batch = sample_frequencies(SamplerParams.init(1, 4), 100_000, np.random.default_rng(0), differentiable=False)
    cov = np.cov(batch.T.values, rowvar=False)
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() < 0.02
    assert np.all((np.diag(cov) >= 0.97) & (np.diag(cov) <= 1.03))


def test_doubling_scale_doubles_std():
    p = SamplerParams.init(1, 3)
    base = sample_frequencies(p, 5000, np.random.default_rng(1), differentiable=False).T.values
    p.log_scales.values[0, 1] = math.log(2.0)
    doubled = sample_frequencies(p, 5000, np.random.default_rng(1), differentiable=False).T.values
    np.testing.assert_allclose(doubled[:, 1], 2 * base[:, 1], rtol=1e-15)
    np.testing.assert_array_equal(doubled[:, [0, 2]], base[:, [0, 2]])


def test_equal_weight_allocation():
    batch = sample_frequencies(SamplerParams.init(2, 3), 10, np.random.default_rng(2))
    assert np.bincount(batch.component_of).tolist() == [5, 5]
    np.testing.assert_allclose(batch.weights.values, np.full(10, 0.1), atol=1e-15)


def test_too_few_frequencies():
    with pytest.raises(ConfigError):
        sample_frequencies(SamplerParams.init(4, 2), 3, np.random.default_rng(0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=1, max_size=6), st.integers(1, 200))
def test_stratification_rule(logits, extra):
    w = np.exp(np.array(logits) - max(logits))
    w /= w.sum()
    m = len(logits) + extra - 1
    counts = stratify(w, m)
    assert counts.sum() == m and counts.min() >= 1
    # weights w_k / M_k are non-negative and sum to one
    per_draw = np.repeat(w / counts, counts)
    assert (per_draw >= 0).all() and abs(per_draw.sum() - 1) < 1e-12
    # largest remainder never strays more than one draw from the quota, except to honour the floor
    quota = w * m
    assert np.all((np.abs(counts - quota) < 1 + 1e-9) | (counts == 1) | (counts < quota))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=5))
def test_mixture_weights_normalised(logits):
    p = SamplerParams.init(len(logits), 2)
    p.mixture_logits.values[:] = logits
    assert abs(p.mixture_weights().sum() - 1) < 1e-12
    assert np.all(np.isfinite(p.scales())) and np.all(p.scales() > 0)


@pytest.mark.parametrize("kind,lo,hi", [("low", 1, 10), ("high", 10, 20)])
def test_band_norms(kind, lo, hi):
    batch = fixed_band_frequencies(kind, None, 5000, 16, np.random.default_rng(3))
    norms = np.linalg.norm(batch.T.values, axis=1)
    assert norms.min() >= lo and norms.max() <= hi


def test_random_band_chi_mean():
    d = 64
    batch = fixed_band_frequencies("random", None, 10_000, d, np.random.default_rng(4))
    mean_norm = np.linalg.norm(batch.T.values, axis=1).mean()
    oracle = math.sqrt(d) * math.sqrt(1 - 1 / (2 * d))
    assert abs(mean_norm / oracle - 1) < 0.02
    # exact chi mean for comparison: sqrt(2) Gamma((d+1)/2) / Gamma(d/2)
    exact = math.sqrt(2) * math.exp(math.lgamma((d + 1) / 2) - math.lgamma(d / 2))
    assert abs(oracle / exact - 1) < 1e-3


@pytest.mark.parametrize("band", [(5.0, 1.0), (-1.0, 2.0), (3.0, 3.0)])
def test_invalid_band(band):
    with pytest.raises(ConfigError):
        fixed_band_frequencies("band", band, 10, 2, np.random.default_rng(0))


def test_unknown_kind():
    with pytest.raises(ConfigError):
        fixed_band_frequencies("medium", None, 10, 2, np.random.default_rng(0))


def test_objective_equals_alignment_loss():
    zs, zt = _shifted_pair()
    batch = sample_frequencies(SamplerParams.init(3, 3), 64, np.random.default_rng(5))
    a = sampler_ascent_objective(batch, zs, zt, 0.7).item()
    b = alignment_loss(zs, zt, batch.T, batch.weights, 0.7).item()
    assert a == b


def _objective_grads(params, zs, zt, seed=6):
    with Tape() as tape:
        batch = sample_frequencies(params, 64, np.random.default_rng(seed))
        loss = sampler_ascent_objective(batch, zs, zt, 0.7)
    g = backward(tape, loss)
    return loss, g[params.log_scales], g[params.mixture_logits]


def test_objective_gradients():
    zs, zt = _shifted_pair()
    p = SamplerParams.init(3, 3)
    p.mixture_logits.values[:] = [0.3, -0.1, 0.0]
    p.log_scales.values[:] = np.random.default_rng(7).normal(0, 0.3, (3, 3))
    loss, g_rho, g_logit = _objective_grads(p, zs, zt)
    assert np.abs(g_rho).max() > 1e-6
    assert abs(g_logit.sum()) < 1e-12
    # sign check: a small step along the gradient raises the objective on the same eps
    q = SamplerParams(Tensor(p.log_scales.values + 1e-4 * np.sign(g_rho)), Tensor(p.mixture_logits.values))
    batch = sample_frequencies(q, 64, np.random.default_rng(6), differentiable=False)
    assert alignment_loss(zs, zt, batch.T, batch.weights, 0.7).item() > loss.item()


def test_reparameterised_gradient_check():
    errs = pipeline_gradient_errors(seed=8)
    assert errs["sampler objective wrt log_scales"] < 1e-4
    assert errs["sampler objective wrt mixture_logits"] < 1e-4


def _integrand(zs, zt, T, kappa=0.7):
    ell = weighted_pointwise_loss(empirical_cf(zs, T), empirical_cf(zt, T), kappa).values
    return np.sqrt(ell + 1e-12)


def test_stratified_estimator_unbiased():
    zs, zt = _shifted_pair(seed=9, n=200, d=2)
    p = SamplerParams.init(2, 2)
    p.log_scales.values[:] = [[-0.5, 0.2], [0.7, 0.4]]
    p.mixture_logits.values[:] = [0.8, -0.3]
    vals = []
    for r in range(200):
        b = sample_frequencies(p, 256, np.random.default_rng(1000 + r), differentiable=False)
        vals.append(alignment_loss(zs, zt, b.T, b.weights, 0.7).item())
    vals = np.array(vals)

    # plain i.i.d. mixture draws: component first, then scaled normal noise
    rng = np.random.default_rng(77)
    m = 65536
    comp = rng.choice(2, size=m, p=p.mixture_weights())
    T = p.scales()[comp] * rng.standard_normal((m, 2))
    f = _integrand(zs, zt, T)
    ref, ref_se = f.mean(), f.std(ddof=1) / math.sqrt(m)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - ref) <= 3 * math.hypot(se, ref_se)


def test_same_seed_same_batch():
    p = SamplerParams.init(3, 4)
    p.mixture_logits.values[:] = [1.0, 0.0, -1.0]
    a = sample_frequencies(p, 50, np.random.default_rng(10))
    b = sample_frequencies(p, 50, np.random.default_rng(10))
    np.testing.assert_array_equal(a.T.values, b.T.values)
    np.testing.assert_array_equal(a.weights.values, b.weights.values)
    np.testing.assert_array_equal(a.component_of, b.component_of)


def test_clamp_projects_and_counts():
    p = SamplerParams.init(2, 2)
    p.log_scales.values[:] = [[7.0, 0.0], [-9.0, 5.9]]
    assert p.clamp_() == 2
    assert p.log_scales.values.tolist() == [[6.0, 0.0], [-6.0, 5.9]]
    assert p.clamp_() == 0


def test_non_differentiable_batch_matches_values():
    p = SamplerParams.init(2, 3)
    p.log_scales.values[:] = 0.2
    a = sample_frequencies(p, 20, np.random.default_rng(11))
    b = sample_frequencies(p, 20, np.random.default_rng(11), differentiable=False)
    np.testing.assert_allclose(a.T.values, b.T.values, rtol=1e-15)
    np.testing.assert_allclose(a.weights.values, b.weights.values, rtol=1e-15)
