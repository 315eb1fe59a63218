import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from adalign.autodiff import Tensor
from adalign.encoder import (
    EncoderParams,
    classify,
    encode,
    load_checkpoint,
    params_from_arrays,
    predict,
    save_checkpoint,
    source_loss,
)
from adalign.errors import ContractError, FormatError, RangeError
from adalign.graph import DomainGraph, NormalizedAdjacency, normalize_adjacency
from adalign.verify import pipeline_gradient_errors


def _params(weights, biases, cw, cb):
    return EncoderParams([Tensor(w) for w in weights], [Tensor(b) for b in biases], Tensor(cw), Tensor(cb))


def _isolated(n):
    return normalize_adjacency(DomainGraph(n, np.zeros((0, 2), dtype=np.int64), np.zeros((n, 1))))


def test_identity_configuration_returns_features():
    X = np.random.default_rng(0).standard_normal((4, 3))
    p = _params([np.eye(3)], [np.zeros(3)], np.zeros((3, 2)), np.zeros(2))
    np.testing.assert_array_equal(encode(_isolated(4), X, p).values, X)


def test_zero_weights_give_bias_rows():
    X = np.random.default_rng(0).standard_normal((5, 3))
    b = np.array([0.5, -1.0])
    p = _params([np.zeros((3, 2))], [b], np.zeros((2, 2)), np.zeros(2))
    adj = normalize_adjacency(DomainGraph(5, np.array([[0, 1], [1, 2], [3, 4]]), X))
    np.testing.assert_array_equal(encode(adj, X, p).values, np.tile(b, (5, 1)))


def test_two_node_path_by_hand():
    X = np.array([[1.0, 2.0], [3.0, -1.0]])
    W = np.array([[0.5, -1.0], [2.0, 0.25]])
    p = _params([W], [np.zeros(2)], np.zeros((2, 2)), np.zeros(2))
    adj = normalize_adjacency(DomainGraph(2, np.array([[0, 1]]), X))
    # A_hat = 0.5 everywhere, so A_hat X = [[2, 0.5], [2, 0.5]]
    axw = np.array([[2 * 0.5 + 0.5 * 2.0, 2 * -1.0 + 0.5 * 0.25]] * 2)
    np.testing.assert_allclose(encode(adj, X, p).values, axw, atol=1e-12)


def test_two_layer_relu_only_between_layers():
    X = np.array([[1.0], [-1.0]])
    p = _params([np.array([[1.0]]), np.array([[-1.0]])], [np.zeros(1), np.zeros(1)], np.zeros((1, 2)), np.zeros(2))
    out = encode(_isolated(2), X, p).values
    # layer 1 relu kills the negative row; final layer output stays negative
    np.testing.assert_array_equal(out, [[-1.0], [0.0]])


def test_extra_propagation_steps():
    X = np.array([[1.0], [3.0]])
    p = _params([np.eye(1)], [np.zeros(1)], np.zeros((1, 2)), np.zeros(2))
    adj = normalize_adjacency(DomainGraph(2, np.array([[0, 1]]), X))
    np.testing.assert_allclose(encode(adj, X, p, extra_steps=1).values, [[2.0], [2.0]])


def test_encode_dimension_mismatch():
    p = EncoderParams.init(3, 2, np.random.default_rng(0), hidden_dim=4, emb_dim=4)
    with pytest.raises(ContractError):
        encode(_isolated(3), np.ones((3, 5)), p)
    with pytest.raises(ContractError):
        encode(_isolated(3), np.ones((4, 3)), p)


def test_init_chains_dimensions_and_bounds():
    p = EncoderParams.init(7, 3, np.random.default_rng(1), hidden_dim=5, emb_dim=6, num_layers=3)
    assert [w.shape for w in p.weights] == [(7, 5), (5, 5), (5, 6)]
    assert p.cls_weight.shape == (6, 3)
    assert np.abs(p.weights[0].values).max() <= 1 / math.sqrt(7)


def test_classifier_examples():
    Z = np.random.default_rng(2).standard_normal((4, 3))
    zero = _params([np.eye(3)], [np.zeros(3)], np.zeros((3, 2)), np.zeros(2))
    assert not classify(Z, zero).values.any()
    ident = _params([np.eye(3)], [np.zeros(3)], np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(classify(Z, ident).values, Z)


def test_classifier_vs_loop_oracle():
    rng = np.random.default_rng(3)
    Z, W, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
    p = _params([np.eye(4)], [np.zeros(4)], W, b)
    oracle = np.array([[sum(Z[i, k] * W[k, j] for k in range(4)) + b[j] for j in range(3)] for i in range(5)])
    np.testing.assert_allclose(classify(Z, p).values, oracle, atol=1e-12)
    with pytest.raises(ContractError):
        classify(np.ones((5, 3)), p)


def test_source_loss_values():
    assert source_loss(np.zeros((3, 5)), [0, 4, 2]).item() == pytest.approx(math.log(5), abs=1e-12)
    assert source_loss(np.array([[30.0, 0.0, 0.0]]), [0]).item() < 1e-10
    oracle = -math.log(math.e / (math.e + math.e**2))
    assert source_loss(np.array([[1.0, 2.0]]), [0]).item() == pytest.approx(oracle, abs=1e-12)
    assert oracle == pytest.approx(1.3133, abs=1e-4)


def test_source_loss_label_range():
    with pytest.raises(RangeError):
        source_loss(np.zeros((2, 2)), [0, 2])
    with pytest.raises(RangeError):
        source_loss(np.zeros((2, 2)), [-1, 0])


def test_predict_examples():
    assert predict(np.array([[0.1, 0.9]])).tolist() == [1]
    assert predict(np.array([[0.5, 0.5]])).tolist() == [0]


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=st.integers(-3, 3).map(float)))
def test_predict_matches_scan(logits):
    # small integer logits make ties common
    for row, got in zip(logits, predict(logits)):
        best = 0
        for j in range(1, row.shape[0]):
            if row[j] > row[best]:
                best = j
        assert got == best


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    n = 9
    pairs = np.array([(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4])
    X = rng.standard_normal((n, 3))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    g = DomainGraph(n, pairs, X)
    gp = DomainGraph(n, inv[pairs], X[perm])
    p = EncoderParams.init(3, 2, rng, hidden_dim=5, emb_dim=4)
    z = encode(normalize_adjacency(g), X, p).values
    zp = encode(normalize_adjacency(gp), X[perm], p).values
    np.testing.assert_allclose(zp, z[perm], atol=1e-12)


def test_source_loss_gradient_all_params():
    assert pipeline_gradient_errors(seed=3)["source_loss wrt encoder params"] < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    p = EncoderParams.init(3, 2, np.random.default_rng(5), hidden_dim=4, emb_dim=4)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, [(k, t.values) for k, t in p.named_tensors()], {"note": "x"})
    arrays, meta = load_checkpoint(path)
    assert meta["note"] == "x"
    q = params_from_arrays(arrays)
    for a, b in zip(p.tensors(), q.tensors()):
        np.testing.assert_array_equal(a.values, b.values)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "ck.bin"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_dense_adjacency_identity_for_isolated():
    adj = _isolated(3)
    assert isinstance(adj, NormalizedAdjacency)
    np.testing.assert_array_equal(adj.to_dense(), np.eye(3))
