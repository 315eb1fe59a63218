"""GCN encoder, linear classifier head and source cross-entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, FormatError, RangeError
from .graph import NormalizedAdjacency


@dataclass
class EncoderParams:
    weights: list[Tensor]
    biases: list[Tensor]
    cls_weight: Tensor
    cls_bias: Tensor

    @classmethod
    def init(
        cls,
        in_dim: int,
        num_classes: int,
        rng: np.random.Generator,
        hidden_dim: int = 64,
        emb_dim: int = 64,
        num_layers: int = 2,
    ) -> EncoderParams:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
        if num_layers < 1:
            raise ContractError("num_layers must be >= 1")
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [emb_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
            biases.append(Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True))
        bound = 1.0 / math.sqrt(emb_dim)
        cls_w = Tensor(rng.uniform(-bound, bound, (emb_dim, num_classes)), requires_grad=True)
        cls_b = Tensor(rng.uniform(-bound, bound, num_classes), requires_grad=True)
        params = cls(weights, biases, cls_w, cls_b)
        params.validate()
        return params

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def emb_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_classes(self) -> int:
        return self.cls_weight.shape[1]

    def tensors(self) -> list[Tensor]:
        """All parameters in a fixed order (layers, then classifier)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.cls_weight, self.cls_bias]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        names = []
        for i in range(self.num_layers):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return list(zip(names + ["cls.weight", "cls.bias"], self.tensors()))

    def validate(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per layer and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i}: input dim does not chain")
        if self.cls_weight.shape[0] != self.emb_dim:
            raise DimensionError("classifier input dim must equal embedding dim")
        if self.cls_bias.shape != (self.cls_weight.shape[1],):
            raise DimensionError("classifier bias shape")

    def frozen(self) -> EncoderParams:
        """Copy whose tensors do not require gradients."""
        return EncoderParams(
            [w.detach() for w in self.weights],
            [b.detach() for b in self.biases],
            self.cls_weight.detach(),
            self.cls_bias.detach(),
        )


def encode(
    adj: NormalizedAdjacency, X, params: EncoderParams, extra_steps: int = 0
) -> Tensor:
    """Node embeddings: relu(Â H W + b) per layer, no relu on the last.

    ``extra_steps`` applies further parameter-free Â propagations to the
    output (used for the target branch).
    """
    X = ad.as_tensor(X)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ContractError(f"features {X.shape} do not match encoder input dim {params.in_dim}")
    if X.shape[0] != adj.num_nodes:
        raise ContractError(f"{X.shape[0]} feature rows for {adj.num_nodes} nodes")
    A = adj.matrix
    H = X
    last = params.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w.shape[1] <= w.shape[0]:
            H = ad.sparse_dense_matmul(A, ad.matmul(H, w))
        else:
            H = ad.matmul(ad.sparse_dense_matmul(A, H), w)
        H = ad.add(H, b)
        if i < last:
            H = ad.relu(H)
    for _ in range(extra_steps):
        H = ad.sparse_dense_matmul(A, H)
    return H


def classify(Z, params: EncoderParams) -> Tensor:
    Z = ad.as_tensor(Z)
    if Z.ndim != 2 or Z.shape[1] != params.emb_dim:
        raise ContractError(f"embeddings {Z.shape} do not match classifier dim {params.emb_dim}")
    return ad.add(ad.matmul(Z, params.cls_weight), params.cls_bias)


def source_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` against integer ``labels``."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.min() < 0 or labels.max() >= c:
        raise RangeError(f"labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum(ad.elementwise_mul(ad.log_softmax_rows(logits), onehot))
    return ad.scalar_mul(picked, -1.0 / n)


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(values, axis=1)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: a text line "ADALIGN-CHECKPOINT 1", any number of "meta key=value"
# lines, then per tensor a header "tensor <name> <d0>x<d1>..." followed
# immediately by prod(shape) little-endian float64 values, and a final "end".

_MAGIC = b"ADALIGN-CHECKPOINT 1\n"


def save_checkpoint(path, tensors: list[tuple[str, np.ndarray]], meta: dict[str, str]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for key, value in meta.items():
            fh.write(f"meta {key}={value}\n".encode())
        for name, arr in tensors:
            arr = np.asarray(arr, dtype="<f8")
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            fh.write(f"tensor {name} {shape}\n".encode())
            fh.write(arr.tobytes(order="C"))
        fh.write(b"end\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise FormatError(f"{path}: not an adalign checkpoint")
    pos = len(_MAGIC)
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: truncated checkpoint")
        header = data[pos:nl].decode()
        pos = nl + 1
        if header == "end":
            break
        kind, _, rest = header.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition("=")
            meta[key] = value
        elif kind == "tensor":
            name, shape_txt = rest.rsplit(" ", 1)
            shape = () if shape_txt == "scalar" else tuple(int(s) for s in shape_txt.split("x"))
            count = int(np.prod(shape)) if shape else 1
            nbytes = 8 * count
            if pos + nbytes > len(data):
                raise FormatError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += nbytes
        else:
            raise FormatError(f"{path}: unexpected section {header!r}")
    return tensors, meta


def params_from_arrays(arrays: dict[str, np.ndarray]) -> EncoderParams:
    n = 0
    while f"layer{n}.weight" in arrays:
        n += 1
    if n == 0:
        raise FormatError("checkpoint holds no encoder layers")
    params = EncoderParams(
        [Tensor(arrays[f"layer{i}.weight"], requires_grad=True) for i in range(n)],
        [Tensor(arrays[f"layer{i}.bias"], requires_grad=True) for i in range(n)],
        Tensor(arrays["cls.weight"], requires_grad=True),
        Tensor(arrays["cls.bias"], requires_grad=True),
    )
    params.validate()
    return params
