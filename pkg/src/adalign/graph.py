"""Graph containers, file I/O, GCN normalisation and the CSBM generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConsistencyError, FormatError, RangeError, SpecError
from .rng import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DomainGraph:
    """One graph domain.

    ``edges`` is an ``(E, 2)`` integer array holding each undirected edge once
    with ``src < dst``. Self-loops are never stored; normalisation adds them.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int = 0

    def __post_init__(self):
        n = int(self.num_nodes)
        if n <= 0:
            raise ConsistencyError("num_nodes must be positive")
        edges = canonical_edges(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise RangeError(f"edge endpoint outside [0, {n})")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ConsistencyError(f"features must be {n} x d, got {feats.shape}")
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != n:
                raise ConsistencyError(f"{labels.shape[0]} labels for {n} nodes")
            c = int(self.num_classes) or int(labels.max()) + 1
            if labels.min() < 0 or labels.max() >= c:
                raise RangeError(f"labels must lie in [0, {c})")
            object.__setattr__(self, "labels", labels)
            object.__setattr__(self, "num_classes", c)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def without_labels(self) -> DomainGraph:
        return DomainGraph(self.num_nodes, self.edges, self.features, None, self.num_classes)


def canonical_edges(edges: np.ndarray) -> np.ndarray:
    """Sorted, deduplicated ``src < dst`` edge array with self-loops removed."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    keep = lo != hi
    pairs = np.stack([lo[keep], hi[keep]], axis=1)
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Coordinate form of D^{-1/2}(A + I)D^{-1/2}."""

    num_nodes: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        n = self.num_nodes
        return sp.csr_matrix((self.weights, (self.rows, self.cols)), shape=(n, n))

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_adjacency(graph: DomainGraph) -> NormalizedAdjacency:
    n = graph.num_nodes
    e = graph.edges
    loops = np.arange(n, dtype=np.int64)
    rows = np.concatenate([e[:, 0], e[:, 1], loops])
    cols = np.concatenate([e[:, 1], e[:, 0], loops])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg)
    w = inv_sqrt[rows] * inv_sqrt[cols]
    return NormalizedAdjacency(n, rows, cols, w)


# ---------------------------------------------------------------------------
# file formats


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def load_edge_list(path, num_nodes: int | None = None) -> tuple[np.ndarray, int]:
    """Read ``src dst`` lines into a canonical undirected edge array.

    Returns ``(edges, n_self_loops)``; self-loops are dropped and logged.
    When ``num_nodes`` is given, endpoints at or above it raise
    :class:`RangeError`.
    """
    pairs = []
    self_loops = 0
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"expected two node ids, got {line!r}", lineno)
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"non-integer node id in {line!r}", lineno) from None
        if a < 0 or b < 0:
            raise FormatError("node ids must be non-negative", lineno)
        if num_nodes is not None and max(a, b) >= num_nodes:
            raise RangeError(f"line {lineno}: endpoint {max(a, b)} >= {num_nodes}")
        if a == b:
            self_loops += 1
            continue
        pairs.append((a, b))
    if self_loops:
        log.warning("%s: dropped %d self-loop(s)", path, self_loops)
    return canonical_edges(np.array(pairs, dtype=np.int64).reshape(-1, 2)), self_loops


def save_edge_list(path, edges: np.ndarray, num_nodes: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if num_nodes is not None:
            fh.write(f"# num_nodes={num_nodes}\n")
        for a, b in np.asarray(edges, dtype=np.int64):
            fh.write(f"{a} {b}\n")


def load_features(path) -> np.ndarray:
    rows = []
    width = None
    for lineno, line in _data_lines(path):
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise FormatError(f"unparsable float in {line!r}", lineno) from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise FormatError(f"ragged row: {len(row)} values, expected {width}", lineno)
        rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no feature rows")
    return np.array(rows, dtype=np.float64)


def save_features(path, features: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(features, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_labels(path, num_classes: int | None = None) -> np.ndarray:
    labels = []
    for lineno, line in _data_lines(path):
        try:
            y = int(line)
        except ValueError:
            raise FormatError(f"non-integer label {line!r}", lineno) from None
        if y < 0 or (num_classes is not None and y >= num_classes):
            raise RangeError(f"line {lineno}: label {y} outside [0, {num_classes})")
        labels.append(y)
    if not labels:
        raise FormatError(f"{path}: no labels")
    return np.array(labels, dtype=np.int64)


def save_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(y)}\n" for y in labels)


def _declared_num_nodes(path) -> int | None:
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line.startswith("# num_nodes="):
                return int(line.split("=", 1)[1])
            if line and not line.startswith("#"):
                return None
    return None


def load_domain(directory, num_classes: int | None = None, with_labels: bool = True) -> DomainGraph:
    """Load ``edges.txt``, ``features.csv`` and (optionally) ``labels.txt``."""
    d = Path(directory)
    feats = load_features(d / "features.csv")
    n = feats.shape[0]
    declared = _declared_num_nodes(d / "edges.txt")
    if declared is not None and declared != n:
        raise ConsistencyError(f"edge list declares {declared} nodes, features have {n} rows")
    edges, _ = load_edge_list(d / "edges.txt", num_nodes=n)
    labels = None
    if with_labels and (d / "labels.txt").exists():
        labels = load_labels(d / "labels.txt", num_classes)
        if labels.shape[0] != n:
            raise ConsistencyError(f"{labels.shape[0]} labels but {n} feature rows")
    return DomainGraph(n, edges, feats, labels, num_classes or 0)


def save_domain(directory, graph: DomainGraph) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_edge_list(d / "edges.txt", graph.edges, graph.num_nodes)
    save_features(d / "features.csv", graph.features)
    if graph.labels is not None:
        save_labels(d / "labels.txt", graph.labels)


# ---------------------------------------------------------------------------
# contextual SBM


@dataclass(frozen=True)
class CsbmSpec:
    """Contextual SBM for a source domain and a shifted target domain.

    Class means default to ``mean_scale``-length seeded random directions
    unless ``class_means`` is given (C rows of length ``feature_dim``). The
    target domain rotates every class mean by ``shift_rotation_deg`` in the
    plane of coordinates ``rotation_plane``, then adds ``shift_translation``;
    its edge probabilities are offset by the two deltas.
    """

    num_nodes: int = 1000
    feature_dim: int = 16
    num_classes: int = 2
    sigma_feat: float = 1.0
    p_in: float = 0.05
    p_out: float = 0.01
    mean_scale: float = 1.0
    class_means: tuple[tuple[float, ...], ...] | None = None
    shift_translation: tuple[float, ...] = ()
    shift_rotation_deg: float = 0.0
    rotation_plane: tuple[int, int] = (0, 1)
    shift_p_in_delta: float = 0.0
    shift_p_out_delta: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_nodes < 1:
            raise SpecError("num_nodes: must be >= 1")
        if self.feature_dim < 1:
            raise SpecError("feature_dim: must be >= 1")
        if self.num_classes < 1 or self.num_classes > self.num_nodes:
            raise SpecError("num_classes: must lie in [1, num_nodes]")
        if not self.sigma_feat > 0:
            raise SpecError("sigma_feat: must be > 0")
        if not 0 <= self.p_out <= self.p_in <= 1:
            raise SpecError("p_in/p_out: need 0 <= p_out <= p_in <= 1")
        for name, p in (
            ("shift_p_in_delta", self.p_in + self.shift_p_in_delta),
            ("shift_p_out_delta", self.p_out + self.shift_p_out_delta),
        ):
            if not 0 <= p <= 1:
                raise SpecError(f"{name}: shifted probability {p} outside [0, 1]")
        if self.shift_translation and len(self.shift_translation) != self.feature_dim:
            raise SpecError(f"shift_translation: need {self.feature_dim} values")
        if self.class_means is not None:
            means = np.asarray(self.class_means, dtype=np.float64)
            if means.shape != (self.num_classes, self.feature_dim):
                raise SpecError(
                    f"class_means: need {self.num_classes} x {self.feature_dim}, got {means.shape}"
                )
        a, b = self.rotation_plane
        if a == b or not (0 <= a < self.feature_dim and 0 <= b < self.feature_dim):
            if self.shift_rotation_deg:
                raise SpecError("rotation_plane: need two distinct feature coordinates")

    def source_means(self) -> np.ndarray:
        if self.class_means is not None:
            return np.asarray(self.class_means, dtype=np.float64)
        g = substream(self.seed, "csbm_means")
        dirs = g.standard_normal((self.num_classes, self.feature_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return self.mean_scale * dirs

    def target_means(self) -> np.ndarray:
        means = self.source_means().copy()
        if self.shift_rotation_deg:
            a, b = self.rotation_plane
            th = math.radians(self.shift_rotation_deg)
            c, s = math.cos(th), math.sin(th)
            xa, xb = means[:, a].copy(), means[:, b].copy()
            means[:, a] = c * xa - s * xb
            means[:, b] = s * xa + c * xb
        if self.shift_translation:
            means += np.asarray(self.shift_translation, dtype=np.float64)
        return means


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def _sbm_edges(labels: np.ndarray, p_in: float, p_out: float, rng, chunk: int = 512) -> np.ndarray:
    n = labels.shape[0]
    out = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        u = rng.random((stop - start, n))
        same = labels[start:stop, None] == labels[None, :]
        hit = u < np.where(same, p_in, p_out)
        r, c = np.nonzero(hit)
        r += start
        keep = c > r
        out.append(np.stack([r[keep], c[keep]], axis=1))
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2), dtype=np.int64)


def sample_domain(
    num_nodes: int, means: np.ndarray, sigma: float, p_in: float, p_out: float, rng
) -> DomainGraph:
    c, d = means.shape
    labels = _balanced_labels(num_nodes, c, rng)
    feats = means[labels] + sigma * rng.standard_normal((num_nodes, d))
    edges = _sbm_edges(labels, p_in, p_out, rng)
    return DomainGraph(num_nodes, edges, feats, labels, c)


def generate_csbm(spec: CsbmSpec) -> tuple[DomainGraph, DomainGraph]:
    spec.validate()
    src_rng = substream(spec.seed, "data_source")
    tgt_rng = substream(spec.seed, "data_target")
    source = sample_domain(
        spec.num_nodes, spec.source_means(), spec.sigma_feat, spec.p_in, spec.p_out, src_rng
    )
    target = sample_domain(
        spec.num_nodes,
        spec.target_means(),
        spec.sigma_feat,
        spec.p_in + spec.shift_p_in_delta,
        spec.p_out + spec.shift_p_out_delta,
        tgt_rng,
    )
    return source, target


def canonical_task(seed: int = 0, num_nodes: int = 1000) -> CsbmSpec:
    """The desk-scale adaptation benchmark used by the acceptance suite.

    Two classes in 16 dimensions. Coordinates 0-1 carry a strong class
    signal and receive the whole shift (a translation plus a 30 degree
    rotation); coordinates 2-15 carry a weaker signal that is identical in
    both domains. Inter-class edge probability rises by 0.02 in the target.
    """
    d = 16
    strong = np.zeros(d)
    strong[0] = 1.5
    weak = np.zeros(d)
    weak[2:] = 0.25
    mu1 = strong + weak
    means = (tuple(map(float, -mu1)), tuple(map(float, mu1)))
    translation = np.zeros(d)
    translation[0] = 2.0
    translation[1] = 1.0
    return CsbmSpec(
        num_nodes=num_nodes,
        feature_dim=d,
        num_classes=2,
        sigma_feat=1.0,
        p_in=0.03,
        p_out=0.005,
        class_means=means,
        shift_translation=tuple(map(float, translation)),
        shift_rotation_deg=30.0,
        rotation_plane=(0, 1),
        shift_p_in_delta=0.0,
        shift_p_out_delta=0.02,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# key=value spec files

def _format_value(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(",".join(repr(float(v)) for v in row) for row in value)
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def spec_to_text(spec: CsbmSpec) -> str:
    lines = []
    for f in fields(spec):
        value = getattr(spec, f.name)
        if value is None:
            continue
        lines.append(f"{f.name}={_format_value(value)}")
    return "\n".join(lines) + "\n"


def parse_spec(text: str) -> CsbmSpec:
    types = {f.name: f for f in fields(CsbmSpec)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"expected key=value, got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise SpecError(f"{key}: unknown spec field (line {lineno})")
        try:
            if key == "class_means":
                kwargs[key] = tuple(
                    tuple(float(v) for v in row.split(",")) for row in value.split(";")
                )
            elif key == "shift_translation":
                kwargs[key] = tuple(float(v) for v in value.split(",")) if value else ()
            elif key == "rotation_plane":
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key in ("num_nodes", "feature_dim", "num_classes", "seed"):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        except ValueError:
            raise SpecError(f"{key}: cannot parse {value!r} (line {lineno})") from None
    spec = CsbmSpec(**kwargs)
    spec.validate()
    return spec


def load_spec(path) -> CsbmSpec:
    return parse_spec(Path(path).read_text(encoding="utf-8"))


def with_seed(spec: CsbmSpec, seed: int) -> CsbmSpec:
    return replace(spec, seed=seed)
