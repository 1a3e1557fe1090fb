"""Road-network graphs: adjacency construction, normalization, graph convolution."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, as_tensor, channel_map, node_mix, relu, sigmoid, sym_normalize_np
from .errors import ParameterError, ParseError, ShapeError

_SYMMETRY_TOL = 1e-12


def normalize(adjacency: np.ndarray) -> np.ndarray:
    """Self-loop symmetric normalization of a nonnegative square adjacency."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise ShapeError(f"normalize: needs a square matrix, got shape {adjacency.shape}")
    return sym_normalize_np(adjacency)


@dataclass(frozen=True, eq=False)
class GraphSpec:
    """Immutable graph: raw adjacency plus its precomputed normalized form."""

    n_nodes: int
    adjacency: np.ndarray
    normalized: np.ndarray
    _adjacency_tensor: Tensor = field(repr=False, compare=False, default=None)
    _normalized_tensor: Tensor = field(repr=False, compare=False, default=None)

    @classmethod
    def from_adjacency(cls, adjacency) -> "GraphSpec":
        a = np.array(adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"adjacency must be square, got shape {a.shape}")
        if np.any(a < 0):
            raise ParameterError("adjacency must be nonnegative")
        if np.max(np.abs(a - a.T), initial=0.0) > _SYMMETRY_TOL:
            raise ParameterError("adjacency must be symmetric within 1e-12")
        if np.any(np.diag(a) != 0.0):
            raise ParameterError("adjacency must have a zero diagonal")
        degrees = a.sum(axis=1)
        if a.shape[0] > 1 and np.any(degrees == 0.0):
            warnings.warn("graph has isolated nodes (disconnected)", stacklevel=2)
        a.setflags(write=False)
        norm = normalize(a)
        norm.setflags(write=False)
        return cls(
            n_nodes=a.shape[0],
            adjacency=a,
            normalized=norm,
            _adjacency_tensor=Tensor(a),
            _normalized_tensor=Tensor(norm),
        )

    @property
    def adjacency_tensor(self) -> Tensor:
        return self._adjacency_tensor

    @property
    def normalized_tensor(self) -> Tensor:
        return self._normalized_tensor


def build_gaussian_adjacency(dist, sigma: float | None = None, threshold: float = 0.1) -> GraphSpec:
    """Threshold Gaussian kernel on pairwise distances.

    ``A_ij = exp(-d_ij^2 / sigma^2)`` kept only when it reaches ``threshold``
    (off-diagonal). ``sigma`` defaults to the standard deviation of the
    off-diagonal distances.
    """
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError(f"distance matrix must be square, got shape {d.shape}")
    if np.any(d < 0):
        raise ParameterError("distances must be nonnegative")
    if np.max(np.abs(d - d.T), initial=0.0) > _SYMMETRY_TOL:
        raise ParameterError("distance matrix must be symmetric")
    if np.any(np.diag(d) != 0.0):
        raise ParameterError("distance matrix must have a zero diagonal")
    off_diag = d[~np.eye(d.shape[0], dtype=bool)]
    if sigma is None:
        sigma = float(off_diag.std()) if off_diag.size else 1.0
    sigma = float(sigma)
    if sigma <= 0.0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if threshold < 0.0:
        raise ParameterError(f"threshold must be nonnegative, got {threshold}")
    a = np.exp(-(d ** 2) / sigma ** 2)
    a[a < threshold] = 0.0
    np.fill_diagonal(a, 0.0)
    return GraphSpec.from_adjacency(a)


_ACTIVATIONS = ("relu", "sigmoid", "none")


def gcn_forward(x, graph, w, activation: str = "none") -> Tensor:
    """First-order graph convolution: normalized-adjacency mixing then a linear map.

    ``graph`` may be a :class:`GraphSpec` (static node graph) or a Tensor
    holding an already-normalized adjacency (e.g. the learned cluster graph).
    """
    if activation not in _ACTIVATIONS:
        raise ParameterError(f"activation must be one of {_ACTIVATIONS}, got {activation!r}")
    a_norm = graph.normalized_tensor if isinstance(graph, GraphSpec) else as_tensor(graph)
    x = as_tensor(x)
    node_axis = x.ndim - 3
    if x.ndim < 3 or x.shape[node_axis] != a_norm.shape[0]:
        raise ShapeError(
            f"gcn_forward: input {x.shape} does not match graph with {a_norm.shape[0]} nodes"
        )
    out = channel_map(node_mix(a_norm, x), w)
    if activation == "relu":
        return relu(out)
    if activation == "sigmoid":
        return sigmoid(out)
    return out


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------

def load_edge_list(path, n_nodes: int) -> GraphSpec:
    """Undirected edge-list CSV with header ``src,dst,weight``, each pair once."""
    a = np.zeros((n_nodes, n_nodes))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["src", "dst", "weight"]:
            raise ParseError(f"expected header 'src,dst,weight' in {path}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            try:
                src, dst, weight = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise ParseError(f"bad edge entry {row!r}", line=lineno) from exc
            if not (0 <= src < n_nodes and 0 <= dst < n_nodes):
                raise ParseError(f"node index out of range in {row!r}", line=lineno)
            if src == dst:
                raise ParseError(f"self-loop not allowed: {row!r}", line=lineno)
            a[src, dst] = weight
            a[dst, src] = weight
    return GraphSpec.from_adjacency(a)


def save_edge_list(path, graph: GraphSpec) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        n = graph.n_nodes
        for i in range(n):
            for j in range(i + 1, n):
                if graph.adjacency[i, j] != 0.0:
                    writer.writerow([i, j, repr(float(graph.adjacency[i, j]))])


def load_distance_matrix(path) -> np.ndarray:
    """Plain numeric CSV holding a square distance matrix (no header)."""
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"non-numeric distance entry in {row!r}", line=lineno) from exc
    if not rows:
        raise ParseError(f"no data rows in {path}")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ParseError(f"ragged row ({len(r)} fields, expected {width})", line=i + 1)
    return np.asarray(rows, dtype=np.float64)
