"""Adaptive graph hierarchy: soft cluster assignment, downsampling, upsampling.

The assignment matrix maps N nodes to N' clusters, one probability row per
node. A clustering GCN proposes a fresh assignment from each mini-batch; the
stored matrix follows it through an exponential blend so the hierarchy stays
stable across batches. Only the per-batch proposal carries gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import (
    Tensor,
    add,
    batch_mean,
    channel_map,
    matmul,
    node_mix,
    regularized_pinv,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    sym_normalize,
    transpose2d,
)
from .errors import FrozenAssignmentError, ParameterError, ShapeError
from .graph import GraphSpec

_ROW_SUM_TOL = 1e-9


def cluster_count(n_nodes: int, p_cluster: float) -> int:
    """Number of clusters for a node count and clustering ratio (round half up, min 1)."""
    if n_nodes < 1:
        raise ParameterError(f"n_nodes must be >= 1, got {n_nodes}")
    if not 0.0 < p_cluster <= 1.0:
        raise ParameterError(f"p_cluster must lie in (0, 1], got {p_cluster}")
    return max(1, int(math.floor(n_nodes * p_cluster + 0.5)))


class AssignmentState:
    """Stored node-to-cluster assignment with momentum blending.

    The matrix stays row-stochastic: every propose/update cycle blends two
    row-stochastic matrices convexly. Once frozen the matrix never changes.
    """

    def __init__(self, matrix: np.ndarray, momentum: float, temperature: float,
                 frozen: bool = False):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ShapeError(f"assignment matrix must be 2-D, got shape {matrix.shape}")
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {momentum}")
        if temperature <= 0.0:
            raise ParameterError(f"temperature must be positive, got {temperature}")
        self.matrix = matrix
        self.momentum = float(momentum)
        self.temperature = float(temperature)
        self.frozen = bool(frozen)
        self.check_rows()

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.matrix.shape[1]

    def check_rows(self) -> None:
        row_sums = self.matrix.sum(axis=1)
        if np.any(self.matrix < 0) or np.max(np.abs(row_sums - 1.0)) > _ROW_SUM_TOL:
            raise ParameterError("assignment matrix must be row-stochastic")

    def freeze(self) -> None:
        self.frozen = True


def init_assignment(n_nodes: int, n_clusters: int, momentum: float, temperature: float,
                    rng: np.random.Generator) -> AssignmentState:
    """Random positive start, rows normalized to the simplex."""
    if not 1 <= n_clusters <= n_nodes:
        raise ParameterError(f"need 1 <= n_clusters <= n_nodes, got {n_clusters} of {n_nodes}")
    raw = rng.uniform(0.5, 1.5, size=(n_nodes, n_clusters))
    raw /= raw.sum(axis=1, keepdims=True)
    return AssignmentState(raw, momentum, temperature)


def propose_assignment(x_batch, graph: GraphSpec, w_cluster, temperature: float) -> Tensor:
    """Batch-level assignment proposal from node features.

    A single-layer clustering GCN (sigmoid activation) maps each sample's
    node features (time and channel flattened together) to per-node cluster
    scores; scores are averaged over the batch, then a row-wise temperature
    softmax yields the proposal. The per-sample saturation is load-bearing:
    averaging purely linear scores over a batch washes every feature out
    except each node's mean level. Gradient flows back to ``w_cluster``.
    """
    if x_batch.ndim != 4:
        raise ShapeError(f"propose_assignment: expected [B, N, T, C], got shape {x_batch.shape}")
    b, n, t, c = x_batch.shape
    if b < 1:
        raise ShapeError("propose_assignment: empty batch")
    if n != graph.n_nodes:
        raise ShapeError(f"propose_assignment: {n} nodes vs graph with {graph.n_nodes}")
    n_clusters = w_cluster.shape[-1]
    if n_clusters > n:
        raise ParameterError(f"more clusters ({n_clusters}) than nodes ({n})")
    if w_cluster.shape[0] != t * c:
        raise ShapeError(
            f"propose_assignment: weight {w_cluster.shape} does not match flattened features {t * c}"
        )
    mixed = node_mix(graph.normalized_tensor, x_batch)
    flat = reshape(mixed, (b, n, t * c))
    logits = sigmoid(channel_map(flat, w_cluster))
    return softmax_rows(batch_mean(logits), temperature)


def blend_assignment(state: AssignmentState, m_prime: Tensor) -> Tensor:
    """Convex blend of the stored matrix with the proposal.

    The stored side enters as a constant, so gradient reaches only the
    proposal term.
    """
    if m_prime.shape != state.matrix.shape:
        raise ShapeError(
            f"blend_assignment: proposal {m_prime.shape} vs stored {state.matrix.shape}"
        )
    stored = Tensor(state.matrix * state.momentum)
    return add(stored, scale(m_prime, 1.0 - state.momentum))


def momentum_update(state: AssignmentState, m_prime) -> AssignmentState:
    """Commit the blended assignment into the stored state (detached values)."""
    if state.frozen:
        raise FrozenAssignmentError("assignment is frozen; no updates during inference")
    values = m_prime.data if isinstance(m_prime, Tensor) else np.asarray(m_prime, dtype=np.float64)
    if values.shape != state.matrix.shape:
        raise ShapeError(f"momentum_update: proposal {values.shape} vs stored {state.matrix.shape}")
    state.matrix = state.momentum * state.matrix + (1.0 - state.momentum) * values
    state.check_rows()
    return state


@dataclass
class ClusterGraph:
    """Cluster-level adjacency and its normalized form (tensors; may carry gradient)."""

    adjacency: Tensor
    normalized: Tensor

    @property
    def n_clusters(self) -> int:
        return self.adjacency.shape[0]

    @property
    def normalized_tensor(self) -> Tensor:
        return self.normalized


def downsample(z_node, m, graph: GraphSpec) -> tuple[Tensor, ClusterGraph]:
    """Aggregate node features and adjacency to the cluster level.

    Features: ``Z_cluster = M^T Z_node`` per time step and channel. Adjacency:
    ``M^T A M`` (raw node adjacency), then self-loop symmetric normalization.
    """
    m_t = transpose2d(m)
    z_cluster = node_mix(m_t, z_node)
    coarsened = matmul(m_t, matmul(graph.adjacency_tensor, m))
    return z_cluster, ClusterGraph(adjacency=coarsened, normalized=sym_normalize(coarsened))


def upsample(z_cluster, m, eps: float) -> Tensor:
    """Project cluster features back to nodes through the regularized pseudoinverse."""
    pinv = regularized_pinv(m, eps)
    return node_mix(transpose2d(pinv), z_cluster)


# ---------------------------------------------------------------------------
# inspection
# ---------------------------------------------------------------------------

def hard_assignment(matrix: np.ndarray) -> np.ndarray:
    """Argmax cluster per node; ties resolve to the lowest cluster index."""
    return np.argmax(matrix, axis=1)
