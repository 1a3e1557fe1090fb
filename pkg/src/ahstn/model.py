"""Full forecasting network: node-level blocks, cluster hierarchy branch, skip
concatenation, forecasting head, ablation variants, and checkpoint I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import (
    Tensor,
    add,
    add_channel_bias,
    as_tensor,
    channel_map,
    concat_channels,
    glorot_uniform,
    relu,
    reshape,
    slice_time,
)
from .errors import ConfigError, ShapeError
from .graph import GraphSpec
from .hierarchy import (
    AssignmentState,
    blend_assignment,
    cluster_count,
    downsample,
    init_assignment,
    momentum_update,
    propose_assignment,
    upsample,
)
from .stblock import GTCNLayer, STBlock

VARIANTS = ("full", "no-skip", "no-hierarchy")

# fixed rng stream per component so shared components match across variants
_RNG_STREAMS = {
    "block1": 0,
    "block2": 1,
    "block3": 2,
    "cluster_block": 3,
    "assign": 4,
    "assign_init": 5,
    "head": 6,
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and hierarchy hyperparameters."""

    n_nodes: int
    input_steps: int = 12
    horizon: int = 12
    kernel_size: int = 2
    temporal_channels: int = 64
    graph_channels: int = 32
    cluster_ratio: float = 0.1
    temperature: float = 1.0
    assign_momentum: float = 0.9
    pinv_eps: float = 1e-6
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("n_nodes", "input_steps", "horizon", "kernel_size",
                     "temporal_channels", "graph_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.cluster_ratio <= 1.0:
            raise ConfigError(f"cluster_ratio must lie in (0, 1], got {self.cluster_ratio}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.assign_momentum < 1.0:
            raise ConfigError(f"assign_momentum must lie in [0, 1), got {self.assign_momentum}")
        if self.pinv_eps <= 0.0:
            raise ConfigError(f"pinv_eps must be positive, got {self.pinv_eps}")
        if self.final_time_steps < 1:
            raise ConfigError(
                f"input_steps={self.input_steps} exhausted by kernel_size={self.kernel_size}: "
                f"three stacked blocks need input_steps >= {6 * (self.kernel_size - 1) + 1}"
            )

    @property
    def block_shrinkage(self) -> int:
        return 2 * (self.kernel_size - 1)

    @property
    def final_time_steps(self) -> int:
        """Time steps left after the three chained blocks (skip-slice width)."""
        return self.input_steps - 3 * self.block_shrinkage

    @property
    def n_clusters(self) -> int:
        return cluster_count(self.n_nodes, self.cluster_ratio)

    @property
    def has_hierarchy(self) -> bool:
        return self.variant != "no-hierarchy"

    @property
    def has_skip(self) -> bool:
        return self.variant != "no-skip"


def _rng_for(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_RNG_STREAMS[component],)))


class ForecastHead:
    """Collapse the remaining time steps with a full-width GTCN, then map
    channels through two linear layers with a ReLU between them."""

    def __init__(self, time_steps: int, in_channels: int, hidden: int, horizon: int,
                 rng: np.random.Generator):
        self.time_steps = time_steps
        self.gtcn = GTCNLayer(time_steps, in_channels, hidden, rng)
        self.w1 = glorot_uniform(rng, (hidden, hidden), hidden, hidden)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = glorot_uniform(rng, (hidden, horizon), hidden, horizon)
        self.b2 = Tensor(np.zeros(horizon), requires_grad=True)

    def __call__(self, x) -> Tensor:
        h = self.gtcn(x)  # [..., 1, hidden]
        h = relu(add_channel_bias(channel_map(h, self.w1), self.b1))
        h = add_channel_bias(channel_map(h, self.w2), self.b2)
        return reshape(h, h.shape[:-3] + (h.shape[-3], h.shape[-1]))

    def params(self, prefix: str):
        out = self.gtcn.params(f"{prefix}.gtcn")
        out += [(f"{prefix}.linear1.weight", self.w1), (f"{prefix}.linear1.bias", self.b1),
                (f"{prefix}.linear2.weight", self.w2), (f"{prefix}.linear2.bias", self.b2)]
        return out


class AHSTNModel:
    """Hierarchical spatio-temporal forecaster over a fixed road graph."""

    def __init__(self, config: ModelConfig, graph: GraphSpec):
        if graph.n_nodes != config.n_nodes:
            raise ShapeError(f"graph has {graph.n_nodes} nodes, config expects {config.n_nodes}")
        self.config = config
        self.graph = graph
        k, c_t, c_g = config.kernel_size, config.temporal_channels, config.graph_channels

        self.block1 = STBlock(k, 1, c_t, c_g, _rng_for(config.seed, "block1"), "block1")
        self.block2 = STBlock(k, c_t, c_t, c_g, _rng_for(config.seed, "block2"), "block2")
        self.block3 = STBlock(k, c_t, c_t, c_g, _rng_for(config.seed, "block3"), "block3")

        self.cluster_block = None
        self.assign_weight = None
        self.assignment: AssignmentState | None = None
        if config.has_hierarchy:
            self.cluster_block = STBlock(k, c_t, c_t, c_g,
                                         _rng_for(config.seed, "cluster_block"), "cluster_block")
            feat = config.input_steps  # raw windows have one channel
            # wide init so the clustering GCN's sigmoid saturates per sample;
            # near-linear scores would wash out under the batch average
            assign_rng = _rng_for(config.seed, "assign")
            self.assign_weight = Tensor(assign_rng.uniform(-4.0, 4.0,
                                                           (feat, config.n_clusters)),
                                        requires_grad=True)
            self.assignment = init_assignment(config.n_nodes, config.n_clusters,
                                              config.assign_momentum, config.temperature,
                                              _rng_for(config.seed, "assign_init"))

        head_in = 3 * c_t if config.has_skip else c_t
        self.head = ForecastHead(config.final_time_steps, head_in, c_t, config.horizon,
                                 _rng_for(config.seed, "head"))

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def forward(self, x, training: bool = False, update_state: bool | None = None,
                zero_hierarchy: bool = False) -> Tensor:
        """Map a batch of input windows [B, N, T, 1] to forecasts [B, N, H].

        ``update_state`` controls the side effects of a training-mode pass
        (assignment momentum commit, batchnorm running stats); disable it to
        make training-mode forward a pure function, e.g. for gradient checks.
        ``zero_hierarchy`` suppresses the cluster branch contribution.
        """
        cfg = self.config
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (cfg.n_nodes, cfg.input_steps, 1):
            raise ShapeError(
                f"forward: expected [B, {cfg.n_nodes}, {cfg.input_steps}, 1], got {x.shape}"
            )
        if update_state is None:
            update_state = training

        f1 = self.block1.forward(x, self.graph, training, update_state)
        f2 = self.block2.forward(f1, self.graph, training, update_state)

        if cfg.has_hierarchy and not zero_hierarchy:
            merged = add(f2, self._hierarchy_branch(x, f1, training, update_state))
        else:
            merged = f2
        f3 = self.block3.forward(merged, self.graph, training, update_state)

        if cfg.has_skip:
            t3 = cfg.final_time_steps
            features = concat_channels([slice_time(f1, t3), slice_time(f2, t3), f3])
        else:
            features = f3
        return self.head(features)

    def _hierarchy_branch(self, x, f1, training: bool, update_state: bool) -> Tensor:
        state = self.assignment
        if training and not state.frozen:
            m_prime = propose_assignment(x, self.graph, self.assign_weight, state.temperature)
            m = blend_assignment(state, m_prime)
            if update_state:
                momentum_update(state, m_prime)
        else:
            m = Tensor(state.matrix)
        z_cluster, cluster_graph = downsample(f1, m, self.graph)
        z_cluster = self.cluster_block.forward(z_cluster, cluster_graph.normalized, training,
                                               update_state)
        return upsample(z_cluster, m, self.config.pinv_eps)

    # ------------------------------------------------------------------
    # parameter bookkeeping
    # ------------------------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = self.block1.params("block1")
        out += self.block2.params("block2")
        out += self.block3.params("block3")
        if self.config.has_hierarchy:
            out.append(("assign.weight", self.assign_weight))
            out += self.cluster_block.params("cluster_block")
        out += self.head.params("head")
        return out

    def census(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(name, t.shape, t.size) for name, t in self.parameters()]

    def n_parameters(self) -> int:
        return sum(count for _, _, count in self.census())

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def norm_states(self):
        blocks = [("block1", self.block1), ("block2", self.block2), ("block3", self.block3)]
        if self.config.has_hierarchy:
            blocks.append(("cluster_block", self.cluster_block))
        return [(f"{name}.norm", block.norm.state) for name, block in blocks]

    def freeze_assignment(self) -> None:
        if self.assignment is not None:
            self.assignment.freeze()

    # ------------------------------------------------------------------
    # state snapshots (in-memory checkpointing during training)
    # ------------------------------------------------------------------

    def snapshot(self) -> dict:
        snap = {name: t.data.copy() for name, t in self.parameters()}
        for name, st in self.norm_states():
            snap[f"{name}.running_mean"] = st.running_mean.copy()
            snap[f"{name}.running_var"] = st.running_var.copy()
        if self.assignment is not None:
            snap["assignment.matrix"] = self.assignment.matrix.copy()
        return snap

    def restore(self, snap: dict) -> None:
        for name, t in self.parameters():
            t.data = snap[name].copy()
        for name, st in self.norm_states():
            st.running_mean = snap[f"{name}.running_mean"].copy()
            st.running_var = snap[f"{name}.running_var"].copy()
        if self.assignment is not None:
            self.assignment.matrix = snap["assignment.matrix"].copy()


def build_variant(config: ModelConfig, graph: GraphSpec) -> AHSTNModel:
    """Construct the model for the configured variant."""
    return AHSTNModel(config, graph)


def parameter_census(model: AHSTNModel) -> list[tuple[str, tuple[int, ...], int]]:
    return model.census()


# ---------------------------------------------------------------------------
# checkpoint format (versioned binary)
# ---------------------------------------------------------------------------
#
#   bytes 0..7    magic  b"AHSTNCK1"
#   bytes 8..11   format version, uint32 little-endian
#   bytes 12..19  header length, uint64 little-endian
#   header        UTF-8 JSON: config, optional normalizer {mean, std}, extra
#                 metadata, parameter census (names + shapes), buffer listing,
#                 assignment descriptor
#   payload       raw little-endian float64 blocks: parameters in census
#                 order, then buffers in listed order, then the stored
#                 assignment matrix (when present)

CHECKPOINT_MAGIC = b"AHSTNCK1"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: AHSTNModel, path, normalizer=None, extra: dict | None = None) -> None:
    params = model.parameters()
    buffers = []
    for name, st in model.norm_states():
        buffers.append((f"{name}.running_mean", st.running_mean))
        buffers.append((f"{name}.running_var", st.running_var))
    header = {
        "config": asdict(model.config),
        "normalizer": None,
        "extra": extra or {},
        "params": [[name, list(t.shape)] for name, t in params],
        "buffers": [[name, list(arr.shape)] for name, arr in buffers],
        "assignment": None,
    }
    if normalizer is not None:
        header["normalizer"] = {"mean": float(normalizer.mean), "std": float(normalizer.std)}
    if model.assignment is not None:
        header["assignment"] = {
            "shape": list(model.assignment.matrix.shape),
            "frozen": model.assignment.frozen,
        }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, t in params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        for _, arr in buffers:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if model.assignment is not None:
            fh.write(np.ascontiguousarray(model.assignment.matrix, dtype="<f8").tobytes())


@dataclass
class CheckpointBundle:
    model: AHSTNModel
    normalizer: "object | None"
    extra: dict


def load_checkpoint(path, graph: GraphSpec) -> CheckpointBundle:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = ModelConfig(**header["config"])
        model = AHSTNModel(config, graph)

        def read_array(shape) -> np.ndarray:
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ConfigError("checkpoint truncated")
            return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)

        params = dict(model.parameters())
        for name, shape in header["params"]:
            if name not in params or list(params[name].shape) != shape:
                raise ConfigError(f"checkpoint parameter {name!r} does not match model")
            params[name].data = read_array(shape)
        states = dict(model.norm_states())
        for name, shape in header["buffers"]:
            base, _, kind = name.rpartition(".")
            if base not in states:
                raise ConfigError(f"checkpoint buffer {name!r} does not match model")
            setattr(states[base], kind, read_array(shape))
        if header["assignment"] is not None:
            model.assignment.matrix = read_array(header["assignment"]["shape"])
            model.assignment.frozen = bool(header["assignment"]["frozen"])

    normalizer = None
    if header["normalizer"] is not None:
        from .training import Normalizer

        normalizer = Normalizer(header["normalizer"]["mean"], header["normalizer"]["std"])
    return CheckpointBundle(model=model, normalizer=normalizer, extra=header.get("extra", {}))
