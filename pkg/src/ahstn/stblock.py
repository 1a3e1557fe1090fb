"""Spatio-temporal feature blocks: gated temporal convolution around a graph convolution."""

from __future__ import annotations

import numpy as np

from .diffcore import (
    BatchNormState,
    Tensor,
    batchnorm,
    conv1d_time,
    glorot_uniform,
    glu,
)
from .errors import ShapeError
from .graph import gcn_forward


class GTCNLayer:
    """1-D temporal convolution to doubled channels, gated by a GLU.

    Output time length is input length - kernel_size + 1; output channels are
    exactly ``out_channels`` after the gate halves the convolution output.
    """

    def __init__(self, kernel_size: int, in_channels: int, out_channels: int,
                 rng: np.random.Generator):
        self.kernel_size = kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = kernel_size * in_channels
        fan_out = kernel_size * 2 * out_channels
        self.weight = glorot_uniform(rng, (kernel_size, in_channels, 2 * out_channels),
                                     fan_in, fan_out)
        self.bias = Tensor(np.zeros(2 * out_channels), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return glu(conv1d_time(x, self.weight, self.bias))

    def params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class BatchNorm:
    """Per-channel batch normalization with learnable scale/shift and running stats."""

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState.create(channels)

    def __call__(self, x, training: bool, update_running: bool) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.state, training,
                         update_running=update_running)

    def params(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


class STBlock:
    """GTCN -> GCN(+ReLU) -> GTCN -> batchnorm sandwich.

    Each pass shrinks the time axis by 2*(kernel_size - 1); channels come out
    at ``temporal_channels``.
    """

    def __init__(self, kernel_size: int, in_channels: int, temporal_channels: int,
                 graph_channels: int, rng: np.random.Generator, name: str = "st_block"):
        self.name = name
        self.kernel_size = kernel_size
        self.gtcn_in = GTCNLayer(kernel_size, in_channels, temporal_channels, rng)
        self.gcn_weight = glorot_uniform(rng, (temporal_channels, graph_channels),
                                         temporal_channels, graph_channels)
        self.gtcn_out = GTCNLayer(kernel_size, graph_channels, temporal_channels, rng)
        self.norm = BatchNorm(temporal_channels)

    @property
    def time_shrinkage(self) -> int:
        return 2 * (self.kernel_size - 1)

    def forward(self, x, graph, training: bool, update_running: bool | None = None) -> Tensor:
        if update_running is None:
            update_running = training
        t_in = x.shape[-2]
        if t_in < 2 * self.kernel_size - 1:
            raise ShapeError(
                f"{self.name}: temporal length {t_in} too short for two "
                f"kernel-{self.kernel_size} convolutions"
            )
        h = self.gtcn_in(x)
        h = gcn_forward(h, graph, self.gcn_weight, activation="relu")
        h = self.gtcn_out(h)
        return self.norm(h, training, update_running)

    def params(self, prefix: str):
        out = self.gtcn_in.params(f"{prefix}.gtcn_in")
        out.append((f"{prefix}.gcn.weight", self.gcn_weight))
        out += self.gtcn_out.params(f"{prefix}.gtcn_out")
        out += self.norm.params(f"{prefix}.norm")
        return out
