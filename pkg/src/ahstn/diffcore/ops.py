"""Differentiable operations for the forecasting network.

Conventions: tensors carrying node/time/channel data are laid out
``[..., node, time, channel]`` with optional leading batch axes. Every op
validates shapes up front and raises :class:`ShapeError` naming the offending
shapes. Backward rules never mutate forward values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError, ParameterError, ShapeError
from .engine import Tensor, as_tensor, record_op


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return record_op((a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return record_op((a, b), a.data - b.data, lambda g: (g, -g))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "hadamard")
    return record_op((a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return record_op((x,), x.data * c, lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return record_op((x,), out, lambda g: (g * (x.data > 0.0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # clip keeps exp() finite; sigmoid saturates far inside +-700 anyway
    out = np.exp(np.clip(x, -709.0, 709.0))
    out /= 1.0 + out
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return record_op((x,), s, lambda g: (g * s * (1.0 - s),))


def absval(x) -> Tensor:
    x = as_tensor(x)
    return record_op((x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum())
    return record_op((x,), out, lambda g: (np.full(x.shape, float(g)),))


def batch_mean(x) -> Tensor:
    """Mean over the leading (batch) axis."""
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[0] == 0:
        raise ShapeError(f"batch_mean: needs a nonempty leading axis, got shape {x.shape}")
    n = x.shape[0]
    out = x.data.mean(axis=0)

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return record_op((x,), out, backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    return record_op((x,), out, lambda g: (g.reshape(x.shape),))


def transpose2d(m) -> Tensor:
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"transpose2d: needs a matrix, got shape {m.shape}")
    return record_op((m,), m.data.T.copy(), lambda g: (g.T,))


def slice_time(x, last_k: int) -> Tensor:
    """Keep the final ``last_k`` steps of the time axis (second to last)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"slice_time: needs a time axis, got shape {x.shape}")
    t = x.shape[-2]
    last_k = int(last_k)
    if not 1 <= last_k <= t:
        raise ShapeError(f"slice_time: cannot keep {last_k} of {t} time steps")
    out = x.data[..., t - last_k :, :].copy()

    def backward(g):
        gx = np.zeros(x.shape)
        gx[..., t - last_k :, :] = g
        return (gx,)

    return record_op((x,), out, backward)


def concat_channels(tensors) -> Tensor:
    """Join tensors along the trailing channel axis."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat_channels: empty input list")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_channels: shapes {ts[0].shape} and {t.shape} differ off the channel axis"
            )
    widths = [t.shape[-1] for t in ts]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in ts], axis=-1)

    def backward(g):
        return tuple(g[..., offsets[i] : offsets[i + 1]] for i in range(len(ts)))

    return record_op(tuple(ts), out, backward)


def add_channel_bias(x, bias) -> Tensor:
    """Broadcast-add a per-channel bias over the trailing axis."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_channel_bias: bias {bias.shape} does not match channels of {x.shape}")
    out = x.data + bias.data

    def backward(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0)

    return record_op((x, bias), out, backward)


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Strict 2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return record_op((a, b), out, backward)


def node_mix(m, x) -> Tensor:
    """Mix features along the node axis: ``out[..., p, t, c] = sum_q m[p, q] x[..., q, t, c]``."""
    m, x = as_tensor(m), as_tensor(x)
    if m.ndim != 2:
        raise ShapeError(f"node_mix: mixer must be a matrix, got shape {m.shape}")
    if x.ndim < 3:
        raise ShapeError(f"node_mix: features need [..., node, time, channel], got shape {x.shape}")
    node_axis = x.ndim - 3
    if x.shape[node_axis] != m.shape[1]:
        raise ShapeError(f"node_mix: mixer {m.shape} does not match node axis of {x.shape}")
    other_axes = [i for i in range(x.ndim) if i != node_axis]

    def apply(mat, feats):
        mixed = np.tensordot(mat, feats, axes=([1], [node_axis]))
        return np.ascontiguousarray(np.moveaxis(mixed, 0, node_axis))

    out = apply(m.data, x.data)

    def backward(g):
        gm = None
        if m.requires_grad:
            gm = np.tensordot(g, x.data, axes=(other_axes, other_axes))
        gx = apply(m.data.T, g) if x.requires_grad else None
        return gm, gx

    return record_op((m, x), out, backward)


def channel_map(x, w) -> Tensor:
    """Linear map over the trailing channel axis: ``out[..., o] = sum_i x[..., i] w[i, o]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"channel_map: weight {w.shape} does not match channels of {x.shape}")
    out = x.data @ w.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.tensordot(x.data, g, axes=(list(range(x.ndim - 1)), list(range(x.ndim - 1))))
        return gx, gw

    return record_op((x, w), out, backward)


# ---------------------------------------------------------------------------
# temporal convolution and gating
# ---------------------------------------------------------------------------

def conv1d_time(x, w, bias) -> Tensor:
    """Valid (no padding) convolution along the time axis, independent per node.

    ``x``: [..., T, C_in], ``w``: [K, C_in, C_out], ``bias``: [C_out].
    Output time length is exactly T - K + 1.
    """
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if x.ndim < 2 or w.ndim != 3:
        raise ShapeError(f"conv1d_time: got input {x.shape}, kernel {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d_time: kernel {w.shape} does not match channels of {x.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d_time: bias {bias.shape} does not match output channels {c_out}")
    t = x.shape[-2]
    if k < 1:
        raise ParameterError(f"conv1d_time: kernel size must be >= 1, got {k}")
    if t < k:
        raise ShapeError(f"conv1d_time: temporal length too short for kernel (T={t} < K={k})")
    t_out = t - k + 1

    # im2col: one matmul over stacked taps instead of K separate products
    cols = np.empty(x.shape[:-2] + (t_out, k * c_in))
    for j in range(k):
        cols[..., j * c_in : (j + 1) * c_in] = x.data[..., j : j + t_out, :]
    w_flat = w.data.reshape(k * c_in, c_out)
    out = cols @ w_flat
    out += bias.data

    def backward(g):
        gx = gw = gb = None
        g2 = np.ascontiguousarray(g).reshape(-1, c_out)
        if w.requires_grad:
            gw = (cols.reshape(-1, k * c_in).T @ g2).reshape(k, c_in, c_out)
        if x.requires_grad:
            gcols = g @ w_flat.T
            gx = np.zeros(x.shape)
            for j in range(k):
                gx[..., j : j + t_out, :] += gcols[..., j * c_in : (j + 1) * c_in]
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return record_op((x, w, bias), out, backward)


def glu(z) -> Tensor:
    """Gated linear unit: split channels into value/gate halves, return value * sigmoid(gate)."""
    z = as_tensor(z)
    c2 = z.shape[-1]
    if c2 % 2 != 0:
        raise ShapeError(f"glu: channel count must be even, got shape {z.shape}")
    c = c2 // 2
    value = np.ascontiguousarray(z.data[..., :c])
    gate = _sigmoid(np.ascontiguousarray(z.data[..., c:]))
    out = value * gate

    def backward(g):
        gz = np.empty(z.shape)
        g_gate = g * gate
        gz[..., :c] = g_gate
        g_gate *= value
        g_gate *= 1.0 - gate
        gz[..., c:] = g_gate
        return (gz,)

    return record_op((z,), out, backward)


# ---------------------------------------------------------------------------
# row softmax, pseudoinverse, adjacency normalization
# ---------------------------------------------------------------------------

def softmax_rows(m, tau: float) -> Tensor:
    """Row-wise softmax of ``m / tau`` with max-subtraction for stability."""
    m = as_tensor(m)
    tau = float(tau)
    if tau <= 0.0:
        raise ParameterError(f"softmax_rows: temperature must be positive, got {tau}")
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows: needs a matrix, got shape {m.shape}")
    scaled = m.data / tau
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return ((g - dot) * s / tau,)

    return record_op((m,), s, backward)


def regularized_pinv(m, eps: float) -> Tensor:
    """Ridge-regularized pseudoinverse ``(M^T M + eps I)^{-1} M^T`` via a linear solve.

    Differentiable through the solve; as eps -> 0 this approaches the
    Moore-Penrose inverse of a full-column-rank matrix.
    """
    m = as_tensor(m)
    eps = float(eps)
    if eps <= 0.0:
        raise ParameterError(f"regularized_pinv: eps must be positive, got {eps}")
    if m.ndim != 2:
        raise ShapeError(f"regularized_pinv: needs a matrix, got shape {m.shape}")
    n, n_small = m.shape
    if n < n_small or n_small < 1:
        raise ShapeError(f"regularized_pinv: needs N >= N' >= 1, got shape {m.shape}")
    gram = m.data.T @ m.data + eps * np.eye(n_small)
    try:
        pinv = np.linalg.solve(gram, m.data.T)
    except np.linalg.LinAlgError as exc:
        cond = float(np.linalg.cond(gram))
        raise NumericalError(
            f"regularized_pinv: normal equations unsolvable (cond={cond:.3e}, eps={eps:.1e})"
        ) from exc
    if not np.all(np.isfinite(pinv)):
        cond = float(np.linalg.cond(gram))
        raise NumericalError(
            f"regularized_pinv: non-finite solution (cond={cond:.3e}, eps={eps:.1e})"
        )

    def backward(g):
        # With S = gram^{-1} and P = S M^T:
        #   dL/dM = g^T S - M (P (g^T S)) - P^T (g P^T)
        sg = np.linalg.solve(gram, g)  # S g
        t1 = sg.T  # g^T S  (S symmetric)
        t2 = m.data @ (pinv @ t1)
        t3 = pinv.T @ (g @ pinv.T)
        return (t1 - t2 - t3,)

    return record_op((m,), pinv, backward)


def sym_normalize_np(a: np.ndarray) -> np.ndarray:
    """Plain-array symmetric normalization with self-loops (shared formula)."""
    a = np.asarray(a, dtype=np.float64)
    a_hat = a + np.eye(a.shape[0])
    inv_sqrt_deg = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return inv_sqrt_deg[:, None] * a_hat * inv_sqrt_deg[None, :]


def sym_normalize(a) -> Tensor:
    """Differentiable self-loop symmetric normalization of a square adjacency."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_normalize: needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    a_hat = a.data + np.eye(n)
    deg = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    out = inv_sqrt[:, None] * a_hat * inv_sqrt[None, :]

    def backward(g):
        direct = inv_sqrt[:, None] * g * inv_sqrt[None, :]
        # degree path: each row sum feeds every entry of its row and column
        weighted = out * g
        row_term = -0.5 / deg * (weighted.sum(axis=1) + weighted.sum(axis=0))
        return (direct + row_term[:, None],)

    return record_op((a,), out, backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics, one entry per channel."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum)


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool,
              update_running: bool | None = None, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every non-channel axis.

    Training mode standardizes with batch statistics and (by default) folds
    them into the running averages; inference mode uses the stored running
    statistics only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm: gamma {gamma.shape} / beta {beta.shape} do not match channels of {x.shape}"
        )
    reduce_axes = tuple(range(x.ndim - 1))
    count = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 0
    if count == 0:
        raise ShapeError(f"batchnorm: empty batch, got shape {x.shape}")
    if update_running is None:
        update_running = training

    if training:
        mean = x.data.mean(axis=reduce_axes)
        var = x.data.var(axis=reduce_axes)
        if update_running:
            mom = state.momentum
            state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
            state.running_var = (1.0 - mom) * state.running_var + mom * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    out = gamma.data * x_hat + beta.data

    def backward(g):
        gbeta = g.sum(axis=reduce_axes) if beta.requires_grad else None
        ggamma = (g * x_hat).sum(axis=reduce_axes) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            if training:
                g_mean = g.mean(axis=reduce_axes)
                gx_hat_mean = (g * x_hat).mean(axis=reduce_axes)
                gx = gamma.data * inv_std * (g - g_mean - x_hat * gx_hat_mean)
            else:
                gx = g * gamma.data * inv_std
        return gx, ggamma, gbeta

    return record_op((x, gamma, beta), out, backward)
