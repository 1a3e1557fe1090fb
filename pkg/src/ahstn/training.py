"""Training harness: z-score normalization, sliding windows, masked loss and
metrics, Adam with exponential learning-rate decay, and the epoch loop with a
fine-tune phase on train+validation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tape, Tensor, absval, hadamard, scale, sub, sum_all
from .errors import NumericalError, ParameterError, ShapeError
from .model import AHSTNModel

EVAL_STEPS = (3, 6, 12)  # horizon steps reported individually


# ---------------------------------------------------------------------------
# normalization and windowing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """Scalar z-score transform fit on observed training values."""

    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0.0:
            raise ParameterError("normalizer std must be positive (constant training data?)")

    @classmethod
    def fit(cls, values: np.ndarray, mask: np.ndarray) -> "Normalizer":
        observed = values[mask]
        if observed.size == 0:
            raise ParameterError("cannot fit normalizer: no observed entries")
        std = float(observed.std())
        if std == 0.0:
            raise ParameterError("cannot fit normalizer: training data is constant")
        return cls(float(observed.mean()), std)

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


@dataclass
class WindowedDataset:
    """Normalized input windows with target values and observation masks.

    ``starts[i]`` is the absolute series index of window i's first input step,
    so target step h lives at series time ``starts[i] + input_steps + h``.
    """

    inputs: np.ndarray   # [B, N, T, 1] normalized, missing entries zero-filled
    targets: np.ndarray  # [B, N, H] normalized (masked entries are zero-filled)
    masks: np.ndarray    # [B, N, H] bool, True = observed
    starts: np.ndarray   # [B] absolute start index of each input window

    @property
    def n_windows(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_steps(self) -> int:
        return self.inputs.shape[2]

    @property
    def horizon(self) -> int:
        return self.targets.shape[2]

    def subset(self, idx: np.ndarray) -> "WindowedDataset":
        return WindowedDataset(self.inputs[idx], self.targets[idx], self.masks[idx],
                               self.starts[idx])

    @staticmethod
    def concatenate(parts: "list[WindowedDataset]") -> "WindowedDataset":
        return WindowedDataset(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.masks for p in parts]),
            np.concatenate([p.starts for p in parts]),
        )


@dataclass
class DatasetSplits:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    normalizer: Normalizer
    boundaries: tuple[int, int]  # timeline indices splitting train/val/test


def _window_segment(values, mask, normalizer, lo, hi, input_steps, horizon):
    seg_len = hi - lo
    count = seg_len - input_steps - horizon + 1
    if count < 1:
        raise ParameterError(
            f"segment [{lo}, {hi}) too short for {input_steps}+{horizon}-step windows"
        )
    n = values.shape[0]
    norm = normalizer.normalize(np.where(mask, values, normalizer.mean))
    norm[~mask] = 0.0  # missing inputs sit at the training mean after z-scoring

    inputs = np.empty((count, n, input_steps, 1))
    targets = np.empty((count, n, horizon))
    masks = np.empty((count, n, horizon), dtype=bool)
    starts = np.arange(lo, lo + count, dtype=np.int64)
    for i, s in enumerate(starts):
        inputs[i, :, :, 0] = norm[:, s : s + input_steps]
        t0 = s + input_steps
        targets[i] = norm[:, t0 : t0 + horizon]
        masks[i] = mask[:, t0 : t0 + horizon]
    targets[~masks] = 0.0
    return WindowedDataset(inputs, targets, masks, starts)


def make_windows(series, input_steps: int, horizon: int,
                 ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)) -> DatasetSplits:
    """Chronological train/val/test split of the timeline, then windowing.

    The timeline is cut before windowing, so no window straddles a split
    boundary. The normalizer is fit on the observed training-segment values
    only.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r <= 0 for r in ratios[:2]) or ratios[2] < 0:
        raise ParameterError(f"split ratios must be positive and sum to 1, got {ratios}")
    values, mask = series.values, series.mask
    length = values.shape[1]
    if length < input_steps + horizon:
        raise ParameterError(f"series length {length} < {input_steps}+{horizon}")
    s1 = int(np.floor(ratios[0] * length))
    s2 = int(np.floor((ratios[0] + ratios[1]) * length))
    normalizer = Normalizer.fit(values[:, :s1], mask[:, :s1])
    train = _window_segment(values, mask, normalizer, 0, s1, input_steps, horizon)
    val = _window_segment(values, mask, normalizer, s1, s2, input_steps, horizon)
    test = _window_segment(values, mask, normalizer, s2, length, input_steps, horizon)
    return DatasetSplits(train, val, test, normalizer, (s1, s2))


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------

def masked_mae_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean absolute error over observed entries only (differentiable)."""
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(
            f"masked_mae_loss: pred {pred.shape}, target {target.shape}, mask {mask.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        raise ParameterError("masked_mae_loss: all entries masked")
    err = absval(sub(pred, Tensor(target)))
    return scale(sum_all(hadamard(err, Tensor(mask.astype(np.float64)))), 1.0 / count)


@dataclass(frozen=True)
class Metrics:
    mae: float | None
    rmse: float | None
    mape: float | None  # percent

    def as_row(self):
        fmt = lambda v: "" if v is None else repr(v)
        return [fmt(self.mae), fmt(self.rmse), fmt(self.mape)]


MAPE_FLOOR = 1e-3  # targets smaller than this are excluded from MAPE


def metrics(pred, target, mask) -> Metrics:
    """MAE / RMSE / MAPE over observed entries of denormalized arrays.

    MAPE further excludes near-zero targets. Empty effective sets yield None
    rather than zero.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(f"metrics: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    if not mask.any():
        return Metrics(None, None, None)
    err = pred[mask] - target[mask]
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    nz = np.abs(target[mask]) >= MAPE_FLOOR
    mape = float((np.abs(err[nz] / target[mask][nz])).mean() * 100.0) if nz.any() else None
    return Metrics(mae, rmse, mape)


def horizon_metrics(pred, target, mask, steps=EVAL_STEPS) -> dict:
    """Per-horizon metrics at the requested 1-indexed steps plus the all-step average."""
    out = {}
    horizon = pred.shape[-1]
    for step in steps:
        if step <= horizon:
            out[f"h{step}"] = metrics(pred[..., step - 1], target[..., step - 1],
                                      mask[..., step - 1])
    out["avg"] = metrics(pred, target, mask)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction; deterministic given inputs."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros(t.shape) for _, t in self.params]
        self.v = [np.zeros(t.shape) for _, t in self.params]

    @property
    def n_tracked(self) -> int:
        return sum(t.size for _, t in self.params)

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for i, (name, t) in enumerate(self.params):
            if t.grad is None:
                continue
            g = t.grad
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter {name!r}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None


def decayed_lr(base_lr: float, decay: float, epoch: int) -> float:
    return base_lr * decay ** epoch


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def predict_dataset(model: AHSTNModel, dataset: WindowedDataset, batch_size: int = 64) -> np.ndarray:
    """Inference-mode forecasts for every window, normalized units."""
    outputs = []
    for lo in range(0, dataset.n_windows, batch_size):
        batch = dataset.inputs[lo : lo + batch_size]
        outputs.append(model.forward(Tensor(batch), training=False).data)
    return np.concatenate(outputs) if outputs else np.empty((0,) + dataset.targets.shape[1:])


def evaluate_model(model: AHSTNModel, dataset: WindowedDataset, normalizer: Normalizer,
                   batch_size: int = 64) -> dict:
    """Denormalized per-horizon metrics on a full split."""
    pred = normalizer.denormalize(predict_dataset(model, dataset, batch_size))
    target = normalizer.denormalize(dataset.targets)
    return horizon_metrics(pred, target, dataset.masks)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def historical_average_table(series, train_end: int) -> np.ndarray:
    """Per-node, per-time-of-day mean over the training part of the timeline.

    Empty bins fall back to the node mean, then to the global mean.
    """
    bins = series.bins_per_day
    values, mask = series.values[:, :train_end], series.mask[:, :train_end]
    n = values.shape[0]
    table = np.zeros((n, bins))
    counts = np.zeros((n, bins))
    tod = np.arange(train_end) % bins
    for b in range(bins):
        cols = tod == b
        m = mask[:, cols]
        v = np.where(m, values[:, cols], 0.0)
        counts[:, b] = m.sum(axis=1)
        table[:, b] = np.divide(v.sum(axis=1), np.maximum(counts[:, b], 1))
    node_mean = np.divide(np.where(mask, values, 0.0).sum(axis=1),
                          np.maximum(mask.sum(axis=1), 1))
    global_mean = values[mask].mean() if mask.any() else 0.0
    node_mean = np.where(mask.sum(axis=1) > 0, node_mean, global_mean)
    empty = counts == 0
    table[empty] = np.broadcast_to(node_mean[:, None], table.shape)[empty]
    return table


def historical_average_forecast(table: np.ndarray, dataset: WindowedDataset,
                                bins_per_day: int) -> np.ndarray:
    """[B, N, H] forecast looking up each target step's time of day."""
    b, n, h = dataset.targets.shape[0], table.shape[0], dataset.horizon
    out = np.empty((b, n, h))
    for i, s in enumerate(dataset.starts):
        tod = (s + dataset.input_steps + np.arange(h)) % bins_per_day
        out[i] = table[:, tod]
    return out


def last_value_forecast(series, dataset: WindowedDataset, normalizer: Normalizer) -> np.ndarray:
    """Repeat each window's final observed input value across the horizon."""
    b, n, h = dataset.targets.shape
    out = np.empty((b, n, h))
    for i, s in enumerate(dataset.starts):
        t_last = s + dataset.input_steps - 1
        last = np.where(series.mask[:, t_last], series.values[:, t_last], normalizer.mean)
        out[i] = last[:, None]
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.002
    lr_decay: float = 0.99
    finetune_epochs: int = 3


@dataclass
class HistoryRow:
    phase: str
    epoch: int
    lr: float
    train_loss: float
    val: dict | None


@dataclass
class TrainResult:
    history: list[HistoryRow] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")
    diverged: bool = False
    test_report: dict | None = None


def _run_epoch(model, optimizer, dataset, batch_size, rng) -> float:
    """One shuffled pass; returns the mean batch loss. Raises on divergence."""
    order = rng.permutation(dataset.n_windows)
    total, used = 0.0, 0
    for lo in range(0, len(order), batch_size):
        idx = order[lo : lo + batch_size]
        masks = dataset.masks[idx]
        if not masks.any():
            continue  # nothing observed in this batch
        model.zero_grad()
        with Tape() as tape:
            pred = model.forward(Tensor(dataset.inputs[idx]), training=True)
            loss = masked_mae_loss(pred, dataset.targets[idx], masks)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericalError(f"training loss diverged ({loss_value})")
            tape.backward(loss)
        optimizer.step()
        total += loss_value
        used += 1
    if used == 0:
        raise ParameterError("epoch had no usable batches (everything masked)")
    return total / used


def _val_mae(report: dict) -> float:
    m = report["avg"].mae
    return float("inf") if m is None else m


def train(model: AHSTNModel, splits: DatasetSplits, settings: TrainSettings,
          shuffle_seed: int = 0) -> TrainResult:
    """Full optimization protocol.

    Epoch loop with per-epoch exponential LR decay and best-validation
    checkpointing; afterwards the best weights are fine-tuned on
    train+validation windows for a few epochs (LR schedule continued), and the
    final model is evaluated on the test split. On divergence the best
    checkpoint so far is restored and training stops early.
    """
    result = TrainResult()
    optimizer = Adam(model.parameters(), settings.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence(shuffle_seed, spawn_key=(1000,)))
    best_snapshot = model.snapshot()

    for epoch in range(settings.epochs):
        optimizer.lr = decayed_lr(settings.learning_rate, settings.lr_decay, epoch)
        try:
            train_loss = _run_epoch(model, optimizer, splits.train, settings.batch_size, rng)
        except NumericalError:
            result.diverged = True
            break
        val_report = evaluate_model(model, splits.val, splits.normalizer, settings.batch_size)
        result.history.append(HistoryRow("train", epoch, optimizer.lr, train_loss, val_report))
        val_mae = _val_mae(val_report)
        if val_mae < result.best_val_mae:
            result.best_val_mae = val_mae
            result.best_epoch = epoch
            best_snapshot = model.snapshot()

    model.restore(best_snapshot)

    if not result.diverged and settings.finetune_epochs > 0:
        finetune_set = WindowedDataset.concatenate([splits.train, splits.val])
        for i in range(settings.finetune_epochs):
            epoch = settings.epochs + i
            optimizer.lr = decayed_lr(settings.learning_rate, settings.lr_decay, epoch)
            try:
                ft_loss = _run_epoch(model, optimizer, finetune_set, settings.batch_size, rng)
            except NumericalError:
                result.diverged = True
                model.restore(best_snapshot)
                break
            result.history.append(HistoryRow("finetune", epoch, optimizer.lr, ft_loss, None))

    model.freeze_assignment()
    result.test_report = evaluate_model(model, splits.test, splits.normalizer,
                                        settings.batch_size)
    return result
