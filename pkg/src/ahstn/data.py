"""Dataset files and the synthetic hierarchical-traffic generator.

The synthetic generator builds a community-structured graph whose clusters
share a base periodic speed signal; it exists so the hierarchy-learning
claims can be exercised end to end on data with known ground-truth clusters.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .errors import ParameterError, ParseError
from .graph import GraphSpec
from .hierarchy import hard_assignment

MISSING_SENTINEL = np.nan  # stored at masked positions, never read


@dataclass
class RawSeries:
    """Node-by-time value matrix with an observation mask."""

    values: np.ndarray  # [N, L] float64, NaN at missing entries
    mask: np.ndarray    # [N, L] bool, True = observed
    bin_minutes: int = 10

    def __post_init__(self):
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ParameterError(
                f"values {self.values.shape} and mask {self.mask.shape} must be equal 2-D shapes"
            )

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def bins_per_day(self) -> int:
        return max(1, (24 * 60) // self.bin_minutes)


def load_series(path, bin_minutes: int = 10) -> RawSeries:
    """Values CSV: header ``node_0..node_{N-1}``, one row per time bin, empty
    cells are missing observations."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path} is empty", line=1)
        expected = [f"node_{i}" for i in range(len(header))]
        if [c.strip() for c in header] != expected:
            raise ParseError(f"expected header node_0..node_{len(header) - 1}", line=1)
        n = len(header)
        rows: list[list[float]] = []
        masks: list[list[bool]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n:
                raise ParseError(f"ragged row ({len(row)} fields, expected {n})", line=lineno)
            vals, obs = [], []
            for cell in row:
                cell = cell.strip()
                if cell == "":
                    vals.append(MISSING_SENTINEL)
                    obs.append(False)
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError as exc:
                        raise ParseError(f"non-numeric cell {cell!r}", line=lineno) from exc
                    obs.append(True)
            rows.append(vals)
            masks.append(obs)
    if not rows:
        raise ParseError(f"no data rows in {path}")
    values = np.asarray(rows, dtype=np.float64).T
    mask = np.asarray(masks, dtype=bool).T
    return RawSeries(values=values, mask=mask, bin_minutes=bin_minutes)


def save_series(path, series: RawSeries) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"node_{i}" for i in range(series.n_nodes)])
        for t in range(series.length):
            writer.writerow([
                repr(float(series.values[i, t])) if series.mask[i, t] else ""
                for i in range(series.n_nodes)
            ])


def load_labels(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["node", "cluster"]:
            raise ParseError("expected header 'node,cluster'", line=1)
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            try:
                pairs.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"bad label row {row!r}", line=lineno) from exc
    pairs.sort()
    if [p[0] for p in pairs] != list(range(len(pairs))):
        raise ParseError("label rows must cover nodes 0..N-1 exactly once")
    return np.asarray([p[1] for p in pairs], dtype=np.int64)


def save_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "cluster"])
        for i, c in enumerate(labels):
            writer.writerow([i, int(c)])


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Knobs for the community-structured synthetic traffic generator."""

    n_clusters: int = 8
    nodes_per_cluster: int = 8
    length: int = 5000
    intra_density: float = 0.9
    inter_density: float = 0.01
    noise_scale: float = 1.0
    missing_rate: float = 0.02
    seed: int = 7
    bin_minutes: int = 10
    coupling: float = 0.1
    base_speed_low: float = 40.0
    base_speed_high: float = 70.0
    amplitude_low: float = 0.15
    amplitude_high: float = 0.35
    period_low: int = 90
    period_high: int = 300

    def __post_init__(self):
        if self.n_clusters < 1 or self.nodes_per_cluster < 1:
            raise ParameterError("need at least one cluster and one node per cluster")
        if self.length < 2:
            raise ParameterError(f"length must be >= 2, got {self.length}")
        for name in ("intra_density", "inter_density", "missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_scale < 0:
            raise ParameterError("noise_scale must be nonnegative")
        if self.period_low < 2 or self.period_high < self.period_low:
            raise ParameterError("invalid period range")

    @property
    def n_nodes(self) -> int:
        return self.n_clusters * self.nodes_per_cluster


_INT_FIELDS = {"n_clusters", "nodes_per_cluster", "length", "seed", "bin_minutes",
               "period_low", "period_high"}


def parse_synthetic_spec(path) -> SyntheticSpec:
    """Flat ``key = value`` text file; unknown keys are errors."""
    known = {f.name for f in fields(SyntheticSpec)}
    kwargs = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected 'key = value', got {line!r}", line=lineno)
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ParseError(f"unknown synthetic-spec key {key!r}", line=lineno)
            try:
                kwargs[key] = int(value) if key in _INT_FIELDS else float(value)
            except ValueError as exc:
                raise ParseError(f"bad value for {key!r}: {value!r}", line=lineno) from exc
    return SyntheticSpec(**kwargs)


def save_synthetic_spec(path, spec: SyntheticSpec) -> None:
    with open(path, "w") as fh:
        for f in fields(SyntheticSpec):
            fh.write(f"{f.name} = {getattr(spec, f.name)}\n")


def _community_adjacency(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n_nodes
    labels = np.repeat(np.arange(spec.n_clusters), spec.nodes_per_cluster)
    prob = np.where(labels[:, None] == labels[None, :], spec.intra_density, spec.inter_density)
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, k=1)
    a = (upper | upper.T).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return a


def generate_synthetic(spec: SyntheticSpec) -> tuple[RawSeries, GraphSpec, np.ndarray]:
    """Deterministic (per seed) series + graph + ground-truth cluster labels.

    Each cluster follows ``base * (1 + amp * sin(2 pi t / period + phase))``;
    every node adds a diffusion pull toward its graph neighbours' signals and
    independent Gaussian noise, then entries drop out at ``missing_rate``.
    """
    rng = np.random.default_rng(spec.seed)
    n, length = spec.n_nodes, spec.length
    labels = np.repeat(np.arange(spec.n_clusters), spec.nodes_per_cluster)

    adjacency = _community_adjacency(spec, rng)
    if n > 1 and np.any(adjacency.sum(axis=1) == 0):
        warnings.warn("synthetic graph has isolated nodes at these densities", stacklevel=2)

    # evenly spread base levels (shuffled) keep clusters separable by design
    base = np.linspace(spec.base_speed_low, spec.base_speed_high, spec.n_clusters)
    base = base[rng.permutation(spec.n_clusters)]
    amp = rng.uniform(spec.amplitude_low, spec.amplitude_high, size=spec.n_clusters)
    period = np.linspace(spec.period_low, spec.period_high, spec.n_clusters)
    period = np.round(period[rng.permutation(spec.n_clusters)])
    phase = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_clusters)

    t = np.arange(length)
    cluster_signal = base[:, None] * (
        1.0 + amp[:, None] * np.sin(2.0 * np.pi * t[None, :] / period[:, None] + phase[:, None])
    )
    node_signal = cluster_signal[labels]

    # diffusion toward neighbour signals, weighted by the row-normalized adjacency
    degree = adjacency.sum(axis=1)
    safe_degree = np.maximum(degree, 1.0)
    neighbour_mean = (adjacency @ node_signal) / safe_degree[:, None]
    has_neighbours = (degree > 0)[:, None]
    values = np.where(
        has_neighbours,
        (1.0 - spec.coupling) * node_signal + spec.coupling * neighbour_mean,
        node_signal,
    )

    values = values + rng.normal(0.0, spec.noise_scale, size=(n, length))
    mask = rng.random((n, length)) >= spec.missing_rate
    values = np.where(mask, values, MISSING_SENTINEL)
    series = RawSeries(values=values, mask=mask, bin_minutes=spec.bin_minutes)
    return series, GraphSpec.from_adjacency(adjacency), labels


# ---------------------------------------------------------------------------
# clustering quality
# ---------------------------------------------------------------------------

def assignment_quality(matrix, labels) -> float:
    """Purity of the hard (argmax) assignment against ground-truth labels.

    Invariant under permutations of the discovered cluster columns.
    """
    m = matrix.data if hasattr(matrix, "data") and not isinstance(matrix, np.ndarray) else matrix
    m = np.asarray(m, dtype=np.float64)
    labels = np.asarray(labels)
    if m.ndim != 2 or m.shape[0] != labels.shape[0]:
        raise ParameterError(f"assignment {m.shape} does not cover {labels.shape[0]} labels")
    assigned = hard_assignment(m)
    total = 0
    for cluster in np.unique(assigned):
        members = labels[assigned == cluster]
        _, counts = np.unique(members, return_counts=True)
        total += counts.max()
    return total / m.shape[0]
