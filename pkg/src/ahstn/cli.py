"""Command-line entry point for reproducible synthesis/training/evaluation runs.

Commands: ``synth``, ``train``, ``evaluate``, ``predict``, ``inspect-clusters``,
``sweep-pcluster``. Every run resolves its configuration up front, echoes it to
a plain-text manifest in the output directory, and writes CSV artifacts only.
Exit codes: 0 success, 1 runtime/numerical failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    RawSeries,
    SyntheticSpec,
    assignment_quality,
    generate_synthetic,
    load_labels,
    load_series,
    parse_synthetic_spec,
    save_labels,
    save_series,
    save_synthetic_spec,
)
from .errors import AhstnError, ConfigError, ParseError
from .graph import build_gaussian_adjacency, load_distance_matrix, load_edge_list, save_edge_list
from .hierarchy import hard_assignment
from .model import (
    AHSTNModel,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    EVAL_STEPS,
    TrainSettings,
    evaluate_model,
    historical_average_forecast,
    historical_average_table,
    horizon_metrics,
    last_value_forecast,
    make_windows,
    train,
)
from .diffcore import Tensor

# ---------------------------------------------------------------------------
# config files: sectioned `key = value` text
# ---------------------------------------------------------------------------

def parse_config_file(path) -> dict[str, str]:
    """Read ``[section]`` / ``key = value`` lines into dotted keys."""
    resolved: dict[str, str] = {}
    section = ""
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if not section:
                    raise ConfigError(f"{path}:{lineno}: empty section name")
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            dotted = f"{section}.{key}" if section else key
            if dotted in resolved:
                raise ConfigError(f"{path}:{lineno}: duplicate key {dotted!r}")
            resolved[dotted] = value.strip()
    return resolved


# (type, default) per known key; None default means required
_TRAIN_SCHEMA: dict[str, tuple[type, object]] = {
    "data.series": (str, None),
    "data.edges": (str, ""),
    "data.distances": (str, ""),
    "data.sigma": (float, 0.0),  # 0 means "use the data-driven default"
    "data.threshold": (float, 0.1),
    "data.labels": (str, ""),
    "data.bin_minutes": (int, 10),
    "data.train_fraction": (float, 0.7),
    "data.val_fraction": (float, 0.1),
    "model.input_steps": (int, 12),
    "model.horizon": (int, 12),
    "model.kernel_size": (int, 2),
    "model.temporal_channels": (int, 64),
    "model.graph_channels": (int, 32),
    "model.cluster_ratio": (float, 0.1),
    "model.temperature": (float, 1.0),
    "model.assign_momentum": (float, 0.9),
    "model.pinv_eps": (float, 1e-6),
    "model.variant": (str, "full"),
    "model.seed": (int, 0),
    "training.epochs": (int, 100),
    "training.batch_size": (int, 64),
    "training.learning_rate": (float, 0.002),
    "training.lr_decay": (float, 0.99),
    "training.finetune_epochs": (int, 3),
}


def resolve_train_config(path) -> dict:
    raw = parse_config_file(path)
    unknown = sorted(set(raw) - set(_TRAIN_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    base = Path(path).resolve().parent
    out: dict[str, object] = {}
    for key, (typ, default) in _TRAIN_SCHEMA.items():
        if key in raw:
            try:
                out[key] = typ(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r}") from exc
        elif default is None:
            raise ConfigError(f"missing required config key {key}")
        else:
            out[key] = default
    for key in ("data.series", "data.edges", "data.distances", "data.labels"):
        if out[key]:
            out[key] = str((base / str(out[key])).resolve())
    if not out["data.edges"] and not out["data.distances"]:
        raise ConfigError("config needs data.edges or data.distances")
    return out


def write_manifest(out_dir: Path, command: str, resolved: dict) -> None:
    lines = [f"command = {command}", f"package_version = {__version__}"]
    lines += [f"{k} = {resolved[k]}" for k in sorted(resolved)]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# shared pipeline pieces
# ---------------------------------------------------------------------------

def _load_graph_from_config(cfg: dict, n_nodes: int):
    if cfg["data.edges"]:
        return load_edge_list(cfg["data.edges"], n_nodes)
    dist = load_distance_matrix(cfg["data.distances"])
    sigma = cfg["data.sigma"] or None
    return build_gaussian_adjacency(dist, sigma=sigma, threshold=cfg["data.threshold"])


def _build_model_config(cfg: dict, n_nodes: int) -> ModelConfig:
    return ModelConfig(
        n_nodes=n_nodes,
        input_steps=cfg["model.input_steps"],
        horizon=cfg["model.horizon"],
        kernel_size=cfg["model.kernel_size"],
        temporal_channels=cfg["model.temporal_channels"],
        graph_channels=cfg["model.graph_channels"],
        cluster_ratio=cfg["model.cluster_ratio"],
        temperature=cfg["model.temperature"],
        assign_momentum=cfg["model.assign_momentum"],
        pinv_eps=cfg["model.pinv_eps"],
        variant=cfg["model.variant"],
        seed=cfg["model.seed"],
    )


def _metric_rows(method: str, report: dict) -> list[list[str]]:
    rows = []
    for key in [f"h{s}" for s in EVAL_STEPS] + ["avg"]:
        if key in report:
            rows.append([method, key] + report[key].as_row())
    return rows


def _write_report(path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "horizon", "mae", "rmse", "mape_percent"])
        writer.writerows(rows)


def _baseline_rows(series: RawSeries, splits, dataset) -> list[list[str]]:
    table = historical_average_table(series, splits.boundaries[0])
    ha_pred = historical_average_forecast(table, dataset, series.bins_per_day)
    target = splits.normalizer.denormalize(dataset.targets)
    rows = _metric_rows("historical_average",
                        horizon_metrics(ha_pred, target, dataset.masks))
    lv_pred = last_value_forecast(series, dataset, splits.normalizer)
    rows += _metric_rows("last_value", horizon_metrics(lv_pred, target, dataset.masks))
    return rows


def _write_history(path, history) -> None:
    metric_cols = []
    for key in [f"h{s}" for s in EVAL_STEPS] + ["avg"]:
        metric_cols += [f"val_mae_{key}", f"val_rmse_{key}", f"val_mape_{key}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "epoch", "lr", "train_loss"] + metric_cols)
        for row in history:
            cells = [row.phase, row.epoch, repr(row.lr), repr(row.train_loss)]
            if row.val is None:
                cells += [""] * len(metric_cols)
            else:
                for key in [f"h{s}" for s in EVAL_STEPS] + ["avg"]:
                    cells += row.val[key].as_row() if key in row.val else ["", "", ""]
            writer.writerow(cells)


def _write_clusters(path, model: AHSTNModel) -> None:
    matrix = model.assignment.matrix
    assigned = hard_assignment(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "cluster", "probability"]
                        + [f"p_{j}" for j in range(matrix.shape[1])])
        for i in range(matrix.shape[0]):
            writer.writerow([i, int(assigned[i]), repr(float(matrix[i, assigned[i]]))]
                            + [repr(float(v)) for v in matrix[i]])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = parse_synthetic_spec(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = prepare_out_dir(args.out, args.force)
    series, graph, labels = generate_synthetic(spec)
    save_series(out / "series.csv", series)
    save_edge_list(out / "edges.csv", graph)
    save_labels(out / "labels.csv", labels)
    save_synthetic_spec(out / "spec_resolved.txt", spec)
    resolved = {f"synth.{k}": getattr(spec, k) for k in vars(spec)}
    write_manifest(out, "synth", resolved)
    print(f"wrote {series.n_nodes}-node dataset of length {series.length} to {out}")
    return 0


def _train_pipeline(cfg: dict, out: Path, with_baselines: bool) -> dict:
    series = load_series(cfg["data.series"], bin_minutes=cfg["data.bin_minutes"])
    graph = _load_graph_from_config(cfg, series.n_nodes)
    model_config = _build_model_config(cfg, series.n_nodes)
    ratios = (cfg["data.train_fraction"], cfg["data.val_fraction"],
              1.0 - cfg["data.train_fraction"] - cfg["data.val_fraction"])
    splits = make_windows(series, model_config.input_steps, model_config.horizon, ratios)
    model = AHSTNModel(model_config, graph)
    settings = TrainSettings(
        epochs=cfg["training.epochs"],
        batch_size=cfg["training.batch_size"],
        learning_rate=cfg["training.learning_rate"],
        lr_decay=cfg["training.lr_decay"],
        finetune_epochs=cfg["training.finetune_epochs"],
    )
    result = train(model, splits, settings, shuffle_seed=model_config.seed)

    extra = {
        "train_fraction": cfg["data.train_fraction"],
        "val_fraction": cfg["data.val_fraction"],
        "bin_minutes": cfg["data.bin_minutes"],
    }
    save_checkpoint(model, out / "checkpoint.bin", normalizer=splits.normalizer, extra=extra)
    _write_history(out / "history.csv", result.history)
    rows = _metric_rows("ahstn", result.test_report)
    if with_baselines:
        rows += _baseline_rows(series, splits, splits.test)
    _write_report(out / "report.csv", rows)
    if model.assignment is not None:
        _write_clusters(out / "clusters.csv", model)
        if cfg["data.labels"]:
            purity = assignment_quality(model.assignment.matrix, load_labels(cfg["data.labels"]))
            print(f"assignment purity vs labels: {purity:.4f}")
    status = "diverged (best checkpoint retained)" if result.diverged else "ok"
    test_mae = result.test_report["avg"].mae
    mae_text = "n/a" if test_mae is None else format(test_mae, ".4f")
    print(f"training {status}; best epoch {result.best_epoch}, test MAE {mae_text}")
    return {"result": result, "model": model}


def cmd_train(args) -> int:
    cfg = resolve_train_config(args.config)
    if args.seed is not None:
        cfg["model.seed"] = args.seed
    if args.variant is not None:
        cfg["model.variant"] = args.variant
    out = prepare_out_dir(args.out, args.force)
    _train_pipeline(cfg, out, args.with_baselines)
    write_manifest(out, "train", cfg)
    return 0


def cmd_evaluate(args) -> int:
    data_dir = Path(args.data)
    series = load_series(data_dir / "series.csv")
    graph = load_edge_list(data_dir / "edges.csv", series.n_nodes)
    bundle = load_checkpoint(args.checkpoint, graph)
    model = bundle.model
    extra = bundle.extra
    series.bin_minutes = int(extra.get("bin_minutes", series.bin_minutes))
    ratios = (float(extra.get("train_fraction", 0.7)), float(extra.get("val_fraction", 0.1)), 0.0)
    ratios = (ratios[0], ratios[1], 1.0 - ratios[0] - ratios[1])
    try:
        splits = make_windows(series, model.config.input_steps, model.config.horizon, ratios)
    except ParameterError as exc:
        raise ConfigError(f"dataset cannot form an evaluation split: {exc}") from exc
    if splits.test.n_windows == 0:
        raise ConfigError("empty test split")
    out = prepare_out_dir(args.out, args.force)
    report = evaluate_model(model, splits.test, splits.normalizer)
    rows = _metric_rows("ahstn", report)
    if args.with_baselines:
        rows += _baseline_rows(series, splits, splits.test)
    _write_report(out / "report.csv", rows)
    write_manifest(out, "evaluate", {
        "checkpoint": args.checkpoint,
        "data": str(data_dir),
        "variant": model.config.variant,
        "seed": model.config.seed,
    })
    mae = report["avg"].mae
    print(f"test MAE {mae if mae is None else f'{mae:.4f}'}")
    return 0


def cmd_predict(args) -> int:
    data_dir = Path(args.data)
    window = load_series(args.window)
    graph = load_edge_list(data_dir / "edges.csv", window.n_nodes)
    bundle = load_checkpoint(args.checkpoint, graph)
    model, normalizer = bundle.model, bundle.normalizer
    if normalizer is None:
        raise ConfigError("checkpoint carries no normalizer; cannot predict raw values")
    cfg = model.config
    if window.length != cfg.input_steps:
        raise ConfigError(
            f"prediction window must have exactly {cfg.input_steps} rows, got {window.length}"
        )
    normalized = normalizer.normalize(np.where(window.mask, window.values, normalizer.mean))
    normalized[~window.mask] = 0.0
    x = normalized[None, :, :, None]
    forecast = normalizer.denormalize(model.forward(Tensor(x), training=False).data[0])

    all_missing = ~window.mask.any(axis=1)
    out = prepare_out_dir(args.out, args.force)
    with open(out / "forecast.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["node"] + [f"h{j + 1}" for j in range(cfg.horizon)]
        if all_missing.any():
            header.append("all_missing")
        writer.writerow(header)
        for i in range(window.n_nodes):
            row = [i] + [repr(float(v)) for v in forecast[i]]
            if all_missing.any():
                row.append(int(all_missing[i]))
            writer.writerow(row)
    if all_missing.any():
        print(f"warning: {int(all_missing.sum())} node(s) had no observed input values",
              file=sys.stderr)
    write_manifest(out, "predict", {
        "checkpoint": args.checkpoint,
        "window": args.window,
        "seed": model.config.seed,
    })
    return 0


def cmd_inspect_clusters(args) -> int:
    if args.data:
        data_dir = Path(args.data)
        series = load_series(data_dir / "series.csv")
        graph = load_edge_list(data_dir / "edges.csv", series.n_nodes)
    else:
        raise ConfigError("inspect-clusters needs --data for the graph definition")
    bundle = load_checkpoint(args.checkpoint, graph)
    model = bundle.model
    if model.assignment is None:
        raise ConfigError("checkpoint has no cluster assignment (no-hierarchy variant)")
    out = prepare_out_dir(args.out, args.force)
    _write_clusters(out / "clusters.csv", model)
    labels_path = data_dir / "labels.csv"
    if labels_path.exists():
        purity = assignment_quality(model.assignment.matrix, load_labels(labels_path))
        print(f"assignment purity vs labels: {purity:.4f}")
    write_manifest(out, "inspect-clusters", {
        "checkpoint": args.checkpoint,
        "data": str(data_dir),
    })
    return 0


def _longest_step_key(report: dict) -> str:
    steps = [int(k[1:]) for k in report if k.startswith("h")]
    return f"h{max(steps)}" if steps else "avg"


def cmd_sweep_pcluster(args) -> int:
    ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    if len(ratios) < 2:
        raise ConfigError("sweep-pcluster needs at least two ratios")
    cfg = resolve_train_config(args.config)
    if args.seed is not None:
        cfg["model.seed"] = args.seed
    out = prepare_out_dir(args.out, args.force)
    summary_rows = []
    for ratio in ratios:
        run_cfg = dict(cfg)
        run_cfg["model.cluster_ratio"] = ratio
        run_dir = out / f"ratio_{ratio:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        try:
            res = _train_pipeline(run_cfg, run_dir, with_baselines=False)
            report = res["result"].test_report
            write_manifest(run_dir, "train", run_cfg)
            avg = report["avg"].as_row()
            last = report[_longest_step_key(report)].as_row()
            summary_rows.append([repr(ratio), "ok", avg[0], avg[2], last[0], last[2]])
        except AhstnError as exc:
            print(f"ratio {ratio}: failed ({exc})", file=sys.stderr)
            summary_rows.append([repr(ratio), "failed", "", "", "", ""])
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "status", "mae_avg", "mape_avg",
                         "mae_last_step", "mape_last_step"])
        writer.writerows(summary_rows)
    write_manifest(out, "sweep-pcluster", {**cfg, "sweep.ratios": args.ratios})
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ahstn",
                                     description="hierarchical spatio-temporal forecasting runs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_variant=False, with_baselines=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite non-empty output")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        if with_variant:
            p.add_argument("--variant", choices=["full", "no-skip", "no-hierarchy"], default=None)
        if with_baselines:
            p.add_argument("--with-baselines", action="store_true",
                           help="include historical-average and last-value baselines")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("spec", nargs="?", default=None, help="key = value spec file (defaults used if omitted)")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    common(p, with_variant=True, with_baselines=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="directory with series.csv and edges.csv")
    common(p, with_baselines=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="forecast from one input window")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="directory with edges.csv")
    p.add_argument("--window", required=True, help="series CSV with exactly input_steps rows")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect-clusters", help="export the stored cluster assignment")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="directory with series.csv and edges.csv")
    common(p)
    p.set_defaults(func=cmd_inspect_clusters)

    p = sub.add_parser("sweep-pcluster", help="train once per clustering ratio")
    p.add_argument("--config", required=True)
    p.add_argument("--ratios", required=True, help="comma-separated clustering ratios")
    common(p)
    p.set_defaults(func=cmd_sweep_pcluster)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AhstnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
