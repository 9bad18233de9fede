"""Command-line interface for the traffic forecaster."""

import argparse
import logging
import sys
from dataclasses import asdict, dataclass
from datetime import date
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Union

import numpy as np
import pandas as pd

from .baselines import baseline_metrics, ha_fit
from .config import RunConfig
from .data import (
    N_EXTERNAL_FEATURES,
    TIMESTAMP_FORMAT,
    Sample,
    SeriesSplit,
    SliceConfig,
    TrafficSeries,
    ZScoreScaler,
    build_samples,
    fit_zscore,
    impute_missing,
    ingest_report,
    load_holidays,
    load_station_coords,
    load_traffic_csv,
    split_by_date,
    split_by_fraction,
)
from .errors import (
    EXIT_OK,
    EXIT_UNEXPECTED,
    ConfigError,
    DataError,
    DimensionError,
    EmptyDatasetError,
    exit_code_for,
)
from .graphs import (
    AdjacencyMatrix,
    GraphKind,
    GraphSet,
    build_functional_similarity,
    build_spatial_proximity,
    load_edge_list,
    pcc_timeline,
    save_edge_list,
)
from .model import ModelConfig, init_params, load_checkpoint, predict, save_checkpoint
from .synth import generate, write_dataset
from .training import error_metrics, evaluate, fit
from .utils import configure_logging, ensure_output_dir, to_json, write_json

logger = logging.getLogger(__name__)

SEPARATOR_LINE = "=" * 80
PREDICTION_COLUMNS = ["timestamp", "station_id", "y_true", "y_pred"]


def print_header(title: str):
    """Print a formatted header."""
    print("\n" + SEPARATOR_LINE)
    print(title)
    print(SEPARATOR_LINE)


# --- shared pipeline ------------------------------------------------------------


@dataclass
class PreparedData:
    """Imputed series in raw and normalized units, its split, scaler and holidays."""

    series: TrafficSeries
    normalized: TrafficSeries
    split: SeriesSplit
    scaler: ZScoreScaler
    holidays: Set[date]


def prepare_data(cfg: RunConfig) -> PreparedData:
    series = impute_missing(load_traffic_csv(cfg.traffic_path))
    if cfg.split.train_end and cfg.split.val_end:
        split = split_by_date(series, cfg.split.train_end, cfg.split.val_end)
    else:
        split = split_by_fraction(series, cfg.split.train_fraction, cfg.split.val_fraction)
    scaler = fit_zscore(split.train, per_node=cfg.scaling.per_node)
    normalized = series.with_values(scaler.apply(series.values))
    holidays = load_holidays(cfg.resolve(cfg.paths.holidays))
    logger.info(
        "Loaded %d stations × %d points; split %s",
        series.n_stations,
        series.n_points,
        split.ranges,
    )
    return PreparedData(series, normalized, split, scaler, holidays)


def build_static_graphs(
    cfg: RunConfig, prepared: PreparedData
) -> Dict[GraphKind, AdjacencyMatrix]:
    """Spatial (kernel or supplied edge list) and functional graphs, as enabled."""
    static = {}
    n = prepared.series.n_stations
    if GraphKind.SPATIAL in cfg.graphs.enabled:
        if cfg.graphs.spatial_edge_list is not None:
            edge_list = cfg.resolve(cfg.graphs.spatial_edge_list)
            static[GraphKind.SPATIAL] = load_edge_list(edge_list, n=n)
        else:
            if cfg.paths.stations is None:
                raise ConfigError(
                    "spatial graph needs paths.stations or graphs.spatial_edge_list",
                    field="paths.stations",
                )
            coords = load_station_coords(
                cfg.resolve(cfg.paths.stations), prepared.series.station_ids
            )
            static[GraphKind.SPATIAL] = build_spatial_proximity(
                coords, cfg.graphs.sigma, cfg.graphs.p
            )
    if GraphKind.FUNCTIONAL in cfg.graphs.enabled:
        static[GraphKind.FUNCTIONAL] = build_functional_similarity(
            prepared.split.train, cfg.graphs.p
        )
    for kind, adj in static.items():
        logger.info("%s graph: %d edges", kind.value, adj.edge_count)
    return static


def build_graph_set(
    cfg: RunConfig, prepared: PreparedData, static: Dict[GraphKind, AdjacencyMatrix]
) -> GraphSet:
    return GraphSet(
        static,
        enabled=cfg.graphs.enabled,
        values=prepared.normalized.values,
        H=cfg.graphs.H,
        p=cfg.graphs.p,
        cache_size=cfg.graphs.cache_size,
    )


def usable_samples(
    series: TrafficSeries,
    slice_cfg: SliceConfig,
    target_range,
    holidays: Set[date],
    enabled: Sequence[GraphKind],
    H: int,
) -> List[Sample]:
    """Samples whose anchor also has the H points the recent-trend graph reads."""
    samples = build_samples(series, slice_cfg, target_range=target_range, holidays=holidays)
    if GraphKind.RECENT_TREND in enabled:
        samples = [s for s in samples if s.anchor >= H - 1]
    if not samples:
        raise EmptyDatasetError(
            f"no samples with targets in {target_range} have {H} points of history"
        )
    return samples


def model_config_for(cfg: RunConfig, n_stations: int, slice_cfg: SliceConfig) -> ModelConfig:
    return ModelConfig(
        n_stations=n_stations,
        K=cfg.model.K,
        c_in=1,
        c_h=cfg.model.c_h,
        C=cfg.model.C,
        n_features=N_EXTERNAL_FEATURES,
        use_external_features=cfg.model.use_external_features,
        enabled_graphs=tuple(cfg.graphs.enabled),
        slicing=slice_cfg,
        H=cfg.graphs.H,
        p=cfg.graphs.p,
    )


def _input_files(cfg: RunConfig) -> List[str]:
    files = ["traffic"]
    if GraphKind.SPATIAL in cfg.graphs.enabled:
        files.append("stations")
    if cfg.paths.holidays is not None:
        files.append("holidays")
    return files


# --- commands -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> Dict[str, Path]:
    """Generate the planted dataset next to the configured traffic CSV (or into ``out_dir``)."""
    if out_dir is None:
        out_dir = cfg.traffic_path.parent if cfg.paths.traffic else cfg.output_dir / "synth"
    dataset = generate(cfg.synth)
    paths = write_dataset(dataset, ensure_output_dir(out_dir))
    print(f"✓ Synthetic dataset written ({cfg.synth.n_nodes} stations, {cfg.synth.weeks} weeks):")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    print(f"  matching p for the functional ground truth: {dataset.matching_p:.6f}")
    return paths


def cmd_ingest_check(traffic: Union[str, Path]) -> Dict:
    """Load, validate and impute a traffic CSV; return the coverage report."""
    raw = load_traffic_csv(traffic)
    report = ingest_report(raw)
    impute_missing(raw)
    print(to_json(report), end="")
    print(f"✓ {traffic}: {raw.n_stations} stations, {raw.n_points} points, "
          f"{report['missing_cells']} missing cells")
    return report


def cmd_graphs(cfg: RunConfig) -> Dict[str, Path]:
    """Write edge lists of every enabled graph and the PCC timeline of one station."""
    prepared = prepare_data(cfg)
    static = build_static_graphs(cfg, prepared)
    graph_dir = ensure_output_dir(cfg.output_dir / "graphs")
    paths = {}
    for kind, adj in static.items():
        paths[kind.value] = graph_dir / f"{kind.value}.csv"
        save_edge_list(adj, paths[kind.value])

    series = prepared.normalized
    H = cfg.graphs.H
    if GraphKind.RECENT_TREND in cfg.graphs.enabled:
        anchor = prepared.split.ranges["train"][1] - 1
        graphs = build_graph_set(cfg, prepared, static)
        paths["recent_trend"] = graph_dir / f"recent_trend_t{anchor}.csv"
        save_edge_list(graphs.recent_trend(anchor), paths["recent_trend"])

    focus = cfg.graphs.focus_station or series.station_ids[0]
    if focus not in series.station_ids:
        raise ConfigError(f"unknown station {focus!r}", field="graphs.focus_station")
    step = max(1, series.points_per_day // 24)
    timeline = pcc_timeline(series, focus, range(H - 1, series.n_points, step), H)
    stamps = series.timestamps[timeline.index.to_numpy()]
    timeline.insert(0, "timestamp", stamps.strftime(TIMESTAMP_FORMAT))
    paths["pcc_timeline"] = graph_dir / "pcc_timeline.csv"
    timeline.to_csv(paths["pcc_timeline"], float_format="%.6f")

    print("✓ Graphs written:")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return paths


def train_horizon(
    cfg: RunConfig,
    prepared: PreparedData,
    graphs: GraphSet,
    ha_state,
    horizon: int,
    out_dir: Path,
) -> Dict:
    """Train, select, evaluate and export one horizon; returns its metrics row."""
    series = prepared.normalized
    slice_cfg = cfg.slicing.to_slice_config(series.points_per_day, horizon)
    sets = {
        name: usable_samples(
            series, slice_cfg, rng, prepared.holidays, cfg.graphs.enabled, cfg.graphs.H
        )
        for name, rng in prepared.split.ranges.items()
    }
    logger.info(
        "horizon %d: %d train / %d val / %d test samples",
        horizon,
        len(sets["train"]),
        len(sets["val"]),
        len(sets["test"]),
    )
    model = init_params(
        model_config_for(cfg, series.n_stations, slice_cfg), seed=cfg.seed, graphs=graphs
    )
    result = fit(model, sets["train"], sets["val"], cfg.train, prepared.scaler)
    metrics = evaluate(model, sets["test"], prepared.scaler)

    anchors = [s.anchor for s in sets["test"]]
    baselines = baseline_metrics(ha_state, prepared.series, anchors, horizon)

    horizon_dir = ensure_output_dir(out_dir / f"horizon_{horizon}")
    result.log.to_csv(horizon_dir / "training_log.csv")
    save_checkpoint(
        model,
        horizon_dir / "checkpoint.npz",
        scaler=prepared.scaler,
        extra={
            "horizon": horizon,
            "best_epoch": result.best_epoch,
            "test_anchors": [anchors[0], anchors[-1] + 1],
            "holidays": sorted(d.isoformat() for d in prepared.holidays),
        },
    )
    write_json(metrics.to_json(horizon), horizon_dir / "metrics.json")

    print(f"✓ Horizon {horizon}: test RMSE {metrics.rmse:.4f}, MAE {metrics.mae:.4f}")
    for name, m in baselines.items():
        print(f"  {name}: RMSE {m.rmse:.4f}, MAE {m.mae:.4f}")
    print(f"  saved to {horizon_dir}")
    return {
        **metrics.to_json(horizon),
        "best_epoch": result.best_epoch,
        "baselines": {name: asdict(m) for name, m in baselines.items()},
    }


def cmd_train(cfg: RunConfig) -> List[Dict]:
    """Train one model per configured horizon and write checkpoints, logs and metrics."""
    prepared = prepare_data(cfg)
    static = build_static_graphs(cfg, prepared)
    graphs = build_graph_set(cfg, prepared, static)
    ha_state = ha_fit(prepared.split.train)
    out_dir = ensure_output_dir(cfg.output_dir)

    rows = [train_horizon(cfg, prepared, graphs, ha_state, k, out_dir) for k in cfg.horizons]
    write_json(rows, out_dir / "metrics.json")
    logger.info(
        "dynamic graph cache: %d hits, %d misses", graphs.cache_hits, graphs.cache_misses
    )
    return rows


def cmd_predict(
    checkpoint: Union[str, Path],
    traffic: Union[str, Path],
    out: Union[str, Path],
    start: Optional[int] = None,
    stop: Optional[int] = None,
    cache_size: Optional[int] = None,
) -> Path:
    """Predict for anchors [start, stop) and write ``timestamp,station_id,y_true,y_pred``.

    Without an anchor range the checkpoint's test anchors are used.
    """
    model, scaler, static, header = load_checkpoint(checkpoint)
    if scaler is None:
        raise DataError(f"{checkpoint}: checkpoint carries no scaler")
    extra = header.get("extra", {})
    series = impute_missing(load_traffic_csv(traffic))
    config = model.config
    if series.n_stations != config.n_stations:
        raise DimensionError(
            f"checkpoint expects {config.n_stations} stations, {traffic} has {series.n_stations}"
        )
    normalized = series.with_values(scaler.apply(series.values))
    graphs = GraphSet(
        static,
        enabled=config.enabled_graphs,
        values=normalized.values,
        H=config.H,
        p=config.p,
        cache_size=cache_size or max(256, series.n_points),
    )
    model.with_graphs(graphs)

    if start is None or stop is None:
        if "test_anchors" not in extra:
            raise ConfigError("no anchor range given and none recorded", field="start")
        start, stop = extra["test_anchors"]
    k = config.slicing.horizon
    holidays = {date.fromisoformat(d) for d in extra.get("holidays", [])}
    samples = usable_samples(
        normalized, config.slicing, (start + k, stop + k), holidays, config.enabled_graphs, config.H
    )

    pred = scaler.invert(predict(model, samples))
    true = scaler.invert(np.stack([s.target for s in samples]))
    N = config.n_stations
    frame = pd.DataFrame(
        {
            "timestamp": np.repeat(
                [s.target_timestamp.strftime(TIMESTAMP_FORMAT) for s in samples], N
            ),
            "station_id": np.tile(series.station_ids, len(samples)),
            "y_true": true.reshape(-1),
            "y_pred": pred.reshape(-1),
        },
        columns=PREDICTION_COLUMNS,
    )
    out = Path(out)
    ensure_output_dir(out.parent)
    frame.to_csv(out, index=False, float_format="%.17g")
    print(f"✓ {len(samples)} × {N} predictions written to {out}")
    return out


def cmd_evaluate(
    predictions: Union[str, Path], horizon: int = 1, out: Optional[Union[str, Path]] = None
) -> Dict:
    """Recompute RMSE/MAE from a predictions CSV."""
    predictions = Path(predictions)
    if not predictions.exists():
        raise FileNotFoundError(f"Predictions CSV not found at {predictions}")
    frame = pd.read_csv(predictions, dtype={"station_id": str})
    if list(frame.columns) != PREDICTION_COLUMNS:
        raise DataError(f"{predictions}: header must be {','.join(PREDICTION_COLUMNS)}")
    metrics = error_metrics(frame["y_pred"].to_numpy(float), frame["y_true"].to_numpy(float))
    result = metrics.to_json(horizon)
    if out is not None:
        write_json(result, out)
    print(to_json(result), end="")
    return result


# --- argument parsing -----------------------------------------------------------


def _load_config(args: argparse.Namespace, files: Optional[Sequence[str]] = None) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command", field="--config")
    cfg = RunConfig.load(args.config).with_overrides(
        horizon=args.horizon, seed=args.seed, out=args.out
    )
    cfg.require_files(files if files is not None else _input_files(cfg))
    return cfg


def _run_synth(args):
    cfg = _load_config(args, files=[])
    cmd_synth(cfg, out_dir=args.out)


def _run_ingest_check(args):
    if args.traffic:
        traffic = Path(args.traffic)
    else:
        traffic = _load_config(args, files=["traffic"]).traffic_path
    cmd_ingest_check(traffic)


def _run_graphs(args):
    cmd_graphs(_load_config(args))


def _run_train(args):
    cfg = _load_config(args)
    print_header(f"Training horizons {cfg.horizons} → {cfg.output_dir}")
    cmd_train(cfg)


def _run_predict(args):
    traffic = args.traffic
    if traffic is None:
        traffic = _load_config(args, files=["traffic"]).traffic_path
    out = args.out or Path(args.checkpoint).with_name("predictions.csv")
    cmd_predict(args.checkpoint, traffic, out, start=args.start, stop=args.stop)


def _run_evaluate(args):
    cmd_evaluate(args.predictions, horizon=args.horizon or 1, out=args.out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="TOML run configuration")
    common.add_argument("--horizon", type=int, help="override the horizon list with one horizon")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", type=str, help="output directory (file for predict/evaluate)")
    common.add_argument("--log-level", type=str, help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(
        prog="traffic-forecaster",
        description="Cellular traffic forecasting with hybrid spatio-temporal graph convolution",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a planted synthetic dataset")
    p = sub.add_parser("ingest-check", parents=[common], help="validate a traffic CSV")
    p.add_argument("--traffic", type=str, help="traffic CSV (default: paths.traffic)")
    sub.add_parser("graphs", parents=[common], help="export graph edge lists and PCC timeline")
    sub.add_parser("train", parents=[common], help="train and evaluate every horizon")
    p = sub.add_parser("predict", parents=[common], help="write predictions from a checkpoint")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--traffic", type=str, help="traffic CSV (default: paths.traffic)")
    p.add_argument("--start", type=int, help="first anchor index")
    p.add_argument("--stop", type=int, help="anchor index after the last")
    p = sub.add_parser("evaluate", parents=[common], help="score a predictions CSV")
    p.add_argument("--predictions", type=str, required=True)

    return parser


COMMANDS = {
    "synth": _run_synth,
    "ingest-check": _run_ingest_check,
    "graphs": _run_graphs,
    "train": _run_train,
    "predict": _run_predict,
    "evaluate": _run_evaluate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI function; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
        COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("\n\nExiting...")
        return EXIT_UNEXPECTED
    except Exception as e:
        code = exit_code_for(e)
        print(f"Error: {e}", file=sys.stderr)
        if code == EXIT_UNEXPECTED:
            logger.exception("unexpected failure in %s", args.command)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
