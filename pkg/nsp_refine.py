#!/usr/bin/env python3
"""
Satellite precipitation refinement with a Neural Stochastic Process.

Commands:
    synth   write a seeded synthetic dataset
    train   train one NSP model per cross-validation fold
    eval    score a trained run or a baseline on the test years
    report  merge evaluation runs into one comparison table

python nsp_refine.py synth --out data/synth
python nsp_refine.py train --data data/synth/manifest.json --config configs/desk.json --out runs/nsp
python nsp_refine.py eval --data data/synth/manifest.json --checkpoint runs/nsp --out runs/nsp_eval
python nsp_refine.py eval --data data/synth/manifest.json --baseline idw --out runs/idw
python nsp_refine.py report runs/nsp_eval runs/idw

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import glob
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from baselines import BASELINES, make_baseline
from gridio import (
    GridField,
    apply_quality_filters,
    load_dataset,
    make_folds,
    split_frames_by_years,
    write_pgm,
)
from metrics import HEADLINE, REPORT_SCHEMA, MetricAccumulator
from nsp import STANDARD, InferenceMode, NSPModel, infer, load_checkpoint, save_checkpoint
from synth import dataset_statistics, generate_dataset, write_dataset
from train import fit, heldout_transition_kl, write_loss_curve
from utils import logger, render_table
from utils.config import RunConfig
from utils.errors import EXIT_OK, ConfigError, DataError, InsufficientDataError, NSPError
from utils.seeding import make_rng

CHECKPOINT_NAME = "model.nspckpt"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"


def _makedirs(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {path}: {e}") from e


@contextmanager
def run_log(out_dir: str):
    """Mirror the log of one command into ``out_dir/run.log``."""
    _makedirs(out_dir)
    handler = logger.attach_file(out_dir)
    try:
        yield
    finally:
        logger.detach(handler)


# ---------------------------------------------------------------------------
# data preparation


def prepare_frames(frames: Sequence, apply_filters: bool = True) -> list:
    """Quality-filter every frame and drop the discardable ones."""
    if not apply_filters:
        return list(frames)
    kept = []
    spikes = missing = extremes = discarded = 0
    for frame in frames:
        filtered, report = apply_quality_filters(frame)
        spikes += report.spike_gauges
        missing += report.missing_gauges
        extremes += report.radar_extremes
        if report.discardable:
            discarded += 1
            continue
        kept.append(filtered)
    logger.info_if_or_debug(
        f"quality control: {spikes} spike gauges, {missing} missing readings, "
        f"{extremes} radar cells above range, {discarded} frames discarded",
        spikes or missing or extremes or discarded,
    )
    return kept


def select_folds(frames: Sequence, data_cfg) -> list:
    """(index, FoldSpec) pairs for the configured fold, or every fold."""
    years = sorted({f.year for f in frames if f.year is not None})
    folds = make_folds(years, data_cfg.n_folds)
    indices = range(len(folds)) if data_cfg.fold is None else [data_cfg.fold]
    return [(k, folds[k]) for k in indices]


def _load_data(cfg: RunConfig) -> list:
    manifest = cfg.data.manifest
    if not manifest:
        raise ConfigError("no dataset manifest; pass --data or set data.manifest")
    dataset = load_dataset(manifest, cfg.data.threads)
    return prepare_frames(dataset.frames, cfg.data.apply_filters)


def eval_context(frame, data_cfg) -> tuple:
    """
    Context gauge indices for evaluation.

    A ratio r keeps the first round(r * n) valid gauges of a per-hour
    permutation, so lower ratios select subsets of higher ones.
    """
    if not data_cfg.use_gauges:
        return ()
    valid = [i for i, g in enumerate(frame.gauges) if not g.is_missing]
    if data_cfg.eval_context_ratio >= 1.0:
        return tuple(valid)
    n = int(np.floor(data_cfg.eval_context_ratio * len(valid) + 0.5))
    order = make_rng(data_cfg.seed, "eval_context", frame.timestamp).permutation(len(valid))
    return tuple(sorted(valid[i] for i in order[:n]))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out_dir: str) -> str:
    """
    Write a synthetic dataset and print its statistics.

    Returns:
        str: Path of the written manifest
    """
    _makedirs(out_dir)
    dataset = generate_dataset(cfg.synth)
    try:
        manifest = write_dataset(dataset, out_dir)
    except OSError as e:
        raise DataError(f"cannot write dataset to {out_dir}: {e}") from e
    cfg.write_effective(out_dir)
    stats = dataset_statistics(dataset.frames)
    print(render_table(["statistic", "value"], list(stats.items())))
    logger.info(f"<<green>> wrote {manifest}")
    return manifest


def cmd_train(cfg: RunConfig, out_dir: str) -> list:
    """
    Train one model per selected fold.

    Returns:
        list: Paths of the written checkpoints
    """
    frames = _load_data(cfg)
    _makedirs(out_dir)
    cfg.write_effective(out_dir)
    written = []
    for k, fold in select_folds(frames, cfg.data):
        train_frames, val_frames, _ = split_frames_by_years(frames, fold)
        logger.info(f"<<lightblue>> fold {k}: train {list(fold.train_years)}, validation {list(fold.validation_years)}")
        model = NSPModel(cfg.model, seed=cfg.train.seed)
        result = fit(train_frames, model, cfg.objective, cfg.sampler, cfg.train, val_frames)

        fold_dir = os.path.join(out_dir, f"fold{k}")
        _makedirs(fold_dir)
        path = os.path.join(fold_dir, CHECKPOINT_NAME)
        extra = {
            "fold": k,
            "train_years": list(fold.train_years),
            "validation_years": list(fold.validation_years),
            "test_years": list(fold.test_years),
            "best_step": result.best_step,
            "best_validation": result.best_validation,
        }
        save_checkpoint(path, model, cfg.train.seed, result.steps, extra)
        write_loss_curve(os.path.join(fold_dir, "loss_curve.csv"), result)
        logger.info(f"<<green>> fold {k}: {result.steps} steps, checkpoint {path}")
        written.append(path)
    return written


def _load_models(checkpoint: str) -> dict:
    """Fold index -> (model, header) from a checkpoint file or a training run directory."""
    if os.path.isdir(checkpoint):
        paths = sorted(glob.glob(os.path.join(checkpoint, "fold*", CHECKPOINT_NAME)))
        if not paths:
            raise DataError(f"no checkpoints under {checkpoint}")
    elif os.path.isfile(checkpoint):
        paths = [checkpoint]
    else:
        raise DataError(f"checkpoint {checkpoint} does not exist")
    models = {}
    for path in paths:
        model, header = load_checkpoint(path)
        model.eval()
        models[int(header.get("extra", {}).get("fold", 0))] = (model, header)
    return models


def predict_nsp(model: NSPModel, frames: Sequence, mode: InferenceMode, data_cfg) -> list:
    """
    (frame, field, horizon) per frame.

    Rollout modes carry the latent forward while frames stay consecutive,
    re-encoding after ``max_horizon`` steps; ``horizon`` counts the steps
    since the last encoding and is None in standard mode.
    """
    def _standard(frame):
        rng = make_rng(data_cfg.seed, "eval_latent", frame.timestamp)
        return frame, infer(frame, model, STANDARD, rng, context=eval_context(frame, data_cfg)).field(), None

    if not mode.needs_previous:
        if data_cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=data_cfg.threads) as pool:
                return list(pool.map(_standard, frames))
        return [_standard(f) for f in frames]

    out = []
    z_prev, prev_ts, horizon = None, None, 0
    for frame in frames:
        rng = make_rng(data_cfg.seed, "eval_latent", frame.timestamp)
        context = eval_context(frame, data_cfg)
        consecutive = prev_ts is not None and frame.timestamp - prev_ts == 1
        if consecutive and horizon < data_cfg.max_horizon:
            pred = infer(frame, model, mode, rng, z_prev, context)
            horizon += 1
        else:
            pred = infer(frame, model, STANDARD, rng, context=context)
            horizon = 0
        z_prev, prev_ts = pred.z, frame.timestamp
        out.append((frame, pred.field(), horizon))
    return out


def predict_baseline(baseline, frames: Sequence, data_cfg) -> list:
    """(frame, field or None, None) per frame; None where the baseline has too few gauges."""
    def _one(frame):
        try:
            return frame, baseline.predict(frame, eval_context(frame, data_cfg)), None
        except InsufficientDataError as e:
            logger.debug(f"{baseline.name} skipped t={frame.timestamp}: {e}")
            return frame, None, None

    if data_cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=data_cfg.threads) as pool:
            return list(pool.map(_one, frames))
    return [_one(f) for f in frames]


def export_maps(out_dir: str, frame, pred) -> None:
    """Write pred / ref / |pred - ref| graymaps for one hour."""
    maps = os.path.join(out_dir, "maps")
    _makedirs(maps)
    values = pred.filled(0.0) if isinstance(pred, GridField) else np.asarray(pred, dtype=np.float64)
    stem = os.path.join(maps, f"t{frame.timestamp:05d}")
    write_pgm(f"{stem}_pred.pgm", values)
    if frame.radar is not None:
        ref = frame.radar.filled(0.0)
        write_pgm(f"{stem}_ref.pgm", ref)
        write_pgm(f"{stem}_absdiff.pgm", np.abs(values - ref))


def cmd_eval(cfg: RunConfig, out_dir: str, checkpoint: Optional[str] = None, baseline: Optional[str] = None) -> dict:
    """
    Evaluate a trained run or a baseline on the test year of each fold.

    Baselines are fitted on the training years of the fold only. Writes one
    report per fold plus an aggregate over every evaluated frame.

    Returns:
        dict: The aggregate report document
    """
    if (checkpoint is None) == (baseline is None):
        raise ConfigError("eval needs exactly one of --checkpoint or --baseline")
    mode = InferenceMode.parse(cfg.data.inference_mode)
    models = _load_models(checkpoint) if checkpoint else {}
    frames = _load_data(cfg)
    if not any(f.radar is not None for f in frames):
        logger.warning("<<yellow>> dataset carries no radar reference; grid metrics are skipped")

    folds = select_folds(frames, cfg.data)
    if checkpoint:
        folds = [(k, fold) for k, fold in folds if k in models]
        if not folds:
            raise ConfigError(f"{checkpoint} holds no checkpoint for the selected folds")
    _makedirs(out_dir)
    cfg.write_effective(out_dir)

    name = baseline or "nsp"
    header = {
        "run": os.path.basename(os.path.normpath(out_dir)),
        "method": name,
        "mode": cfg.data.inference_mode if checkpoint else "standard",
        "context_ratio": cfg.data.eval_context_ratio,
        "use_gauges": cfg.data.use_gauges,
    }
    overall = MetricAccumulator(cfg.metrics)
    export = set(cfg.data.export_hours)
    skipped = 0
    for k, fold in folds:
        train_frames, _, test_frames = split_frames_by_years(frames, fold)
        if not test_frames:
            logger.warning(f"<<yellow>> fold {k}: no test frames")
            continue
        fold_header = {**header, "fold": k, "test_years": list(fold.test_years)}
        if checkpoint:
            model, _ = models[k]
            outputs = predict_nsp(model, test_frames, mode, cfg.data)
            fold_header["trans_kl"] = heldout_transition_kl(test_frames, model)
        else:
            predictor = make_baseline(baseline, cfg.baselines).fit(train_frames, cfg.sampler)
            outputs = predict_baseline(predictor, test_frames, cfg.data)

        acc = MetricAccumulator(cfg.metrics)
        for frame, pred, horizon in outputs:
            if pred is None:
                skipped += 1
                continue
            acc.add(pred, frame, horizon=horizon)
            overall.add(pred, frame, horizon=horizon)
            if frame.timestamp in export:
                export_maps(out_dir, frame, pred)

        fold_dir = os.path.join(out_dir, f"fold{k}")
        _makedirs(fold_dir)
        report = acc.result(fold_header)
        report.write_json(os.path.join(fold_dir, REPORT_JSON))
        report.write_csv(os.path.join(fold_dir, REPORT_CSV), name)
        logger.info(f"fold {k}: " + ", ".join(f"{m} {_fmt(v)}" for m, v in report.headline().items()))

    if skipped:
        logger.warning(f"<<yellow>> {skipped} frames had too few context gauges for {name} and were skipped")
    report = overall.result({**header, "folds": [k for k, _ in folds], "skipped_frames": skipped})
    report.write_json(os.path.join(out_dir, REPORT_JSON))
    report.write_csv(os.path.join(out_dir, REPORT_CSV), name)
    logger.info("<<green>> " + ", ".join(f"{m} {_fmt(v)}" for m, v in report.headline().items()))
    return report.to_dict()


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def metric_direction(name: str) -> Optional[int]:
    """+1 when higher is better, -1 when lower is better, None when unranked."""
    if name in ("r_coll", "fss_r") or name.startswith("fss@"):
        return 1
    if name.startswith(("rmse", "mae", "crmse@", "disp_km@", "min_scale_km@")):
        return -1
    return None


def _read_report(run: str) -> tuple:
    path = os.path.join(run, REPORT_JSON) if os.path.isdir(run) else run
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read report of run {run}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"run {run}: invalid report JSON ({e})") from e
    if doc.get("schema") != REPORT_SCHEMA:
        raise ConfigError(f"run {run}: report schema {doc.get('schema')!r} does not match {REPORT_SCHEMA}")
    folder = run if os.path.isdir(run) else os.path.dirname(os.path.abspath(run))
    name = os.path.basename(os.path.normpath(folder))
    return name, doc


def cmd_report(runs: Sequence[str], out_path: Optional[str] = None, all_columns: bool = False) -> pd.DataFrame:
    """
    Merge evaluation reports into one table, best value per column marked.

    Returns:
        pd.DataFrame: One row per run, the union of metric columns
    """
    rows = []
    for run in runs:
        name, doc = _read_report(run)
        rows.append({"run": name, **doc.get("metrics", {}), "n_samples": doc.get("counts", {}).get("samples", 0)})
    frame = pd.DataFrame(rows)
    metric_cols = [c for c in frame.columns if c not in ("run", "n_samples")]
    ordered = [c for c in HEADLINE if c in metric_cols] + [c for c in metric_cols if c not in HEADLINE]
    frame = frame[["run", *ordered, "n_samples"]]
    if out_path:
        frame.to_csv(out_path, index=False, lineterminator="\n", float_format="%.10g")

    shown = ["run", *(ordered if all_columns else [c for c in HEADLINE if c in ordered]), "n_samples"]
    marks = set()
    for c, col in enumerate(shown):
        direction = metric_direction(col)
        values = pd.to_numeric(frame[col], errors="coerce")
        if direction is None or values.isna().all():
            continue
        best = values.max() if direction > 0 else values.min()
        marks.update((r, c) for r, v in enumerate(values) if v == best)
    table_rows = [[None if pd.isna(v) else v for v in row] for row in frame[shown].astype(object).itertuples(index=False)]
    print(render_table(shown, table_rows, digits=3, marks=marks))
    return frame


# ---------------------------------------------------------------------------
# argument parsing


def _hours(text: str) -> tuple:
    try:
        return tuple(int(h) for h in text.split(",") if h.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated hour indices, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Run configuration JSON (defaults when omitted)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", default=None, help="Dataset manifest (overrides data.manifest)")
    data.add_argument("--fold", type=int, default=None, help="Evaluate or train this fold only")
    data.add_argument("--threads", type=int, default=None, help="Worker threads for loading and evaluation")

    parser = argparse.ArgumentParser(description="Satellite precipitation refinement with a Neural Stochastic Process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Write a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--hours", type=int, default=None)
    p.add_argument("--stations", type=int, default=None)
    p.set_defaults(func=_run_synth)

    p = sub.add_parser("train", parents=[common, data], help="Train NSP per fold")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--no-trans", action="store_true", help="Drop the transition term")
    p.add_argument("--no-prior", action="store_true", help="Drop the prior KL term")
    p.add_argument("--no-ctx", action="store_true", help="Drop the context reconstruction term")
    p.add_argument("--deterministic-latent", action="store_true", help="Decode the posterior mean")
    p.add_argument("--no-residual", action="store_true", help="Predict precipitation without the satellite residual")
    p.add_argument("--homoscedastic", action="store_true", help="One learned variance for every cell")
    p.add_argument("--logspace-mse", action="store_true", help="Log-space MSE in place of the Gaussian likelihood")
    temporal = p.add_mutually_exclusive_group()
    temporal.add_argument("--girsanov", action="store_true", help="Drift matching as the temporal term")
    temporal.add_argument("--naive-temporal", action="store_true", help="Unweighted mean matching as the temporal term")
    p.add_argument("--matched-variance", action="store_true", help="Overwrite the posterior variance with the transition variance")
    p.set_defaults(func=_run_train)

    p = sub.add_parser("eval", parents=[common, data], help="Evaluate a trained run or a baseline")
    p.add_argument("--out", required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", default=None, help="Checkpoint file or training run directory")
    source.add_argument("--baseline", default=None, choices=sorted(BASELINES))
    p.add_argument("--context-ratio", type=float, default=None, help="Fraction of gauges used as context")
    p.add_argument("--mode", default=None, help="standard, rollout or hybrid[:alpha]")
    p.add_argument("--max-horizon", type=int, default=None, help="Rollout steps before re-encoding")
    p.add_argument("--no-gauges", action="store_true", help="Run without gauge context")
    p.add_argument("--export-hours", type=_hours, default=None, help="Comma-separated hours to export as graymaps")
    p.add_argument("--pooled", action="store_true", help="Pool errors over samples instead of averaging")
    p.set_defaults(func=_run_eval)

    p = sub.add_parser("report", parents=[common], help="Compare evaluation runs")
    p.add_argument("runs", nargs="+", help="Evaluation output directories or report.json files")
    p.add_argument("--out", default=None, help="Merged CSV path")
    p.add_argument("--all-columns", action="store_true")
    p.set_defaults(func=_run_report)
    return parser


def _changes(**pairs) -> dict:
    return {k: v for k, v in pairs.items() if v is not None}


def _base_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config).apply_env()
    cfg.update("data", **_changes(
        manifest=getattr(args, "data", None),
        fold=getattr(args, "fold", None),
        threads=getattr(args, "threads", None),
    ))
    return cfg


def _run_synth(args) -> int:
    cfg = _base_config(args)
    cfg.update("synth", **_changes(hours=args.hours, n_stations=args.stations))
    with run_log(args.out):
        cmd_synth(cfg, args.out)
    return EXIT_OK


def _run_train(args) -> int:
    cfg = _base_config(args)
    model = {}
    if args.deterministic_latent:
        model["deterministic_latent"] = True
    if args.no_residual:
        model["residual"] = False
    if args.homoscedastic:
        model["homoscedastic"] = True
    train = _changes(epochs=args.epochs, max_steps=args.max_steps)
    if args.no_trans:
        train["use_trans"] = False
    if args.no_prior:
        train["use_prior"] = False
    if args.no_ctx:
        train["use_ctx"] = False
    if args.logspace_mse:
        train["reconstruction"] = "logspace_mse"
    if args.girsanov:
        train["temporal"] = "girsanov"
    if args.naive_temporal:
        train["temporal"] = "naive"
    if args.matched_variance:
        train["matched_variance"] = True
    cfg.update("model", **model).update("train", **train)
    with run_log(args.out):
        cmd_train(cfg, args.out)
    return EXIT_OK


def _run_eval(args) -> int:
    cfg = _base_config(args)
    data = _changes(
        eval_context_ratio=args.context_ratio,
        inference_mode=args.mode,
        max_horizon=args.max_horizon,
        export_hours=args.export_hours,
    )
    if args.no_gauges:
        data["use_gauges"] = False
    cfg.update("data", **data)
    if args.pooled:
        cfg.update("metrics", aggregation="pooled")
    with run_log(args.out):
        cmd_eval(cfg, args.out, args.checkpoint, args.baseline)
    return EXIT_OK


def _run_report(args) -> int:
    cmd_report(args.runs, args.out, args.all_columns)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and run one command.

    Returns:
        int: Process exit code
    """
    load_dotenv()
    args = build_parser().parse_args(argv)
    logger.set_level(args.log_level)
    try:
        return args.func(args)
    except NSPError as e:
        logger.error_red(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
