"""Command-line interface: ``accelbias <subcommand>``.

Exit codes: 0 success, 1 usage or I/O error, 2 algorithmic failure
(non-convergence, rank deficiency, divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import shutil
import subprocess
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from . import evaluation as ev
from .calib_iterative import IterativeConfig, solve_iterative
from .calib_ls import LsProblem, TrustRegionConfig, solve_trf
from .errors import (
    CalibrationError,
    DivergenceError,
    NonFiniteGradientError,
    RankDeficientError,
    SingularResidualError,
)
from .ofbenet import network
from .ofbenet.serialize import load_model, save_model
from .signal_model import STANDARD_GRAVITY
from .training import TrainingConfig, train

log = logging.getLogger("accelbias")

EXIT_OK, EXIT_USAGE, EXIT_ALGORITHM = 0, 1, 2
ALGORITHMIC = (RankDeficientError, SingularResidualError, DivergenceError, NonFiniteGradientError)


class UsageError(Exception):
    pass


class NotConverged(Exception):
    pass


@dataclass
class RunConfig:
    """Every tunable default; a JSON config file may override any of these keys."""

    # signal and data
    g: float = STANDARD_GRAVITY
    sigma: float = 0.02
    sample_rate_hz: float = 150.0
    duration_s: float = 80.0
    bias_model: str = "device"
    bias_range: float = 0.196
    turn_on_sigma: float = 0.03
    n_devices: int | None = None
    recordings_per_device: int | None = None
    group_size: int | None = None
    label_start: int = ds.LABEL_START
    convergence_threshold: float = ds.CONVERGENCE_THRESHOLD
    convergence_window: int = ds.CONVERGENCE_WINDOW
    convergence_derivative: str = "central"
    # network
    window_len: int = ds.DEFAULT_WINDOW
    channels: list = field(default_factory=lambda: [3, 8, 32, 64])
    kernel_size: int = 5
    pool: int = 4
    hidden: int = 32
    keep_prob: float = 0.8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    leaky_alpha: float = 0.1
    input_scale: float = 1.0
    # training
    learning_rate: float = 0.01
    batch_size: int = 8
    lr_factor: float = 0.2
    lr_patience: int = 15
    early_stop_patience: int = 5
    max_epochs: int = 300
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    min_rel_improvement: float = 1e-4
    strict_schedule: bool = False
    validation_fraction: float = 0.15
    # baselines
    trf_initial_radius: float = 0.1
    trf_max_radius: float = 100.0
    trf_eta_accept: float = 0.1
    trf_tol_gradient: float = 1e-10
    trf_tol_step: float = 1e-12
    trf_max_iterations: int = 200
    iterative_tolerance: float = 1e-9
    iterative_max_iterations: int = 100
    iterative_rcond: float = 1e-2
    # evaluation
    folds: int = 5
    test_fraction: float | None = None
    baseline_mode: str = "single"
    alpha: float = 0.05

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def load(cls, path=None, overrides=None):
        values = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    values = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"config {path} is not valid JSON: {exc}") from None
            if not isinstance(values, dict):
                raise UsageError(f"config {path} must hold a JSON object")
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.keys()}

    def dataset_config(self, preset, seed, total=None):
        over = dict(
            sigma=self.sigma,
            g=self.g,
            sample_rate_hz=self.sample_rate_hz,
            duration_s=self.duration_s,
            bias_model=self.bias_model,
            bias_range=self.bias_range,
            turn_on_sigma=self.turn_on_sigma,
            seed=seed,
        )
        for k in ("n_devices", "recordings_per_device", "group_size"):
            if getattr(self, k) is not None:
                over[k] = getattr(self, k)
        cfg = ds.preset_config(preset, **over)
        if total is not None:
            if total > cfg.n_devices * cfg.recordings_per_device:
                cfg.recordings_per_device = math.ceil(total / cfg.n_devices)
            cfg = ds.DatasetConfig(**{**cfg.to_dict(), "total_recordings": total})
        return cfg

    def network_config(self):
        return network.NetworkConfig(
            channels=tuple(self.channels),
            kernel_size=self.kernel_size,
            pool=self.pool,
            hidden=self.hidden,
            keep_prob=self.keep_prob,
            bn_eps=self.bn_eps,
            bn_momentum=self.bn_momentum,
            alpha=self.leaky_alpha,
            window_len=self.window_len,
            input_scale=self.input_scale,
        )

    def training_config(self, seed):
        return TrainingConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            lr_factor=self.lr_factor,
            lr_patience=self.lr_patience,
            early_stop_patience=self.early_stop_patience,
            max_epochs=self.max_epochs,
            seed=seed,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            min_rel_improvement=self.min_rel_improvement,
            strict_schedule=self.strict_schedule,
        )

    def trf_config(self):
        return TrustRegionConfig(
            initial_radius=self.trf_initial_radius,
            max_radius=self.trf_max_radius,
            eta_accept=self.trf_eta_accept,
            tol_gradient=self.trf_tol_gradient,
            tol_step=self.trf_tol_step,
            max_iterations=self.trf_max_iterations,
        )

    def iterative_config(self, per_sample):
        return IterativeConfig(
            tolerance=self.iterative_tolerance,
            max_iterations=self.iterative_max_iterations,
            rcond=self.iterative_rcond,
            per_sample=per_sample,
        )

    def evaluation_config(self, seed):
        return ev.EvaluationConfig(
            window_len=self.window_len,
            validation_fraction=self.validation_fraction,
            g=self.g,
            seed=seed,
            alpha=self.alpha,
            baseline_mode=self.baseline_mode,
            network=self.network_config(),
            training=self.training_config(seed),
        )


# ------------------------------------------------------------------ helpers


def version_info():
    info = {"package": __version__}
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        info["git"] = out.stdout.strip() if out.returncode == 0 else None
    except (OSError, subprocess.SubprocessError):
        info["git"] = None
    return info


def run_manifest(args, cfg, **extra):
    m = {
        "command": args.command,
        "seed": args.seed,
        "config": cfg.to_dict(),
        "version": version_info(),
    }
    m.update(extra)
    return m


def prepare_dir(path, force):
    p = Path(path)
    occupied = any(p.iterdir()) if p.is_dir() else p.exists()
    if occupied:
        if not force:
            raise UsageError(f"{p} already exists; pass --force to overwrite")
        if p.is_dir():
            shutil.rmtree(p)
        else:
            p.unlink()
    p.mkdir(parents=True, exist_ok=True)
    return p


def prepare_file(path, force):
    p = Path(path)
    if p.exists() and not force:
        raise UsageError(f"{p} already exists; pass --force to overwrite")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def require_out(args):
    if args.out is None:
        raise UsageError(f"{args.command} needs --out")
    return args.out


def dataset_digest(dataset_dir):
    """SHA-256 of a dataset manifest; identifies the data without depending on its location."""
    return hashlib.sha256((Path(dataset_dir) / "manifest.json").read_bytes()).hexdigest()


def load_labels(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if "labels" not in data:
        raise UsageError(f"{path} is not a labels file")
    return data["labels"]


def labelled_dataset(args):
    labels_path = args.labels or Path(args.dataset) / "labels.json"
    if not Path(labels_path).exists():
        raise UsageError(f"no labels at {labels_path}; run `accelbias label` first or pass --labels")
    recs = ds.load_dataset(args.dataset, load_labels(labels_path))
    missing = [r.recording_id for r in recs if r.label_bias is None]
    if missing:
        raise UsageError(f"{len(missing)} recordings have no label (first: {missing[0]})")
    return recs


def emit(args, obj):
    if not args.quiet:
        print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_simulate(args, cfg):
    out = prepare_dir(require_out(args), args.force)
    dcfg = cfg.dataset_config(args.preset, args.seed, args.recordings)
    if args.devices is not None:
        dcfg = ds.DatasetConfig(**{**dcfg.to_dict(), "n_devices": args.devices})
    recs = ds.generate_dataset(dcfg)
    extra = {"preset": args.preset, "generator": dcfg.to_dict(), "run": run_manifest(args, cfg)}
    ds.save_dataset(recs, out, dcfg.sample_rate_hz, dcfg.g, extra)
    emit(args, {"dataset": str(out), "recordings": len(recs), "hours": len(recs) * dcfg.duration_s / 3600.0})
    return EXIT_OK


def cmd_ingest(args, cfg):
    out = prepare_dir(require_out(args), args.force)
    recs, files = [], []
    ref = tuple(args.reference_direction) if args.reference_direction else None
    for path in args.inputs:
        rec = ds.ingest_csv(path, args.rate, args.device, args.power_cycle)
        if ref is not None:
            ds.align_by_reference(rec.segment, ref)  # validates the direction
            rec = dataclasses.replace(rec, reference_direction=ref)
        name = f"{rec.recording_id}.csv"
        if name in files:
            raise UsageError(f"duplicate recording id {rec.recording_id}")
        shutil.copyfile(path, out / name)
        recs.append(rec)
        files.append(name)
    rate = recs[0].segment.sample_rate_hz
    ds.write_manifest(out / "manifest.json", recs, rate, cfg.g, {"preset": "ingested", "run": run_manifest(args, cfg)}, files)
    emit(args, {"dataset": str(out), "recordings": len(recs)})
    return EXIT_OK


def cmd_label(args, cfg):
    out = prepare_file(args.out or Path(args.dataset) / "labels.json", args.force)
    recs = ds.load_dataset(args.dataset)
    labels, convergence = {}, {}
    for rec in recs:
        labelled = ds.label_recording(rec, cfg.g, cfg.label_start)
        labels[rec.recording_id] = labelled.label_bias.as_array().tolist()
        res = ds.detect_convergence(
            rec.segment, axis=None, threshold=cfg.convergence_threshold,
            window=cfg.convergence_window, derivative=cfg.convergence_derivative,
        )
        convergence[rec.recording_id] = res.converged_at_sample
    settled = [v for v in convergence.values() if v is not None]
    doc = {
        "schema_version": ds.MANIFEST_SCHEMA_VERSION,
        "dataset_sha256": dataset_digest(args.dataset),
        "label_start": cfg.label_start,
        "labels": labels,
        "convergence_sample": convergence,
        "mean_convergence_sample": float(np.mean(settled)) if settled else None,
        "run": run_manifest(args, cfg),
    }
    ds.dump_json(out, doc)
    emit(args, {"labels": str(out), "recordings": len(labels), "mean_convergence_sample": doc["mean_convergence_sample"]})
    return EXIT_OK


def cmd_train(args, cfg):
    out = prepare_dir(require_out(args), args.force)
    recs = labelled_dataset(args)
    ncfg = cfg.network_config()
    tcfg = cfg.training_config(args.seed)
    ids = [r.recording_id for r in recs]
    groups = [r.power_cycle_id for r in recs]
    if len(set(groups)) > 1:
        fit_ids, val_ids = ds.split_validation(ids, cfg.validation_fraction, args.seed, groups)
    else:
        # a single power cycle cannot be split; validate on the training data
        fit_ids, val_ids = ids, ids
    by_id = {r.recording_id: r for r in recs}
    x, y = ds.stack_windows([by_id[i] for i in fit_ids], cfg.window_len)
    xv, yv = ds.stack_windows([by_id[i] for i in val_ids], cfg.window_len)
    if len(x) == 0 or len(xv) == 0:
        raise UsageError(f"recordings are shorter than one {cfg.window_len}-sample window")
    params = network.init_params(ncfg, args.seed)
    progress = None if args.quiet else lambda e, a, b, lr: log.info("epoch %d train %.6g val %.6g lr %g", e, a, b, lr)
    model_path = out / "model.ofbn"
    params, tlog = train(params, ncfg, x, y, xv, yv, tcfg, checkpoint_path=model_path, progress=progress)
    save_model(model_path, params, ncfg, seed=args.seed, extra={"training": tcfg.to_dict()})
    tlog.write_csv(out / "training_log.csv")
    ds.dump_json(out / "training_summary.json", tlog.summary())
    ds.dump_json(
        out / "manifest.json",
        run_manifest(args, cfg, dataset_sha256=dataset_digest(args.dataset), train_ids=fit_ids, validation_ids=val_ids, model="model.ofbn"),
    )
    emit(args, {"model": str(model_path), "best_epoch": tlog.best_epoch, "best_val_loss": tlog.best_val_loss})
    return EXIT_OK


def cmd_calibrate(args, cfg):
    segments = [ds.read_csv(p, args.rate) for p in args.inputs]
    method = args.method
    if method == "ofbenet":
        if args.model is None:
            raise UsageError("--method ofbenet needs --model")
        if not Path(args.model).exists():
            raise UsageError(f"model file {args.model} not found")
        params, ncfg, _ = load_model(args.model)
        windows = [
            s.samples[i * ncfg.window_len : (i + 1) * ncfg.window_len]
            for s in segments
            for i in range(len(s) // ncfg.window_len)
        ]
        if not windows:
            raise UsageError(f"inputs are shorter than the model window ({ncfg.window_len} samples)")
        preds = network.predict(params, np.stack(windows), ncfg)
        bias = preds.mean(axis=0)
        result = {"method": method, "bias_mps2": bias.tolist(), "diagnostics": {"n_windows": len(windows), "window_predictions": preds.tolist()}}
        converged = True
    else:
        per_sample = args.per_sample or len(segments) == 1
        if method == "least-squares":
            problem = LsProblem.from_segments(segments, cfg.g, per_sample=per_sample)
            res = solve_trf(problem, cfg.trf_config())
            diag = {k: v for k, v in res.diagnostics.items() if k != "history"}
        else:
            res = solve_iterative(segments, cfg.iterative_config(per_sample), cfg.g, args.allow_rank_deficient)
            diag = {k: v for k, v in res.diagnostics.items() if k != "correction_norms"}
        diag.update(iterations=res.iterations, final_cost=res.final_cost, converged=res.converged, per_sample=per_sample)
        result = {"method": method, "bias_mps2": res.bias.as_array().tolist(), "diagnostics": diag}
        converged = res.converged
    if args.out is not None:
        ds.dump_json(prepare_file(args.out, args.force), result)
    if not args.quiet:
        print(json.dumps(result, sort_keys=True))
    if not converged:
        raise NotConverged(f"{method} did not converge")
    return EXIT_OK


def _folds_for(recs, cfg, seed, preset):
    ids = [r.recording_id for r in recs]
    grouped = any(
        sum(1 for r in recs if r.power_cycle_id == pc) > 1 for pc in {r.power_cycle_id for r in recs}
    )
    frac = cfg.test_fraction
    if frac is None:
        frac = 0.1 if preset == "rotated" else 1.0 / cfg.folds
    if grouped:
        return ds.make_folds(ids, cfg.folds, frac, seed, groups=[r.power_cycle_id for r in recs]), frac
    devices = [r.device_id for r in recs]
    strata = devices if len(set(devices)) > 1 else None
    return ds.make_folds(ids, cfg.folds, frac, seed, strata=strata), frac


def cmd_evaluate(args, cfg):
    out = prepare_dir(require_out(args), args.force)
    recs = labelled_dataset(args)
    manifest = ds.load_manifest(args.dataset)
    preset = manifest.get("preset")
    folds, frac = _folds_for(recs, cfg, args.seed, preset)
    notes = []
    if preset == "gravity-aligned" and "iterative" in args.methods:
        notes.append(
            "iterative baseline evaluated on the gravity-aligned dataset although the reference comparison omits it"
        )
    if "iterative" in args.methods:
        notes.append("single-window iterative estimates use the minimum-norm correction over resolvable directions")
    ecfg = cfg.evaluation_config(args.seed)
    ds.dump_json(
        out / "manifest.json",
        run_manifest(
            args, cfg, dataset_sha256=dataset_digest(args.dataset), methods=list(args.methods), test_fraction=frac,
            folds=[{"fold": f.fold_index, "test_ids": list(f.test_ids)} for f in folds],
        ),
    )
    _, report = ev.run_cross_validation(recs, folds, args.methods, ecfg, out, notes)
    summary = {m: {"mean_rmse": e["mean_rmse"], "std_rmse": e["std_rmse"]} for m, e in report["methods"].items()}
    emit(args, {"report": str(out / "report.json"), "methods": summary})
    return EXIT_OK


def cmd_report(args, cfg):
    out = Path(args.out or args.results)
    src = Path(args.results)
    results_dir = src / "results" if (src / "results").is_dir() else src
    notes = ()
    old = src / "report.json"
    if old.exists():
        with open(old, encoding="utf-8") as fh:
            notes = json.load(fh).get("notes", [])
    report = ev.regenerate_report(results_dir, None, cfg.alpha, notes)
    if out != src:
        prepare_dir(out, args.force)
    ev.write_report(report, out)
    emit(args, {"report": str(out / "report.json")})
    return EXIT_OK


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="root seed for all randomness (default 0)")
    g.add_argument("--config", type=Path, help="JSON file overriding configuration defaults")
    g.add_argument("--out", type=Path, help="output path")
    g.add_argument("--force", action="store_true", help="overwrite existing outputs")
    g.add_argument("--quiet", action="store_true", help="suppress progress and result printing")

    parser = _Parser(prog="accelbias", description="Accelerometer bias estimation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--preset", choices=sorted(ds.PRESETS), default="gravity-aligned")
    p.add_argument("--recordings", type=int, help="total number of recordings")
    p.add_argument("--devices", type=int, help="number of simulated devices")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", parents=[common], help="import recording CSV files as a dataset")
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--rate", type=float, help="sample rate in Hz (inferred from t when omitted)")
    p.add_argument("--device", default="dev0")
    p.add_argument("--power-cycle", help="shared power-cycle id (default: one per file)")
    p.add_argument("--reference-direction", type=float, nargs=3, metavar=("X", "Y", "Z"),
                   help="unit gravity direction in the sensor frame, for labelling")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("label", parents=[common], help="compute bias labels and convergence samples")
    p.add_argument("dataset", type=Path)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", parents=[common], help="train OFBENet on a labelled dataset")
    p.add_argument("dataset", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--strict-schedule", action="store_true", default=None,
                   help="stop after early_stop_patience epochs without improvement, ignoring LR reductions")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="estimate the bias of recording files")
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--method", choices=ev.METHODS, default="least-squares")
    p.add_argument("--model", type=Path, help="model file (ofbenet)")
    p.add_argument("--rate", type=float)
    p.add_argument("--per-sample", action="store_true", help="one residual per sample instead of per file mean")
    p.add_argument("--allow-rank-deficient", action="store_true",
                   help="iterative: fall back to the minimum-norm correction")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="k-fold comparison of all methods")
    p.add_argument("dataset", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--folds", type=int)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--methods", nargs="+", choices=ev.METHODS, default=list(ev.METHODS))
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--baseline-mode", choices=("single", "pooled"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="rebuild the report from persisted fold results")
    p.add_argument("results", type=Path, help="evaluation output directory")
    p.set_defaults(func=cmd_report)
    return parser


OVERRIDE_FLAGS = {
    "max_epochs": "max_epochs",
    "strict_schedule": "strict_schedule",
    "folds": "folds",
    "test_fraction": "test_fraction",
    "baseline_mode": "baseline_mode",
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        overrides = {key: getattr(args, flag, None) for flag, key in OVERRIDE_FLAGS.items()}
        cfg = RunConfig.load(args.config, overrides)
        return args.func(args, cfg)
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALGORITHM
    except ALGORITHMIC as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALGORITHM
    except (CalibrationError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
