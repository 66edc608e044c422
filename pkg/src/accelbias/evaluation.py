"""Method comparison: error metrics, paired t-tests and k-fold cross-validation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from . import _rng
from . import dataset as ds
from .calib_iterative import IterativeConfig, solve_iterative
from .calib_ls import LsProblem, TrustRegionConfig, solve_trf
from .errors import CalibrationError, DegenerateVarianceError, InvalidArgumentError
from .ofbenet import network
from .ofbenet.serialize import save_model
from .signal_model import STANDARD_GRAVITY, NoiseModel, OrientationAngles, BiasVector, simulate_segment
from .training import TrainingConfig, train

log = logging.getLogger(__name__)

METHODS = ("least-squares", "iterative", "ofbenet")


# ------------------------------------------------------------------- metrics


def _pairs(truths, predictions):
    y = np.asarray(truths, dtype=float).reshape(-1, 3)
    p = np.asarray(predictions, dtype=float).reshape(-1, 3)
    if y.shape != p.shape:
        raise InvalidArgumentError(f"truths {y.shape} and predictions {p.shape} differ")
    if y.shape[0] == 0:
        raise InvalidArgumentError("no signals to score")
    return y, p


def rmse(truths, predictions) -> float:
    """Root mean over signals of the squared error-vector norm."""
    y, p = _pairs(truths, predictions)
    d = y - p
    return math.sqrt(float(np.einsum("ij,ij->", d, d)) / y.shape[0])


def max_error(truths, predictions) -> float:
    """Largest absolute error over all signals and axes."""
    y, p = _pairs(truths, predictions)
    return float(np.max(np.abs(y - p)))


# --------------------------------------------------------------- statistics


def student_t_cdf(t, dof):
    """Student-t CDF through the regularised incomplete beta function."""
    if dof <= 0:
        raise InvalidArgumentError("degrees of freedom must be positive")
    x = dof / (dof + t * t)
    tail = 0.5 * special.betainc(dof / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def student_t_ppf(q, dof):
    if not 0 < q < 1:
        raise InvalidArgumentError("quantile must lie in (0, 1)")
    if dof <= 0:
        raise InvalidArgumentError("degrees of freedom must be positive")
    return float(special.stdtrit(dof, q))


def critical_value(alpha=0.05, dof=4):
    """Two-sided critical value ``t_{alpha/2, dof}``."""
    return student_t_ppf(1.0 - alpha / 2.0, dof)


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    dof: int
    mean_difference: float
    std_difference: float


def paired_t_test(errors_a, errors_b) -> TTestResult:
    """Two-sided paired t-test on ``d = a - b``."""
    a = np.asarray(errors_a, dtype=float).ravel()
    b = np.asarray(errors_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InvalidArgumentError("paired samples must have equal length")
    if a.size < 2:
        raise InvalidArgumentError("a paired t-test needs at least 2 pairs")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if not sd > 0:
        raise DegenerateVarianceError("per-fold differences have zero variance; the methods are indistinguishable")
    t = mean / (sd / math.sqrt(n))
    dof = n - 1
    p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return TTestResult(t, min(max(p, 0.0), 1.0), dof, mean, sd)


# ------------------------------------------------------------------- results


@dataclass
class MethodResult:
    method: str
    fold: int
    recording_ids: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    truths: list = field(default_factory=list)
    failed: bool = False
    error: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.failed and len(self.predictions) != len(self.truths):
            raise InvalidArgumentError("prediction count must equal the number of test signals")

    @property
    def rmse(self):
        return rmse(self.truths, self.predictions)

    @property
    def max_error(self):
        return max_error(self.truths, self.predictions)

    def to_dict(self):
        d = asdict(self)
        d["predictions"] = [list(map(float, p)) for p in self.predictions]
        d["truths"] = [list(map(float, y)) for y in self.truths]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def filename(self):
        return f"fold{self.fold}_{self.method}.json"


def failed_result(method, fold, exc):
    return MethodResult(method, fold, failed=True, error=f"{type(exc).__name__}: {exc}")


def summarize(results, methods=None, alpha=0.05, notes=()):
    """Aggregate per-fold results into the report tree."""
    methods = list(methods or dict.fromkeys(r.method for r in results))
    by_method = {m: sorted((r for r in results if r.method == m), key=lambda r: r.fold) for m in methods}
    report = {"alpha": alpha, "methods": {}, "comparisons": [], "notes": list(notes)}
    fold_rmse = {}
    for m in methods:
        ok = [r for r in by_method[m] if not r.failed]
        failed = [r.fold for r in by_method[m] if r.failed]
        if failed:
            log.warning("%s failed on folds %s; they are excluded from its statistics", m, failed)
        fold_rmse[m] = {r.fold: r.rmse for r in ok}
        vals = list(fold_rmse[m].values())
        entry = {
            "folds": [r.fold for r in ok],
            "fold_rmse": vals,
            "fold_max_error": [r.max_error for r in ok],
            "failed_folds": failed,
            "errors": {str(r.fold): r.error for r in by_method[m] if r.failed},
            "n_signals": sum(len(r.truths) for r in ok),
            "mean_rmse": float(np.mean(vals)) if vals else None,
            "std_rmse": float(np.std(vals, ddof=1)) if len(vals) > 1 else None,
            "max_error": max((r.max_error for r in ok), default=None),
        }
        report["methods"][m] = entry
    for i, a in enumerate(methods):
        for b in methods[i + 1 :]:
            shared = sorted(set(fold_rmse[a]) & set(fold_rmse[b]))
            cmp = {"baseline": a, "candidate": b, "folds": shared}
            ra = [fold_rmse[a][f] for f in shared]
            rb = [fold_rmse[b][f] for f in shared]
            if ra and sum(ra) > 0:
                cmp["improvement_percent"] = float(100.0 * (np.mean(ra) - np.mean(rb)) / np.mean(ra))
            try:
                t = paired_t_test(ra, rb)
            except DegenerateVarianceError as exc:
                cmp.update(degenerate=True, note=str(exc))
            except InvalidArgumentError as exc:
                cmp.update(degenerate=False, note=str(exc))
            else:
                crit = critical_value(alpha, t.dof)
                cmp.update(
                    degenerate=False,
                    t_statistic=t.t_statistic,
                    p_value=t.p_value,
                    dof=t.dof,
                    critical_value=crit,
                    significant=abs(t.t_statistic) > crit,
                )
            report["comparisons"].append(cmp)
    return report


def comparison(report, baseline, candidate):
    for c in report["comparisons"]:
        if c["baseline"] == baseline and c["candidate"] == candidate:
            return c
    raise KeyError(f"no comparison {baseline} vs {candidate}")


# ------------------------------------------------------------- persistence


def save_results(results, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        ds.dump_json(out / r.filename, r.to_dict())


def load_results(results_dir):
    files = sorted(Path(results_dir).glob("fold*_*.json"))
    if not files:
        raise InvalidArgumentError(f"no per-fold results in {results_dir}")
    out = []
    for f in files:
        with open(f, encoding="utf-8") as fh:
            out.append(MethodResult.from_dict(json.load(fh)))
    return out


def _csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return "" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_report(report, out_dir):
    """``report.json`` plus the figure-data CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.dump_json(out / "report.json", report)
    methods = report["methods"]
    _csv(
        out / "rmse_mean_std.csv",
        ["method", "mean_rmse", "std_rmse", "n_folds", "failed_folds"],
        [[m, _fmt(e["mean_rmse"]), _fmt(e["std_rmse"]), len(e["folds"]), len(e["failed_folds"])] for m, e in methods.items()],
    )
    _csv(
        out / "max_errors.csv",
        ["method", "fold", "rmse", "max_error"],
        [
            [m, f, _fmt(r), _fmt(x)]
            for m, e in methods.items()
            for f, r, x in zip(e["folds"], e["fold_rmse"], e["fold_max_error"])
        ],
    )
    _csv(
        out / "ttest.csv",
        ["baseline", "candidate", "t_statistic", "p_value", "dof", "improvement_percent", "significant"],
        [
            [
                c["baseline"],
                c["candidate"],
                _fmt(c.get("t_statistic")),
                _fmt(c.get("p_value")),
                c.get("dof", ""),
                _fmt(c.get("improvement_percent")),
                c.get("significant", ""),
            ]
            for c in report["comparisons"]
        ],
    )


def regenerate_report(results_dir, out_dir=None, alpha=0.05, notes=()):
    results = load_results(results_dir)
    order = [m for m in METHODS if any(r.method == m for r in results)]
    order += sorted({r.method for r in results} - set(order))
    report = summarize(results, order, alpha, notes)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


# -------------------------------------------------------------- estimators


def estimate_least_squares(window, g=STANDARD_GRAVITY, per_sample=True, config=None):
    problem = LsProblem(window, g) if per_sample else LsProblem.from_segments([window], g)
    return solve_trf(problem, config or TrustRegionConfig())


def estimate_iterative(window, g=STANDARD_GRAVITY, config=None, allow_rank_deficient=True):
    cfg = config or IterativeConfig(per_sample=True)
    return solve_iterative(np.asarray(window), cfg, g, allow_rank_deficient=allow_rank_deficient)


# -------------------------------------------------------- cross-validation


@dataclass
class EvaluationConfig:
    window_len: int = ds.DEFAULT_WINDOW
    validation_fraction: float = 0.15
    g: float = STANDARD_GRAVITY
    seed: int = 0
    alpha: float = 0.05
    # baselines see each test window alone; "pooled" merges a power cycle's poses
    baseline_mode: str = "single"
    allow_rank_deficient: bool = True
    network: network.NetworkConfig = field(default_factory=network.NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.baseline_mode not in ("single", "pooled"):
            raise InvalidArgumentError(f"unknown baseline mode {self.baseline_mode!r}")
        if not 0 < self.validation_fraction < 1:
            raise InvalidArgumentError("validation fraction must lie in (0, 1)")
        if self.network.window_len != self.window_len:
            raise InvalidArgumentError("network window length must match the evaluation window")

    def to_dict(self):
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["training"] = self.training.to_dict()
        return d


def _test_window(rec, window_len):
    x = rec.segment.samples[:window_len]
    if len(x) < window_len:
        raise InvalidArgumentError(f"recording {rec.recording_id} is shorter than one window")
    return x


def _run_baseline(method, test, config):
    preds, diag = [], {"converged": [], "rank": []}
    if config.baseline_mode == "pooled":
        cycles = {}
        for rec in test:
            cycles.setdefault(rec.power_cycle_id, []).append(rec)
        estimates = {}
        for cycle, recs in cycles.items():
            means = [_test_window(r, config.window_len).mean(axis=0) for r in recs]
            if method == "least-squares":
                res = solve_trf(LsProblem(np.array(means), config.g))
            else:
                res = solve_iterative(np.array(means), IterativeConfig(), config.g, config.allow_rank_deficient)
            estimates[cycle] = res
        results = [estimates[r.power_cycle_id] for r in test]
    else:
        results = []
        for rec in test:
            x = _test_window(rec, config.window_len)
            if method == "least-squares":
                results.append(estimate_least_squares(x, config.g))
            else:
                results.append(estimate_iterative(x, config.g, allow_rank_deficient=config.allow_rank_deficient))
    for res in results:
        preds.append(res.bias.as_array())
        diag["converged"].append(bool(res.converged))
        if "rank" in res.diagnostics:
            diag["rank"].append(res.diagnostics["rank"])
    if not diag["rank"]:
        del diag["rank"]
    diag["n_not_converged"] = diag["converged"].count(False)
    return preds, diag


def train_fold_model(train_recs, config: EvaluationConfig, fold_seed, checkpoint=None):
    """Train OFBENet on one fold's training recordings; returns ``(params, log)``."""
    groups = [r.power_cycle_id for r in train_recs]
    ids = [r.recording_id for r in train_recs]
    fit_ids, val_ids = ds.split_validation(ids, config.validation_fraction, fold_seed, groups)
    by_id = {r.recording_id: r for r in train_recs}
    x, y = ds.stack_windows([by_id[i] for i in fit_ids], config.window_len)
    xv, yv = ds.stack_windows([by_id[i] for i in val_ids], config.window_len)
    params = network.init_params(config.network, fold_seed)
    tcfg = TrainingConfig(**{**config.training.to_dict(), "seed": fold_seed})
    return train(params, config.network, x, y, xv, yv, tcfg, checkpoint_path=checkpoint)


def run_cross_validation(recordings, folds, methods=METHODS, config: EvaluationConfig | None = None, out_dir=None, notes=()):
    """Evaluate each method on every fold; returns ``(results, report)``.

    Recordings must be labelled. OFBENet is trained per fold on that fold's
    training recordings only and every method is scored on the first window
    of each test recording. A method that raises on a fold is recorded as a
    failed fold and left out of the aggregate statistics.
    """
    config = config or EvaluationConfig()
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise InvalidArgumentError(f"unknown methods {sorted(unknown)}")
    by_id = {r.recording_id: r for r in recordings}
    out = None if out_dir is None else Path(out_dir)
    results = []
    for fold in sorted(folds, key=lambda f: f.fold_index):
        test = [by_id[i] for i in fold.test_ids]
        truths = [r.label_bias.as_array() for r in test]
        ids = [r.recording_id for r in test]
        for method in methods:
            try:
                if method == "ofbenet":
                    fold_seed = _rng.derive_seed(config.seed, _rng.FOLD_TRAINING, fold.fold_index)
                    ckpt = None
                    if out is not None:
                        (out / "models").mkdir(parents=True, exist_ok=True)
                        ckpt = out / "models" / f"fold{fold.fold_index}.ofbn"
                    params, tlog = train_fold_model([by_id[i] for i in fold.train_ids], config, fold_seed, ckpt)
                    x = np.stack([_test_window(r, config.window_len) for r in test])
                    preds = list(network.predict(params, x, config.network))
                    diag = {"training": tlog.summary(), "seed": fold_seed}
                    if out is not None:
                        save_model(ckpt, params, config.network, seed=fold_seed)
                        tlog.write_csv(out / "models" / f"fold{fold.fold_index}_log.csv")
                else:
                    preds, diag = _run_baseline(method, test, config)
            except (CalibrationError, np.linalg.LinAlgError) as exc:
                log.warning("%s failed on fold %d: %s", method, fold.fold_index, exc)
                results.append(failed_result(method, fold.fold_index, exc))
                continue
            results.append(MethodResult(method, fold.fold_index, ids, [list(map(float, p)) for p in preds], [list(map(float, t)) for t in truths], diagnostics=diag))
    report = summarize(results, list(methods), config.alpha, notes)
    if out is not None:
        save_results(results, out / "results")
        write_report(report, out)
    return results, report


# ---------------------------------------------------------- convergence study


def convergence_study(n_recordings=200, sigma=0.02, n_samples=12000, seed=0, axis=0, sample_rate_hz=150.0,
                      threshold=ds.CONVERGENCE_THRESHOLD, window=ds.CONVERGENCE_WINDOW, bias_range=0.196, g=STANDARD_GRAVITY):
    """Convergence sample of many seeded leveled recordings (-1 when a recording never settles)."""
    out = np.empty(n_recordings, dtype=int)
    for i in range(n_recordings):
        rng = _rng.make_rng(_rng.derive_seed(seed, _rng.CYCLE_BIAS, i))
        bias = BiasVector.from_array(rng.uniform(-bias_range, bias_range, 3))
        seg = simulate_segment(
            OrientationAngles(0.0, 0.0, 0.0), bias, NoiseModel(sigma, _rng.derive_seed(seed, _rng.NOISE, i)), n_samples, sample_rate_hz, g
        )
        res = ds.detect_convergence(seg, axis=axis, threshold=threshold, window=window)
        out[i] = res.converged_at_sample if res.converged else -1
    return out


def histogram_rows(values, bins=20):
    v = np.asarray(values)
    v = v[v >= 0]
    counts, edges = np.histogram(v, bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]
