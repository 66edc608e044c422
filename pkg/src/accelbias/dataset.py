"""Recordings, labels, windows and cross-validation folds.

Two synthetic presets mirror the recording geometry of the two hardware
datasets: a levelled set (four devices, 100 recordings each) and a rotated
set (87 recordings per device, one turn-on bias shared by every three
consecutive recordings). Recordings are 80 s at 150 Hz.

Bias model
----------
``"device"`` (default): each virtual device gets a nominal offset drawn
uniformly in +/-``bias_range`` per axis, and every power cycle adds a
Gaussian turn-on term with standard deviation ``turn_on_sigma``.
``"iid"``: every power cycle draws a fresh uniform bias in +/-``bias_range``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _rng
from .errors import (
    InsufficientDataError,
    InvalidArgumentError,
    ParseError,
    StateError,
)
from .signal_model import (
    STANDARD_GRAVITY,
    BiasVector,
    NoiseModel,
    OrientationAngles,
    SignalSegment,
    gravity_projection,
    simulate_segment,
)

MANIFEST_SCHEMA_VERSION = 1
CSV_HEADER = ("t", "fx", "fy", "fz")
LABEL_START = 4500
CONVERGENCE_THRESHOLD = 5e-6
CONVERGENCE_WINDOW = 40
DEFAULT_WINDOW = 3000


@dataclass(frozen=True, eq=False)
class Recording:
    segment: SignalSegment
    recording_id: str
    device_id: str = "dev0"
    power_cycle_id: str = "pc0"
    true_orientation: OrientationAngles | None = None
    label_bias: BiasVector | None = None
    true_bias: BiasVector | None = None
    seed: int | None = None
    reference_direction: tuple | None = None

    def with_label(self, bias):
        return replace(self, label_bias=bias)


@dataclass(frozen=True, eq=False)
class WindowedExample:
    window: np.ndarray
    target: BiasVector
    recording_id: str = ""


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple
    test_ids: tuple

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise InvalidArgumentError(f"train and test overlap: {sorted(overlap)[:5]}")


@dataclass(frozen=True, eq=False)
class ConvergenceResult:
    converged_at_sample: int | None
    running_mean_trace: np.ndarray
    per_axis: tuple = ()

    @property
    def converged(self):
        return self.converged_at_sample is not None


# --------------------------------------------------------------------- CSV I/O


def write_csv(segment: SignalSegment, path):
    """Write ``t,fx,fy,fz`` rows; 17 significant digits round-trip exactly."""
    t = segment.times()
    data = np.column_stack([t, segment.samples])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        np.savetxt(fh, data, fmt="%.17g", delimiter=",")


def _infer_rate(t):
    if len(t) < 2:
        raise InvalidArgumentError("cannot infer the sample rate from a single row; pass sample_rate_hz")
    return 1.0 / float(np.median(np.diff(t)))


def read_csv(path, sample_rate_hz=None) -> SignalSegment:
    path = Path(path)
    rows = []
    times = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", line=1, path=path)
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(f"expected header {','.join(CSV_HEADER)!r}, got {','.join(header)!r}", line=1, path=path)
        prev_t = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line=lineno, path=path)
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise ParseError(f"not a number ({exc})", line=lineno, path=path) from None
            if not all(math.isfinite(v) for v in values):
                bad = CSV_HEADER[[math.isfinite(v) for v in values].index(False)]
                raise ParseError(f"non-finite value in column {bad}", line=lineno, path=path)
            if values[0] <= prev_t:
                raise ParseError("time column is not strictly increasing", line=lineno, path=path)
            prev_t = values[0]
            times.append(values[0])
            rows.append(values[1:])
    if not rows:
        raise ParseError("no data rows", line=2, path=path)
    rate = sample_rate_hz if sample_rate_hz is not None else _infer_rate(np.asarray(times))
    return SignalSegment(np.asarray(rows, dtype=np.float64), rate)


def ingest_csv(path, sample_rate_hz=None, device_id="dev0", power_cycle_id=None, recording_id=None) -> Recording:
    """Load a recording CSV as an unlabelled :class:`Recording`."""
    path = Path(path)
    segment = read_csv(path, sample_rate_hz)
    rid = recording_id or path.stem
    return Recording(segment, rid, device_id, power_cycle_id or rid)


# ----------------------------------------------------------------- convergence


def running_mean(x):
    """Cumulative mean, computed on data re-centred at the first sample."""
    x = np.asarray(x, dtype=np.float64)
    centred = x - x[0]
    k = np.arange(1, len(x) + 1, dtype=np.float64)
    return np.cumsum(centred, axis=0) / (k if x.ndim == 1 else k[:, None])


def _first_settled(derivative, threshold, window):
    # derivative[j] belongs to sample j+1; a window ending at sample k covers samples k-window+1..k
    below = sliding_window_view(np.abs(derivative), window).max(axis=1) < threshold
    below[0] = False  # the first window would include the one-sided start
    hits = np.flatnonzero(below)
    return int(hits[0]) + window if hits.size else None


def detect_convergence(
    segment,
    axis=0,
    threshold=CONVERGENCE_THRESHOLD,
    window=CONVERGENCE_WINDOW,
    derivative="central",
) -> ConvergenceResult:
    """Find where the running mean settles.

    The running mean is differentiated per sample (``"central"`` uses
    ``numpy.gradient``, ``"forward"`` uses consecutive differences) and the
    recording converges at the first sample count ``k`` for which the last
    ``window`` derivative magnitudes are all below ``threshold``. ``axis=None``
    requires all three axes and reports the latest of them.
    """
    samples = segment.samples if isinstance(segment, SignalSegment) else np.asarray(segment, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = samples.shape[0]
    if n <= window:
        raise InsufficientDataError(f"need more than {window} samples, got {n}")
    if derivative not in ("central", "forward"):
        raise InvalidArgumentError(f"unknown derivative rule {derivative!r}")
    axes = range(samples.shape[1]) if axis is None else [axis]
    trace = running_mean(samples) + samples[0]
    hits = []
    for a in axes:
        mu = running_mean(samples[:, a])
        if derivative == "central":
            d = np.gradient(mu)
        else:
            d = np.concatenate([[np.inf], np.diff(mu)])
        hits.append(_first_settled(d, threshold, window))
    at = None if any(h is None for h in hits) else max(hits)
    if axis is not None:
        trace = trace[:, axis]
    return ConvergenceResult(at, trace, tuple(hits))


# -------------------------------------------------------------------- labelling


def label_bias(recording, known_orientation: OrientationAngles, g=STANDARD_GRAVITY, start=LABEL_START) -> BiasVector:
    """Mean of the samples after ``start`` minus the gravity projection."""
    segment = recording.segment if isinstance(recording, Recording) else recording
    if len(segment) <= start:
        raise InsufficientDataError(f"labelling needs more than {start} samples, got {len(segment)}")
    return BiasVector.from_array(segment.mean(start) - gravity_projection(known_orientation, g))


def rodrigues_rotation(source, target):
    """Rotation matrix taking unit vector ``source`` onto unit vector ``target``.

    The antiparallel case rotates by pi about the x axis, or about y when the
    vectors lie along x.
    """
    a = np.asarray(source, dtype=float)
    b = np.asarray(target, dtype=float)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, b))
    if s < 1e-9:
        if c > 0:
            return np.eye(3)
        k = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            k = np.array([0.0, 1.0, 0.0])
        # project out any component along a so k is exactly perpendicular
        k = k - np.dot(k, a) * a
        k /= np.linalg.norm(k)
        return 2.0 * np.outer(k, k) - np.eye(3)
    k = axis / s
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def align_by_reference(segment: SignalSegment, reference_gravity_direction) -> SignalSegment:
    """Rotate every sample so the reference gravity direction lands on -z."""
    ref = np.asarray(reference_gravity_direction, dtype=float)
    if ref.shape != (3,) or not np.all(np.isfinite(ref)):
        raise InvalidArgumentError("reference direction must be a finite 3-vector")
    norm = np.linalg.norm(ref)
    if norm == 0.0:
        raise InvalidArgumentError("reference direction is the zero vector")
    if abs(norm - 1.0) > 1e-6:
        raise InvalidArgumentError(f"reference direction must be unit length, got norm {norm:.9g}")
    R = rodrigues_rotation(ref, [0.0, 0.0, -1.0])
    return SignalSegment(segment.samples @ R.T, segment.sample_rate_hz)


def label_bias_by_reference(recording, reference_gravity_direction, g=STANDARD_GRAVITY, start=LABEL_START) -> BiasVector:
    """Label via alignment: level the signal, take the late mean, rotate the residual back to the body frame."""
    segment = recording.segment if isinstance(recording, Recording) else recording
    if len(segment) <= start:
        raise InsufficientDataError(f"labelling needs more than {start} samples, got {len(segment)}")
    aligned = align_by_reference(segment, reference_gravity_direction)
    level_bias = aligned.mean(start) - np.array([0.0, 0.0, -g])
    R = rodrigues_rotation(np.asarray(reference_gravity_direction, dtype=float), [0.0, 0.0, -1.0])
    return BiasVector.from_array(R.T @ level_bias)


def label_recording(recording: Recording, g=STANDARD_GRAVITY, start=LABEL_START) -> Recording:
    """Attach a label using whatever orientation knowledge the recording carries."""
    if recording.true_orientation is not None:
        return recording.with_label(label_bias(recording, recording.true_orientation, g, start))
    if recording.reference_direction is not None:
        return recording.with_label(label_bias_by_reference(recording, recording.reference_direction, g, start))
    raise StateError(f"recording {recording.recording_id} has no orientation or reference direction")


# -------------------------------------------------------------------- windowing


def window_recording(recording: Recording, window_len=DEFAULT_WINDOW) -> list:
    if window_len < 1:
        raise InvalidArgumentError(f"window length must be >= 1, got {window_len}")
    if recording.label_bias is None:
        raise StateError(f"recording {recording.recording_id} is not labelled")
    n = len(recording.segment) // window_len
    samples = recording.segment.samples
    return [
        WindowedExample(samples[i * window_len : (i + 1) * window_len], recording.label_bias, recording.recording_id)
        for i in range(n)
    ]


def stack_windows(recordings, window_len=DEFAULT_WINDOW, max_windows=None):
    """Windows and targets of many recordings as ``(N, T, 3)`` and ``(N, 3)`` arrays."""
    xs, ys = [], []
    for rec in recordings:
        wins = window_recording(rec, window_len)
        if max_windows is not None:
            wins = wins[:max_windows]
        for w in wins:
            xs.append(w.window)
            ys.append(w.target.as_array())
    if not xs:
        return np.empty((0, window_len, 3)), np.empty((0, 3))
    return np.stack(xs), np.stack(ys)


# ------------------------------------------------------------------------ folds


def _units(ids, groups):
    if groups is None:
        return [(i,) for i in ids]
    by_group = {}
    for rid, grp in zip(ids, groups):
        by_group.setdefault(grp, []).append(rid)
    return [tuple(v) for v in by_group.values()]


def make_folds(recording_ids, k=5, test_fraction=0.2, seed=0, groups=None, strata=None) -> list:
    """Disjoint test sets for ``k`` folds.

    ``groups`` keeps recordings of one power cycle together (so a test set
    holds only unseen orientations and turn-on biases); ``strata`` balances
    the test sets across devices. Test sets never overlap; when
    ``k * test_fraction == 1`` they cover every recording exactly once.
    """
    ids = list(recording_ids)
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("recording ids must be unique")
    if k < 2:
        raise InvalidArgumentError(f"need at least 2 folds, got {k}")
    if not 0 < test_fraction < 1:
        raise InvalidArgumentError(f"test fraction must be in (0, 1), got {test_fraction}")
    if groups is not None and len(groups) != len(ids):
        raise InvalidArgumentError("groups must align with recording ids")
    if strata is not None and len(strata) != len(ids):
        raise InvalidArgumentError("strata must align with recording ids")

    rng = _rng.make_rng(_rng.derive_seed(seed, _rng.FOLDS))
    if strata is None:
        pools = [(ids, groups)]
    else:
        order = sorted(set(strata), key=str)
        pools = []
        for s in order:
            idx = [i for i, st in enumerate(strata) if st == s]
            pools.append(([ids[i] for i in idx], None if groups is None else [groups[i] for i in idx]))

    fold_tests = [[] for _ in range(k)]
    for pool_ids, pool_groups in pools:
        units = _units(pool_ids, pool_groups)
        n_test = max(1, int(round(test_fraction * len(units))))
        if n_test * k > len(units):
            raise InvalidArgumentError(
                f"{len(units)} units cannot supply {k} disjoint test sets of {n_test}"
            )
        perm = rng.permutation(len(units))
        for f in range(k):
            for u in perm[f * n_test : (f + 1) * n_test]:
                fold_tests[f].extend(units[u])

    folds = []
    for f in range(k):
        test = set(fold_tests[f])
        folds.append(
            FoldSplit(f, tuple(i for i in ids if i not in test), tuple(i for i in ids if i in test))
        )
    return folds


def split_validation(train_ids, fraction=0.15, seed=0, groups=None):
    """Hold out ``fraction`` of the training recordings (whole power cycles) for early stopping."""
    ids = list(train_ids)
    units = _units(ids, groups)
    n_val = max(1, int(round(fraction * len(units)))) if len(units) > 1 else 0
    rng = _rng.make_rng(_rng.derive_seed(seed, _rng.VALIDATION))
    perm = rng.permutation(len(units))
    val = {rid for u in perm[:n_val] for rid in units[u]}
    return [i for i in ids if i not in val], [i for i in ids if i in val]


# ------------------------------------------------------------ synthetic datasets


@dataclass
class DatasetConfig:
    preset: str = "gravity-aligned"
    n_devices: int = 4
    recordings_per_device: int = 100
    group_size: int = 1
    sample_rate_hz: float = 150.0
    duration_s: float = 80.0
    sigma: float = 0.02
    g: float = STANDARD_GRAVITY
    bias_model: str = "device"
    bias_range: float = 0.196
    turn_on_sigma: float = 0.03
    pitch_range_deg: tuple = (0.0, 0.0)
    roll_range_deg: tuple = (0.0, 0.0)
    seed: int = 0
    # caps the total, spreading recordings as evenly as possible over devices
    total_recordings: int | None = None

    def __post_init__(self):
        if self.n_devices < 1 or self.recordings_per_device < 1 or self.group_size < 1:
            raise InvalidArgumentError("device, recording and group counts must be >= 1")
        if self.bias_model not in ("device", "iid"):
            raise InvalidArgumentError(f"unknown bias model {self.bias_model!r}")
        if self.sigma < 0 or self.turn_on_sigma < 0 or self.bias_range < 0:
            raise InvalidArgumentError("noise and bias spreads must be >= 0")
        if self.total_recordings is not None and not 1 <= self.total_recordings <= self.n_devices * self.recordings_per_device:
            raise InvalidArgumentError(
                f"total_recordings must lie in [1, {self.n_devices * self.recordings_per_device}]"
            )
        self.pitch_range_deg = tuple(float(v) for v in self.pitch_range_deg)
        self.roll_range_deg = tuple(float(v) for v in self.roll_range_deg)

    @property
    def n_samples(self):
        return int(round(self.duration_s * self.sample_rate_hz))

    def device_quota(self, device):
        if self.total_recordings is None:
            return self.recordings_per_device
        base, extra = divmod(self.total_recordings, self.n_devices)
        return min(self.recordings_per_device, base + (device < extra))

    @property
    def n_recordings(self):
        return sum(self.device_quota(d) for d in range(self.n_devices))

    @property
    def total_hours(self):
        return self.n_recordings * self.duration_s / 3600.0

    def to_dict(self):
        d = asdict(self)
        d["pitch_range_deg"] = list(self.pitch_range_deg)
        d["roll_range_deg"] = list(self.roll_range_deg)
        return d


PRESETS = {
    "gravity-aligned": dict(n_devices=4, recordings_per_device=100, group_size=1),
    "rotated": dict(
        n_devices=2,
        recordings_per_device=87,
        group_size=3,
        pitch_range_deg=(-80.0, 60.0),
        roll_range_deg=(-180.0, 180.0),
    ),
}


def preset_config(name, **overrides) -> DatasetConfig:
    if name not in PRESETS:
        raise InvalidArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    params = dict(PRESETS[name], preset=name)
    params.update(overrides)
    return DatasetConfig(**params)


def _orientation(cfg, seed):
    rng = _rng.make_rng(seed)
    yaw = rng.uniform(-math.pi, math.pi)
    if cfg.pitch_range_deg == (0.0, 0.0) and cfg.roll_range_deg == (0.0, 0.0):
        return OrientationAngles(0.0, 0.0, yaw)
    # a third each of pitch-only, roll-only and combined tilts
    kind = int(rng.integers(3))
    pitch = rng.uniform(*cfg.pitch_range_deg) if kind != 1 else 0.0
    roll = rng.uniform(*cfg.roll_range_deg) if kind != 0 else 0.0
    return OrientationAngles(math.radians(roll), math.radians(pitch), yaw)


def _bias(cfg, device, cycle, nominal):
    rng = _rng.make_rng(_rng.derive_seed(cfg.seed, _rng.CYCLE_BIAS, device, cycle))
    if cfg.bias_model == "iid":
        return rng.uniform(-cfg.bias_range, cfg.bias_range, size=3)
    return nominal + rng.normal(0.0, cfg.turn_on_sigma, size=3)


def generate_dataset(cfg: DatasetConfig) -> list:
    recordings = []
    for d in range(cfg.n_devices):
        nominal = _rng.make_rng(_rng.derive_seed(cfg.seed, _rng.DEVICE_BIAS, d)).uniform(
            -cfg.bias_range, cfg.bias_range, size=3
        )
        for r in range(cfg.device_quota(d)):
            cycle = r // cfg.group_size
            bias = BiasVector.from_array(_bias(cfg, d, cycle, nominal))
            angles = _orientation(cfg, _rng.derive_seed(cfg.seed, _rng.ORIENTATION, d, r))
            seed = _rng.derive_seed(cfg.seed, _rng.NOISE, d, r)
            segment = simulate_segment(
                angles, bias, NoiseModel(cfg.sigma, seed), cfg.n_samples, cfg.sample_rate_hz, cfg.g
            )
            recordings.append(
                Recording(
                    segment,
                    recording_id=f"d{d}_r{r:03d}",
                    device_id=f"dev{d}",
                    power_cycle_id=f"dev{d}_pc{cycle:03d}",
                    true_orientation=angles,
                    true_bias=bias,
                    seed=seed,
                    reference_direction=tuple((gravity_projection(angles, cfg.g) / cfg.g).tolist()),
                )
            )
    return recordings


def generate_gravity_aligned_dataset(cfg: DatasetConfig | None = None, **overrides) -> list:
    return generate_dataset(cfg or preset_config("gravity-aligned", **overrides))


def generate_rotated_dataset(cfg: DatasetConfig | None = None, **overrides) -> list:
    return generate_dataset(cfg or preset_config("rotated", **overrides))


# ------------------------------------------------------------------- manifests


def recording_entry(rec: Recording, file=None):
    entry = {
        "id": rec.recording_id,
        "device_id": rec.device_id,
        "power_cycle_id": rec.power_cycle_id,
        "seed": rec.seed,
        "file": file or f"{rec.recording_id}.csv",
        "n_samples": len(rec.segment),
    }
    if rec.true_bias is not None:
        entry["true_bias"] = rec.true_bias.as_array().tolist()
    if rec.true_orientation is not None:
        entry["true_orientation_deg"] = list(rec.true_orientation.to_degrees())
    if rec.reference_direction is not None:
        entry["reference_direction"] = list(rec.reference_direction)
    return entry


def write_manifest(path, recordings, sample_rate_hz, g, extra=None, files=None):
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "sample_rate_hz": sample_rate_hz,
        "g": g,
    }
    if extra:
        manifest.update(extra)
    manifest["recordings"] = [
        recording_entry(r, None if files is None else files[i]) for i, r in enumerate(recordings)
    ]
    dump_json(path, manifest)
    return manifest


def dump_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_dataset(recordings, out_dir, sample_rate_hz, g, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in recordings:
        write_csv(rec.segment, out / f"{rec.recording_id}.csv")
    return write_manifest(out / "manifest.json", recordings, sample_rate_hz, g, extra)


def load_manifest(dataset_dir):
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise InvalidArgumentError(f"no manifest.json in {dataset_dir}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ParseError(f"unsupported manifest schema {manifest.get('schema_version')!r}", path=path)
    return manifest


def load_dataset(dataset_dir, labels=None) -> list:
    """Read every recording listed in a dataset manifest.

    ``labels`` maps recording id to a 3-sequence and is attached when given.
    """
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    rate = manifest["sample_rate_hz"]
    recordings = []
    for entry in manifest["recordings"]:
        segment = read_csv(root / entry["file"], rate)
        orient = entry.get("true_orientation_deg")
        label = None if labels is None or entry["id"] not in labels else BiasVector.from_array(labels[entry["id"]])
        recordings.append(
            Recording(
                segment,
                recording_id=entry["id"],
                device_id=entry.get("device_id", "dev0"),
                power_cycle_id=entry.get("power_cycle_id", entry["id"]),
                true_orientation=None if orient is None else OrientationAngles.from_degrees(*orient),
                label_bias=label,
                true_bias=None if "true_bias" not in entry else BiasVector.from_array(entry["true_bias"]),
                seed=entry.get("seed"),
                reference_direction=None if "reference_direction" not in entry else tuple(entry["reference_direction"]),
            )
        )
    return recordings

