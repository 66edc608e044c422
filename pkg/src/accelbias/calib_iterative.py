"""Iterative gravity-norm calibration.

Linearising ``||f_i - b - c||^2 = g^2`` around the current estimate ``b``
gives one linear equation per measurement::

    2 (f_i - b) . c = ||f_i - b||^2 - g^2

The overdetermined system is solved for the correction ``c`` in the least
squares sense, ``b`` is updated by ``c``, and the loop stops once the
correction is smaller than the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calib_ls import CalibrationResult
from .errors import InvalidArgumentError, RankDeficientError
from .signal_model import STANDARD_GRAVITY, BiasVector, SignalSegment


@dataclass(frozen=True)
class IterativeConfig:
    tolerance: float = 1e-9
    max_iterations: int = 100
    # singular values below rcond * largest count as missing directions
    rcond: float = 1e-2
    per_sample: bool = False

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InvalidArgumentError("tolerance must be positive")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if not 0 < self.rcond < 1:
            raise InvalidArgumentError("rcond must lie in (0, 1)")


@dataclass(frozen=True)
class IterativeState:
    bias_estimate: BiasVector
    iteration: int
    last_correction_norm: float


def as_measurements(data, per_sample=False):
    """Stack measurements from segments/arrays; pose means unless ``per_sample``."""
    if isinstance(data, SignalSegment):
        data = [data]
    if isinstance(data, np.ndarray):
        m = np.asarray(data, dtype=float).reshape(-1, 3)
    else:
        arrays = [d.samples if isinstance(d, SignalSegment) else np.asarray(d, dtype=float).reshape(-1, 3) for d in data]
        m = np.concatenate(arrays) if per_sample else np.stack([a.mean(axis=0) for a in arrays])
    if m.shape[0] == 0:
        raise InvalidArgumentError("no measurements")
    if not np.all(np.isfinite(m)):
        raise InvalidArgumentError("measurements must be finite")
    return m


def error_terms(measurements, bias_estimate, g=STANDARD_GRAVITY) -> np.ndarray:
    m = np.asarray(measurements, dtype=float).reshape(-1, 3)
    if m.shape[0] == 0:
        raise InvalidArgumentError("no measurements")
    d = m - np.asarray(bias_estimate, dtype=float)
    return np.einsum("ij,ij->i", d, d) - g * g


def correction_step(measurements, bias_estimate, g=STANDARD_GRAVITY, rcond=1e-2, allow_rank_deficient=False):
    """Least-squares correction ``c`` for the current estimate.

    Returns ``(correction, rank)``. A rank below 3 raises
    :class:`RankDeficientError` unless ``allow_rank_deficient`` is set, in
    which case the minimum-norm correction over the resolvable directions is
    returned.
    """
    m = np.asarray(measurements, dtype=float).reshape(-1, 3)
    d = m - np.asarray(bias_estimate, dtype=float)
    A = 2.0 * d
    e = error_terms(m, bias_estimate, g)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rcond * s[0] if s[0] > 0 else np.zeros_like(s, dtype=bool)
    rank = int(keep.sum())
    if rank < 3 and not allow_rank_deficient:
        raise RankDeficientError(rank)
    coef = (U[:, keep].T @ e) / s[keep]
    return Vt[keep].T @ coef, rank


def solve_iterative(measurements, config: IterativeConfig | None = None, g=STANDARD_GRAVITY, allow_rank_deficient=False) -> CalibrationResult:
    config = config or IterativeConfig()
    m = as_measurements(measurements, config.per_sample)
    b = np.zeros(3)
    norms = []
    ranks = set()
    converged = False
    for it in range(1, config.max_iterations + 1):
        corr, rank = correction_step(m, b, g, config.rcond, allow_rank_deficient)
        ranks.add(rank)
        b = b + corr
        norms.append(float(np.linalg.norm(corr)))
        if norms[-1] < config.tolerance:
            converged = True
            break
    r = np.linalg.norm(m - b, axis=1) - g
    return CalibrationResult(
        BiasVector.from_array(b),
        iterations=it,
        final_cost=float(r @ r),
        converged=converged,
        method="iterative",
        diagnostics={
            "correction_norms": norms,
            "rank": min(ranks),
            "rank_deficient": min(ranks) < 3,
            "n_measurements": int(m.shape[0]),
        },
    )
