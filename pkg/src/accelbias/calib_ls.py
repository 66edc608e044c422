"""Gravity-norm least squares solved with a dogleg trust-region method.

Minimises ``L(b) = sum_i (||f_i - b|| - g)^2`` from a zero initial bias. Each
iteration minimises the Gauss-Newton quadratic model inside a ball of radius
``Delta``; the radius shrinks when the model predicts the actual reduction
badly and grows when a step on the boundary predicts it well. The bias is
unbounded, so no reflection is ever triggered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, SingularResidualError
from .signal_model import STANDARD_GRAVITY, BiasVector, SignalSegment


@dataclass(frozen=True, eq=False)
class LsProblem:
    measurements: np.ndarray
    g: float = STANDARD_GRAVITY

    def __post_init__(self):
        m = np.array(self.measurements, dtype=np.float64).reshape(-1, 3) if np.size(self.measurements) else np.empty((0, 3))
        if m.shape[0] < 3:
            raise InvalidArgumentError(f"need at least 3 measurements for 3 unknowns, got {m.shape[0]}")
        if not np.all(np.isfinite(m)):
            raise InvalidArgumentError("measurements must be finite")
        if not self.g > 0:
            raise InvalidArgumentError("g must be positive")
        m.setflags(write=False)
        object.__setattr__(self, "measurements", m)

    @classmethod
    def from_segments(cls, segments, g=STANDARD_GRAVITY, per_sample=False):
        """One residual per pose mean, or per sample with ``per_sample=True``."""
        if isinstance(segments, SignalSegment):
            segments = [segments]
        arrays = [s.samples if isinstance(s, SignalSegment) else np.asarray(s, dtype=float) for s in segments]
        if per_sample:
            return cls(np.concatenate(arrays), g)
        return cls(np.stack([a.mean(axis=0) for a in arrays]), g)

    @property
    def n(self):
        return self.measurements.shape[0]


@dataclass(frozen=True)
class TrustRegionConfig:
    initial_radius: float = 0.1
    max_radius: float = 100.0
    eta_accept: float = 0.1
    shrink: float = 0.25
    grow: float = 2.0
    tol_gradient: float = 1e-10
    tol_step: float = 1e-12
    max_iterations: int = 200

    def __post_init__(self):
        if min(self.initial_radius, self.max_radius, self.tol_gradient, self.tol_step) <= 0:
            raise InvalidArgumentError("radii and tolerances must be positive")
        if not 0 < self.eta_accept < 1:
            raise InvalidArgumentError("eta_accept must lie in (0, 1)")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    bias: BiasVector
    iterations: int
    final_cost: float
    converged: bool
    method: str = "least-squares"
    diagnostics: dict = field(default_factory=dict)


def residuals(problem: LsProblem, bias) -> np.ndarray:
    d = problem.measurements - np.asarray(bias, dtype=float)
    return np.linalg.norm(d, axis=1) - problem.g


def jacobian(problem: LsProblem, bias) -> np.ndarray:
    d = problem.measurements - np.asarray(bias, dtype=float)
    n = np.linalg.norm(d, axis=1)
    if np.any(n <= 1e-12):
        raise SingularResidualError("a measurement coincides with the bias estimate; the norm is not differentiable")
    return -d / n[:, None]


def cost(problem, bias):
    r = residuals(problem, bias)
    return float(r @ r)


def dogleg_step(J, r, radius):
    """Minimise ``||r + J p||`` subject to ``||p|| <= radius``."""
    grad = J.T @ r
    gn = -np.linalg.lstsq(J, r, rcond=None)[0]
    if np.linalg.norm(gn) <= radius:
        return gn
    Jg = J @ grad
    denom = float(Jg @ Jg)
    gnorm = np.linalg.norm(grad)
    if denom == 0.0 or gnorm == 0.0:
        return gn * (radius / np.linalg.norm(gn))
    cauchy = -(float(grad @ grad) / denom) * grad
    if np.linalg.norm(cauchy) >= radius:
        return -radius * grad / gnorm
    # walk from the Cauchy point towards the Gauss-Newton point until the boundary
    d = gn - cauchy
    a = float(d @ d)
    b = 2.0 * float(cauchy @ d)
    c = float(cauchy @ cauchy) - radius * radius
    tau = (-b + np.sqrt(b * b - 4.0 * a * c)) / (2.0 * a)
    return cauchy + tau * d


def solve_trf(problem: LsProblem, config: TrustRegionConfig | None = None, initial_bias=None) -> CalibrationResult:
    config = config or TrustRegionConfig()
    b = np.zeros(3) if initial_bias is None else np.asarray(initial_bias, dtype=float).copy()
    radius = config.initial_radius
    r = residuals(problem, b)
    J = jacobian(problem, b)
    c = float(r @ r)
    history = {"cost": [c], "step_norm": [], "radius": []}
    converged = False
    reason = "max_iterations"
    it = 0
    for it in range(1, config.max_iterations + 1):
        grad = J.T @ r
        if np.max(np.abs(grad)) <= config.tol_gradient:
            converged, reason, it = True, "gradient", it - 1
            break
        step = dogleg_step(J, r, radius)
        step_norm = float(np.linalg.norm(step))
        if step_norm <= config.tol_step:
            converged, reason = True, "step"
            break
        trial = b + step
        r_new = residuals(problem, trial)
        c_new = float(r_new @ r_new)
        model = r + J @ step
        predicted = c - float(model @ model)
        rho = (c - c_new) / predicted if predicted > 0 else -1.0
        accepted_radius = radius
        if rho < 0.25:
            radius *= config.shrink
        elif rho > 0.75 and step_norm >= 0.99 * radius:
            radius = min(config.grow * radius, config.max_radius)
        if rho > config.eta_accept:
            b, r, c = trial, r_new, c_new
            J = jacobian(problem, b)
            history["cost"].append(c)
            history["step_norm"].append(step_norm)
            history["radius"].append(accepted_radius)
        elif radius <= config.tol_step:
            converged, reason = True, "radius"
            break
    return CalibrationResult(
        BiasVector.from_array(b),
        iterations=it,
        final_cost=c,
        converged=converged,
        method="least-squares",
        diagnostics={"termination": reason, "history": history, "n_residuals": problem.n},
    )
