"""Generative model of a stationary accelerometer.

A stationary sensor measures the reaction to gravity expressed in its body
frame plus a constant bias and white noise::

    f = T(roll, pitch, yaw) @ [0, 0, -g] + b + n

Angles are radians everywhere in the library; degrees only appear at the CLI
and in JSON manifests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rng import make_rng
from .errors import InvalidArgumentError

STANDARD_GRAVITY = 9.80665
MG = STANDARD_GRAVITY / 1000.0


def _wrap(angle):
    # maps to [-pi, pi); +pi stays +pi so the closed interval holds
    if angle == math.pi:
        return angle
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class OrientationAngles:
    """Roll, pitch and yaw in radians (body-to-navigation Euler triple)."""

    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("roll", "pitch", "yaw"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InvalidArgumentError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, float(value))

    @classmethod
    def from_degrees(cls, roll=0.0, pitch=0.0, yaw=0.0):
        return cls(math.radians(roll), math.radians(pitch), math.radians(yaw))

    def to_degrees(self):
        return (math.degrees(self.roll), math.degrees(self.pitch), math.degrees(self.yaw))

    def normalized(self):
        """Equivalent attitude with roll, yaw in [-pi, pi] and pitch in [-pi/2, pi/2]."""
        roll, pitch, yaw = _wrap(self.roll), _wrap(self.pitch), _wrap(self.yaw)
        if pitch > math.pi / 2:
            pitch, roll, yaw = math.pi - pitch, roll + math.pi, yaw + math.pi
        elif pitch < -math.pi / 2:
            pitch, roll, yaw = -math.pi - pitch, roll + math.pi, yaw + math.pi
        return OrientationAngles(_wrap(roll), pitch, _wrap(yaw))


@dataclass(frozen=True)
class BiasVector:
    """Per-axis additive bias in m/s^2."""

    bx: float
    by: float
    bz: float

    def __post_init__(self):
        for name in ("bx", "by", "bz"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InvalidArgumentError(f"bias component {name} must be finite")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.shape != (3,):
            raise InvalidArgumentError(f"bias needs 3 components, got {values.shape}")
        return cls(*values.tolist())

    def as_array(self):
        return np.array([self.bx, self.by, self.bz])

    def __array__(self, dtype=None, copy=None):
        return self.as_array() if dtype is None else self.as_array().astype(dtype)

    @property
    def magnitude(self):
        return math.sqrt(self.bx**2 + self.by**2 + self.bz**2)

    @property
    def is_consumer_grade(self):
        # ~100 mg ceiling
        return self.magnitude <= 1.0


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise InvalidArgumentError(f"noise sigma must be >= 0, got {self.sigma!r}")


@dataclass(frozen=True, eq=False)
class SignalSegment:
    """A T x 3 block of specific-force samples (m/s^2) at a fixed rate.

    The sample array is stored read-only.
    """

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, order="C")
        if samples.ndim != 2 or samples.shape[1] != 3:
            raise InvalidArgumentError(f"samples must be T x 3, got shape {samples.shape}")
        if samples.shape[0] < 1:
            raise InvalidArgumentError("a segment needs at least one sample")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgumentError("samples must be finite")
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise InvalidArgumentError(f"sample rate must be > 0, got {self.sample_rate_hz!r}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self):
        return len(self) / self.sample_rate_hz

    def times(self):
        return np.arange(len(self)) / self.sample_rate_hz

    def mean(self, start=0, stop=None):
        return self.samples[start:stop].mean(axis=0)


def rotation_matrix(angles: OrientationAngles) -> np.ndarray:
    """Navigation-to-body transformation for yaw, then pitch, then roll."""
    if not isinstance(angles, OrientationAngles):
        angles = OrientationAngles(*angles)
    sf, cf = math.sin(angles.roll), math.cos(angles.roll)
    st, ct = math.sin(angles.pitch), math.cos(angles.pitch)
    sp, cp = math.sin(angles.yaw), math.cos(angles.yaw)
    return np.array(
        [
            [ct * cp, ct * sp, -st],
            [-cf * sp + sf * st * cp, cf * cp + sf * st * sp, sf * ct],
            [sf * sp + cf * st * cp, -sf * cp + cf * st * sp, cf * ct],
        ]
    )


def gravity_projection(angles: OrientationAngles, g: float = STANDARD_GRAVITY) -> np.ndarray:
    """Specific force seen by a stationary, bias-free sensor. Yaw drops out."""
    if not g > 0:
        raise InvalidArgumentError(f"g must be positive, got {g!r}")
    if not isinstance(angles, OrientationAngles):
        angles = OrientationAngles(*angles)
    st, ct = math.sin(angles.pitch), math.cos(angles.pitch)
    sf, cf = math.sin(angles.roll), math.cos(angles.roll)
    return np.array([st * g, -sf * ct * g, -cf * ct * g])


def simulate_segment(
    angles: OrientationAngles,
    bias: BiasVector,
    noise: NoiseModel,
    n_samples: int,
    sample_rate_hz: float = 150.0,
    g: float = STANDARD_GRAVITY,
) -> SignalSegment:
    if n_samples < 1:
        raise InvalidArgumentError(f"n_samples must be >= 1, got {n_samples}")
    mean = gravity_projection(angles, g) + np.asarray(bias, dtype=float)
    samples = np.broadcast_to(mean, (n_samples, 3)).copy()
    if noise.sigma > 0:
        samples += make_rng(noise.seed).normal(0.0, noise.sigma, size=(n_samples, 3))
    return SignalSegment(samples, sample_rate_hz)


def tilt_induced_error(angles: OrientationAngles, g: float = STANDARD_GRAVITY) -> np.ndarray:
    """Component-wise gap between the tilted and the levelled gravity reading."""
    return np.abs(gravity_projection(angles, g) - np.array([0.0, 0.0, -g]))


def max_allowable_tilt(threshold_mg: float) -> float:
    """Largest single-axis tilt (degrees) whose worst-axis error stays within the threshold.

    A pure pitch or roll tilt by ``a`` moves one horizontal axis by ``g sin(a)``
    and the vertical axis by ``g (1 - cos(a))``; the first dominates below 90
    degrees, so the bound is ``asin(threshold / 1000 mg)``.
    """
    if not (0.0 <= threshold_mg < 1000.0):
        raise InvalidArgumentError(f"threshold must be in [0, 1000) mg, got {threshold_mg!r}")
    return math.degrees(math.asin(threshold_mg / 1000.0))
