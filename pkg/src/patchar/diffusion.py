"""Variance-preserving cosine diffusion, velocity targets and x0 recovery.

The forward process is ``z_t = alpha_t x0 + sigma_t eps`` with
``alpha_t = cos(pi t / 2)`` and ``sigma_t = sin(pi t / 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

HALF_PI = 0.5 * math.pi
EPS_MODE_ALPHA_FLOOR = 1e-8


class ScheduleValues(NamedTuple):
    alpha: float
    sigma: float
    d_alpha: float
    d_sigma: float


@dataclass(frozen=True)
class DiffusionPoint:
    z: np.ndarray
    t: float

    def __post_init__(self):
        _check_time(self.t)


@dataclass(frozen=True)
class Prediction:
    mode: str  # "epsilon" | "x0" | "velocity"
    value: np.ndarray

    def __post_init__(self):
        if self.mode not in ("epsilon", "x0", "velocity"):
            raise ValueError(f"unknown prediction mode {self.mode!r}")


def _check_time(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"diffusion time must lie in [0, 1], got {t}")


def _same_shape(*arrays) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def schedule_eval(t: float) -> ScheduleValues:
    _check_time(t)
    c, s = math.cos(HALF_PI * t), math.sin(HALF_PI * t)
    # exact endpoints so that alpha(1) == 0 and sigma(0) == 0 bit for bit
    if t == 1.0:
        c = 0.0
    return ScheduleValues(c, s, -HALF_PI * s, HALF_PI * c)


def forward_diffuse(x0: np.ndarray, t: float, eps: np.ndarray) -> DiffusionPoint:
    _same_shape(x0, eps)
    a, s, _, _ = schedule_eval(t)
    return DiffusionPoint(a * np.asarray(x0) + s * np.asarray(eps), t)


def velocity_target(x0: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    """d/dt of the forward process at fixed (x0, eps)."""
    _same_shape(x0, eps)
    _, _, da, ds = schedule_eval(t)
    return da * np.asarray(x0) + ds * np.asarray(eps)


def to_x0(pred: Prediction, point: DiffusionPoint) -> np.ndarray:
    """Recover the clean-sample estimate from any parameterisation."""
    _same_shape(pred.value, point.z)
    a, s, da, ds = schedule_eval(point.t)
    if pred.mode == "x0":
        return np.asarray(pred.value)
    if pred.mode == "epsilon":
        if a < EPS_MODE_ALPHA_FLOOR:
            raise ZeroDivisionError(f"epsilon-mode x0 recovery is singular at t={point.t}")
        return (point.z - s * pred.value) / a
    # s*da - ds*a == -pi/2 for the cosine schedule, never zero
    return (s * pred.value - ds * point.z) / (s * da - ds * a)


def to_epsilon(pred: Prediction, point: DiffusionPoint) -> np.ndarray:
    """Noise estimate implied by ``pred``; needs sigma(t) > 0 unless already epsilon."""
    if pred.mode == "epsilon":
        return np.asarray(pred.value)
    a, s, _, _ = schedule_eval(point.t)
    if s == 0.0:
        raise ZeroDivisionError("noise estimate undefined at t=0")
    return (point.z - a * to_x0(pred, point)) / s


def flow_matching_loss(v_pred: np.ndarray, x0: np.ndarray, eps: np.ndarray, t: float) -> float:
    _same_shape(v_pred, x0, eps)
    r = np.asarray(v_pred) - velocity_target(x0, eps, t)
    return float(np.mean(r * r))


def schedule_arrays(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised schedule for per-sample times (training batches)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("diffusion time must lie in [0, 1]")
    c, s = np.cos(HALF_PI * t), np.sin(HALF_PI * t)
    c = np.where(t == 1.0, 0.0, c)
    return c, s, -HALF_PI * s, HALF_PI * c
