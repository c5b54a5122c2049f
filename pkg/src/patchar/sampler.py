"""Reverse-ODE solvers, LM guidance and temperature sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .diffusion import DiffusionPoint, Prediction, schedule_eval, to_x0


@dataclass(frozen=True)
class GuidedScore:
    conditional: np.ndarray
    unconditional: np.ndarray

    def __post_init__(self):
        if np.shape(self.conditional) != np.shape(self.unconditional):
            raise ValueError("conditional and unconditional predictions differ in shape")


VelocityNet = Callable[[np.ndarray, float], Union[np.ndarray, GuidedScore]]


@dataclass(frozen=True)
class SamplerConfig:
    """Temperature ``tau`` in [0, 1], ``nfe`` solver steps, guidance scale ``w``.

    ``time_grid`` defaults to ``nfe + 1`` uniform points from 0 to 1.
    """

    tau: float = 1.0
    nfe: int = 10
    w: float = 0.0
    solver: str = "ddim"
    time_grid: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"temperature must lie in [0, 1], got {self.tau}")
        if self.nfe < 1:
            raise ValueError("nfe must be positive")
        if self.w < 0:
            raise ValueError("guidance scale must be non-negative")
        if self.solver not in ("euler", "ddim"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.time_grid is not None:
            g = np.asarray(self.time_grid, dtype=float)
            if len(g) != self.nfe + 1:
                raise ValueError("time grid needs nfe + 1 points")
            if g[-1] != 1.0 or g[0] < 0.0 or np.any(np.diff(g) <= 0):
                raise ValueError("time grid must increase strictly within [0, 1] and end at 1")

    def grid(self) -> np.ndarray:
        if self.time_grid is not None:
            return np.asarray(self.time_grid, dtype=float)
        return np.linspace(0.0, 1.0, self.nfe + 1)


def guidance_mix(cond: np.ndarray, uncond: np.ndarray, w: float) -> np.ndarray:
    """``(1 + w) * cond - w * uncond``; valid for noise or velocity predictions."""
    if np.shape(cond) != np.shape(uncond):
        raise ValueError("guidance operands differ in shape")
    if w == 0:
        return np.asarray(cond)
    return (1.0 + w) * np.asarray(cond) - w * np.asarray(uncond)


def euler_step(point: DiffusionPoint, v: np.ndarray, dt: float) -> DiffusionPoint:
    if dt <= 0:
        raise ValueError("step size must be positive")
    if point.t - dt < -1e-12:
        raise ValueError(f"step of {dt} from t={point.t} passes t=0")
    return DiffusionPoint(point.z - v * dt, max(point.t - dt, 0.0))


def ddim_step(point: DiffusionPoint, v: np.ndarray, t_next: float) -> DiffusionPoint:
    """Deterministic DDIM update driven by a velocity prediction."""
    if t_next > point.t:
        raise ValueError("DDIM steps must move toward t=0")
    if t_next == point.t:
        return DiffusionPoint(point.z, point.t)
    a, s, _, _ = schedule_eval(point.t)
    if s == 0.0:
        raise ZeroDivisionError("DDIM step undefined from t=0")
    x0 = to_x0(Prediction("velocity", v), point)
    eps = (point.z - a * x0) / s
    a2, s2, _, _ = schedule_eval(t_next)
    return DiffusionPoint(a2 * x0 + s2 * eps, t_next)


def _resolve(pred, w: float) -> np.ndarray:
    if isinstance(pred, GuidedScore):
        return guidance_mix(pred.conditional, pred.unconditional, w)
    return np.asarray(pred)


def renoise_index(grid: Sequence[float], tau: float) -> int | None:
    """Grid index where noise is injected; ``None`` for the deterministic tau=0 case."""
    if tau == 0.0:
        return None
    return int(np.argmin(np.abs(np.asarray(grid) - tau)))


def temperature_sample(
    net: VelocityNet,
    cfg: SamplerConfig,
    shape: tuple[int, ...],
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample by solving the reverse ODE with noise injected at time ``tau``.

    ``net(z, t)`` returns a velocity, or a :class:`GuidedScore` which is
    mixed with ``cfg.w``. With tau=1 the start is Gaussian and no noise is
    injected later; otherwise the start is all zeros and, for tau > 0, the
    step at the grid point nearest tau is replaced by re-diffusing the
    current clean estimate.
    """
    grid = cfg.grid()
    last = len(grid) - 1
    eta = renoise_index(grid, cfg.tau)
    if eta == last:
        x = rng.standard_normal(shape)
    else:
        x = np.zeros(shape)
    point = DiffusionPoint(x, float(grid[last]))
    for n in range(last - 1, -1, -1):
        t_src, t_dst = float(grid[n + 1]), float(grid[n])
        v = _resolve(net(point.z, t_src), cfg.w)
        if n == eta:
            x0 = to_x0(Prediction("velocity", v), DiffusionPoint(point.z, t_src))
            a, s, _, _ = schedule_eval(t_src)
            point = DiffusionPoint(a * x0 + s * rng.standard_normal(shape), t_dst)
        elif cfg.solver == "euler":
            point = euler_step(DiffusionPoint(point.z, t_src), v, t_src - t_dst)
            point = DiffusionPoint(point.z, t_dst)
        else:
            point = ddim_step(DiffusionPoint(point.z, t_src), v, t_dst)
    return point.z
