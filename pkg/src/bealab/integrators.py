"""Fixed-step classical RK4, used as the ground truth for the flows."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .problems import as_vector

__all__ = ["IntegratorConfig", "DivergenceError", "rk4", "step_count", "integrate", "integrate_pair"]

DIVERGENCE_NORM = 1e12


class DivergenceError(ArithmeticError):
    """State became non-finite or exceeded the divergence guard."""

    def __init__(self, message: str, time: Optional[float] = None, step: Optional[int] = None):
        super().__init__(message)
        self.time = time
        self.step = step


@dataclass(frozen=True)
class IntegratorConfig:
    substeps_per_h: int = 64
    method: str = "rk4"

    def __post_init__(self):
        if int(self.substeps_per_h) < 1:
            raise ValueError("substeps_per_h must be >= 1")
        if self.method != "rk4":
            raise ValueError(f"unsupported integration method {self.method!r}")

    def to_dict(self) -> dict:
        return {"substeps_per_h": int(self.substeps_per_h), "method": self.method}


def rk4(fun: Callable[[np.ndarray], np.ndarray], y0: np.ndarray, total_time: float, n_steps: int) -> np.ndarray:
    y = np.array(y0, dtype=np.float64)
    if n_steps == 0 or total_time == 0.0:
        return y
    dt = total_time / n_steps
    for i in range(n_steps):
        k1 = fun(y)
        k2 = fun(y + 0.5 * dt * k1)
        k3 = fun(y + 0.5 * dt * k2)
        k4 = fun(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.linalg.norm(y) > DIVERGENCE_NORM:
            t = (i + 1) * dt
            raise DivergenceError(f"integration diverged at t={t:.6g}", time=t, step=i + 1)
    return y


def step_count(total_time: float, h_unit: float, substeps_per_h: int) -> int:
    """``ceil(total_time / h_unit) * substeps_per_h`` (``h_unit = total_time`` when zero)."""
    if total_time == 0.0:
        return 0
    if not h_unit or h_unit <= 0.0:
        h_unit = total_time
    # guard against n*h/h landing a hair above an integer
    units = max(1, math.ceil(total_time / h_unit - 1e-9))
    return units * int(substeps_per_h)


def integrate(field, initial, total_time: float, cfg: IntegratorConfig = IntegratorConfig(),
              h_unit: Optional[float] = None) -> np.ndarray:
    """Solve ``θ̇ = field(θ)`` from ``initial`` for ``total_time``.

    ``field`` is any callable on a parameter vector; its ``h`` attribute (if
    any) sets the substep density unless ``h_unit`` is given explicitly.
    """
    if not total_time >= 0.0:
        raise ValueError("total_time must be nonnegative")
    dim = getattr(field, "dim", None)
    y0 = as_vector(initial, dim, "initial")
    if total_time == 0.0:
        return y0
    if h_unit is None:
        h_unit = getattr(field, "h", 0.0)
    n = step_count(total_time, h_unit, cfg.substeps_per_h)
    return rk4(field, y0, float(total_time), n)


def integrate_pair(pair, phi0, theta0, total_time: float, cfg: IntegratorConfig = IntegratorConfig(),
                   h_unit: Optional[float] = None):
    """Integrate a :class:`~bealab.flows.GameFieldPair` on the stacked state."""
    if not total_time >= 0.0:
        raise ValueError("total_time must be nonnegative")
    phi0 = as_vector(phi0, pair.dim_phi, "phi0")
    theta0 = as_vector(theta0, pair.dim_theta, "theta0")
    if total_time == 0.0:
        return phi0, theta0
    if h_unit is None:
        h_unit = pair.h
    n = step_count(total_time, h_unit, cfg.substeps_per_h)
    y = rk4(pair.stacked, np.concatenate([phi0, theta0]), float(total_time), n)
    return y[: pair.dim_phi], y[pair.dim_phi:]
