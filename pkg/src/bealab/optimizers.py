"""Discrete updates: mini-batch SGD over an explicit schedule and simultaneous GD."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import calculus
from .calculus import DEFAULT_CONFIG, DerivativeConfig
from .problems import BatchSchedule, Game, Problem, as_vector

__all__ = ["Trajectory", "GameTrajectory", "OptimizerDivergence", "sgd_steps", "gd_steps", "simultaneous_gd"]


class OptimizerDivergence(ArithmeticError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def _write_csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


@dataclass(frozen=True)
class Trajectory:
    iterates: np.ndarray  # (n + 1, dim)
    h: float
    schedule_digest: str

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def __len__(self) -> int:
        return self.iterates.shape[0]

    def to_csv(self) -> str:
        dim = self.iterates.shape[1]
        header = ["step"] + [f"theta_{k}" for k in range(dim)]
        rows = ([i] + [format(x, ".17g") for x in it] for i, it in enumerate(self.iterates))
        return _write_csv(rows, header)


@dataclass(frozen=True)
class GameTrajectory:
    phis: np.ndarray    # (n + 1, dim_phi)
    thetas: np.ndarray  # (n + 1, dim_theta)
    h: float

    @property
    def final(self):
        return self.phis[-1], self.thetas[-1]

    def __len__(self) -> int:
        return self.phis.shape[0]

    def to_csv(self) -> str:
        header = (["step"] + [f"phi_{k}" for k in range(self.phis.shape[1])]
                  + [f"theta_{k}" for k in range(self.thetas.shape[1])])
        rows = ([i] + [format(x, ".17g") for x in np.concatenate([p, t])]
                for i, (p, t) in enumerate(zip(self.phis, self.thetas)))
        return _write_csv(rows, header)


def sgd_steps(problem: Problem, theta0, h: float, schedule: BatchSchedule,
              cfg: DerivativeConfig = DEFAULT_CONFIG) -> Trajectory:
    """One step ``θ ← θ - h ∇E(θ; X)`` per batch, in schedule order."""
    if not h > 0.0:
        raise ValueError("learning rate h must be positive")
    theta = problem.check_params(theta0)
    its = [theta]
    for mu, batch in enumerate(schedule):
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked just below
            theta = theta - h * calculus.grad(problem, theta, batch, cfg)
        if not np.all(np.isfinite(theta)):
            raise OptimizerDivergence(f"SGD iterate became non-finite at step {mu + 1}", mu + 1)
        its.append(theta)
    return Trajectory(np.array(its), float(h), schedule.digest())


def gd_steps(problem: Problem, theta0, h: float, schedule: BatchSchedule, steps: int,
             cfg: DerivativeConfig = DEFAULT_CONFIG) -> Trajectory:
    """``steps`` full-batch GD steps on the pooled (mean-of-batches) loss."""
    if not h > 0.0:
        raise ValueError("learning rate h must be positive")
    theta = problem.check_params(theta0)
    its = [theta]
    for k in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            theta = theta - h * calculus.pooled_grad(problem, theta, schedule, cfg)
        if not np.all(np.isfinite(theta)):
            raise OptimizerDivergence(f"GD iterate became non-finite at step {k + 1}", k + 1)
        its.append(theta)
    return Trajectory(np.array(its), float(h), "pooled:" + schedule.digest())


def simultaneous_gd(game: Game, phi0, theta0, h: float, n: int,
                    cfg: DerivativeConfig = DEFAULT_CONFIG) -> GameTrajectory:
    """Both players step from the same pre-update state."""
    if not h > 0.0:
        raise ValueError("learning rate h must be positive")
    if n < 1:
        raise ValueError("n must be >= 1")
    phi = as_vector(phi0, game.dim_phi, "phi0")
    theta = as_vector(theta0, game.dim_theta, "theta0")
    phis, thetas = [phi], [theta]
    for k in range(n):
        gpp, _, _, gtt = calculus.game_grads(game, phi, theta, cfg)
        with np.errstate(over="ignore", invalid="ignore"):
            phi, theta = phi - h * gpp, theta - h * gtt
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(theta))):
            raise OptimizerDivergence(f"simultaneous GD became non-finite at step {k + 1}", k + 1)
        phis.append(phi)
        thetas.append(theta)
    return GameTrajectory(np.array(phis), np.array(thetas), float(h))
