"""Gradient and Hessian-vector oracles.

Every derivative has an analytic path (used when the problem supplies one and
``cfg.prefer_analytic`` is set) and a central finite-difference path, so the
two can always be cross-checked. With ``prefer_analytic`` off, a second
derivative is obtained by differencing the gradient, which itself stays
analytic when available.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

from .problems import MIXED_KINDS, Batch, BatchSchedule, Game, Problem, as_vector

__all__ = [
    "DerivativeConfig",
    "DEFAULT_CONFIG",
    "DifferentiationError",
    "CheckReport",
    "grad",
    "fd_grad",
    "grad_directional_jacobian",
    "pooled_grad",
    "pooled_hvp",
    "game_grads",
    "game_mixed_directional",
    "check_gradient",
]


class DifferentiationError(ArithmeticError):
    """A loss or gradient went non-finite while differencing."""


@dataclass(frozen=True)
class DerivativeConfig:
    fd_step_scale: float = 1e-5
    tolerance_abs: float = 1e-6
    tolerance_rel: float = 1e-4
    prefer_analytic: bool = True

    def __post_init__(self):
        for name in ("fd_step_scale", "tolerance_abs", "tolerance_rel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    def tolerance(self, scale: float) -> float:
        return max(self.tolerance_abs, self.tolerance_rel * scale)


DEFAULT_CONFIG = DerivativeConfig()
FD_ONLY = DerivativeConfig(prefer_analytic=False)


def _central_diff_scalar(fun, x: np.ndarray, step_scale: float) -> np.ndarray:
    out = np.empty_like(x)
    for k in range(x.shape[0]):
        eps = step_scale * (1.0 + abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += eps
        xm[k] -= eps
        fp, fm = fun(xp), fun(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DifferentiationError(f"non-finite loss while differencing component {k}")
        out[k] = (fp - fm) / (xp[k] - xm[k])
    return out


def fd_grad(problem: Problem, params, batch: Batch, cfg: DerivativeConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Component-wise central difference of the batch loss."""
    theta = problem.check_params(params)
    return _central_diff_scalar(lambda x: problem.loss(x, batch), theta, cfg.fd_step_scale)


def grad(problem: Problem, params, batch: Batch, cfg: DerivativeConfig = DEFAULT_CONFIG) -> np.ndarray:
    """∇_θ E(θ; batch): mean of analytic per-example gradients, else central FD."""
    if cfg.prefer_analytic and problem.example_grad is not None:
        theta = problem.check_params(params)
        g = np.mean(problem.example_grad(theta, batch.inputs, batch.labels), axis=0)
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            raise DifferentiationError(f"non-finite analytic gradient in component {bad}")
        return g
    return fd_grad(problem, params, batch, cfg)


def _first_order(cfg: DerivativeConfig) -> DerivativeConfig:
    # Second derivatives by differencing always use the analytic gradient when
    # one exists: nesting two central differences amplifies rounding by 1/eps².
    return cfg if cfg.prefer_analytic else dataclasses.replace(cfg, prefer_analytic=True)


def _directional_step(theta: np.ndarray, v: np.ndarray, cfg: DerivativeConfig) -> float:
    return cfg.fd_step_scale * (1.0 + np.linalg.norm(theta)) / max(np.linalg.norm(v), 1e-12)


def grad_directional_jacobian(problem: Problem, params, batch: Batch, direction,
                              cfg: DerivativeConfig = DEFAULT_CONFIG) -> np.ndarray:
    """H(θ)·v, the derivative of the gradient field along ``direction``."""
    theta = problem.check_params(params)
    v = as_vector(direction, problem.dim, "direction")
    if cfg.prefer_analytic and problem.example_hvp is not None:
        return np.mean(problem.example_hvp(theta, batch.inputs, batch.labels, v), axis=0)
    if not np.any(v):
        return np.zeros(problem.dim)
    eps = _directional_step(theta, v, cfg)
    gcfg = _first_order(cfg)
    out = (grad(problem, theta + eps * v, batch, gcfg) - grad(problem, theta - eps * v, batch, gcfg)) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise DifferentiationError("non-finite Hessian-vector product")
    return out


def pooled_grad(problem: Problem, params, schedule: BatchSchedule, cfg: DerivativeConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Gradient of the mean-of-batches loss."""
    return np.mean([grad(problem, params, b, cfg) for b in schedule], axis=0)


def pooled_hvp(problem: Problem, params, schedule: BatchSchedule, direction,
               cfg: DerivativeConfig = DEFAULT_CONFIG) -> np.ndarray:
    return np.mean([grad_directional_jacobian(problem, params, b, direction, cfg) for b in schedule], axis=0)


# ---------------------------------------------------------------------------
# games


def _fd_game_grads(game: Game, phi: np.ndarray, theta: np.ndarray, cfg: DerivativeConfig):
    s = cfg.fd_step_scale
    return (
        _central_diff_scalar(lambda p: game.loss_phi(p, theta), phi, s),
        _central_diff_scalar(lambda t: game.loss_phi(phi, t), theta, s),
        _central_diff_scalar(lambda p: game.loss_theta(p, theta), phi, s),
        _central_diff_scalar(lambda t: game.loss_theta(phi, t), theta, s),
    )


def game_grads(game: Game, phi, theta, cfg: DerivativeConfig = DEFAULT_CONFIG):
    """Return ``(∇_φE_φ, ∇_θE_φ, ∇_φE_θ, ∇_θE_θ)``."""
    phi = as_vector(phi, game.dim_phi, "phi")
    theta = as_vector(theta, game.dim_theta, "theta")
    if cfg.prefer_analytic and game.grads is not None:
        out = tuple(np.asarray(g, dtype=np.float64) for g in game.grads(phi, theta))
        if not all(np.all(np.isfinite(g)) for g in out):
            raise DifferentiationError("non-finite analytic game gradient")
        return out
    return _fd_game_grads(game, phi, theta, cfg)


def game_mixed_directional(game: Game, phi, theta, which: str, v,
                           cfg: DerivativeConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Directional derivative of a player's own gradient.

    ``which`` is ``dX_gY``: differentiate ∇_Y E_Y with respect to block X
    along ``v`` (``v`` lives in block X).
    """
    if which not in MIXED_KINDS:
        raise ValueError(f"which must be one of {MIXED_KINDS}, got {which!r}")
    phi = as_vector(phi, game.dim_phi, "phi")
    theta = as_vector(theta, game.dim_theta, "theta")
    wrt_phi = which.startswith("dphi")
    v = as_vector(v, game.dim_phi if wrt_phi else game.dim_theta, "direction")
    if cfg.prefer_analytic and game.mixed is not None:
        return np.asarray(game.mixed(phi, theta, which, v), dtype=np.float64)
    if not np.any(v):
        return np.zeros(game.dim_phi if which.endswith("gphi") else game.dim_theta)
    slot = 0 if which.endswith("gphi") else 3
    base = phi if wrt_phi else theta
    eps = _directional_step(np.concatenate([phi, theta]), v, cfg)

    gcfg = _first_order(cfg)

    def field_at(x):
        gs = game_grads(game, x, theta, gcfg) if wrt_phi else game_grads(game, phi, x, gcfg)
        return gs[slot]

    out = (field_at(base + eps * v) - field_at(base - eps * v)) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise DifferentiationError("non-finite mixed directional derivative")
    return out


# ---------------------------------------------------------------------------
# cross-checks


@dataclass(frozen=True)
class CheckReport:
    max_abs: float
    max_rel: float
    passed: bool
    points_tested: int

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "max_rel": self.max_rel, "passed": self.passed,
                "points_tested": self.points_tested}


class _Tally:
    def __init__(self, cfg: DerivativeConfig):
        self.cfg = cfg
        self.max_abs = 0.0
        self.max_rel = 0.0
        self.passed = True

    def add(self, analytic: np.ndarray, numeric: np.ndarray) -> None:
        diff = float(np.linalg.norm(analytic - numeric))
        scale = float(np.linalg.norm(analytic))
        self.max_abs = max(self.max_abs, diff)
        # Below tol_abs / tol_rel the absolute tolerance governs, so the
        # denominator floors there; this keeps a pass equivalent to max_rel <= tol_rel.
        floor = self.cfg.tolerance_abs / self.cfg.tolerance_rel
        self.max_rel = max(self.max_rel, diff / max(scale, floor))
        if diff > self.cfg.tolerance(scale):
            self.passed = False


def check_gradient(target: Union[Problem, Game], points: Iterable, batch: Optional[Batch] = None,
                   cfg: DerivativeConfig = DEFAULT_CONFIG) -> CheckReport:
    """Compare every analytic derivative against central differences.

    For a :class:`Problem`, ``points`` are parameter vectors and ``batch``
    defaults to the full dataset; gradients and (when present) HVPs along a
    fixed pseudo-random direction are compared. For a :class:`Game`, points
    are ``(phi, theta)`` pairs and all four block gradients and all four mixed
    directional derivatives are compared.
    """
    fd = DerivativeConfig(cfg.fd_step_scale, cfg.tolerance_abs, cfg.tolerance_rel, prefer_analytic=False)
    tally = _Tally(cfg)
    count = 0
    if isinstance(target, Problem):
        if batch is None:
            batch = target.batch(range(target.num_examples))
        for p in points:
            theta = target.check_params(p)
            count += 1
            if target.example_grad is not None:
                tally.add(grad(target, theta, batch, DEFAULT_CONFIG), fd_grad(target, theta, batch, fd))
            if target.example_hvp is not None:
                v = np.cos(np.arange(1, target.dim + 1) * 1.7)
                analytic = grad_directional_jacobian(target, theta, batch, v, DEFAULT_CONFIG)
                tally.add(analytic, grad_directional_jacobian(target, theta, batch, v, fd))
    elif isinstance(target, Game):
        for phi, theta in points:
            count += 1
            if target.grads is not None:
                for a, n in zip(game_grads(target, phi, theta, DEFAULT_CONFIG), game_grads(target, phi, theta, fd)):
                    tally.add(a, n)
            if target.mixed is not None:
                for which in MIXED_KINDS:
                    d = target.dim_phi if which.startswith("dphi") else target.dim_theta
                    v = np.cos(np.arange(1, d + 1) * 1.3)
                    tally.add(game_mixed_directional(target, phi, theta, which, v, DEFAULT_CONFIG),
                              game_mixed_directional(target, phi, theta, which, v, fd))
    else:
        raise TypeError(f"cannot check derivatives of {type(target).__name__}")
    return CheckReport(tally.max_abs, tally.max_rel, tally.passed, count)
