"""Original and modified continuous-time vector fields.

Every field is built from additive named terms (``base``, ``drift``,
``alignment`` for single-objective fields; ``base``, ``self``,
``interaction`` per player for games) so reports can show the decomposition.
Anchor gradients are evaluated once, at construction, and held constant.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import calculus
from .calculus import DEFAULT_CONFIG, DerivativeConfig
from .problems import BatchSchedule, Game, Problem, as_vector

__all__ = [
    "FLOW_KINDS",
    "VectorField",
    "GameFieldPair",
    "gradient_flow",
    "igr_flow",
    "multi_step_sgd_flow",
    "multi_step_fullbatch_flow",
    "game_gradient_flow",
    "game_bea_flow",
    "game_anchored_flow",
]

FLOW_KINDS = (
    "gradient_flow",
    "igr",
    "multi_step_sgd",
    "multi_step_fullbatch",
    "game_gradient",
    "game_bea",
    "game_anchored",
)


def anchor_digest(*arrays) -> Optional[str]:
    arrays = [a for a in arrays if a is not None]
    if not arrays:
        return None
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def _check_h(h: float) -> float:
    h = float(h)
    if not (h >= 0.0 and np.isfinite(h)):
        raise ValueError(f"learning rate h must be a finite nonnegative number, got {h}")
    return h


@dataclass(frozen=True)
class VectorField:
    """Autonomous field ``θ ↦ θ̇`` for a single-objective problem."""

    kind: str
    h: float
    dim: int
    terms: Callable = field(repr=False)
    anchor: Optional[np.ndarray] = None
    schedule: Optional[BatchSchedule] = field(default=None, repr=False)
    problem_descriptor: dict = field(default_factory=dict, repr=False)

    def components(self, theta) -> dict:
        return self.terms(as_vector(theta, self.dim))

    def __call__(self, theta) -> np.ndarray:
        parts = self.components(theta)
        out = parts["base"].copy()
        for name, value in parts.items():
            if name != "base":
                out += value
        return out

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "h": self.h,
            "n": None if self.schedule is None else self.schedule.n,
            "anchor_digest": anchor_digest(self.anchor),
            "problem_descriptor": self.problem_descriptor,
        }


def gradient_flow(problem: Problem, schedule: BatchSchedule, cfg: DerivativeConfig = DEFAULT_CONFIG) -> VectorField:
    """``θ̇ = -∇E(θ; pooled schedule)``."""
    schedule.warn_if_ragged()

    def terms(theta):
        return {"base": -calculus.pooled_grad(problem, theta, schedule, cfg)}

    return VectorField("gradient_flow", 0.0, problem.dim, terms, None, schedule, problem.descriptor)


def igr_flow(problem: Problem, schedule: BatchSchedule, h: float,
             cfg: DerivativeConfig = DEFAULT_CONFIG) -> VectorField:
    """``θ̇ = -∇E - (h/2) H ∇E`` on the pooled loss."""
    h = _check_h(h)
    schedule.warn_if_ragged()

    def terms(theta):
        g = calculus.pooled_grad(problem, theta, schedule, cfg)
        out = {"base": -g}
        if h > 0.0:
            out["drift"] = -0.5 * h * calculus.pooled_hvp(problem, theta, schedule, g, cfg)
        else:
            out["drift"] = np.zeros_like(g)
        return out

    return VectorField("igr", h, problem.dim, terms, None, schedule, problem.descriptor)


def _multi_step_terms(problem, schedule, h, cfg, prefix_sums):
    n = schedule.n

    def terms(theta):
        g = calculus.pooled_grad(problem, theta, schedule, cfg)
        out = {"base": -g}
        if h == 0.0:
            out["drift"] = np.zeros_like(g)
            out["alignment"] = np.zeros_like(g)
            return out
        out["drift"] = -0.5 * n * h * calculus.pooled_hvp(problem, theta, schedule, g, cfg)
        align = np.zeros_like(g)
        for mu, s in enumerate(prefix_sums(theta)):
            if mu > 0 and np.any(s):
                align += calculus.grad_directional_jacobian(problem, theta, schedule[mu], s, cfg)
        out["alignment"] = (h / n) * align
        return out

    return terms


def _prefix_sums(grads):
    """``S_μ = Σ_{τ<μ} g_τ`` for ``μ = 0..n-1``."""
    sums = [np.zeros_like(grads[0])]
    for g in grads[:-1]:
        sums.append(sums[-1] + g)
    return sums


def multi_step_sgd_flow(problem: Problem, schedule: BatchSchedule, h: float, anchor,
                        cfg: DerivativeConfig = DEFAULT_CONFIG) -> VectorField:
    """Anchored modified flow for ``n`` SGD steps, integrated over time ``n h``.

    ``θ̇ = -∇Ē - (n h / 2) H̄ ∇Ē + (h / n) Σ_{μ≥1} H_μ(θ) Σ_{τ<μ} ∇E_τ(anchor)``,
    the negative gradient of the modified loss in
    :func:`bealab.regularizers.modified_loss_sgd`. Anchor gradients are
    frozen at construction.
    """
    h = _check_h(h)
    if anchor is None:
        raise ValueError("multi_step_sgd_flow needs an anchor (the iterate the n steps start from)")
    anchor = as_vector(anchor, problem.dim, "anchor")
    anchor.setflags(write=False)
    schedule.warn_if_ragged()
    frozen = _prefix_sums([calculus.grad(problem, anchor, b, cfg) for b in schedule])
    for s in frozen:
        s.setflags(write=False)
    terms = _multi_step_terms(problem, schedule, h, cfg, lambda theta: frozen)
    return VectorField("multi_step_sgd", h, problem.dim, terms, anchor, schedule, problem.descriptor)


def multi_step_fullbatch_flow(problem: Problem, schedule: BatchSchedule, h: float,
                              cfg: DerivativeConfig = DEFAULT_CONFIG) -> VectorField:
    """Unanchored variant of :func:`multi_step_sgd_flow`.

    The earlier-batch gradients are evaluated at the current ``θ`` instead of
    a frozen anchor. It matches ``n`` SGD steps to the same order but is not
    a gradient field in general; with identical batches it reduces exactly
    to :func:`igr_flow`.
    """
    h = _check_h(h)
    schedule.warn_if_ragged()

    def sums(theta):
        return _prefix_sums([calculus.grad(problem, theta, b, cfg) for b in schedule])

    terms = _multi_step_terms(problem, schedule, h, cfg, sums)
    return VectorField("multi_step_fullbatch", h, problem.dim, terms, None, schedule, problem.descriptor)


# ---------------------------------------------------------------------------
# games


@dataclass(frozen=True)
class GameFieldPair:
    """Fields for both players, evaluated together at ``(φ, θ)``."""

    kind: str
    h: float
    dim_phi: int
    dim_theta: int
    terms: Callable = field(repr=False)
    anchor_phi: Optional[np.ndarray] = None
    anchor_theta: Optional[np.ndarray] = None
    game_descriptor: dict = field(default_factory=dict, repr=False)

    def components(self, phi, theta):
        phi = as_vector(phi, self.dim_phi, "phi")
        theta = as_vector(theta, self.dim_theta, "theta")
        return self.terms(phi, theta)

    def __call__(self, phi, theta):
        cp, ct = self.components(phi, theta)
        return _sum_terms(cp), _sum_terms(ct)

    def phi_field(self, phi, theta) -> np.ndarray:
        return self(phi, theta)[0]

    def theta_field(self, phi, theta) -> np.ndarray:
        return self(phi, theta)[1]

    def stacked(self, x: np.ndarray) -> np.ndarray:
        dp, dt = self(x[: self.dim_phi], x[self.dim_phi:])
        return np.concatenate([dp, dt])

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "h": self.h,
            "n": 1,
            "anchor_digest": anchor_digest(self.anchor_phi, self.anchor_theta),
            "problem_descriptor": self.game_descriptor,
        }


def _sum_terms(parts: dict) -> np.ndarray:
    out = parts["base"].copy()
    for name, value in parts.items():
        if name != "base":
            out += value
    return out


def game_gradient_flow(game: Game, cfg: DerivativeConfig = DEFAULT_CONFIG) -> GameFieldPair:
    """Simultaneous gradient field ``(-∇_φE_φ, -∇_θE_θ)``."""

    def terms(phi, theta):
        gpp, _, _, gtt = calculus.game_grads(game, phi, theta, cfg)
        return {"base": -gpp}, {"base": -gtt}

    return GameFieldPair("game_gradient", 0.0, game.dim_phi, game.dim_theta, terms, game_descriptor=game.descriptor)


def _game_terms(game, h, cfg, interaction_targets):
    def terms(phi, theta):
        gpp, _, _, gtt = calculus.game_grads(game, phi, theta, cfg)
        if h == 0.0:
            zp, zt = np.zeros_like(gpp), np.zeros_like(gtt)
            return ({"base": -gpp, "self": zp, "interaction": zp.copy()},
                    {"base": -gtt, "self": zt, "interaction": zt.copy()})
        tgt_theta, tgt_phi = interaction_targets(gpp, gtt)
        self_p = -0.5 * h * calculus.game_mixed_directional(game, phi, theta, "dphi_gphi", gpp, cfg)
        self_t = -0.5 * h * calculus.game_mixed_directional(game, phi, theta, "dtheta_gtheta", gtt, cfg)
        inter_p = -0.5 * h * calculus.game_mixed_directional(game, phi, theta, "dtheta_gphi", tgt_theta, cfg)
        inter_t = -0.5 * h * calculus.game_mixed_directional(game, phi, theta, "dphi_gtheta", tgt_phi, cfg)
        return ({"base": -gpp, "self": self_p, "interaction": inter_p},
                {"base": -gtt, "self": self_t, "interaction": inter_t})

    return terms


def game_bea_flow(game: Game, h: float, cfg: DerivativeConfig = DEFAULT_CONFIG) -> GameFieldPair:
    """Modified flow for simultaneous GD.

    ``φ̇ = -∇_φE_φ + h(-¼ ∇_φ‖∇_φE_φ‖² - ½ J_θ(∇_φE_φ) ∇_θE_θ)`` and
    symmetrically for ``θ``.
    """
    h = _check_h(h)
    terms = _game_terms(game, h, cfg, lambda gpp, gtt: (gtt, gpp))
    return GameFieldPair("game_bea", h, game.dim_phi, game.dim_theta, terms, game_descriptor=game.descriptor)


def game_anchored_flow(game: Game, h: float, anchor_phi, anchor_theta,
                       cfg: DerivativeConfig = DEFAULT_CONFIG) -> GameFieldPair:
    """Per-iteration gradient-writable modified flow.

    Same self terms as :func:`game_bea_flow`; the interaction term uses the
    other player's gradient frozen at the anchor, so each player's field is
    ``-∇`` of the scalar in :func:`bealab.regularizers.game_modified_losses`.
    """
    h = _check_h(h)
    if anchor_phi is None or anchor_theta is None:
        raise ValueError("game_anchored_flow needs both anchors (phi_{t-1}, theta_{t-1})")
    ap = as_vector(anchor_phi, game.dim_phi, "anchor_phi")
    at = as_vector(anchor_theta, game.dim_theta, "anchor_theta")
    gpp_a, _, _, gtt_a = calculus.game_grads(game, ap, at, cfg)
    for arr in (ap, at, gpp_a, gtt_a):
        arr.setflags(write=False)
    terms = _game_terms(game, h, cfg, lambda gpp, gtt: (gtt_a, gpp_a))
    return GameFieldPair("game_anchored", h, game.dim_phi, game.dim_theta, terms, ap, at, game.descriptor)
