"""Modified losses, the shuffling expectation, and GAN interaction coefficients."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import calculus
from .calculus import DEFAULT_CONFIG, DerivativeConfig
from .problems import BatchSchedule, Game, Problem, as_vector

__all__ = [
    "RegularizerBreakdown",
    "CoeffMatrix",
    "GameLossBreakdown",
    "modified_loss_sgd",
    "modified_loss_igr",
    "expected_shuffled_loss",
    "game_modified_losses",
    "gan_interaction_coeffs",
    "MAX_BRUTE_FORCE_N",
]

MAX_BRUTE_FORCE_N = 6


@dataclass(frozen=True)
class RegularizerBreakdown:
    base_loss: float
    norm_term: float
    alignment_term: float

    @property
    def total(self) -> float:
        return self.base_loss + self.norm_term + self.alignment_term

    def to_dict(self) -> dict:
        return {"base_loss": self.base_loss, "norm_term": self.norm_term,
                "alignment_term": self.alignment_term, "total": self.total}


def _batch_grads(problem, theta, schedule, cfg):
    return [calculus.grad(problem, theta, b, cfg) for b in schedule]


def modified_loss_sgd(problem: Problem, theta, schedule: BatchSchedule, h: float, anchor,
                      cfg: DerivativeConfig = DEFAULT_CONFIG) -> RegularizerBreakdown:
    """Modified loss tracked by ``n`` SGD steps started at ``anchor``.

    ``E(θ) + (n h / 4)‖∇E(θ)‖² - (h / n) Σ_{μ≥1} ∇E_μ(θ)ᵀ Σ_{τ<μ} ∇E_τ(anchor)``
    with ``E`` the mean of the batch losses.
    """
    if anchor is None:
        raise ValueError("modified_loss_sgd needs an anchor")
    if not h >= 0.0:
        raise ValueError("h must be nonnegative")
    theta = problem.check_params(theta)
    anchor = as_vector(anchor, problem.dim, "anchor")
    n = schedule.n
    g_now = _batch_grads(problem, theta, schedule, cfg)
    g_anchor = _batch_grads(problem, anchor, schedule, cfg)
    g_mean = np.mean(g_now, axis=0)
    align = 0.0
    prefix = np.zeros(problem.dim)
    for mu in range(1, n):
        prefix = prefix + g_anchor[mu - 1]
        align += float(g_now[mu] @ prefix)
    return RegularizerBreakdown(
        base_loss=problem.pooled_loss(theta, schedule),
        norm_term=0.25 * n * h * float(g_mean @ g_mean),
        alignment_term=-(h / n) * align,
    )


def modified_loss_igr(problem: Problem, theta, schedule: BatchSchedule, h: float,
                      cfg: DerivativeConfig = DEFAULT_CONFIG) -> RegularizerBreakdown:
    """``E(θ) + (h/4)‖∇E(θ)‖²`` on the pooled loss."""
    if not h >= 0.0:
        raise ValueError("h must be nonnegative")
    theta = problem.check_params(theta)
    g = calculus.pooled_grad(problem, theta, schedule, cfg)
    return RegularizerBreakdown(problem.pooled_loss(theta, schedule), 0.25 * h * float(g @ g), 0.0)


def expected_shuffled_loss(problem: Problem, theta, schedule: BatchSchedule, h: float, anchor,
                           method: str = "closed_form",
                           cfg: DerivativeConfig = DEFAULT_CONFIG) -> RegularizerBreakdown:
    """Average of :func:`modified_loss_sgd` over every ordering of the batches.

    ``closed_form`` uses
    ``E + (n h/4)‖∇Ē‖² - (h/2n) (Σ_k g_k)ᵀ(Σ_k a_k) + (h/2n) Σ_k g_kᵀ a_k``
    where ``g_k = ∇E_k(θ)`` and ``a_k = ∇E_k(anchor)``; ``brute_force``
    enumerates all ``n!`` permutations (``n ≤ 6``).
    """
    if method == "brute_force":
        n = schedule.n
        if n > MAX_BRUTE_FORCE_N:
            raise ValueError(f"brute-force enumeration limited to n <= {MAX_BRUTE_FORCE_N}, got {n}")
        parts = [modified_loss_sgd(problem, theta, schedule.permuted(p), h, anchor, cfg)
                 for p in itertools.permutations(range(n))]
        count = math.factorial(n)
        return RegularizerBreakdown(
            base_loss=math.fsum(p.base_loss for p in parts) / count,
            norm_term=math.fsum(p.norm_term for p in parts) / count,
            alignment_term=math.fsum(p.alignment_term for p in parts) / count,
        )
    if method != "closed_form":
        raise ValueError(f"unknown method {method!r}")
    if anchor is None:
        raise ValueError("expected_shuffled_loss needs an anchor")
    theta = problem.check_params(theta)
    anchor = as_vector(anchor, problem.dim, "anchor")
    n = schedule.n
    g_now = np.array(_batch_grads(problem, theta, schedule, cfg))
    g_anchor = np.array(_batch_grads(problem, anchor, schedule, cfg))
    g_mean = g_now.mean(axis=0)
    total_pair = float(g_now.sum(axis=0) @ g_anchor.sum(axis=0))
    diagonal = float(np.sum(g_now * g_anchor))
    return RegularizerBreakdown(
        base_loss=problem.pooled_loss(theta, schedule),
        norm_term=0.25 * n * h * float(g_mean @ g_mean),
        alignment_term=-(h / (2 * n)) * (total_pair - diagonal),
    )


# ---------------------------------------------------------------------------
# games


@dataclass(frozen=True)
class GameLossBreakdown:
    base_loss: float
    self_term: float
    interaction_term: float

    @property
    def total(self) -> float:
        return self.base_loss + self.self_term + self.interaction_term

    def to_dict(self) -> dict:
        return {"base_loss": self.base_loss, "self_term": self.self_term,
                "interaction_term": self.interaction_term, "total": self.total}


def game_modified_losses(game: Game, phi, theta, h: float, anchor_phi, anchor_theta,
                         cfg: DerivativeConfig = DEFAULT_CONFIG):
    """Per-iteration modified losses for simultaneous GD.

    ``Ẽ_φ = E_φ + h(¼‖∇_φE_φ‖² + ½ ∇_θE_φᵀ ∇_θE_θ(anchors))`` and
    ``Ẽ_θ = E_θ + h(¼‖∇_θE_θ‖² + ½ ∇_φE_θᵀ ∇_φE_φ(anchors))``.
    Returns ``(breakdown_phi, breakdown_theta)``.
    """
    if anchor_phi is None or anchor_theta is None:
        raise ValueError("game_modified_losses needs both anchors")
    if not h >= 0.0:
        raise ValueError("h must be nonnegative")
    phi = as_vector(phi, game.dim_phi, "phi")
    theta = as_vector(theta, game.dim_theta, "theta")
    gpp, gtp, gpt, gtt = calculus.game_grads(game, phi, theta, cfg)
    gpp_a, _, _, gtt_a = calculus.game_grads(game, anchor_phi, anchor_theta, cfg)
    bp = GameLossBreakdown(game.loss_phi(phi, theta), 0.25 * h * float(gpp @ gpp), 0.5 * h * float(gtp @ gtt_a))
    bt = GameLossBreakdown(game.loss_theta(phi, theta), 0.25 * h * float(gtt @ gtt), 0.5 * h * float(gpt @ gpp_a))
    return bp, bt


# ---------------------------------------------------------------------------
# GAN coefficients


@dataclass(frozen=True)
class CoeffMatrix:
    """``entries[i, j]``: i indexes the current batch, j the previous one."""

    entries: np.ndarray
    mode: str

    def to_dict(self) -> dict:
        return {"mode": self.mode, "entries": self.entries.tolist()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["current_index"] + [f"prev_{j}" for j in range(self.entries.shape[1])])
        for i, row in enumerate(self.entries):
            w.writerow([i] + [format(x, ".17g") for x in row])
        return buf.getvalue()


def gan_interaction_coeffs(d_current, d_prev, mode: str) -> CoeffMatrix:
    """Weights of the generator-gradient alignment in the discriminator's interaction term.

    non_saturating: ``1 / ((1 - d_current_i) d_prev_j)``;
    saturating: ``1 / ((1 - d_current_i)(1 - d_prev_j))``.
    Probabilities must lie strictly inside (0, 1).
    """
    dc = np.atleast_1d(np.asarray(d_current, dtype=np.float64))
    dp = np.atleast_1d(np.asarray(d_prev, dtype=np.float64))
    if dc.size == 0 or dp.size == 0:
        raise ValueError("probability vectors must be nonempty")
    for name, d in (("d_current", dc), ("d_prev", dp)):
        if not np.all((d > 0.0) & (d < 1.0)):
            raise ValueError(f"{name} must lie strictly inside (0, 1)")
    if mode == "non_saturating":
        entries = 1.0 / np.outer(1.0 - dc, dp)
    elif mode == "saturating":
        entries = 1.0 / np.outer(1.0 - dc, 1.0 - dp)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not np.all(np.isfinite(entries)):
        raise ValueError("coefficient overflow: probabilities too close to the boundary")
    return CoeffMatrix(entries, mode)
