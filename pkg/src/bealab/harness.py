"""Order-of-error experiments.

For every learning rate on a ladder, run the discrete optimizer, integrate the
chosen flow from the same start for the same time, and record the Euclidean
endpoint gap. The log-log slope of gap against ``h`` estimates the local
error order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import calculus, flows, optimizers, regularizers
from .calculus import DEFAULT_CONFIG, DerivativeConfig
from .integrators import DivergenceError, IntegratorConfig, integrate, integrate_pair
from .optimizers import OptimizerDivergence
from .problems import BatchSchedule, Game, Problem, as_vector

__all__ = [
    "SlopeReport",
    "BatchOrderReport",
    "DEFAULT_LADDER",
    "MIN_LADDER_H",
    "EXPECTED_ORDER",
    "validate_ladder",
    "fit_slope",
    "order_check_single",
    "order_check_game",
    "batch_order_study",
]

DEFAULT_LADDER = tuple(2.0 ** -k for k in range(4, 10))
MIN_LADDER_H = 2.0 ** -12
MAX_ORDER_STUDY_N = 5

EXPECTED_ORDER = {
    "gradient_flow": 2.0,
    "igr": 3.0,
    "multi_step_sgd": 3.0,
    "multi_step_fullbatch": 3.0,
    "base": 2.0,
    "game_bea": 3.0,
    "game_anchored": 3.0,
}

SINGLE_KINDS = ("gradient_flow", "igr", "multi_step_sgd", "multi_step_fullbatch")
GAME_KINDS = ("base", "game_bea", "game_anchored")


def validate_ladder(h_values: Sequence[float], min_points: int = 4) -> tuple:
    hs = tuple(float(h) for h in h_values)
    if len(hs) < min_points:
        raise ValueError(f"ladder needs at least {min_points} values, got {len(hs)}")
    if any(not (h > 0.0 and math.isfinite(h)) for h in hs):
        raise ValueError("ladder values must be positive and finite")
    if any(b >= a for a, b in zip(hs, hs[1:])):
        raise ValueError("ladder must be strictly decreasing in h")
    if hs[-1] < MIN_LADDER_H:
        raise ValueError(f"smallest ladder value {hs[-1]:g} is below 2^-12; errors would hit round-off")
    return hs


def fit_slope(h_values, errors):
    """Least-squares line through ``(log h, log error)``.

    Returns ``(slope, intercept, r_squared)``.
    """
    h = np.asarray(h_values, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if h.shape != e.shape or h.size < 2:
        raise ValueError("need at least two (h, error) pairs of matching length")
    if np.any(e <= 0.0) or np.any(h <= 0.0):
        raise ValueError("h values and errors must be strictly positive")
    x, y = np.log(h), np.log(e)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot == 0.0 else max(0.0, 1.0 - ss_res / ss_tot)
    return float(slope), float(intercept), float(min(r2, 1.0))


@dataclass(frozen=True)
class SlopeReport:
    kind: str
    h_values: tuple
    errors: tuple
    valid: tuple
    slope: float
    intercept: float
    r_squared: float
    expected_order: float
    term_norms: tuple = ()
    player_errors: tuple = ()
    config: dict = field(default_factory=dict)

    @property
    def config_digest(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def in_band(self, lo: float, hi: float) -> bool:
        return lo <= self.slope <= hi

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "h_values": list(self.h_values),
            "errors": [None if not v else e for e, v in zip(self.errors, self.valid)],
            "valid": list(self.valid),
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "expected_order": self.expected_order,
            "term_norms": list(self.term_norms),
            "player_errors": [list(p) for p in self.player_errors],
            "config": self.config,
            "config_digest": self.config_digest,
        }

    def to_csv(self) -> str:
        term_names = sorted({k for t in self.term_norms for k in t})
        header = ["h", "error", "valid"] + [f"norm_{t}" for t in term_names]
        if self.player_errors:
            header += ["error_phi", "error_theta"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for i, (h, e, v) in enumerate(zip(self.h_values, self.errors, self.valid)):
            row = [format(h, ".17g"), format(e, ".17g") if v else "nan", int(v)]
            if self.term_norms:
                row += [format(self.term_norms[i].get(t, float("nan")), ".17g") for t in term_names]
            if self.player_errors:
                row += [format(x, ".17g") for x in self.player_errors[i]]
            w.writerow(row)
        return buf.getvalue()


def _fit_valid(hs, errors, valid):
    pts = [(h, e) for h, e, v in zip(hs, errors, valid) if v and e > 0.0]
    if len(pts) < 4:
        raise DivergenceError(f"only {len(pts)} usable ladder points; a slope fit needs 4")
    return fit_slope([p[0] for p in pts], [p[1] for p in pts])


def _map(fn, items, max_workers):
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _build_single_field(problem, schedule, kind, h, anchor, cfg):
    if kind == "gradient_flow":
        return flows.gradient_flow(problem, schedule, cfg)
    if kind == "igr":
        return flows.igr_flow(problem, schedule, h, cfg)
    if kind == "multi_step_sgd":
        return flows.multi_step_sgd_flow(problem, schedule, h, anchor, cfg)
    if kind == "multi_step_fullbatch":
        return flows.multi_step_fullbatch_flow(problem, schedule, h, cfg)
    raise ValueError(f"flow_kind must be one of {SINGLE_KINDS}, got {kind!r}")


def order_check_single(problem: Problem, theta0, schedule: BatchSchedule, flow_kind: str,
                       h_ladder: Sequence[float] = DEFAULT_LADDER,
                       integrator_cfg: IntegratorConfig = IntegratorConfig(),
                       anchor=None, cfg: DerivativeConfig = DEFAULT_CONFIG,
                       max_workers: int = 1) -> SlopeReport:
    """Local-error slope of ``n`` SGD steps against a flow integrated for ``n h``.

    ``anchor`` defaults to ``theta0`` (only used by ``multi_step_sgd``).
    Ladder points where either side diverges are marked invalid.
    """
    if flow_kind not in SINGLE_KINDS:
        raise ValueError(f"flow_kind must be one of {SINGLE_KINDS}, got {flow_kind!r}")
    hs = validate_ladder(h_ladder)
    theta0 = problem.check_params(theta0)
    anchor = theta0 if anchor is None else as_vector(anchor, problem.dim, "anchor")
    n = schedule.n

    def run(h):
        try:
            discrete = optimizers.sgd_steps(problem, theta0, h, schedule, cfg).final
            fld = _build_single_field(problem, schedule, flow_kind, h, anchor, cfg)
            cont = integrate(fld, theta0, n * h, integrator_cfg, h_unit=h)
        except (DivergenceError, OptimizerDivergence, calculus.DifferentiationError):
            return float("nan"), False, {}
        norms = {k: float(np.linalg.norm(v)) for k, v in fld.components(theta0).items()}
        return float(np.linalg.norm(discrete - cont)), True, norms

    results = _map(run, hs, max_workers)
    errors = tuple(r[0] for r in results)
    valid = tuple(r[1] and math.isfinite(r[0]) for r in results)
    slope, intercept, r2 = _fit_valid(hs, errors, valid)
    config = {
        "flow_kind": flow_kind,
        "problem": problem.descriptor,
        "n": n,
        "schedule_digest": schedule.digest(),
        "theta0": theta0.tolist(),
        "anchor": anchor.tolist(),
        "integrator": integrator_cfg.to_dict(),
    }
    return SlopeReport(flow_kind, hs, errors, valid, slope, intercept, r2, EXPECTED_ORDER[flow_kind],
                       tuple(r[2] for r in results), (), config)


def _build_game_field(game, kind, h, anchor_phi, anchor_theta, cfg):
    if kind == "base":
        return flows.game_gradient_flow(game, cfg)
    if kind == "game_bea":
        return flows.game_bea_flow(game, h, cfg)
    if kind == "game_anchored":
        return flows.game_anchored_flow(game, h, anchor_phi, anchor_theta, cfg)
    raise ValueError(f"flow_kind must be one of {GAME_KINDS}, got {kind!r}")


def order_check_game(game: Game, phi0, theta0, flow_kind: str,
                     h_ladder: Sequence[float] = DEFAULT_LADDER,
                     integrator_cfg: IntegratorConfig = IntegratorConfig(),
                     anchor=None, cfg: DerivativeConfig = DEFAULT_CONFIG,
                     max_workers: int = 1) -> SlopeReport:
    """One simultaneous GD step per ``h`` against the chosen game flow.

    ``anchor`` is a ``(phi, theta)`` pair and defaults to the start point.
    """
    if flow_kind not in GAME_KINDS:
        raise ValueError(f"flow_kind must be one of {GAME_KINDS}, got {flow_kind!r}")
    hs = validate_ladder(h_ladder)
    phi0 = as_vector(phi0, game.dim_phi, "phi0")
    theta0 = as_vector(theta0, game.dim_theta, "theta0")
    ap, at = (phi0, theta0) if anchor is None else anchor
    ap = as_vector(ap, game.dim_phi, "anchor_phi")
    at = as_vector(at, game.dim_theta, "anchor_theta")

    def run(h):
        try:
            dphi, dtheta = optimizers.simultaneous_gd(game, phi0, theta0, h, 1, cfg).final
            pair = _build_game_field(game, flow_kind, h, ap, at, cfg)
            cphi, ctheta = integrate_pair(pair, phi0, theta0, h, integrator_cfg, h_unit=h)
        except (DivergenceError, OptimizerDivergence, calculus.DifferentiationError):
            return float("nan"), False, {}, (float("nan"), float("nan"))
        ep = float(np.linalg.norm(dphi - cphi))
        et = float(np.linalg.norm(dtheta - ctheta))
        comps_p, comps_t = pair.components(phi0, theta0)
        norms = {f"phi_{k}": float(np.linalg.norm(v)) for k, v in comps_p.items()}
        norms.update({f"theta_{k}": float(np.linalg.norm(v)) for k, v in comps_t.items()})
        return math.hypot(ep, et), True, norms, (ep, et)

    results = _map(run, hs, max_workers)
    errors = tuple(r[0] for r in results)
    valid = tuple(r[1] and math.isfinite(r[0]) for r in results)
    slope, intercept, r2 = _fit_valid(hs, errors, valid)
    config = {
        "flow_kind": flow_kind,
        "game": game.descriptor,
        "phi0": phi0.tolist(),
        "theta0": theta0.tolist(),
        "anchor": [ap.tolist(), at.tolist()],
        "integrator": integrator_cfg.to_dict(),
    }
    return SlopeReport(flow_kind, hs, errors, valid, slope, intercept, r2, EXPECTED_ORDER[flow_kind],
                       tuple(r[2] for r in results), tuple(r[3] for r in results), config)


# ---------------------------------------------------------------------------
# batch order


@dataclass(frozen=True)
class BatchOrderReport:
    permutations: tuple
    endpoints: np.ndarray          # (n!, dim)
    alignment_terms: np.ndarray    # (n!,) alignment term at theta0 with anchor theta0
    endpoint_gaps: np.ndarray      # (n!,) distance to the pooled-GD endpoint
    pooled_endpoint: np.ndarray
    mean_endpoint: np.ndarray
    expected_flow_endpoint: np.ndarray
    expected_alignment: float
    rank_correlation: float

    def to_dict(self) -> dict:
        return {
            "permutations": [list(p) for p in self.permutations],
            "endpoints": self.endpoints.tolist(),
            "alignment_terms": self.alignment_terms.tolist(),
            "endpoint_gaps": self.endpoint_gaps.tolist(),
            "pooled_endpoint": self.pooled_endpoint.tolist(),
            "mean_endpoint": self.mean_endpoint.tolist(),
            "expected_flow_endpoint": self.expected_flow_endpoint.tolist(),
            "expected_alignment": self.expected_alignment,
            "rank_correlation": self.rank_correlation,
        }


def _expected_shuffle_field(problem, schedule, h, anchor, cfg):
    """Negative gradient of the closed-form shuffling expectation (anchor frozen)."""
    n = schedule.n
    a = [calculus.grad(problem, anchor, b, cfg) for b in schedule]
    a_sum = np.sum(a, axis=0)

    def fld(theta):
        g = calculus.pooled_grad(problem, theta, schedule, cfg)
        out = -g - 0.5 * n * h * calculus.pooled_hvp(problem, theta, schedule, g, cfg)
        for b, ak in zip(schedule, a):
            d = a_sum - ak
            if np.any(d):
                out += (h / (2 * n)) * calculus.grad_directional_jacobian(problem, theta, b, d, cfg)
        return out

    fld.dim = problem.dim
    return fld


def batch_order_study(problem: Problem, theta0, schedule: BatchSchedule, h: float,
                      integrator_cfg: IntegratorConfig = IntegratorConfig(),
                      cfg: DerivativeConfig = DEFAULT_CONFIG) -> BatchOrderReport:
    """Run SGD under every ordering of the schedule (``2 ≤ n ≤ 5``).

    Alignment terms are evaluated at ``theta0`` with anchor ``theta0``. The
    mean endpoint over orderings is compared with the endpoint of the flow of
    the expected (shuffled) modified loss.
    """
    n = schedule.n
    if n < 2:
        raise ValueError("batch_order_study needs at least two batches")
    if n > MAX_ORDER_STUDY_N:
        raise ValueError(f"batch_order_study enumerates n! orders; n <= {MAX_ORDER_STUDY_N} required, got {n}")
    theta0 = problem.check_params(theta0)
    perms = tuple(itertools.permutations(range(n)))
    endpoints, aligns = [], []
    for p in perms:
        sched = schedule.permuted(p)
        endpoints.append(optimizers.sgd_steps(problem, theta0, h, sched, cfg).final)
        aligns.append(regularizers.modified_loss_sgd(problem, theta0, sched, h, theta0, cfg).alignment_term)
    endpoints = np.array(endpoints)
    aligns = np.array(aligns)
    pooled = optimizers.gd_steps(problem, theta0, h, schedule, n, cfg).final
    gaps = np.linalg.norm(endpoints - pooled[None, :], axis=1)
    if np.ptp(aligns) == 0.0 or np.ptp(gaps) == 0.0:
        rho = float("nan")
    else:
        rho = float(stats.spearmanr(aligns, gaps).statistic)
    expected = regularizers.expected_shuffled_loss(problem, theta0, schedule, h, theta0, "closed_form", cfg)
    flow_end = integrate(_expected_shuffle_field(problem, schedule, h, theta0, cfg), theta0, n * h,
                         integrator_cfg, h_unit=h)
    return BatchOrderReport(perms, endpoints, aligns, gaps, pooled, endpoints.mean(axis=0), flow_end,
                            expected.alignment_term, rho)
