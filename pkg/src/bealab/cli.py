"""Command-line front end.

Subcommands: ``order-check``, ``regularizers``, ``gan-coeffs``,
``check-gradients``. Settings come from built-in defaults, then an optional
JSON ``--config`` file (a previously emitted report works too; its embedded
``run_config`` is used), then command-line flags.

Exit status: 0 success, 1 acceptance band or derivative check failed,
2 usage error, 3 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import calculus, harness, optimizers, regularizers
from .integrators import DivergenceError, IntegratorConfig
from .optimizers import OptimizerDivergence
from .problems import (
    BatchSchedule,
    full_batch,
    make_bilinear_game,
    make_dirac_gan,
    make_logistic,
    make_quadratic,
    make_quadratic_game,
    make_rng,
    quadratic_from_arrays,
    repeat_schedule,
    split_schedule,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

SINGLE_PROBLEMS = ("quadratic", "quadratic_1d", "logistic")
GAME_PROBLEMS = ("bilinear", "quadratic_game", "dirac_gan")
COMMANDS = ("order-check", "regularizers", "gan-coeffs", "check-gradients")


class UsageError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


@dataclass
class RunConfig:
    command: str = "order-check"
    problem: str = "quadratic"
    dim: int = 3
    num_examples: int = 24
    problem_seed: int = 7
    variant: Optional[str] = None
    n: int = 1
    batch_size: Optional[int] = None
    schedule_seed: Optional[int] = 0
    identical_batches: bool = False
    flow: str = "igr"
    ladder: str = "2^-4..2^-9"
    substeps: int = 64
    anchor_policy: str = "start_point"
    anchor: Optional[list] = None
    start: Optional[list] = None
    seed: int = 0
    h: float = 0.0625
    band: Optional[str] = None
    grid: Optional[int] = None
    d_current: Optional[list] = None
    d_prev: Optional[list] = None
    mode: str = "both"
    dirac_steps: int = 0
    out: str = "."

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise UsageError(sorted(unknown)[0], "unknown config field")
        return cls(**data)


# ---------------------------------------------------------------------------
# parsing helpers


_POW = re.compile(r"^\s*2\^(-?\d+)\s*\.\.\s*2\^(-?\d+)\s*$")


def parse_ladder(text) -> tuple:
    """``"2^-4..2^-9"`` or ``"0.1,0.05,..."`` (or a list) to a validated ladder."""
    if isinstance(text, (list, tuple)):
        values = [float(x) for x in text]
    else:
        m = _POW.match(str(text))
        if m:
            a, b = int(m.group(1)), int(m.group(2))
            step = -1 if b < a else 1
            values = [2.0 ** k for k in range(a, b + step, step)]
        else:
            try:
                values = [float(x) for x in str(text).split(",") if x.strip()]
            except ValueError as exc:
                raise UsageError("ladder", f"cannot parse {text!r}") from exc
    try:
        return harness.validate_ladder(values)
    except ValueError as exc:
        raise UsageError("ladder", str(exc)) from exc


def parse_band(text) -> tuple:
    try:
        lo, hi = (float(x) for x in str(text).split(":"))
    except ValueError as exc:
        raise UsageError("band", f"expected LO:HI, got {text!r}") from exc
    if not lo <= hi:
        raise UsageError("band", "LO must not exceed HI")
    return lo, hi


def _float_list(text) -> list:
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).split(",") if x.strip()]


# ---------------------------------------------------------------------------
# building blocks from a config


def build_problem(cfg: RunConfig):
    if cfg.problem == "quadratic":
        return make_quadratic(cfg.dim, cfg.num_examples, cfg.problem_seed)
    if cfg.problem == "quadratic_1d":
        return quadratic_from_arrays([1.0], [0.0], name="quadratic_1d")
    if cfg.problem == "logistic":
        return make_logistic(cfg.dim, cfg.num_examples, cfg.problem_seed)
    raise UsageError("problem", f"{cfg.problem!r} is not a single-objective problem {SINGLE_PROBLEMS}")


def build_game(cfg: RunConfig):
    if cfg.problem == "bilinear":
        return make_bilinear_game()
    if cfg.problem == "dirac_gan":
        return make_dirac_gan(cfg.variant or "non_saturating")
    if cfg.problem == "quadratic_game":
        v = cfg.variant or "general"
        if v not in ("general", "zero_sum", "common_payoff"):
            raise UsageError("variant", f"unknown quadratic game variant {v!r}")
        return make_quadratic_game(cfg.dim, cfg.dim, cfg.problem_seed,
                                   zero_sum=v == "zero_sum", common_payoff=v == "common_payoff")
    raise UsageError("problem", f"{cfg.problem!r} is not a game {GAME_PROBLEMS}")


def build_schedule(problem, cfg: RunConfig) -> BatchSchedule:
    if cfg.n < 1:
        raise UsageError("n", "must be >= 1")
    try:
        if cfg.identical_batches:
            return repeat_schedule(full_batch(problem), cfg.n)
        if problem.num_examples < cfg.n:
            return repeat_schedule(full_batch(problem), cfg.n)
        return split_schedule(problem, cfg.n, cfg.batch_size, cfg.schedule_seed)
    except ValueError as exc:
        raise UsageError("batch_size", str(exc)) from exc


def start_point(dim: int, cfg: RunConfig) -> np.ndarray:
    if cfg.start is not None:
        x = np.asarray(cfg.start, dtype=np.float64)
        if x.shape != (dim,):
            raise UsageError("start", f"expected {dim} values, got {x.size}")
        return x
    return 0.5 * make_rng(cfg.seed).standard_normal(dim)


def anchor_point(x0: np.ndarray, cfg: RunConfig) -> np.ndarray:
    if cfg.anchor_policy == "start_point":
        return x0
    if cfg.anchor_policy == "explicit":
        if cfg.anchor is None:
            raise UsageError("anchor", "anchor_policy 'explicit' needs an anchor vector")
        a = np.asarray(cfg.anchor, dtype=np.float64)
        if a.shape != x0.shape:
            raise UsageError("anchor", f"expected {x0.size} values, got {a.size}")
        return a
    raise UsageError("anchor_policy", f"unknown policy {cfg.anchor_policy!r}")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _jsonable(obj):
    """Strict JSON: non-finite floats become ``null``; numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _write_json(path: Path, data: dict) -> None:
    _write(path, json.dumps(_jsonable(data), indent=2, sort_keys=True, allow_nan=False) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_order_check(cfg: RunConfig) -> int:
    ladder = parse_ladder(cfg.ladder)
    if cfg.substeps < 1:
        raise UsageError("substeps", "must be >= 1")
    icfg = IntegratorConfig(substeps_per_h=cfg.substeps)
    out = Path(cfg.out)
    if cfg.problem in GAME_PROBLEMS:
        if cfg.flow not in harness.GAME_KINDS:
            raise UsageError("flow", f"game flows are {harness.GAME_KINDS}")
        game = build_game(cfg)
        x0 = start_point(game.dim_phi + game.dim_theta, cfg)
        a = anchor_point(x0, cfg)
        report = harness.order_check_game(game, x0[: game.dim_phi], x0[game.dim_phi:], cfg.flow, ladder, icfg,
                                          anchor=(a[: game.dim_phi], a[game.dim_phi:]))
    else:
        if cfg.flow not in harness.SINGLE_KINDS:
            raise UsageError("flow", f"single-objective flows are {harness.SINGLE_KINDS}")
        problem = build_problem(cfg)
        schedule = build_schedule(problem, cfg)
        x0 = start_point(problem.dim, cfg)
        report = harness.order_check_single(problem, x0, schedule, cfg.flow, ladder, icfg,
                                            anchor=anchor_point(x0, cfg))
    expected = report.expected_order
    lo, hi = parse_band(cfg.band) if cfg.band else (expected - 0.25, expected + 0.25)
    passed = report.in_band(lo, hi)
    _write_json(out / "order_check.json", {"run_config": cfg.to_dict(), "report": report.to_dict(),
                                           "band": [lo, hi], "passed": passed})
    _write(out / "order_check.csv", report.to_csv())
    print(f"{cfg.flow}: slope {report.slope:.4f} (r^2 {report.r_squared:.6f}), band [{lo}, {hi}] -> "
          f"{'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_regularizers(cfg: RunConfig) -> int:
    problem = build_problem(cfg)
    n = cfg.n
    if n > regularizers.MAX_BRUTE_FORCE_N:
        raise UsageError("n", f"permutation enumeration limited to n <= {regularizers.MAX_BRUTE_FORCE_N}")
    if not cfg.h >= 0.0:
        raise UsageError("h", "must be nonnegative")
    schedule = build_schedule(problem, cfg)
    theta = start_point(problem.dim, cfg)
    anchor = anchor_point(theta, cfg)
    h = cfg.h
    out = Path(cfg.out)

    rows = []
    for perm in itertools.permutations(range(n)):
        sched = schedule.permuted(perm)
        b = regularizers.modified_loss_sgd(problem, theta, sched, h, anchor)
        end = optimizers.sgd_steps(problem, anchor, h, sched).final if h > 0 else anchor
        rows.append((perm, b, end))
    closed = regularizers.expected_shuffled_loss(problem, theta, schedule, h, anchor, "closed_form")
    brute = regularizers.expected_shuffled_loss(problem, theta, schedule, h, anchor, "brute_force")
    igr = regularizers.modified_loss_igr(problem, theta, schedule, h)

    lines = ["permutation,base_loss,norm_term,alignment_term,total," + ",".join(f"endpoint_{k}" for k in range(problem.dim))]
    for perm, b, end in rows:
        lines.append(",".join(["-".join(map(str, perm)), _fmt(b.base_loss), _fmt(b.norm_term),
                               _fmt(b.alignment_term), _fmt(b.total)] + [_fmt(x) for x in end]))
    _write(out / "regularizers_permutations.csv", "\n".join(lines) + "\n")
    comp = ["method,base_loss,norm_term,alignment_term,total"]
    for name, b in (("closed_form", closed), ("brute_force", brute), ("igr", igr)):
        comp.append(",".join([name, _fmt(b.base_loss), _fmt(b.norm_term), _fmt(b.alignment_term), _fmt(b.total)]))
    _write(out / "regularizers_expectation.csv", "\n".join(comp) + "\n")

    study = None
    if 2 <= n <= harness.MAX_ORDER_STUDY_N and h > 0:
        study = harness.batch_order_study(problem, anchor, schedule, h).to_dict()
    diff = abs(closed.total - brute.total)
    _write_json(out / "regularizers.json", {
        "run_config": cfg.to_dict(),
        "igr": igr.to_dict(),
        "expected": {"closed_form": closed.to_dict(), "brute_force": brute.to_dict(), "abs_diff": diff},
        "permutations": [{"order": list(p), **b.to_dict()} for p, b, _ in rows],
        "batch_order_study": study,
    })
    print(f"n={n} h={h}: expectation closed-form {closed.total:.12g} vs brute-force {brute.total:.12g} "
          f"(|diff| {diff:.3g})")
    return EXIT_OK


def _probability_axes(cfg: RunConfig):
    if cfg.grid is not None:
        if cfg.grid < 1:
            raise UsageError("grid", "grid size must be >= 1")
        p = (np.arange(cfg.grid) + 0.5) / cfg.grid
        return p, p
    dc, dp = _float_list(cfg.d_current), _float_list(cfg.d_prev)
    if not dc or not dp:
        raise UsageError("grid", "give --grid K or both --d-current and --d-prev (nonempty)")
    return np.array(dc), np.array(dp)


def cmd_gan_coeffs(cfg: RunConfig) -> int:
    modes = ("non_saturating", "saturating") if cfg.mode == "both" else (cfg.mode,)
    if any(m not in ("non_saturating", "saturating") for m in modes):
        raise UsageError("mode", f"unknown mode {cfg.mode!r}")
    dc, dp = _probability_axes(cfg)
    out = Path(cfg.out)
    summary = {"run_config": cfg.to_dict(), "matrices": {}}
    for mode in modes:
        try:
            mat = regularizers.gan_interaction_coeffs(dc, dp, mode)
        except ValueError as exc:
            raise UsageError("d_current" if "current" in str(exc) else "d_prev", str(exc)) from exc
        _write(out / f"gan_coeffs_{mode}.csv", mat.to_csv())
        summary["matrices"][mode] = mat.to_dict()
    if cfg.dirac_steps > 0:
        if not cfg.h > 0:
            raise UsageError("h", "a Dirac-GAN trajectory needs h > 0")
        x0 = start_point(2, cfg) if cfg.start is not None else np.array([0.5, 1.0])
        lines = ["step,variant,phi,theta,d_current,d_prev,c_non_saturating,c_saturating"]
        for variant in ("non_saturating", "saturating"):
            traj = optimizers.simultaneous_gd(make_dirac_gan(variant), x0[:1], x0[1:], cfg.h, cfg.dirac_steps)
            d = 1.0 / (1.0 + np.exp(-traj.phis[:, 0] * traj.thetas[:, 0]))
            for t in range(1, len(traj)):
                c_ns = regularizers.gan_interaction_coeffs(d[t], d[t - 1], "non_saturating").entries[0, 0]
                c_s = regularizers.gan_interaction_coeffs(d[t], d[t - 1], "saturating").entries[0, 0]
                lines.append(",".join([str(t), variant, _fmt(traj.phis[t, 0]), _fmt(traj.thetas[t, 0]),
                                       _fmt(d[t]), _fmt(d[t - 1]), _fmt(c_ns), _fmt(c_s)]))
        _write(out / "gan_trajectory.csv", "\n".join(lines) + "\n")
    _write_json(out / "gan_coeffs.json", summary)
    print(f"wrote coefficient matrices ({', '.join(modes)}) of shape {len(dc)}x{len(dp)} to {out}")
    return EXIT_OK


def builtin_targets(seed: int = 0):
    """Every built-in problem and game with a few seeded evaluation points."""
    rng = make_rng(seed)
    out = []
    for prob in (make_quadratic(3, 4, 7), make_logistic(2, 8, 3), quadratic_from_arrays([1.0], [0.0], "quadratic_1d")):
        out.append((prob.descriptor["name"], prob, [rng.standard_normal(prob.dim) for _ in range(5)]))
    for game in (make_bilinear_game(), make_quadratic_game(2, 3, 11), make_quadratic_game(2, 2, 11, zero_sum=True),
                 make_dirac_gan("non_saturating"), make_dirac_gan("saturating")):
        pts = [(rng.standard_normal(game.dim_phi), rng.standard_normal(game.dim_theta)) for _ in range(5)]
        name = game.descriptor["name"] + ("" if not game.descriptor.get("variant") else f"[{game.descriptor['variant']}]")
        out.append((name, game, pts))
    return out


def cmd_check_gradients(cfg: RunConfig) -> int:
    results = {}
    ok = True
    for name, target, pts in builtin_targets(cfg.seed):
        rep = calculus.check_gradient(target, pts)
        results[name] = rep.to_dict()
        ok &= rep.passed
        print(f"{name:32s} max_abs {rep.max_abs:.3e} max_rel {rep.max_rel:.3e} {'PASS' if rep.passed else 'FAIL'}")
    _write_json(Path(cfg.out) / "check_gradients.json", {"run_config": cfg.to_dict(), "reports": results, "passed": ok})
    return EXIT_OK if ok else EXIT_FAIL


HANDLERS = {
    "order-check": cmd_order_check,
    "regularizers": cmd_regularizers,
    "gan-coeffs": cmd_gan_coeffs,
    "check-gradients": cmd_check_gradients,
}


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON config file (or an emitted report)")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--seed", type=int, default=S, help="seed for the start point")
    p.add_argument("--problem", default=S, choices=SINGLE_PROBLEMS + GAME_PROBLEMS)
    p.add_argument("--variant", default=S)
    p.add_argument("--dim", type=int, default=S)
    p.add_argument("--num-examples", dest="num_examples", type=int, default=S)
    p.add_argument("--problem-seed", dest="problem_seed", type=int, default=S)
    p.add_argument("--n", type=int, default=S, help="number of batches / SGD steps")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--schedule-seed", dest="schedule_seed", type=int, default=S)
    p.add_argument("--identical-batches", dest="identical_batches", action="store_true", default=S)
    p.add_argument("--start", default=S, help="comma-separated start point")
    p.add_argument("--anchor", default=S, help="comma-separated anchor (sets anchor policy to explicit)")
    p.add_argument("--h", type=float, default=S, help="learning rate")


def make_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="bealab", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("order-check", help="fit the local-error order of a flow")
    _add_common(p)
    p.add_argument("--flow", default=S)
    p.add_argument("--ladder", default=S, help='e.g. "2^-4..2^-9" or "0.1,0.05,0.025,0.0125"')
    p.add_argument("--substeps", type=int, default=S)
    p.add_argument("--band", default=S, help="acceptance band LO:HI for the slope")

    p = sub.add_parser("regularizers", help="modified losses and the shuffling expectation")
    _add_common(p)

    p = sub.add_parser("gan-coeffs", help="GAN interaction coefficient matrices")
    _add_common(p)
    p.add_argument("--grid", type=int, default=S)
    p.add_argument("--d-current", dest="d_current", default=S)
    p.add_argument("--d-prev", dest="d_prev", default=S)
    p.add_argument("--mode", default=S, choices=("non_saturating", "saturating", "both"))
    p.add_argument("--dirac-steps", dest="dirac_steps", type=int, default=S)

    p = sub.add_parser("check-gradients", help="analytic vs finite-difference derivative checks")
    _add_common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data = {}
    given = vars(args).copy()
    path = given.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError("config", str(exc)) from exc
        data.update(loaded.get("run_config", loaded))
    for key in ("start", "anchor", "d_current", "d_prev"):
        if key in given:
            try:
                given[key] = _float_list(given[key])
            except ValueError as exc:
                raise UsageError(key, str(exc)) from exc
    if "anchor" in given:
        given.setdefault("anchor_policy", "explicit")
    data.update(given)
    data["command"] = args.command
    return RunConfig.from_dict(data)


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"bealab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, OptimizerDivergence, calculus.DifferentiationError) as exc:
        print(f"bealab {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
