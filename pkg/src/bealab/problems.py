"""Differentiable test problems: per-example losses and two-player games.

Single-objective problems carry a synthetic dataset of fixed-shape example
payloads; the loss on a batch is always the mean of the per-example losses.
Games are two scalar losses ``(loss_phi, loss_theta)`` over a pair of
parameter blocks.

All randomness goes through ``numpy.random.Generator(PCG64(seed))`` created
locally from an explicit 64-bit seed; nothing touches global RNG state.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Batch",
    "BatchSchedule",
    "Problem",
    "Game",
    "as_vector",
    "make_rng",
    "make_quadratic",
    "quadratic_from_arrays",
    "make_logistic",
    "make_quadratic_game",
    "quadratic_game_from_arrays",
    "make_bilinear_game",
    "make_dirac_gan",
    "full_batch",
    "split_schedule",
    "repeat_schedule",
    "problem_from_descriptor",
    "game_from_descriptor",
]


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator from an explicit 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_vector(values, dim: Optional[int] = None, name: str = "params") -> np.ndarray:
    """Validate and copy a parameter vector.

    Returns a fresh 1-D float64 array. Raises ``ValueError`` on a dimension
    mismatch or any NaN/Inf entry.
    """
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class Batch:
    """A nonempty set of examples.

    ``inputs`` has shape ``(B, k)``: one fixed-length payload row per example.
    ``labels`` is ``None`` or a length-``B`` array of ``±1``.
    """

    id: int
    inputs: np.ndarray
    labels: Optional[np.ndarray] = None
    indices: tuple = ()

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[0] == 0:
            raise ValueError("a batch needs a nonempty (B, k) payload array")
        inputs.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
            if labels.shape[0] != inputs.shape[0]:
                raise ValueError("labels and inputs disagree on batch size")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def digest(self) -> str:
        extra = () if self.labels is None else (self.labels,)
        return _digest(self.inputs, *extra)


@dataclass(frozen=True)
class BatchSchedule:
    """Ordered batches consumed one per SGD step."""

    batches: tuple

    def __post_init__(self):
        batches = tuple(self.batches)
        if len(batches) == 0:
            raise ValueError("a schedule needs at least one batch")
        ids = [b.id for b in batches]
        if len(set(ids)) != len(ids):
            raise ValueError(f"batch ids must be unique within a schedule, got {ids}")
        shapes = {b.inputs.shape[1] for b in batches}
        if len(shapes) != 1:
            raise ValueError("all batches in a schedule must share one payload width")
        object.__setattr__(self, "batches", batches)

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def __getitem__(self, i):
        return self.batches[i]

    @property
    def n(self) -> int:
        return len(self.batches)

    def permuted(self, order: Sequence[int]) -> "BatchSchedule":
        if sorted(order) != list(range(len(self))):
            raise ValueError(f"{order!r} is not a permutation of range({len(self)})")
        return BatchSchedule(tuple(self.batches[i] for i in order))

    def digest(self) -> str:
        h = hashlib.sha256()
        for b in self.batches:
            h.update(f"{b.id}:{b.digest()};".encode())
        return h.hexdigest()[:16]

    def warn_if_ragged(self) -> None:
        sizes = {b.size for b in self.batches}
        if len(sizes) > 1:
            warnings.warn(
                f"batch sizes differ across the schedule ({sorted(sizes)}); "
                "pooled losses use the mean of batch means",
                stacklevel=3,
            )


# ---------------------------------------------------------------------------
# single-objective problems


@dataclass(frozen=True)
class Problem:
    """Per-example differentiable loss with batch-mean semantics.

    The callables are vectorised over a batch: given ``theta`` of shape
    ``(dim,)``, a payload array ``(B, k)`` and labels (or ``None``),
    ``example_loss`` returns ``(B,)``, ``example_grad`` returns ``(B, dim)``
    and ``example_hvp`` (extra argument ``v``) returns ``(B, dim)``.
    """

    dim: int
    example_loss: Callable
    example_grad: Optional[Callable]
    example_hvp: Optional[Callable]
    inputs: np.ndarray
    labels: Optional[np.ndarray]
    descriptor: dict = field(default_factory=dict)

    @property
    def num_examples(self) -> int:
        return self.inputs.shape[0]

    def check_params(self, theta) -> np.ndarray:
        return as_vector(theta, self.dim)

    def loss(self, theta: np.ndarray, batch: Batch) -> float:
        return float(np.mean(self.example_loss(theta, batch.inputs, batch.labels)))

    def example_losses(self, theta: np.ndarray, batch: Batch) -> np.ndarray:
        return self.example_loss(theta, batch.inputs, batch.labels)

    def pooled_loss(self, theta: np.ndarray, schedule: BatchSchedule) -> float:
        """Mean over batches of the batch-mean loss."""
        return float(np.mean([self.loss(theta, b) for b in schedule]))

    def batch(self, indices: Sequence[int], id: int = 0) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Batch(id=id, inputs=self.inputs[idx], labels=labels, indices=tuple(int(i) for i in idx))


def _quadratic_problem(matrices: np.ndarray, centers: np.ndarray, descriptor: dict) -> Problem:
    num, dim = centers.shape
    payload = np.concatenate([centers, matrices.reshape(num, dim * dim)], axis=1)
    payload.setflags(write=False)

    def unpack(inputs):
        c = inputs[:, :dim]
        a = inputs[:, dim:].reshape(-1, dim, dim)
        return a, c

    def loss(theta, inputs, labels=None):
        a, c = unpack(inputs)
        r = theta[None, :] - c
        return 0.5 * np.einsum("bi,bij,bj->b", r, a, r)

    def grad(theta, inputs, labels=None):
        a, c = unpack(inputs)
        return np.einsum("bij,bj->bi", a, theta[None, :] - c)

    def hvp(theta, inputs, labels, v):
        a, _ = unpack(inputs)
        return np.einsum("bij,j->bi", a, v)

    return Problem(
        dim=dim,
        example_loss=loss,
        example_grad=grad,
        example_hvp=hvp,
        inputs=payload,
        labels=None,
        descriptor=descriptor,
    )


def make_quadratic(dim: int, num_examples: int, seed: int) -> Problem:
    """Random per-example quadratics ``0.5 (θ - c_i)ᵀ A_i (θ - c_i)``.

    ``A_i = M Mᵀ + 0.1 I`` with ``M`` uniform on ``(-1, 1)``; centers are
    uniform on ``(-1, 1)``. Gradient and Hessian-vector product are analytic.
    """
    if dim < 1 or num_examples < 1:
        raise ValueError("dim and num_examples must be >= 1")
    rng = make_rng(seed)
    m = rng.uniform(-1.0, 1.0, size=(num_examples, dim, dim))
    a = m @ np.transpose(m, (0, 2, 1)) + 0.1 * np.eye(dim)[None]
    c = rng.uniform(-1.0, 1.0, size=(num_examples, dim))
    desc = {"name": "quadratic", "dim": dim, "num_examples": num_examples, "seed": int(seed), "variant": None}
    return _quadratic_problem(a, c, desc)


def quadratic_from_arrays(matrices, centers, name: str = "quadratic_explicit") -> Problem:
    """Quadratic problem with explicit ``A_i`` (``(N, d, d)``) and ``c_i`` (``(N, d)``).

    Scalars are accepted for 1-D problems: ``quadratic_from_arrays([1, 1], [0, 2])``.
    """
    c = np.asarray(centers, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    a = np.asarray(matrices, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None, None]
    num, dim = c.shape
    if a.shape != (num, dim, dim):
        raise ValueError(f"matrices have shape {a.shape}, expected {(num, dim, dim)}")
    if not np.allclose(a, np.transpose(a, (0, 2, 1))):
        raise ValueError("quadratic matrices must be symmetric")
    desc = {
        "name": name,
        "dim": dim,
        "num_examples": num,
        "seed": None,
        "variant": None,
        "matrices": a.tolist(),
        "centers": c.tolist(),
    }
    return _quadratic_problem(a, c, desc)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def make_logistic(num_features: int, num_examples: int, seed: int) -> Problem:
    """Synthetic logistic regression without bias.

    Features are standard normal, labels ``±1`` drawn from a logistic model
    with a random true weight. Loss is ``log(1 + exp(-y θ·x))``. Only the
    gradient is analytic; Hessian-vector products go through finite
    differences.
    """
    if num_features < 1 or num_examples < 1:
        raise ValueError("num_features and num_examples must be >= 1")
    rng = make_rng(seed)
    x = rng.standard_normal((num_examples, num_features))
    w_true = rng.standard_normal(num_features)
    y = np.where(rng.uniform(size=num_examples) < _sigmoid(x @ w_true), 1.0, -1.0)
    x.setflags(write=False)
    y.setflags(write=False)

    def loss(theta, inputs, labels):
        return np.logaddexp(0.0, -labels * (inputs @ theta))

    def grad(theta, inputs, labels):
        s = _sigmoid(-labels * (inputs @ theta))
        return (-labels * s)[:, None] * inputs

    desc = {"name": "logistic", "dim": num_features, "num_examples": num_examples, "seed": int(seed), "variant": None}
    return Problem(
        dim=num_features,
        example_loss=loss,
        example_grad=grad,
        example_hvp=None,
        inputs=x,
        labels=y,
        descriptor=desc,
    )


# ---------------------------------------------------------------------------
# schedules


def full_batch(problem: Problem, id: int = 0) -> Batch:
    return problem.batch(range(problem.num_examples), id=id)


def split_schedule(problem: Problem, n: int, batch_size: Optional[int] = None, seed: Optional[int] = None) -> BatchSchedule:
    """Partition the dataset into ``n`` disjoint batches.

    With ``seed`` the examples are shuffled first. ``batch_size`` defaults to
    ``num_examples // n``; leftover examples are dropped.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    size = batch_size if batch_size is not None else problem.num_examples // n
    if size < 1 or size * n > problem.num_examples:
        raise ValueError(f"cannot cut {n} batches of size {size} from {problem.num_examples} examples")
    order = np.arange(problem.num_examples)
    if seed is not None:
        order = make_rng(seed).permutation(problem.num_examples)
    return BatchSchedule(tuple(problem.batch(order[i * size:(i + 1) * size], id=i) for i in range(n)))


def repeat_schedule(batch: Batch, n: int) -> BatchSchedule:
    """``n`` copies of one batch, ids ``0..n-1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return BatchSchedule(tuple(Batch(id=i, inputs=batch.inputs, labels=batch.labels, indices=batch.indices) for i in range(n)))


# ---------------------------------------------------------------------------
# games


@dataclass(frozen=True)
class Game:
    """Two-player differentiable game; both players minimise their own loss.

    ``grads(phi, theta)`` returns
    ``(∇_φ E_φ, ∇_θ E_φ, ∇_φ E_θ, ∇_θ E_θ)``. ``mixed(phi, theta, which, v)``
    returns a directional derivative of one player's own gradient; ``which``
    is one of :data:`MIXED_KINDS`. Either may be ``None`` (finite
    differences are used instead).
    """

    dim_phi: int
    dim_theta: int
    loss_phi: Callable
    loss_theta: Callable
    grads: Optional[Callable] = None
    mixed: Optional[Callable] = None
    descriptor: dict = field(default_factory=dict)


#: which-keys for directional derivatives of the players' own gradients
#: ``dX_gY`` = derivative w.r.t. block X of ∇_Y E_Y.
MIXED_KINDS = ("dphi_gphi", "dtheta_gphi", "dphi_gtheta", "dtheta_gtheta")


def quadratic_game_from_arrays(A, B, C, a, b, coupling: float = 1.0, zero_sum: bool = False,
                               common_payoff: bool = False, descriptor: Optional[dict] = None) -> Game:
    """Quadratic game ``E_φ = ½φᵀAφ + φᵀBθ + aᵀφ``, ``E_θ = ½θᵀCθ + s·θᵀBᵀφ + bᵀθ``.

    ``zero_sum`` replaces ``E_θ`` with ``-E_φ``; ``common_payoff`` with ``E_φ``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    m, n = B.shape
    if A.shape != (m, m) or C.shape != (n, n) or a.shape != (m,) or b.shape != (n,):
        raise ValueError("inconsistent quadratic game shapes")
    if zero_sum and common_payoff:
        raise ValueError("a game cannot be both zero-sum and common-payoff")
    s = float(coupling)

    def e_phi(phi, theta):
        return float(0.5 * phi @ A @ phi + phi @ B @ theta + a @ phi)

    if zero_sum:
        def e_theta(phi, theta):
            return -e_phi(phi, theta)

        def grads(phi, theta):
            gpp = A @ phi + B @ theta + a
            gtp = B.T @ phi
            return gpp, gtp, -gpp, -gtp

        def mixed(phi, theta, which, v):
            return {
                "dphi_gphi": lambda: A @ v,
                "dtheta_gphi": lambda: B @ v,
                "dphi_gtheta": lambda: -(B.T @ v),
                "dtheta_gtheta": lambda: np.zeros(n),
            }[which]()
    elif common_payoff:
        def e_theta(phi, theta):
            return e_phi(phi, theta)

        def grads(phi, theta):
            gpp = A @ phi + B @ theta + a
            gtp = B.T @ phi
            return gpp, gtp, gpp, gtp

        def mixed(phi, theta, which, v):
            return {
                "dphi_gphi": lambda: A @ v,
                "dtheta_gphi": lambda: B @ v,
                "dphi_gtheta": lambda: B.T @ v,
                "dtheta_gtheta": lambda: np.zeros(n),
            }[which]()
    else:
        def e_theta(phi, theta):
            return float(0.5 * theta @ C @ theta + s * (theta @ B.T @ phi) + b @ theta)

        def grads(phi, theta):
            return (
                A @ phi + B @ theta + a,
                B.T @ phi,
                s * (B @ theta),
                C @ theta + s * (B.T @ phi) + b,
            )

        def mixed(phi, theta, which, v):
            return {
                "dphi_gphi": lambda: A @ v,
                "dtheta_gphi": lambda: B @ v,
                "dphi_gtheta": lambda: s * (B.T @ v),
                "dtheta_gtheta": lambda: C @ v,
            }[which]()

    desc = descriptor or {
        "name": "quadratic_game_explicit",
        "dim_phi": m,
        "dim_theta": n,
        "A": A.tolist(), "B": B.tolist(), "C": C.tolist(), "a": a.tolist(), "b": b.tolist(),
        "coupling": s, "zero_sum": zero_sum, "common_payoff": common_payoff,
    }
    return Game(dim_phi=m, dim_theta=n, loss_phi=e_phi, loss_theta=e_theta, grads=grads, mixed=mixed, descriptor=desc)


def make_quadratic_game(dim_phi: int, dim_theta: int, seed: int, zero_sum: bool = False,
                        common_payoff: bool = False, coupling: float = -0.5) -> Game:
    """Seeded quadratic game with SPD ``A``, ``C`` (``M Mᵀ + 0.1 I``) and uniform ``B, a, b``."""
    if dim_phi < 1 or dim_theta < 1:
        raise ValueError("game dimensions must be >= 1")
    rng = make_rng(seed)
    ma = rng.uniform(-1.0, 1.0, size=(dim_phi, dim_phi))
    mc = rng.uniform(-1.0, 1.0, size=(dim_theta, dim_theta))
    A = ma @ ma.T + 0.1 * np.eye(dim_phi)
    C = mc @ mc.T + 0.1 * np.eye(dim_theta)
    B = rng.uniform(-1.0, 1.0, size=(dim_phi, dim_theta))
    a = rng.uniform(-1.0, 1.0, size=dim_phi)
    b = rng.uniform(-1.0, 1.0, size=dim_theta)
    variant = "zero_sum" if zero_sum else ("common_payoff" if common_payoff else "general")
    desc = {"name": "quadratic_game", "dim_phi": dim_phi, "dim_theta": dim_theta, "seed": int(seed),
            "variant": variant, "coupling": float(coupling)}
    return quadratic_game_from_arrays(A, B, C, a, b, coupling=coupling, zero_sum=zero_sum,
                                      common_payoff=common_payoff, descriptor=desc)


def make_bilinear_game() -> Game:
    """The zero-sum game ``E_φ = φθ = -E_θ``."""
    desc = {"name": "bilinear", "dim_phi": 1, "dim_theta": 1, "seed": None, "variant": "zero_sum"}
    return quadratic_game_from_arrays([[0.0]], [[1.0]], [[0.0]], [0.0], [0.0], zero_sum=True, descriptor=desc)


def make_dirac_gan(variant: str = "non_saturating") -> Game:
    """One-parameter GAN: ``D(x; φ) = sigmoid(φ x)``, generator output ``θ``, data at 0.

    ``E_φ = -[log D(0; φ) + log(1 - D(θ; φ))] = log 2 + softplus(φθ)``.
    Generator: ``-log D(θ; φ)`` (non-saturating) or ``log(1 - D(θ; φ))``
    (saturating). The discriminator loss is sign-flipped relative to the
    usual maximised objective so both players minimise.
    """
    if variant not in ("non_saturating", "saturating"):
        raise ValueError(f"unknown Dirac-GAN variant {variant!r}")
    log2 = np.log(2.0)
    saturating = variant == "saturating"

    def e_phi(phi, theta):
        return float(log2 + np.logaddexp(0.0, phi[0] * theta[0]))

    def e_theta(phi, theta):
        u = phi[0] * theta[0]
        return float(-np.logaddexp(0.0, u)) if saturating else float(np.logaddexp(0.0, -u))

    def grads(phi, theta):
        p, t = phi[0], theta[0]
        u = p * t
        s_pos, s_neg = _sigmoid(u), _sigmoid(-u)
        gpp = np.array([t * s_pos])
        gtp = np.array([p * s_pos])
        if saturating:
            return gpp, gtp, np.array([-t * s_pos]), np.array([-p * s_pos])
        return gpp, gtp, np.array([-t * s_neg]), np.array([-p * s_neg])

    def mixed(phi, theta, which, v):
        p, t = phi[0], theta[0]
        u = p * t
        s_pos, s_neg = _sigmoid(u), _sigmoid(-u)
        ds = s_pos * s_neg
        if which == "dphi_gphi":
            d = t * t * ds
        elif which == "dtheta_gphi":
            d = s_pos + u * ds
        elif which == "dphi_gtheta":
            d = -(s_pos + u * ds) if saturating else -s_neg + u * ds
        elif which == "dtheta_gtheta":
            d = -p * p * ds if saturating else p * p * ds
        else:
            raise ValueError(f"unknown mixed derivative {which!r}")
        return np.array([d * v[0]])

    desc = {"name": "dirac_gan", "dim_phi": 1, "dim_theta": 1, "seed": None, "variant": variant}
    return Game(dim_phi=1, dim_theta=1, loss_phi=e_phi, loss_theta=e_theta, grads=grads, mixed=mixed, descriptor=desc)


# ---------------------------------------------------------------------------
# descriptor round-trip


def problem_from_descriptor(desc: dict) -> Problem:
    name = desc["name"]
    if name == "quadratic":
        return make_quadratic(desc["dim"], desc["num_examples"], desc["seed"])
    if name == "logistic":
        return make_logistic(desc["dim"], desc["num_examples"], desc["seed"])
    if "matrices" in desc:
        return quadratic_from_arrays(desc["matrices"], desc["centers"], name=name)
    raise ValueError(f"unknown problem {name!r}")


def game_from_descriptor(desc: dict) -> Game:
    name = desc["name"]
    if name == "bilinear":
        return make_bilinear_game()
    if name == "dirac_gan":
        return make_dirac_gan(desc["variant"])
    if name == "quadratic_game":
        v = desc.get("variant", "general")
        return make_quadratic_game(desc["dim_phi"], desc["dim_theta"], desc["seed"],
                                   zero_sum=v == "zero_sum", common_payoff=v == "common_payoff",
                                   coupling=desc.get("coupling", -0.5))
    if name == "quadratic_game_explicit":
        return quadratic_game_from_arrays(desc["A"], desc["B"], desc["C"], desc["a"], desc["b"],
                                          coupling=desc["coupling"], zero_sum=desc["zero_sum"],
                                          common_payoff=desc["common_payoff"])
    raise ValueError(f"unknown game {name!r}")
