"""Geometric losses (far-field pulling Chamfer, near-field L1, stop-gradient
surfel projection), Adam with cosine decay, and the joint training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field as dc_field, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .field import FieldArch, NeuralField, init_field
from .sampling import (
    PlaneSamples,
    SamplerConfig,
    allocate_roots,
    sample_plane_batch,
    sample_queries,
)
from .surfel import SurfelCloud, knn_distance

log = logging.getLogger(__name__)

Array = np.ndarray

EPS_GRAD = 1e-8


class TrainingAborted(RuntimeError):
    pass


# --------------------------------------------------------------------------
# pulling
# --------------------------------------------------------------------------


class Pulled(NamedTuple):
    points: Array  # (N, 3) projections, degenerate rows equal the input
    value: Array  # f(q)
    direction: Array  # grad f / |grad f|, zero for degenerate rows
    grad_norm: Array
    degenerate: Array  # bool mask


def pull(field, q, eps_grad: float = EPS_GRAD) -> Pulled:
    """``q' = q - f(q) * grad f(q) / |grad f(q)|``.

    Points whose gradient norm is below ``eps_grad`` are returned unchanged and
    flagged degenerate.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    val, g = field.eval_with_input_grad(q)
    gn = np.linalg.norm(g, axis=1)
    degenerate = gn < eps_grad
    direction = np.divide(g, gn[:, None], out=np.zeros_like(g), where=~degenerate[:, None])
    pts = q - val[:, None] * direction
    return Pulled(pts, val, direction, gn, degenerate)


# --------------------------------------------------------------------------
# Chamfer
# --------------------------------------------------------------------------


def _sqdist(a: Array, b: Array) -> Array:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest(src: Array, dst: Array) -> tuple[Array, Array]:
    """For each ``src`` row, the index of and squared distance to its nearest ``dst`` row.

    Candidates come from a kd-tree; the final pick compares squared distances
    computed by :func:`_sqdist`, lowest index first on ties, so results agree
    with exhaustive search.
    """
    k = min(len(dst), 4)
    _, idx = cKDTree(dst).query(src, k=k)
    idx = np.asarray(idx).reshape(len(src), k)
    d2 = _sqdist(src[:, None, :], dst[idx])
    order = np.lexsort((idx, d2), axis=1)[:, 0] if k > 1 else np.zeros(len(src), int)
    rows = np.arange(len(src))
    return idx[rows, order], d2[rows, order]


def chamfer_terms(a: Array, b: Array):
    """Nearest-neighbour assignments and squared distances in both directions."""
    ia, da = nearest(a, b)
    ib, db = nearest(b, a)
    return ia, da, ib, db


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


class LossResult(NamedTuple):
    value: float
    grad: Array | None  # parameter gradient, None when skipped
    degenerate_fraction: float = 0.0


def loss_far(field, queries, centers, mode: str = "first_order", want_grad: bool = True) -> LossResult:
    """Squared Chamfer between pulled queries and surfel centers.

    ``mode="first_order"`` treats the pull direction as a constant per query so
    gradients flow only through ``f(q)``; ``"full"`` also differentiates the
    normalised gradient direction.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    mu = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if len(q) == 0 or len(mu) == 0:
        raise ValueError("loss_far needs nonempty queries and centers")
    if mode not in ("first_order", "full"):
        raise ValueError(f"unknown gradient mode {mode!r}")

    if want_grad and isinstance(field, NeuralField):
        cache = field._forward(q)
        _, g = field._backward(cache, np.ones(len(q)), params=False, inputs=True)
        val = cache.value
    else:
        cache = None
        val, g = field.eval_with_input_grad(q)
    gn = np.linalg.norm(g, axis=1)
    keep = gn >= EPS_GRAD
    frac = 1.0 - keep.mean()
    if not keep.any():
        log.warning("loss_far skipped: all %d queries degenerate", len(q))
        return LossResult(float("nan"), None, 1.0)
    direction = g[keep] / gn[keep, None]
    qp = q[keep] - val[keep, None] * direction

    J, I = len(qp), len(mu)
    ia, da, ib, db = chamfer_terms(qp, mu)
    value = float(np.sum(da) / J + np.sum(db) / I)
    if not (want_grad and isinstance(field, NeuralField)):
        return LossResult(value, None, frac)

    # dL/dq' for every kept projection
    dqp = (2.0 / J) * (qp - mu[ia])
    np.add.at(dqp, ib, (2.0 / I) * (qp[ib] - mu))
    up = np.zeros(len(q))
    up[keep] = -np.einsum("ij,ij->i", dqp, direction)
    grad, _ = field._backward(cache, up, params=True, inputs=False)
    if mode == "full":
        # q' depends on dir = g/|g|; d dir / d g = (I - dir dir^T) / |g|
        ddir = -val[keep, None] * dqp
        dg = (ddir - np.einsum("ij,ij->i", ddir, direction)[:, None] * direction) / gn[keep, None]
        v = np.zeros_like(q)
        v[keep] = dg
        grad = grad + field._directional_param_grad(cache, v)
    return LossResult(value, grad, frac)


def loss_near(field, samples, targets=None, want_grad: bool = True) -> LossResult:
    """Mean absolute error ``|f(e) - t|`` over plane samples."""
    if isinstance(samples, PlaneSamples):
        pts, t = samples.point, samples.target
    else:
        pts, t = np.atleast_2d(np.asarray(samples, dtype=np.float64)), np.asarray(targets, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("loss_near needs a nonempty batch")
    if want_grad and isinstance(field, NeuralField):
        cache = field._forward(pts)
        r = cache.value - t
        value = float(np.sum(np.abs(r)) / len(r))
        up = np.sign(r) / len(r)
        grad, _ = field._backward(cache, up, params=True, inputs=False)
        return LossResult(value, grad)
    r = field.eval(pts) - t
    return LossResult(float(np.sum(np.abs(r)) / len(r)), None)


class Projection(NamedTuple):
    centers: Array
    l_proj: float
    degenerate: Array


def project_surfels(field, centers, eta: float, indices=None) -> Projection:
    """Move centers toward their pulled positions, ``mu += eta * (mu' - mu)``.

    The field is only read here (no parameter gradients). ``l_proj`` is the
    mean of ``|mu' - mu|`` over the projected centers; degenerate-gradient
    centers stay put and contribute 0.
    """
    mu = np.array(centers, dtype=np.float64).reshape(-1, 3)
    idx = np.arange(len(mu)) if indices is None else np.asarray(indices)
    eta = min(max(eta, 0.0), 1.0)
    if len(idx) == 0:
        return Projection(mu, 0.0, np.zeros(0, bool))
    pulled = pull(field, mu[idx])
    step = pulled.points - mu[idx]
    dist = np.sqrt(_sqdist(pulled.points, mu[idx]))
    mu[idx] = mu[idx] + eta * step
    return Projection(mu, float(np.sum(dist) / len(idx)), pulled.degenerate)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def cosine_lr(it: int, total: int, lr0: float) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * it / total))


@dataclass
class Adam:
    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Array = None
    v: Array = None
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def step(self, params: Array, grad: Array, lr: float) -> bool:
        """Update ``params`` in place. Returns False (and leaves everything
        untouched) when ``grad`` has a non-finite entry."""
        if not np.all(np.isfinite(grad)):
            return False
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return True


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lambda_far: float = 1.0
    lambda_near: float = 1.0
    lambda_proj: float = 0.1
    total_iters: int = 5000
    far_only_until: int | None = None  # default: 10% of total_iters
    lr0: float = 1e-3
    far_grad_mode: str = "full"
    init_sphere_radius: float | None = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    arch: FieldArch = dc_field(default_factory=FieldArch)
    sampler: SamplerConfig = dc_field(default_factory=SamplerConfig)
    # weights of the rendering losses; kept for provenance, unused here
    lambda_rgb_ssim: float = 0.2
    lambda_depth: float = 1000.0
    lambda_norm: float = 0.05

    def __post_init__(self):
        for name in ("lambda_far", "lambda_near", "lambda_proj", "lr0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.far_only_until is None:
            object.__setattr__(self, "far_only_until", self.total_iters // 10)
        if not 0 <= self.far_only_until <= self.total_iters:
            raise ValueError("far_only_until must lie in [0, total_iters]")
        if self.far_grad_mode not in ("first_order", "full"):
            raise ValueError(f"unknown far_grad_mode {self.far_grad_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "arch" in d and isinstance(d["arch"], dict):
            d["arch"] = FieldArch(**d["arch"])
        if "sampler" in d and isinstance(d["sampler"], dict):
            d["sampler"] = SamplerConfig(**d["sampler"])
        return cls(**d)


@dataclass
class TrainState:
    field: NeuralField
    cloud: SurfelCloud
    optimizer: Adam
    iter: int = 0
    log: list = dc_field(default_factory=list)
    rng: np.random.Generator | None = None


def _all_finite(*vals) -> bool:
    return all(v is None or math.isfinite(v) for v in vals)


def total_gradient(field: NeuralField, queries: Array, centers: Array, samples: PlaneSamples | None,
                   config: TrainConfig):
    """Weighted parameter gradient ``lambda_far * dL_far + lambda_near * dL_near``.

    ``samples=None`` (or a zero weight) leaves the near term out. Returns
    ``(grad, l_far, l_near, degenerate_fraction)`` with ``None`` for absent terms.
    """
    grad = np.zeros_like(field.params)
    l_far = l_near = None
    frac = 0.0
    if config.lambda_far > 0:
        far = loss_far(field, queries, centers, mode=config.far_grad_mode)
        frac = far.degenerate_fraction
        if far.grad is not None:
            l_far = far.value
            grad += config.lambda_far * far.grad
    if samples is not None and config.lambda_near > 0:
        near = loss_near(field, samples)
        l_near = near.value
        grad += config.lambda_near * near.grad
    return grad, l_far, l_near, frac


def train(
    cloud: SurfelCloud,
    config: TrainConfig,
    state: TrainState | None = None,
    on_iter: Callable[[TrainState, dict], None] | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Fit a neural UDF to a surfel cloud.

    Iterations before ``far_only_until`` use the far-field loss alone; after
    that the near-field loss and surfel projection are switched on (each only
    if its weight is positive). Each iteration draws ``planes_per_batch``
    surfels without replacement; their centers are the Chamfer targets and
    their planes feed the near-field samples. Projection moves the batch
    centers with step ``clamp(lambda_proj * lr(it) / lr0, 0, 1)``.

    Passing ``state`` resumes from its iteration counter, optimizer moments
    and rng.
    """
    if len(cloud) == 0:
        raise ValueError("training needs a nonempty cloud")
    cloud.validate()
    sc = config.sampler
    if state is None:
        field = init_field(config.arch, config.seed, config.init_sphere_radius)
        state = TrainState(field, cloud.copy(), Adam(field.params.size), 0, [],
                           np.random.default_rng(config.seed))
    elif state.rng is None:
        state.rng = np.random.default_rng([config.seed, state.iter])
    rng = state.rng
    I = len(state.cloud)
    if len(cloud) != I:
        raise ValueError("resume state and input cloud differ in size")
    k = min(sc.knn_k, I - 1)
    # sigma from the input cloud, so a resumed run sees the same values
    sigmas = knn_distance(cloud.centers, k) if k >= 1 else np.full(I, sc.T)
    counts = allocate_roots(cloud, sc)
    batch = min(sc.planes_per_batch, I)
    degenerate_run = 0

    while state.iter < config.total_iters:
        it = state.iter
        lr = cosine_lr(it, config.total_iters, config.lr0)
        idx = np.sort(rng.choice(I, size=batch, replace=False))
        centers = state.cloud.centers
        queries = sample_queries(centers, sigmas, sc, rng, idx)
        late = it >= config.far_only_until
        use_near = late and config.lambda_near > 0
        use_proj = late and config.lambda_proj > 0

        samples = sample_plane_batch(state.cloud, idx, counts, sc, rng) if use_near else None
        grad, l_far, l_near, frac = total_gradient(state.field, queries.q, centers[idx], samples, config)
        l_proj = None

        degenerate_run = degenerate_run + 1 if frac > 0.5 else 0
        if degenerate_run >= 100:
            raise TrainingAborted(f"more than half the queries degenerate for 100 iterations (at {it})")

        ok = _all_finite(l_far, l_near) and state.optimizer.step(state.field.params, grad, lr)
        if not ok:
            log.warning("iteration %d aborted: non-finite loss or gradient", it)
        if use_proj and ok:
            eta = min(max(config.lambda_proj * lr / config.lr0, 0.0), 1.0)
            proj = project_surfels(state.field, state.cloud.centers, eta, idx)
            state.cloud.centers = proj.centers
            l_proj = proj.l_proj

        rec = {
            "iter": it,
            "l_far": l_far,
            "l_near": l_near,
            "l_proj": l_proj,
            "lr": lr,
            "degenerate_fraction": float(frac),
        }
        if not ok:
            rec["aborted"] = True
        state.log.append(rec)
        state.iter += 1
        if on_iter is not None:
            on_iter(state, rec)
        if on_checkpoint is not None and config.checkpoint_every and state.iter % config.checkpoint_every == 0:
            on_checkpoint(state)
    return state
