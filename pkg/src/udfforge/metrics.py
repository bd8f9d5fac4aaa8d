"""Reconstruction metrics: Chamfer distance, band-limited UDF error against an
analytic oracle, and a finite-difference check of input gradients."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .field import NeuralField
from .geometry import DEFAULT_BBOX, lattice_points
from .training import nearest

Array = np.ndarray


def chamfer(a, b, mode: str = "euclidean") -> float:
    """Symmetric Chamfer distance: mean NN distance a->b plus mean NN distance b->a.

    ``mode="squared"`` uses squared distances (the training-loss form).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    if mode not in ("squared", "euclidean"):
        raise ValueError(f"unknown chamfer mode {mode!r}")
    _, da = nearest(a, b)
    _, db = nearest(b, a)
    if mode == "euclidean":
        da, db = np.sqrt(da), np.sqrt(db)
    return float(np.sum(da) / len(da) + np.sum(db) / len(db))


def udf_error(field, oracle, bbox=DEFAULT_BBOX, resolution=48, band: float = 0.3) -> tuple[float, float]:
    """Mean and max ``|f - oracle|`` over lattice points with ``oracle < band``."""
    if not band > 0:
        raise ValueError("band must be > 0")
    pts = lattice_points(bbox, resolution)
    ov = oracle.eval(pts)
    sel = ov < band
    if not sel.any():
        raise ValueError(f"no lattice point lies within band {band} of the oracle surface")
    err = np.abs(field.eval(pts[sel]) - ov[sel])
    return float(err.mean()), float(err.max())


def grad_check(field, n: int, rng, bbox=DEFAULT_BBOX, h: float = 1e-4, kink_tol: float = 1e-6,
               max_rounds: int = 200) -> float:
    """Max relative error between analytic input gradients and central differences.

    Relative error is ``|g - g_fd| / max(|g_fd|, 1e-12)`` per point. For neural
    fields a probe point only counts if no pre-activation lies within
    ``kink_tol`` of zero and the ``±h`` stencil stays inside one linear region
    (same rectifier pattern at all seven points). Candidates are drawn in
    rounds until ``n`` points qualify.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = np.asarray(bbox[0], float), np.asarray(bbox[1], float)
    neural = isinstance(field, NeuralField)
    errs = []
    for _ in range(max_rounds if neural else 1):
        p = lo + (hi - lo) * rng.uniform(size=(n if not neural else max(n, 256), 3))
        ok = np.ones(len(p), bool)
        if neural:
            ok &= field.min_abs_preactivation(p) > kink_tol
            pattern = _activation_pattern(field, p)
        _, g = field.eval_with_input_grad(p)
        fd = np.zeros_like(p)
        for d in range(3):
            e = np.zeros(3)
            e[d] = h
            fd[:, d] = (field.eval(p + e) - field.eval(p - e)) / (2 * h)
            if neural:
                for s in (p + e, p - e):
                    ok &= np.all(_activation_pattern(field, s) == pattern, axis=1)
        err = np.linalg.norm(g[ok] - fd[ok], axis=1) / np.maximum(np.linalg.norm(fd[ok], axis=1), 1e-12)
        errs.extend(err.tolist())
        if len(errs) >= n:
            break
    if not errs:
        raise ValueError("every probe point was skipped as a kink")
    return float(max(errs[:n]))


def _activation_pattern(field: NeuralField, p: Array) -> Array:
    cache = field._forward(p)
    return np.concatenate([z > 0 for z in cache.pre], axis=1)


@dataclass
class EvalReport:
    chamfer: float
    udf_mae_band: float
    udf_max_band: float
    grad_check_max_rel_err: float
    boundary_loop_count: int
    config: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        for name in ("chamfer", "udf_mae_band", "udf_max_band", "grad_check_max_rel_err"):
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [
            ("chamfer", f"{self.chamfer:.6g}"),
            ("udf_mae_band", f"{self.udf_mae_band:.6g}"),
            ("udf_max_band", f"{self.udf_max_band:.6g}"),
            ("grad_check_max_rel_err", f"{self.grad_check_max_rel_err:.3g}"),
            ("boundary_loop_count", str(self.boundary_loop_count)),
        ]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)
