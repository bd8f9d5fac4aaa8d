"""Surfel (2D Gaussian) clouds: data model, text/binary I/O, synthetic scenes
with analytic ground truth, and k-nearest-neighbour spacing."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .field import AnalyticField, SceneTransform

Array = np.ndarray

ROT_TOL = 1e-6
BINARY_MAGIC = b"SURFELB1"
_BINARY_WIDTH = 18  # center 3, rotation 9, scales 2, alpha 1, color 3


class CloudFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Surfel:
    center: Array
    rotation: Array
    scales: Array
    opacity: float = 1.0
    color: Array | None = None

    @property
    def normal(self) -> Array:
        return np.asarray(self.rotation)[:, 2]


def check_rotations(rot: Array, tol: float = ROT_TOL) -> Array:
    """Boolean mask of proper rotations (orthonormal, det +1) within ``tol``."""
    rot = np.asarray(rot, dtype=np.float64)
    eye = np.eye(3)
    err = np.abs(np.einsum("nji,njk->nik", rot, rot) - eye).max(axis=(1, 2))
    det = np.linalg.det(rot)
    return (err < tol) & (np.abs(det - 1.0) < tol)


@dataclass
class SurfelCloud:
    """Struct-of-arrays surfel storage.

    ``centers`` (I,3), ``rotations`` (I,3,3), ``scales`` (I,2), ``opacity`` (I,),
    ``colors`` (I,3) or None. The normal of surfel i is ``rotations[i][:, 2]``.
    """

    centers: Array
    rotations: Array
    scales: Array
    opacity: Array | None = None
    colors: Array | None = None
    transform: SceneTransform = dc_field(default_factory=SceneTransform)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 3, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 2)
        if self.opacity is None:
            self.opacity = np.ones(n)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i) -> Surfel:
        return Surfel(
            self.centers[i].copy(),
            self.rotations[i].copy(),
            self.scales[i].copy(),
            float(self.opacity[i]),
            None if self.colors is None else self.colors[i].copy(),
        )

    @property
    def normals(self) -> Array:
        return self.rotations[:, :, 2]

    def copy(self) -> "SurfelCloud":
        return SurfelCloud(
            self.centers.copy(),
            self.rotations.copy(),
            self.scales.copy(),
            self.opacity.copy(),
            None if self.colors is None else self.colors.copy(),
            self.transform,
        )

    def with_centers(self, centers: Array) -> "SurfelCloud":
        out = self.copy()
        out.centers = np.array(centers, dtype=np.float64).reshape(-1, 3)
        return out

    def validate(self, require_nonempty: bool = False) -> None:
        if require_nonempty and len(self) == 0:
            raise CloudFormatError("surfel cloud is empty")
        bad = np.flatnonzero(~check_rotations(self.rotations)) if len(self) else []
        if len(bad):
            raise CloudFormatError(f"surfel {bad[0]}: rotation is not a proper orthonormal matrix")
        bad = np.flatnonzero(~np.all(self.scales > 0, axis=1))
        if len(bad):
            raise CloudFormatError(f"surfel {bad[0]}: scales must be strictly positive")


def normalize_cloud(cloud: SurfelCloud, margin: float = 0.9) -> SurfelCloud:
    """Map centers into ``[-margin, margin]^3`` with a similarity transform.

    The transform is composed with any transform already stored on the cloud.
    """
    if len(cloud) == 0:
        raise CloudFormatError("cannot normalize an empty cloud")
    lo, hi = cloud.centers.min(axis=0), cloud.centers.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float(np.max(hi - lo))
    scale = margin / half if half > 0 else 1.0
    out = cloud.copy()
    out.centers = scale * (cloud.centers - center)
    out.scales = scale * cloud.scales
    prev = cloud.transform
    out.transform = SceneTransform(
        prev.scale * scale, tuple(np.asarray(prev.center) + center / prev.scale)
    )
    return out


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------


def save_cloud(cloud: SurfelCloud, path, binary: bool | None = None) -> None:
    """Write a cloud as text (default) or binary (``binary=True`` or ``.bin`` suffix)."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".bin"
    n = len(cloud)
    colors = cloud.colors
    if binary:
        rows = np.zeros((n, _BINARY_WIDTH))
        rows[:, :3] = cloud.centers
        rows[:, 3:12] = cloud.rotations.reshape(n, 9)
        rows[:, 12:14] = cloud.scales
        rows[:, 14] = cloud.opacity
        rows[:, 15:18] = np.nan if colors is None else colors
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC + struct.pack("<Q", n))
            fh.write(rows.astype("<f8").tobytes())
        return
    lines = [f"surfelcloud v1 {n}"]
    for i in range(n):
        vals = [*cloud.centers[i], *cloud.rotations[i].ravel(), *cloud.scales[i], cloud.opacity[i]]
        if colors is not None:
            vals.extend(colors[i])
        lines.append(" ".join(repr(float(v)) for v in vals))
    path.write_text("\n".join(lines) + "\n")


def _from_rows(rows: Array, has_color: bool, where) -> SurfelCloud:
    n = len(rows)
    cloud = SurfelCloud(
        rows[:, :3],
        rows[:, 3:12].reshape(n, 3, 3),
        rows[:, 12:14],
        rows[:, 14],
        rows[:, 15:18] if has_color else None,
    )
    ok_rot = check_rotations(cloud.rotations) if n else np.ones(0, bool)
    ok_scale = np.all(cloud.scales > 0, axis=1)
    for i in range(n):
        if not ok_rot[i]:
            raise CloudFormatError(f"{where(i)}: rotation is not orthonormal with det +1")
        if not ok_scale[i]:
            raise CloudFormatError(f"{where(i)}: non-positive scale {cloud.scales[i].tolist()}")
    return cloud


def load_cloud(path, require_nonempty: bool = False) -> SurfelCloud:
    """Load a text or binary cloud, validating every record.

    Errors name the offending line (text) or record index (binary).
    ``require_nonempty`` is set by training entry points.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(BINARY_MAGIC):
        (n,) = struct.unpack("<Q", raw[8:16])
        body = raw[16:]
        if len(body) != n * _BINARY_WIDTH * 8:
            raise CloudFormatError(f"{path}: binary payload size does not match count {n}")
        rows = np.frombuffer(body, dtype="<f8").reshape(n, _BINARY_WIDTH).astype(np.float64)
        has_color = bool(n) and not np.isnan(rows[:, 15:18]).all()
        cloud = _from_rows(rows, has_color, lambda i: f"{path}: record {i}")
    else:
        cloud = _load_text(path, raw.decode())
    if require_nonempty and len(cloud) == 0:
        raise CloudFormatError(f"{path}: surfel cloud is empty")
    return cloud


def _load_text(path: Path, text: str) -> SurfelCloud:
    header = None
    rows, lines_no = [], []
    widths = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        tok = s.split()
        if header is None:
            if len(tok) != 3 or tok[0] != "surfelcloud" or tok[1] != "v1":
                raise CloudFormatError(f"{path}:{lineno}: expected header 'surfelcloud v1 <count>'")
            try:
                header = int(tok[2])
            except ValueError:
                raise CloudFormatError(f"{path}:{lineno}: bad surfel count {tok[2]!r}") from None
            if header < 0:
                raise CloudFormatError(f"{path}:{lineno}: negative surfel count")
            continue
        if len(tok) not in (14, 15, 18):
            raise CloudFormatError(f"{path}:{lineno}: expected 14, 15 or 18 values, got {len(tok)}")
        try:
            vals = [float(t) for t in tok]
        except ValueError as e:
            raise CloudFormatError(f"{path}:{lineno}: {e}") from None
        if not all(math.isfinite(v) for v in vals):
            raise CloudFormatError(f"{path}:{lineno}: non-finite value")
        widths.add(len(tok))
        row = vals[:14] + ([vals[14]] if len(vals) > 14 else [1.0]) + (vals[15:18] if len(vals) == 18 else [0.0] * 3)
        if len(vals) > 14 and not 0.0 <= vals[14] <= 1.0:
            raise CloudFormatError(f"{path}:{lineno}: opacity {vals[14]} outside [0, 1]")
        rows.append(row)
        lines_no.append(lineno)
    if header is None:
        raise CloudFormatError(f"{path}: missing 'surfelcloud v1 <count>' header")
    if header != len(rows):
        raise CloudFormatError(f"{path}: header declares {header} surfels, found {len(rows)}")
    if len(widths) > 1:
        raise CloudFormatError(f"{path}: records mix optional columns")
    arr = np.array(rows, dtype=np.float64).reshape(-1, _BINARY_WIDTH)
    return _from_rows(arr, widths == {18}, lambda i: f"{path}:{lines_no[i]}")


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------


SCENE_KINDS = ("plane_disk", "sphere", "parallel_sheets", "curved_sheet")
SCENE_ALIASES = {"disk": "plane_disk", "plane": "plane_disk", "sheets": "parallel_sheets", "curved": "curved_sheet"}


@dataclass
class SyntheticScene:
    kind: str
    cloud: SurfelCloud
    oracle: AnalyticField
    gt_samples: Array
    clean_centers: Array


def _frames(normals: Array, rng) -> Array:
    """Right-handed frames whose third column is the given normal, random spin about it."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=len(n))[:, None]
    a = np.cos(phi) * t1 + np.sin(phi) * t2
    b = np.cross(n, a)
    return np.stack([a, b, n], axis=2)


def _surface(kind: str, m: int, rng, params: dict):
    """``m`` points and unit normals on the clean surface, plus its oracle."""
    if kind == "plane_disk":
        R = params.get("radius", 0.75)
        r = R * np.sqrt(rng.uniform(0.0, 1.0, m))
        th = rng.uniform(0.0, 2.0 * np.pi, m)
        p = np.stack([r * np.cos(th), r * np.sin(th), np.zeros(m)], axis=1)
        nrm = np.tile([0.0, 0.0, 1.0], (m, 1))
        return p, nrm, AnalyticField("disk", {"radius": R, "height": 0.0})
    if kind == "sphere":
        R = params.get("radius", 0.75)
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return R * d, d.copy(), AnalyticField("sphere", {"radius": R, "center": [0.0, 0.0, 0.0]})
    if kind == "parallel_sheets":
        gap = params.get("gap", 0.25)
        half = params.get("half_extent", 1.0)
        xy = rng.uniform(-half, half, size=(m, 2))
        z = np.where(rng.uniform(size=m) < 0.5, gap, -gap)
        p = np.column_stack([xy, z])
        nrm = np.tile([0.0, 0.0, 1.0], (m, 1))
        return p, nrm, AnalyticField("two_planes", {"gap": gap})
    if kind == "curved_sheet":
        R = params.get("radius", 1.2)
        th0 = params.get("half_angle", 0.7)
        c = np.array([0.0, 0.0, -0.9])
        # area-uniform on the cap: cos(theta) uniform in [cos th0, 1]
        ct = rng.uniform(math.cos(th0), 1.0, m)
        st = np.sqrt(1.0 - ct**2)
        ph = rng.uniform(0.0, 2.0 * np.pi, m)
        d = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=1)
        oracle = AnalyticField("spherical_cap", {"radius": R, "center": c.tolist(), "half_angle": th0})
        return c + R * d, d, oracle
    raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")


def gen_scene(
    kind: str,
    n: int,
    noise_sigma: float = 0.0,
    seed: int = 0,
    scale_range: tuple[float, float] = (0.01, 0.05),
    n_gt: int = 50_000,
    **params,
) -> SyntheticScene:
    """Sample ``n`` surfels on an analytic surface.

    Centers are clean surface samples plus isotropic Gaussian noise of std
    ``noise_sigma``; each normal follows the clean surface normal (random sign)
    and in-plane scales are uniform in ``scale_range``.
    """
    kind = SCENE_ALIASES.get(kind, kind)
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    clean, normals, oracle = _surface(kind, n, rng, params)
    flip = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)[:, None]
    rot = _frames(normals * flip, rng)
    centers = clean + noise_sigma * rng.normal(size=(n, 3)) if noise_sigma > 0 else clean.copy()
    scales = rng.uniform(scale_range[0], scale_range[1], size=(n, 2))
    colors = np.full((n, 3), 0.5)
    cloud = SurfelCloud(centers, rot, scales, np.ones(n), colors)
    gt, _, _ = _surface(kind, n_gt, np.random.default_rng([seed, 1]), params)
    return SyntheticScene(kind, cloud, oracle, gt, clean)


# --------------------------------------------------------------------------
# neighbours
# --------------------------------------------------------------------------


def pair_dist(a: Array, b: Array) -> Array:
    """Row-wise Euclidean distance, evaluated as ``sqrt(dx*dx + dy*dy + dz*dz)``."""
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def knn_distance(centers, k: int) -> Array:
    """Distance from every center to its k-th nearest other center.

    A kd-tree proposes candidates; distances are recomputed with
    :func:`pair_dist` and ranked with a stable sort so the result equals an
    exhaustive search.
    """
    pts = centers.centers if isinstance(centers, SurfelCloud) else np.asarray(centers, dtype=np.float64)
    n = len(pts)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < {n}, got {k}")
    m = min(n, k + 3)
    _, idx = cKDTree(pts).query(pts, k=m)
    idx = np.asarray(idx).reshape(n, m)
    own = idx == np.arange(n)[:, None]
    d = pair_dist(pts[:, None, :], pts[idx])
    d[own] = np.inf
    d.sort(axis=1, kind="stable")
    return d[:, k - 1]
