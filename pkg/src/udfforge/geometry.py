"""Consumers of a trained field: point deformation, dense grids, surface point
sampling, open-surface meshing and boundary bookkeeping, plus exporters."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import marching
from .training import EPS_GRAD

log = logging.getLogger(__name__)

Array = np.ndarray

CHUNK = 65536
DEFAULT_BBOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def _eval_chunked(field, pts: Array, grad: bool = False):
    if len(pts) <= CHUNK:
        return field.eval_with_input_grad(pts) if grad else field.eval(pts)
    vals, grads = [], []
    for s in range(0, len(pts), CHUNK):
        if grad:
            v, g = field.eval_with_input_grad(pts[s : s + CHUNK])
            grads.append(g)
        else:
            v = field.eval(pts[s : s + CHUNK])
        vals.append(v)
    if grad:
        return np.concatenate(vals), np.concatenate(grads)
    return np.concatenate(vals)


# --------------------------------------------------------------------------
# deformation
# --------------------------------------------------------------------------


@dataclass
class DeformationTrace:
    points: list  # steps + 1 arrays of shape (N, 3), first is the input
    residual: list  # mean f over each point set

    @property
    def final(self) -> Array:
        return self.points[-1]


def _pull_step(field, p: Array, fraction: float):
    val, g = _eval_chunked(field, p, grad=True)
    gn = np.linalg.norm(g, axis=1)
    ok = gn >= EPS_GRAD
    step = np.zeros_like(p)
    step[ok] = (val[ok] / gn[ok])[:, None] * g[ok]
    return p - fraction * step, val, ~ok


def deform_cloud(field, points, steps: int, step_fraction: float = 1.0) -> DeformationTrace:
    """Repeatedly move points ``p <- p - fraction * f(p) * grad f / |grad f|``.

    Points with a degenerate gradient stay put for that step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0.0 < step_fraction <= 1.0:
        raise ValueError("step_fraction must lie in (0, 1]")
    p = np.array(points, dtype=np.float64).reshape(-1, 3)
    trace = [p.copy()]
    residual = []
    for _ in range(steps):
        p, val, _ = _pull_step(field, p, step_fraction)
        residual.append(float(np.mean(val)))
        trace.append(p.copy())
    residual.append(float(np.mean(_eval_chunked(field, p))))
    return DeformationTrace(trace, residual)


def extract_surface_points(
    field,
    n: int,
    residual_threshold: float,
    rng,
    bbox=DEFAULT_BBOX,
    steps: int = 10,
    step_fraction: float = 0.5,
):
    """Pull ``n`` uniform random points from ``bbox`` toward the zero set and
    keep the ones that end with ``f < residual_threshold``.

    Returns ``(points, kept_fraction)``. Points that hit a degenerate gradient
    at any step are dropped.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = np.asarray(bbox[0], float), np.asarray(bbox[1], float)
    p = lo + (hi - lo) * rng.uniform(size=(n, 3))
    bad = np.zeros(n, bool)
    for _ in range(steps):
        p, _, deg = _pull_step(field, p, step_fraction)
        bad |= deg
    val = _eval_chunked(field, p)
    keep = (val < residual_threshold) & ~bad
    return p[keep], float(keep.mean())


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------


@dataclass
class Grid:
    bbox: tuple
    resolution: tuple
    values: Array  # shape == resolution, x index slowest

    def axes(self) -> list:
        return lattice_axes(self.bbox, self.resolution)


def _res3(resolution) -> tuple:
    r = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    if len(r) != 3:
        raise ValueError("resolution needs 3 entries")
    return tuple(int(x) for x in r)


def lattice_axes(bbox, resolution) -> list:
    lo, hi = np.asarray(bbox[0], float), np.asarray(bbox[1], float)
    if np.any(hi - lo <= 0):
        raise ValueError(f"bbox has non-positive extent: {lo} .. {hi}")
    return [np.linspace(lo[a], hi[a], n) for a, n in enumerate(_res3(resolution))]


def lattice_points(bbox, resolution) -> Array:
    ax = lattice_axes(bbox, resolution)
    return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)


def eval_grid(field, bbox=DEFAULT_BBOX, resolution=32) -> Grid:
    """Sample ``f`` on a lattice that includes both bbox corners."""
    res = _res3(resolution)
    if min(res) < 2:
        raise ValueError("resolution must be >= 2 per axis")
    pts = lattice_points(bbox, res)
    vals = _eval_chunked(field, pts).reshape(res)
    bb = (tuple(float(x) for x in bbox[0]), tuple(float(x) for x in bbox[1]))
    return Grid(bb, res, vals)


def write_grid(grid: Grid, path) -> tuple[Path, Path]:
    """Raw little-endian float32 volume at ``path`` plus ``path.json`` sidecar."""
    path = Path(path)
    side = path.with_name(path.name + ".json")
    path.write_bytes(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
    side.write_text(
        json.dumps(
            {"bbox": [list(grid.bbox[0]), list(grid.bbox[1])], "resolution": list(grid.resolution),
             "dtype": "f32", "order": "C", "file": path.name},
            indent=2,
        )
        + "\n"
    )
    return path, side


def read_grid(path) -> Grid:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    res = tuple(meta["resolution"])
    vals = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(res).astype(np.float64)
    return Grid((tuple(meta["bbox"][0]), tuple(meta["bbox"][1])), res, vals)


# --------------------------------------------------------------------------
# meshes
# --------------------------------------------------------------------------


def boundary_edges_of(triangles: Array) -> Array:
    """Edges (sorted vertex pairs) used by exactly one triangle."""
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(tri) == 0:
        return np.zeros((0, 2), np.int64)
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq[counts == 1]


@dataclass
class Mesh:
    vertices: Array
    triangles: Array
    boundary_edges: Array = None
    stats: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.boundary_edges is None:
            self.boundary_edges = boundary_edges_of(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0


def _tri_area(v: Array, t: Array) -> Array:
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def extract_mesh(field, bbox=DEFAULT_BBOX, resolution=64, iso_band: float | None = None) -> Mesh:
    """Open-surface extraction from an unsigned field.

    A lattice edge ``(a, b)`` is crossed when the field gradients at its ends
    point against each other and ``min(f(a), f(b)) < iso_band``. Each cube's
    crossed edges must be exactly the edges between differently coloured
    corners of some two-colouring; such cubes are triangulated, the rest are
    skipped (counted in ``stats["skipped_cubes"]``). A vertex sits where the
    V-shaped linear model of ``f`` along the edge reaches zero, clamped to
    [0.05, 0.95] of the edge. ``iso_band`` defaults to two cell diagonals.
    """
    res = _res3(resolution)
    if min(res) < 8:
        raise ValueError("mesh extraction needs resolution >= 8 per axis")
    ax = lattice_axes(bbox, res)
    cell = np.array([a[1] - a[0] for a in ax])
    if iso_band is None:
        iso_band = 2.0 * float(np.linalg.norm(cell))
    pts = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
    val, grad = _eval_chunked(field, pts.reshape(-1, 3), grad=True)
    val = val.reshape(res)
    grad = grad.reshape(*res, 3)

    crossing, edge_base, edge_shape = [], [], []
    base = 0
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        dot = np.einsum("...i,...i->...", grad[lo], grad[hi])
        c = (dot < 0.0) & (np.minimum(val[lo], val[hi]) < iso_band)
        crossing.append(c)
        edge_base.append(base)
        edge_shape.append(c.shape)
        base += c.size

    nc = tuple(r - 1 for r in res)
    mask = np.zeros(nc, dtype=np.int64)
    for e, (a, _, axis) in enumerate(marching.EDGES):
        o = marching.CORNERS[a]
        sl = tuple(slice(o[d], o[d] + nc[d]) for d in range(3))
        mask |= crossing[axis][sl].astype(np.int64) << e

    active = np.flatnonzero(mask.ravel())
    stats = {"crossing_edges": int(sum(c.sum() for c in crossing)), "active_cubes": int(len(active))}
    if len(active) == 0:
        log.info("extract_mesh: no crossing edges found")
        stats.update(skipped_cubes=0, degenerate_triangles=0, diagnostic="no crossings found")
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), stats=stats)
    coloring = marching.MASK_TO_COLORING[mask.ravel()[active]]
    skipped = coloring < 0
    stats["skipped_cubes"] = int(skipped.sum())
    if stats["skipped_cubes"]:
        log.info("extract_mesh: skipped %d inconsistent cubes", stats["skipped_cubes"])
    cubes = active[~skipped]
    coloring = coloring[~skipped]
    cijk = np.stack(np.unravel_index(cubes, nc), axis=1)

    # global id of each of the 12 cube edges
    gid = np.empty((len(cubes), 12), dtype=np.int64)
    for e, (a, _, axis) in enumerate(marching.EDGES):
        start = cijk + marching.CORNERS[a]
        gid[:, e] = edge_base[axis] + np.ravel_multi_index(start.T, edge_shape[axis])

    tris, order_cube, order_tri = [], [], []
    for col in np.unique(coloring):
        table = marching.TRIANGLES[col]
        if len(table) == 0:
            continue
        sel = np.flatnonzero(coloring == col)
        t = gid[sel][:, table]  # (n_sel, T, 3)
        tris.append(t.reshape(-1, 3))
        order_cube.append(np.repeat(sel, len(table)))
        order_tri.append(np.tile(np.arange(len(table)), len(sel)))
    if not tris:
        stats.update(degenerate_triangles=0, diagnostic="no triangles")
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), stats=stats)
    tris = np.concatenate(tris)
    order = np.lexsort((np.concatenate(order_tri), np.concatenate(order_cube)))
    tris = tris[order]

    used, inv = np.unique(tris.ravel(), return_inverse=True)
    tris = inv.reshape(-1, 3)
    verts = np.empty((len(used), 3))
    for axis in range(3):
        sel = (used >= edge_base[axis]) & (used < edge_base[axis] + crossing[axis].size)
        loc = np.stack(np.unravel_index(used[sel] - edge_base[axis], edge_shape[axis]), axis=1)
        hi = loc.copy()
        hi[:, axis] += 1
        fa = val[tuple(loc.T)]
        fb = val[tuple(hi.T)]
        s = fa + fb
        t = np.divide(fa, s, out=np.full_like(fa, 0.5), where=s > 0)
        t = np.clip(t, 0.05, 0.95)
        pa = pts[tuple(loc.T)]
        pb = pts[tuple(hi.T)]
        verts[sel] = pa + t[:, None] * (pb - pa)

    area = _tri_area(verts, tris)
    good = area >= 1e-14
    stats["degenerate_triangles"] = int((~good).sum())
    tris = tris[good]
    # drop vertices orphaned by degenerate triangles
    keep_v, tris_inv = np.unique(tris.ravel(), return_inverse=True)
    return Mesh(verts[keep_v], tris_inv.reshape(-1, 3), stats=stats)


def mesh_boundary_loops(mesh: Mesh) -> list:
    """Group boundary edges into connected chains.

    Each chain is a list of ``(u, v)`` edges in walking order. Closed rims give
    cycles; where a rim touches itself the walk continues through the shared
    vertex, so every connected set of boundary edges is reported once.
    """
    edges = [tuple(int(x) for x in e) for e in mesh.boundary_edges]
    if not edges:
        return []
    adj: dict[int, list[int]] = {}
    for i, (u, v) in enumerate(edges):
        adj.setdefault(u, []).append(i)
        adj.setdefault(v, []).append(i)
    used = np.zeros(len(edges), bool)
    loops = []
    for start in range(len(edges)):
        if used[start]:
            continue
        # collect the connected component first, then walk it
        comp, stack = [], [start]
        used[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for w in edges[i]:
                for j in adj[w]:
                    if not used[j]:
                        used[j] = True
                        stack.append(j)
        comp_set = set(comp)
        # start a walk at an odd-degree vertex if the component is an open path
        deg = {}
        for i in comp:
            for w in edges[i]:
                deg[w] = deg.get(w, 0) + 1
        odd = sorted(w for w, d in deg.items() if d % 2)
        cur = odd[0] if odd else min(deg)
        walked, seen = [], set()
        while len(walked) < len(comp):
            nxt = [j for j in adj[cur] if j in comp_set and j not in seen]
            if not nxt:
                # component is not a single trail; restart from any unvisited edge
                j = min(comp_set - seen)
                cur = edges[j][0]
                continue
            j = min(nxt)
            seen.add(j)
            u, v = edges[j]
            walked.append((u, v) if u == cur else (v, u))
            cur = v if u == cur else u
        loops.append(walked)
    return loops


def write_obj(mesh: Mesh, path, loops: list | None = None) -> tuple[Path, Path]:
    """OBJ with ``v``/``f`` lines, and ``<stem>_boundary.obj`` holding the same
    vertices with one ``l`` element per boundary loop."""
    path = Path(path)
    vlines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    flines = [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(["# udfforge mesh", *vlines, *flines]) + "\n")
    if loops is None:
        loops = mesh_boundary_loops(mesh)
    llines = []
    for loop in loops:
        seq = [loop[0][0] + 1] + [v + 1 for _, v in loop]
        llines.append("l " + " ".join(str(i) for i in seq))
    bpath = path.with_name(path.stem + "_boundary.obj")
    bpath.write_text("\n".join([f"# {len(loops)} boundary loops", *vlines, *llines]) + "\n")
    return path, bpath


def write_xyz(points: Array, path) -> None:
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.9g")


def read_xyz(path) -> Array:
    return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 3)


def write_trace(trace: DeformationTrace, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, p in enumerate(trace.points):
        path = out_dir / f"step_{i:03d}.xyz"
        write_xyz(p, path)
        paths.append(path)
    (out_dir / "residual.json").write_text(json.dumps({"residual": trace.residual}) + "\n")
    return paths
