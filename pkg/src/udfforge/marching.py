"""Cube tables for marching cubes on per-cube pseudo-signs.

Corner ``c`` of a unit cube sits at ``(c & 1, (c >> 1) & 1, (c >> 2) & 1)``.
The surface inside a cube is traced face by face: each face with two
crossing edges contributes one segment, and the segments chain into closed
cycles. A face with four crossings is ambiguous; it is always resolved by
cutting off the two corners on the diagonal through the face's lowest-index
corner. That rule depends only on lattice position, so two cubes sharing a
face produce the same segments there and the mesh has no cracks.
"""

from __future__ import annotations

import numpy as np

CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])

# edges as (corner_a, corner_b) with a < b, plus the axis they run along
EDGES = []
for _c in range(8):
    for _axis in range(3):
        if not (_c >> _axis) & 1:
            EDGES.append((_c, _c | (1 << _axis), _axis))
EDGE_INDEX = {(a, b): i for i, (a, b, _) in enumerate(EDGES)}


def _edge(a: int, b: int) -> int:
    return EDGE_INDEX[(min(a, b), max(a, b))]


def _faces():
    faces = []
    for axis in range(3):
        u, v = [d for d in range(3) if d != axis]
        for side in (0, 1):
            base = side << axis
            # cyclic order starting at the lowest-index corner
            cyc = [base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)]
            faces.append(cyc)
    return faces


FACES = _faces()


def _cycles_for(colors: int) -> list[list[int]]:
    col = [(colors >> c) & 1 for c in range(8)]
    adj: dict[int, list[int]] = {}

    def link(e1, e2):
        adj.setdefault(e1, []).append(e2)
        adj.setdefault(e2, []).append(e1)

    for cyc in FACES:
        fe = [_edge(cyc[i], cyc[(i + 1) % 4]) for i in range(4)]
        crossing = [col[cyc[i]] != col[cyc[(i + 1) % 4]] for i in range(4)]
        n = sum(crossing)
        if n == 2:
            a, b = [fe[i] for i in range(4) if crossing[i]]
            link(a, b)
        elif n == 4:
            # isolate cyc[0] and cyc[2]: edges around cyc[0] are fe[3], fe[0]
            link(fe[3], fe[0])
            link(fe[1], fe[2])
    cycles = []
    seen = set()
    for start in sorted(adj):
        if start in seen:
            continue
        cyc = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [e for e in adj[cur] if e != prev]
            # degree is always 2; pick the unvisited neighbour if any
            cand = [e for e in nxt if e not in seen]
            if not cand:
                break
            prev, cur = cur, cand[0]
            cyc.append(cur)
            seen.add(cur)
        cycles.append(cyc)
    return cycles


def _crossing_mask(colors: int) -> int:
    m = 0
    for i, (a, b, _) in enumerate(EDGES):
        if ((colors >> a) & 1) != ((colors >> b) & 1):
            m |= 1 << i
    return m


# triangles (as edge-index triples) for every coloring, fan-triangulated cycles
TRIANGLES: list[np.ndarray] = []
for _colors in range(256):
    tris = []
    for cyc in _cycles_for(_colors):
        for j in range(1, len(cyc) - 1):
            tris.append((cyc[0], cyc[j], cyc[j + 1]))
    TRIANGLES.append(np.array(tris, dtype=np.int64).reshape(-1, 3))

# 12-bit crossing mask -> coloring with corner 0 set to 0, or -1 if no
# two-coloring reproduces the mask exactly
MASK_TO_COLORING = np.full(1 << 12, -1, dtype=np.int64)
for _colors in range(0, 256, 2):
    MASK_TO_COLORING[_crossing_mask(_colors)] = _colors
