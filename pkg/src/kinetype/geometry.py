"""Delaunay triangulation (Bowyer-Watson) and triangle predicates.

The triangulation is computed once over a glyph's control points and held
fixed; only vertex positions move during optimization. Everything here is
plain numpy -- the differentiable angle terms live with the losses.
"""

from __future__ import annotations

import numpy as np

__all__ = ["GeometryError", "orient2d", "in_circumcircle", "circumcircle",
           "triangulate", "triangle_angles"]


class GeometryError(ValueError):
    """Raised for point sets with no valid triangulation."""


def orient2d(a, b, c) -> float:
    """Twice the signed area of (a, b, c); > 0 for counterclockwise."""
    return float(
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    )


def in_circumcircle(a, b, c, p) -> bool:
    """True iff p lies strictly inside the circumcircle of (a, b, c).

    Lifted 3x3 determinant, multiplied by the triangle orientation so the
    answer does not depend on vertex order. Cocircular points count as
    outside.
    """
    ax, ay = a[0] - p[0], a[1] - p[1]
    bx, by = b[0] - p[0], b[1] - p[1]
    cx, cy = c[0] - p[0], c[1] - p[1]
    det = (
        (ax * ax + ay * ay) * (bx * cy - by * cx)
        - (bx * bx + by * by) * (ax * cy - ay * cx)
        + (cx * cx + cy * cy) * (ax * by - ay * bx)
    )
    orient = orient2d(a, b, c)
    if orient == 0.0:
        return False
    return det * orient > 0.0


def circumcircle(a, b, c):
    """Circumcenter and radius of a triangle.

    Raises GeometryError for (near-)degenerate triangles.
    """
    d = 2.0 * orient2d(a, b, c)
    if abs(d) < 1e-12:
        raise GeometryError("degenerate triangle has no circumcircle")
    a2 = a[0] * a[0] + a[1] * a[1]
    b2 = b[0] * b[0] + b[1] * b[1]
    c2 = c[0] * c[0] + c[1] * c[1]
    ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d
    uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d
    center = np.array([ux, uy])
    r = float(np.hypot(a[0] - ux, a[1] - uy))
    return center, r


def triangulate(points) -> list:
    """Delaunay triangulation by incremental insertion (Bowyer-Watson).

    Points are inserted in input order inside a super-triangle roughly a
    thousand times the point-set extent; triangles touching it are removed
    at the end. Returns triangles as ascending index triples, the list
    sorted lexicographically.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError("points must be an (n, 2) array")
    n = pts.shape[0]
    if n < 3:
        raise GeometryError(f"need at least 3 points, got {n}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("non-finite point coordinate")
    for i in range(n - 1):
        d = np.abs(pts[i + 1 :] - pts[i]).max(axis=1)
        if d.min() < 1e-12:
            j = i + 1 + int(np.argmin(d))
            raise GeometryError(f"duplicate points at indices {i} and {j}")

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1.0))
    big = 1e3 * span
    sup = np.array([
        [center[0] - big, center[1] - big],
        [center[0] + big, center[1] - big],
        [center[0], center[1] + big],
    ])
    verts = np.vstack([pts, sup])
    s0, s1, s2 = n, n + 1, n + 2

    tris = [(s0, s1, s2)]
    for pi in range(n):
        p = verts[pi]
        bad = [
            t for t in tris
            if in_circumcircle(verts[t[0]], verts[t[1]], verts[t[2]], p)
        ]
        # the cavity boundary: edges used by exactly one bad triangle
        edge_count = {}
        for t in bad:
            for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (min(e), max(e))
                edge_count[key] = edge_count.get(key, 0) + 1
        boundary = [e for e, cnt in edge_count.items() if cnt == 1]
        bad_set = set(bad)
        tris = [t for t in tris if t not in bad_set]
        for e in boundary:
            tris.append((e[0], e[1], pi))

    out = set()
    for t in tris:
        if t[0] >= n or t[1] >= n or t[2] >= n:
            continue
        out.add(tuple(sorted(t)))
    if not out:
        raise GeometryError(
            "no triangles produced; the points are likely all collinear"
        )
    return sorted(out)


def triangle_angles(points, tris) -> np.ndarray:
    """Interior angles in radians, shape (len(tris), 3).

    Angle j of triangle t is at vertex tris[t][j]. Uses
    atan2(|cross|, dot), well conditioned for thin triangles; edge
    vectors shorter than 1e-6 are treated as that length to keep the
    result finite for degenerate geometry.
    """
    pts = np.asarray(points, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int64)
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise GeometryError("tris must be an (m, 3) index array")
    angles = np.empty((tris.shape[0], 3))
    for j in range(3):
        a = pts[tris[:, j]]
        b = pts[tris[:, (j + 1) % 3]]
        c = pts[tris[:, (j + 2) % 3]]
        u, v = b - a, c - a
        cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
        dot = (u * v).sum(axis=1)
        # sqrt(cross^2 + 1e-24) == |cross| floored at 1e-12, matching a
        # 1e-6 minimum edge length in normalized units
        angles[:, j] = np.arctan2(np.sqrt(cross * cross + 1e-24), dot)
    return angles
