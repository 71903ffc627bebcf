"""Differentiable rasterization of closed cubic outlines.

Coverage per pixel comes from the signed distance to the flattened
outline pushed through a cubic smoothstep:

    cov = 0.5 + 0.75 u - 0.25 u^3,   u = clamp(-d / softness, -1, 1)

with d the signed distance at the pixel center (negative inside, even-odd
fill rule). Pixels farther than ``softness`` from the outline are exactly
0 or 1 and are treated as constants; only pixels in the transition band
are recorded on the tape. For a band pixel the distance is recomputed
against its numerically-nearest segment with the projection parameter
held at the numeric argmin, which leaves the gradient exact (the argmin
of a pointwise minimum is locally constant almost everywhere).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor

__all__ = ["flatten_weights", "flatten_outline", "coverage", "smoothstep"]


@lru_cache(maxsize=32)
def flatten_weights(topology: tuple, flatten_n: int):
    """Bernstein sampling matrix and edge lists for a glyph topology.

    Returns (weights, edge_a, edge_b): ``weights`` is (V, P) with
    V = flatten_n vertices per cubic segment (the t=1 endpoint is the
    next segment's t=0), and vertices = weights @ control_points.
    ``edge_a``/``edge_b`` index the endpoints of the V closed-loop edges.
    """
    if flatten_n < 1:
        raise ValueError("flatten_n must be at least 1")
    total_p = sum(topology)
    rows, edge_a, edge_b = [], [], []
    po = vo = 0  # point / vertex offsets of the current subpath
    for n in topology:
        segs = n // 3
        loop_v = segs * flatten_n
        for k in range(segs):
            ctrl = [po + 3 * k, po + 3 * k + 1, po + 3 * k + 2,
                    po + (3 * k + 3) % n]
            for i in range(flatten_n):
                t = i / flatten_n
                u = 1.0 - t
                w = np.zeros(total_p)
                w[ctrl[0]] += u * u * u
                w[ctrl[1]] += 3.0 * u * u * t
                w[ctrl[2]] += 3.0 * u * t * t
                w[ctrl[3]] += t * t * t
                rows.append(w)
        for v in range(loop_v):
            edge_a.append(vo + v)
            edge_b.append(vo + (v + 1) % loop_v)
        po += n
        vo += loop_v
    weights = np.asarray(rows)
    weights.setflags(write=False)
    edge_a = np.asarray(edge_a, dtype=np.intp)
    edge_b = np.asarray(edge_b, dtype=np.intp)
    edge_a.setflags(write=False)
    edge_b.setflags(write=False)
    return weights, edge_a, edge_b


def flatten_outline(points, topology: tuple, flatten_n: int):
    """Sample the outline into closed polyline loops (V, 2)."""
    weights, _, _ = flatten_weights(tuple(topology), flatten_n)
    if isinstance(points, DiffTensor):
        return ad.constant_matmul(weights, points)
    return weights @ np.asarray(points, dtype=np.float64)


def smoothstep(u: np.ndarray) -> np.ndarray:
    """The coverage profile on u in [-1, 1] (0 at -1, 1 at +1)."""
    u = np.clip(u, -1.0, 1.0)
    return 0.5 + 0.75 * u - 0.25 * u ** 3


def _pixel_centers(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)


def _scan(verts: np.ndarray, edge_a, edge_b, h: int, w: int):
    """Signed-distance scan of the pixel grid against polyline edges.

    Returns (inside, d2min, nearest) over the flat pixel grid: even-odd
    parity, squared distance to the nearest edge, and that edge's index.
    Pure numpy, chunked so the (pixels x edges) temporaries stay small.
    """
    centers = _pixel_centers(h, w)
    npix, ne = centers.shape[0], edge_a.shape[0]
    a = verts[edge_a]
    b = verts[edge_b]
    ab = b - a
    den = np.maximum((ab * ab).sum(axis=1), 1e-30)

    inside = np.zeros(npix, dtype=bool)
    d2min = np.full(npix, np.inf)
    nearest = np.zeros(npix, dtype=np.intp)

    block = max(1, int(2_000_000 // max(ne, 1)))
    for s in range(0, npix, block):
        p = centers[s : s + block]  # (B, 2)
        dp = p[:, None, :] - a[None, :, :]  # (B, E, 2)
        t = np.clip((dp * ab[None, :, :]).sum(axis=2) / den[None, :], 0.0, 1.0)
        diff = dp - t[:, :, None] * ab[None, :, :]
        d2 = (diff * diff).sum(axis=2)  # (B, E)
        idx = np.argmin(d2, axis=1)
        rows = np.arange(d2.shape[0])
        d2min[s : s + block] = d2[rows, idx]
        nearest[s : s + block] = idx

        # even-odd parity: count upward/downward edge crossings of the
        # horizontal ray to +x (half-open in y so shared vertices count once)
        py, px = p[:, 1][:, None], p[:, 0][:, None]
        ay, by = a[None, :, 1], b[None, :, 1]
        straddle = (ay > py) != (by > py)
        dy = np.where(straddle, (b[:, 1] - a[:, 1])[None, :], 1.0)
        xint = a[None, :, 0] + (py - ay) * (b[:, 0] - a[:, 0])[None, :] / dy
        crossings = (straddle & (px < xint)).sum(axis=1)
        inside[s : s + block] = (crossings % 2) == 1
    return inside, d2min, nearest


def coverage(points, topology, h: int, w: int, *,
             softness: float = 2.0, flatten_n: int = 8):
    """Rasterize control points (in pixel coordinates) to coverage (h, w).

    ``points`` may be a plain (P, 2) array (returns an ndarray) or a
    DiffTensor (returns a DiffTensor recorded on the same tape). The two
    paths agree to floating-point roundoff.
    """
    if softness <= 0.0:
        raise ValueError("softness must be positive")
    if h < 1 or w < 1:
        raise ValueError("image dimensions must be positive")
    topology = tuple(topology)
    _, edge_a, edge_b = flatten_weights(topology, flatten_n)

    verts = flatten_outline(points, topology, flatten_n)
    verts_np = verts.value if isinstance(verts, DiffTensor) else verts

    inside, d2min, nearest = _scan(verts_np, edge_a, edge_b, h, w)
    sign = np.where(inside, -1.0, 1.0)
    d_signed = sign * np.sqrt(d2min + 1e-18)
    base = inside.astype(np.float64)  # exact 0 / 1 outside the band
    active = np.abs(d_signed) < softness
    (active_idx,) = np.nonzero(active)

    if not isinstance(points, DiffTensor):
        img = base
        img[active_idx] = smoothstep(-d_signed[active_idx] / softness)
        return img.reshape(h, w)

    if active_idx.size == 0:
        return points.tape.tensor(base.reshape(h, w))

    centers = _pixel_centers(h, w)[active_idx]
    seg = nearest[active_idx]
    a = ad.gather_rows(verts, edge_a[seg])
    b = ad.gather_rows(verts, edge_b[seg])
    ab_np = verts_np[edge_b[seg]] - verts_np[edge_a[seg]]
    den = np.maximum((ab_np * ab_np).sum(axis=1), 1e-30)
    t_hat = np.clip(
        ((centers - verts_np[edge_a[seg]]) * ab_np).sum(axis=1) / den,
        0.0, 1.0,
    )[:, None]  # held constant: numeric argmin of the projection

    proj = a + (b - a) * t_hat
    diff = proj - centers  # centers lifts to a constant
    d = ad.sqrt((diff * diff).sum(axis=1) + 1e-18)
    u = ad.clamp(d * (-sign[active_idx] / softness), -1.0, 1.0)
    cov = u * 0.75 - u ** 3 * 0.25 + 0.5
    out = ad.scatter_into(cov, active_idx, base)
    return out.reshape(h, w)
