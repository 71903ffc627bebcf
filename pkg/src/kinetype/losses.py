"""Regularizers and total-loss assembly.

The perceptual term is a multi-scale blurred L2 (average pooling at scales
1/2/4/8) standing in for a learned perceptual metric, so the optimizer has
no model dependencies. Legibility ties the *base shape* render to the
input letter render; structure preservation penalizes changes of mesh
triangle angles between letter, base, and consecutive frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import raster
from .autodiff import DiffTensor
from .geometry import triangle_angles

__all__ = ["LossWeights", "perceptual_proxy", "legibility_loss",
           "angle_tensor", "structure_loss", "total_loss", "PROXY_SCALES"]

PROXY_SCALES = (1, 2, 4, 8)


@dataclass(frozen=True)
class LossWeights:
    w_legibility: float = 5e3
    lambda1: float = 1e3
    lambda2: float = 1e4
    w_sds: float = 1.0

    def __post_init__(self):
        for name in ("w_legibility", "lambda1", "lambda2", "w_sds"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _pool(img, s: int):
    """Average-pool by factor s; trailing rows/cols that don't divide are
    dropped. Works on ndarrays and DiffTensors alike."""
    if s == 1:
        return img
    h, w = img.shape
    h2, w2 = (h // s) * s, (w // s) * s
    if h2 == 0 or w2 == 0:
        raise ValueError(f"image {h}x{w} too small for pooling factor {s}")
    if isinstance(img, DiffTensor):
        if (h2, w2) != (h, w):
            keep = (np.arange(h2)[:, None] * w + np.arange(w2)).ravel()
            img = ad.gather_flat(img, keep).reshape((h2, w2))
        return img.reshape((h2 // s, s, w2 // s, s)).mean(axis=(1, 3))
    img = np.asarray(img, dtype=np.float64)[:h2, :w2]
    return img.reshape(h2 // s, s, w2 // s, s).mean(axis=(1, 3))


def perceptual_proxy(a, b):
    """Mean over scales {1,2,4,8} of the MSE after average pooling.

    Symmetric, zero iff the images agree at every scale. Either argument
    may be a DiffTensor; plain arrays give a plain float back.
    """
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")
    diff_mode = isinstance(a, DiffTensor) or isinstance(b, DiffTensor)
    if diff_mode:
        tape = a.tape if isinstance(a, DiffTensor) else b.tape
        a = a if isinstance(a, DiffTensor) else tape.tensor(a)
        b = b if isinstance(b, DiffTensor) else tape.tensor(b)
    total = None
    for s in PROXY_SCALES:
        d = _pool(a, s) - _pool(b, s)
        mse = (d * d).mean()
        total = mse if total is None else total + mse
    out = total / float(len(PROXY_SCALES))
    return out if diff_mode else float(out)


def legibility_loss(P_B, letter, res: int, *, softness: float = 2.0,
                    flatten_n: int = 8, letter_img=None):
    """Perceptual proxy between the base-shape render and the letter
    render. Applied to the base shape only, never to individual frames.

    ``letter_img`` lets callers reuse a precomputed letter raster; it must
    match a fresh render of ``letter`` at the same settings.
    """
    if letter_img is None:
        letter_img = raster.coverage(
            letter.points(), letter.topology, res, res,
            softness=softness, flatten_n=flatten_n,
        )
    base_img = raster.coverage(
        P_B, letter.topology, res, res,
        softness=softness, flatten_n=flatten_n,
    )
    return perceptual_proxy(base_img, letter_img)


def angle_tensor(points: DiffTensor, tris) -> DiffTensor:
    """Interior angles (m, 3) as a differentiable function of vertex
    positions; the numeric twin is geometry.triangle_angles."""
    tris = np.asarray(tris, dtype=np.intp)
    cols = []
    for j in range(3):
        ia, ib, ic = tris[:, j], tris[:, (j + 1) % 3], tris[:, (j + 2) % 3]
        ax = ad.gather_flat(points, ia * 2)
        ay = ad.gather_flat(points, ia * 2 + 1)
        ux = ad.gather_flat(points, ib * 2) - ax
        uy = ad.gather_flat(points, ib * 2 + 1) - ay
        vx = ad.gather_flat(points, ic * 2) - ax
        vy = ad.gather_flat(points, ic * 2 + 1) - ay
        cross = ux * vy - uy * vx
        dot = ux * vx + uy * vy
        cols.append(ad.atan2(ad.sqrt(cross * cross + 1e-24), dot))
    return ad.stack(cols, axis=1)


def structure_loss(letter_pts, P_B, P_V: list, tris, lam1: float,
                   lam2: float):
    """Angle-preservation energy over a fixed triangulation:

        lam1 * (1/m) sum_i |T_letter_i - T_B_i|^2
      + lam2 * (1/(k m)) sum_{t=1..k} sum_i |T_{t+1,i} - T_{t,i}|^2

    where the (k+1)-th frame is the base shape, so the last frame is
    regularized against P_B and the loop closes.
    """
    k = len(P_V)
    if k == 0:
        raise ValueError("structure loss needs at least one frame")
    tris = np.asarray(tris, dtype=np.intp)
    m = tris.shape[0]
    if isinstance(P_B, DiffTensor):
        def ang(p):
            return angle_tensor(p, tris)
    else:
        def ang(p):
            return triangle_angles(p, tris)
    t_letter = triangle_angles(letter_pts, tris)
    t_base = ang(P_B)

    d0 = t_base - t_letter
    first = (d0 * d0).sum() / float(m)

    t_frames = [ang(p) for p in P_V]
    chain = t_frames + [t_base]
    second = None
    for t in range(k):
        d = chain[t + 1] - chain[t]
        sq = (d * d).sum()
        second = sq if second is None else second + sq
    second = second / float(k * m)
    return first * lam1 + second * lam2


def total_loss(sds_term, legibility, structure, weights: LossWeights,
               current_iter: int, total_iters: int):
    """w_sds * sds + ramp * w_legibility * legibility + structure, with the
    legibility weight ramping linearly over the first half of training:
    ramp = clamp(iter / (0.5 * total), 0, 1).
    """
    if total_iters < 1:
        raise ValueError("total_iters must be at least 1")
    ramp = min(max(current_iter / (0.5 * total_iters), 0.0), 1.0)
    return (sds_term * weights.w_sds
            + legibility * (ramp * weights.w_legibility)
            + structure)
