"""Finite-difference verification suites for every differentiable piece.

Each suite builds a small seeded problem, compares tape gradients against
central differences on up to 64 coordinates, and reports the worst
relative error. The CLI's check-grad subcommand and the acceptance tests
both run these.
"""

from __future__ import annotations

import numpy as np

from . import fields as F
from . import losses, raster
from .autodiff import Tape, finite_diff_check
from .geometry import triangulate
from .glyph import parse_path, subdivide

__all__ = ["ring_glyph", "check_raster", "check_legibility",
           "check_structure", "check_fields", "run_suite", "MODULES"]

_KAPPA = 0.5522847498307936  # cubic circle approximation constant


def circle_path_data(cx: float, cy: float, r: float) -> str:
    """Closed 4-segment cubic approximation of a circle."""
    k = _KAPPA * r
    return (
        f"M {cx + r} {cy} "
        f"C {cx + r} {cy + k} {cx + k} {cy + r} {cx} {cy + r} "
        f"C {cx - k} {cy + r} {cx - r} {cy + k} {cx - r} {cy} "
        f"C {cx - r} {cy - k} {cx - k} {cy - r} {cx} {cy - r} "
        f"C {cx + k} {cy - r} {cx + r} {cy - k} {cx + r} {cy} Z"
    )


def ring_glyph(size: float = 32.0, r_outer: float = 0.40,
               r_inner: float = 0.22, min_points: int = 0):
    """An O-like two-loop glyph on a size x size canvas (radii are
    fractions of the canvas side). Inner loop makes an even-odd hole."""
    c = size / 2.0
    d = (circle_path_data(c, c, r_outer * size) + " "
         + circle_path_data(c, c, r_inner * size))
    g = parse_path(d, (size, size))
    return subdivide(g, min_points) if min_points > 0 else g


def check_raster(max_coords: int = 64, seed: int = 0) -> float:
    """d(weighted mean coverage)/d(control points) vs finite differences."""
    g = ring_glyph(32.0)
    rng = np.random.default_rng(seed)
    pts = g.points() + rng.normal(0.0, 0.3, g.points().shape)
    weight = rng.normal(0.0, 1.0, (32, 32))

    def build(leaves):
        img = raster.coverage(leaves[0], g.topology, 32, 32,
                              softness=2.0, flatten_n=6)
        return (img * weight).mean()

    return finite_diff_check(build, [pts], max_coords=max_coords,
                             rng=np.random.default_rng(seed + 1))


def check_legibility(max_coords: int = 64, seed: int = 0) -> float:
    """Gradient of the base-vs-letter perceptual term w.r.t. base points."""
    g = ring_glyph(32.0)
    rng = np.random.default_rng(seed)
    base_pts = g.points() + rng.normal(0.0, 0.5, g.points().shape)

    def build(leaves):
        return losses.legibility_loss(leaves[0], g, 32, softness=2.0,
                                      flatten_n=6)

    return finite_diff_check(build, [base_pts], max_coords=max_coords,
                             rng=np.random.default_rng(seed + 1))


def check_structure(max_coords: int = 64, seed: int = 0) -> float:
    """Gradient of the angle-preservation energy w.r.t. base and frames."""
    g = ring_glyph(32.0, min_points=18)
    letter_pts = g.points()
    tris = triangulate(letter_pts)
    rng = np.random.default_rng(seed)
    base = letter_pts + rng.normal(0.0, 0.2, letter_pts.shape)
    f1 = letter_pts + rng.normal(0.0, 0.2, letter_pts.shape)
    f2 = letter_pts + rng.normal(0.0, 0.2, letter_pts.shape)

    def build(leaves):
        return losses.structure_loss(letter_pts, leaves[0],
                                     [leaves[1], leaves[2]], tris,
                                     1.0, 1.0)

    return finite_diff_check(build, [base, f1, f2], max_coords=max_coords,
                             rng=np.random.default_rng(seed + 1))


def check_fields(max_coords: int = 64, seed: int = 0) -> float:
    """Gradients through both displacement fields w.r.t. network weights.

    Final layers are perturbed off zero so every weight is exercised; the
    scalar mixes base and per-frame positions so base_net, local_net, and
    global_net all contribute.
    """
    g = ring_glyph(32.0)
    letter_pts = g.points()
    rng = np.random.default_rng(seed)
    params = F.FieldParams.create(2, 2, rng)
    arrays = [a + rng.normal(0.0, 0.05, a.shape)
              for grp in ("base", "local", "global")
              for a in params.groups()[grp]]
    counts = [len(params.groups()[grp])
              for grp in ("base", "local", "global")]
    probe = rng.normal(0.0, 1.0, (len(letter_pts), 2))

    def build(leaves):
        tape = leaves[0].tape
        lifted = {
            "base": leaves[: counts[0]],
            "local": leaves[counts[0] : counts[0] + counts[1]],
            "global": leaves[counts[0] + counts[1] :],
        }
        sp = F.EncodingConfig(2, anneal_N=10, current_iter=4)
        tm = F.EncodingConfig(2, anneal_N=10, current_iter=4)
        P_B = F.base_field_forward(params, lifted["base"], letter_pts,
                                   g.canvas, F.EncodingConfig(2), tape)
        P_V = F.motion_field_forward(params, lifted["local"],
                                     lifted["global"], P_B, 2, g.canvas,
                                     sp, tm, tape)
        out = (P_B * probe).mean()
        for p in P_V:
            out = out + (p * probe).mean()
        return out

    return finite_diff_check(build, arrays, max_coords=max_coords,
                             rng=np.random.default_rng(seed + 1))


MODULES = {
    "raster": ("raster", check_raster),
    "legibility": ("losses", check_legibility),
    "structure": ("losses", check_structure),
    "fields": ("fields", check_fields),
}


def run_suite(module: str = "all", max_coords: int = 64) -> dict:
    """Run the finite-difference suites for one module group or all.

    ``module``: raster | losses | fields | all. Returns {check: max rel
    error}.
    """
    valid = {"all", "raster", "losses", "fields"}
    if module not in valid:
        raise ValueError(f"unknown module {module!r}; pick from {valid}")
    out = {}
    for name, (group, fn) in MODULES.items():
        if module in ("all", group):
            out[name] = fn(max_coords=max_coords)
    return out
