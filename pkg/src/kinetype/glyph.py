"""Closed cubic-Bezier glyph outlines: parsing, normalization, subdivision.

A glyph is a set of closed subpaths. Each subpath stores 3s control points
for s cubic segments; segment i uses points 3i, 3i+1, 3i+2 and 3(i+1) mod
the point count, so the chain wraps back to the first point.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = ["GlyphPath", "PathError", "parse_path", "normalize_canvas",
           "subdivide", "serialize_path"]


class PathError(ValueError):
    """Raised for invalid path data or degenerate glyph geometry."""


@dataclass(frozen=True)
class GlyphPath:
    """Closed cubic-Bezier outline on a canvas, y axis pointing down."""

    subpaths: tuple  # tuple of (3s, 2) float64 arrays
    canvas: tuple  # (width, height)

    def __post_init__(self):
        if not self.subpaths:
            raise PathError("glyph has no subpaths")
        w, h = self.canvas
        if not (w > 0 and h > 0):
            raise PathError("canvas dimensions must be positive")
        frozen = []
        for sp in self.subpaths:
            sp = np.asarray(sp, dtype=np.float64)
            if sp.ndim != 2 or sp.shape[1] != 2:
                raise PathError("subpath must be an (n, 2) point array")
            if sp.shape[0] < 3 or sp.shape[0] % 3 != 0:
                raise PathError(
                    f"subpath point count {sp.shape[0]} is not a positive "
                    "multiple of 3"
                )
            if not np.all(np.isfinite(sp)):
                raise PathError("non-finite coordinate in subpath")
            sp = sp.copy()
            sp.setflags(write=False)
            frozen.append(sp)
        object.__setattr__(self, "subpaths", tuple(frozen))
        object.__setattr__(self, "canvas", (float(w), float(h)))

    @property
    def point_count(self) -> int:
        return sum(sp.shape[0] for sp in self.subpaths)

    @property
    def topology(self) -> tuple:
        """Points per subpath; fixed by parsing, shared by all frames."""
        return tuple(sp.shape[0] for sp in self.subpaths)

    def points(self) -> np.ndarray:
        """All control points concatenated, subpath order preserved."""
        return np.concatenate(self.subpaths, axis=0)

    def with_points(self, points: np.ndarray) -> "GlyphPath":
        """Same topology and canvas, new coordinates."""
        points = np.asarray(points, dtype=np.float64)
        if points.shape != (self.point_count, 2):
            raise PathError("replacement points do not match topology")
        subs, at = [], 0
        for n in self.topology:
            subs.append(points[at : at + n])
            at += n
        return GlyphPath(tuple(subs), self.canvas)

    def segments(self):
        """Yield (subpath index, segment index, 4x2 control array)."""
        for si, sp in enumerate(self.subpaths):
            n = sp.shape[0]
            for k in range(n // 3):
                idx = [3 * k, 3 * k + 1, 3 * k + 2, (3 * k + 3) % n]
                yield si, k, sp[idx]


_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_COMMANDS = "MmLlCcQqZz"
_UNSUPPORTED = "AaHhVvSsTt"


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_sep(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t\r\n,":
            self.pos += 1

    def peek_command(self):
        self.skip_sep()
        if self.pos >= len(self.text):
            return None
        c = self.text[self.pos]
        return c if c.isalpha() else ""

    def take_command(self) -> str:
        c = self.text[self.pos]
        if c in _UNSUPPORTED:
            raise PathError(
                f"unsupported path command '{c}' at byte {self.pos}"
            )
        if c not in _COMMANDS:
            raise PathError(f"unknown path command '{c}' at byte {self.pos}")
        self.pos += 1
        return c

    def take_number(self) -> float:
        self.skip_sep()
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            raise PathError(
                f"expected a number at byte {self.pos} "
                f"(near {self.text[self.pos:self.pos + 12]!r})"
            )
        self.pos = m.end()
        return float(m.group())

    def more_numbers(self) -> bool:
        self.skip_sep()
        if self.pos >= len(self.text):
            return False
        return _NUMBER.match(self.text, self.pos) is not None


def _line_as_cubic(p0, p1):
    p0, p1 = np.asarray(p0), np.asarray(p1)
    return [p0 + (p1 - p0) / 3.0, p0 + 2.0 * (p1 - p0) / 3.0, p1]


def _quad_as_cubic(p0, q, p1):
    # exact degree elevation: c1 = p0 + 2/3 (q - p0), c2 = p1 + 2/3 (q - p1)
    p0, q, p1 = np.asarray(p0), np.asarray(q), np.asarray(p1)
    return [p0 + 2.0 / 3.0 * (q - p0), p1 + 2.0 / 3.0 * (q - p1), p1]


def parse_path(text: str, canvas: tuple) -> GlyphPath:
    """Parse an SVG path-data subset (M/L/C/Q/Z) into closed cubics.

    Lines become cubics with collinear controls at 1/3 and 2/3; quadratics
    are degree-elevated exactly; open subpaths get an implicit closing line.
    """
    sc = _Scanner(text)
    subpaths: list[list[np.ndarray]] = []
    current: list[np.ndarray] = []
    start = None
    pos = np.zeros(2)
    cmd = None

    def close_current():
        nonlocal current
        if not current:
            return
        if len(current) == 1:  # bare moveto, nothing drawn
            current = []
            return
        first, last = current[0], current[-1]
        if np.max(np.abs(last - first)) > 1e-9:
            current.extend(_line_as_cubic(last, first))
        # drop the duplicated closing point: the chain wraps implicitly
        subpaths.append(np.asarray(current[:-1], dtype=np.float64))
        current = []

    while True:
        kind = sc.peek_command()
        if kind is None:
            break
        if kind != "":
            cmd = sc.take_command()
        elif cmd is None:
            raise PathError(
                f"number without a preceding command at byte {sc.pos}"
            )
        else:
            # implicit command repetition; an implicit M repeat means L
            if cmd == "M":
                cmd = "L"
            elif cmd == "m":
                cmd = "l"
        rel = cmd.islower()
        op = cmd.upper()

        if op == "Z":
            close_current()
            if start is not None:
                pos = start.copy()
            cmd = None
            continue

        if op == "M":
            close_current()
            x, y = sc.take_number(), sc.take_number()
            pos = pos + [x, y] if rel else np.array([x, y])
            start = pos.copy()
            current = [pos.copy()]
            continue

        if not current:
            raise PathError(f"command '{cmd}' before any moveto")

        if op == "L":
            x, y = sc.take_number(), sc.take_number()
            tgt = pos + [x, y] if rel else np.array([x, y])
            current.extend(_line_as_cubic(pos, tgt))
            pos = tgt
        elif op == "C":
            nums = [sc.take_number() for _ in range(6)]
            pts = np.array(nums).reshape(3, 2)
            if rel:
                pts = pts + pos
            current.extend([pts[0], pts[1], pts[2]])
            pos = pts[2]
        elif op == "Q":
            nums = [sc.take_number() for _ in range(4)]
            pts = np.array(nums).reshape(2, 2)
            if rel:
                pts = pts + pos
            current.extend(_quad_as_cubic(pos, pts[0], pts[1]))
            pos = pts[1]

    close_current()
    if not subpaths:
        raise PathError("empty path")
    return GlyphPath(tuple(subpaths), canvas)


def normalize_canvas(g: GlyphPath, target: tuple) -> GlyphPath:
    """Fit the glyph into the central 80% of the target canvas.

    Uniform scale, aspect preserved, bounding-box center moved to the
    canvas center.
    """
    pts = g.points()
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    tw, th = float(target[0]), float(target[1])
    scales = []
    if extent[0] > 0:
        scales.append(0.8 * tw / extent[0])
    if extent[1] > 0:
        scales.append(0.8 * th / extent[1])
    if not scales:
        raise PathError("degenerate bounding box: glyph has zero extent")
    s = min(scales)
    center = (lo + hi) / 2.0
    moved = (pts - center) * s + np.array([tw / 2.0, th / 2.0])
    return GlyphPath(
        tuple(
            moved[a:b]
            for a, b in _spans(g.topology)
        ),
        (tw, th),
    )


def _spans(topology):
    at = 0
    for n in topology:
        yield at, at + n
        at += n


def _split_cubic(ctrl: np.ndarray):
    """de Casteljau split at t = 0.5; returns the two halves (4x2 each)."""
    p0, p1, p2, p3 = ctrl
    a = (p0 + p1) / 2.0
    b = (p1 + p2) / 2.0
    c = (p2 + p3) / 2.0
    d = (a + b) / 2.0
    e = (b + c) / 2.0
    f = (d + e) / 2.0
    return np.array([p0, a, d, f]), np.array([f, e, c, p3])


def subdivide(g: GlyphPath, min_points: int) -> GlyphPath:
    """Split the longest segment (chord length) until the glyph has at
    least ``min_points`` control points. No-op when already satisfied.

    Ties break to the lowest (subpath, segment) index, so the result is
    deterministic. Splitting preserves the curve as a point set.
    """
    subs = [list(_segment_list(sp)) for sp in g.subpaths]
    total = g.point_count

    while total < min_points:
        best, best_len = None, -1.0
        for si, segs in enumerate(subs):
            for ki, ctrl in enumerate(segs):
                chord = float(np.hypot(*(ctrl[3] - ctrl[0])))
                if chord > best_len + 1e-15:
                    best, best_len = (si, ki), chord
        si, ki = best
        left, right = _split_cubic(subs[si][ki])
        subs[si][ki : ki + 1] = [left, right]
        total += 3

    rebuilt = []
    for segs in subs:
        pts = []
        for ctrl in segs:
            pts.extend([ctrl[0], ctrl[1], ctrl[2]])
        rebuilt.append(np.asarray(pts))
    return GlyphPath(tuple(rebuilt), g.canvas)


def _segment_list(sp: np.ndarray):
    n = sp.shape[0]
    for k in range(n // 3):
        yield sp[[3 * k, 3 * k + 1, 3 * k + 2, (3 * k + 3) % n]].copy()


def serialize_path(g: GlyphPath) -> str:
    """Emit absolute M/C/Z path data with 6 decimal places."""
    parts = []
    for sp in g.subpaths:
        n = sp.shape[0]
        parts.append(f"M {sp[0, 0]:.6f} {sp[0, 1]:.6f}")
        for k in range(n // 3):
            c1, c2 = sp[3 * k + 1], sp[3 * k + 2]
            p3 = sp[(3 * k + 3) % n]
            parts.append(
                "C "
                f"{c1[0]:.6f} {c1[1]:.6f} "
                f"{c2[0]:.6f} {c2[1]:.6f} "
                f"{p3[0]:.6f} {p3[1]:.6f}"
            )
        parts.append("Z")
    return " ".join(parts)


def cubic_point(ctrl: np.ndarray, t) -> np.ndarray:
    """Evaluate a cubic at parameter t (Bernstein form)."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    u = 1.0 - t
    return (
        u ** 3 * ctrl[0]
        + 3 * u ** 2 * t * ctrl[1]
        + 3 * u * t ** 2 * ctrl[2]
        + t ** 3 * ctrl[3]
    )
