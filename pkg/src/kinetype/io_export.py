"""Artifact output: per-frame SVG documents, grayscale PPM renders, and a
run manifest with content hashes.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os
import re

import numpy as np

from .glyph import GlyphPath, serialize_path

__all__ = ["write_svg_frame", "write_svg_frames", "write_ppm", "read_ppm",
           "extract_path_data", "write_manifest", "export_run"]


def _svg_document(g: GlyphPath) -> str:
    w, h = g.canvas
    return (
        '<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="0 0 {w:g} {h:g}">\n'
        f'  <rect x="0" y="0" width="{w:g}" height="{h:g}" fill="white"/>\n'
        f'  <path d="{serialize_path(g)}" fill="black" '
        'fill-rule="evenodd"/>\n'
        "</svg>\n"
    )


def write_svg_frame(g: GlyphPath, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(_svg_document(g))
    except OSError as e:
        raise IOError(f"cannot write {path}: {e}") from e


def write_svg_frames(frame_glyphs, out_dir: str) -> list:
    """One SVG per frame, frame_0000.svg onward. Returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, g in enumerate(frame_glyphs):
        p = os.path.join(out_dir, f"frame_{i:04d}.svg")
        write_svg_frame(g, p)
        paths.append(p)
    return paths


def write_ppm(raster: np.ndarray, path: str) -> None:
    """Binary grayscale PPM (P5, maxval 255), byte = round(255 * coverage)
    with halves rounding up. Bit-deterministic for identical rasters."""
    arr = np.asarray(raster, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("raster must be 2-d")
    h, w = arr.shape
    data = np.floor(255.0 * np.clip(arr, 0.0, 1.0) + 0.5).astype(np.uint8)
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(data.tobytes())
    except OSError as e:
        raise IOError(f"cannot write {path}: {e}") from e


def read_ppm(path: str) -> np.ndarray:
    """Inverse of write_ppm, returning coverage in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", blob)
    if not m:
        raise ValueError(f"{path}: not a maxval-255 P5 file")
    w, h = int(m.group(1)), int(m.group(2))
    data = np.frombuffer(blob[m.end() : m.end() + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w).astype(np.float64) / 255.0


_PATH_D = re.compile(r'<path[^>]*\bd\s*=\s*"([^"]+)"', re.DOTALL)


def extract_path_data(text: str) -> str:
    """Path data from either raw path-data text or an SVG document (the
    first <path> element's d attribute)."""
    stripped = text.strip()
    if stripped.startswith("<"):
        m = _PATH_D.search(stripped)
        if not m:
            raise ValueError("no <path d=...> element found in SVG input")
        return m.group(1)
    return stripped


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(run: dict, files: list, path: str) -> dict:
    """Manifest JSON: config snapshot, seed, final losses, metrics, and a
    name -> sha256 inventory of the listed files. ``created_at`` is the
    only field expected to differ between identical seeded runs."""
    out_dir = os.path.dirname(os.path.abspath(path))
    inventory = {
        os.path.relpath(p, out_dir): _sha256(p) for p in sorted(files)
    }
    manifest = dict(run)
    manifest["files"] = inventory
    manifest["created_at"] = datetime.datetime.now(
        datetime.timezone.utc
    ).isoformat()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def export_run(result, out_dir: str) -> dict:
    """Write every artifact of a finished run: frame SVGs, frame PPMs, the
    letter render, and manifest.json. Returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    frame_glyphs = [
        result.letter.with_points(pts) for pts in result.frame_points
    ]
    files = write_svg_frames(frame_glyphs, out_dir)
    for i, img in enumerate(result.frames):
        p = os.path.join(out_dir, f"frame_{i:04d}.ppm")
        write_ppm(img, p)
        files.append(p)
    letter_ppm = os.path.join(out_dir, "letter.ppm")
    write_ppm(result.letter_img, letter_ppm)
    files.append(letter_ppm)
    run = {
        "version": 1,
        "config": result.config,
        "seed": result.config["seed"],
        "backend": result.backend,
        "anneal_N": result.anneal_N,
        "final_losses": (result.history[-1] if result.history else None),
        "metrics": result.metrics,
        "triangles": int(result.triangles.shape[0]),
        "control_points": int(result.base_points.shape[0]),
    }
    return write_manifest(run, files, os.path.join(out_dir, "manifest.json"))
