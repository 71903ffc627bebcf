"""Evaluation proxies for animation quality.

These are deliberately simple, deterministic functions of the rendered
frames; they track relative trends (ablations) rather than any externally
calibrated absolute scale.
"""

from __future__ import annotations

import numpy as np

from .losses import perceptual_proxy

__all__ = ["conformity_proxy", "temporal_consistency_proxy"]


def conformity_proxy(frames: np.ndarray, letter_img: np.ndarray) -> float:
    """Mean over frames of exp(-perceptual distance to the letter render).

    1.0 when every frame equals the letter; decays toward 0 as frames
    drift from it.
    """
    frames = np.asarray(frames, dtype=np.float64)
    letter_img = np.asarray(letter_img, dtype=np.float64)
    scores = [
        np.exp(-perceptual_proxy(f, letter_img)) for f in frames
    ]
    return float(np.mean(scores))


def temporal_consistency_proxy(frames: np.ndarray) -> float:
    """Mean squared difference between adjacent frames; lower is smoother.

    Needs at least two frames.
    """
    frames = np.asarray(frames, dtype=np.float64)
    k = frames.shape[0]
    if k < 2:
        raise ValueError("temporal consistency needs at least 2 frames")
    diffs = frames[1:] - frames[:-1]
    return float((diffs * diffs).mean(axis=(1, 2)).mean())
