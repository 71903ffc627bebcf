"""Coordinate fields: annealed positional encoding, the base displacement
network, and the per-frame motion decomposition (local MLP + global affine).

All forward passes run on an autodiff tape; network weights are plain numpy
arrays lifted to leaf tensors once per optimization step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, Tape

__all__ = [
    "EncodingConfig", "anneal_weights", "positional_encode",
    "MLP", "FieldParams", "lift_params",
    "base_field_forward", "global_transform", "motion_field_forward",
    "TRANSLATION_SCALE", "ROTATION_SCALE", "SCALE_SCALE", "SHEAR_SCALE",
]

# raw global parameters map to the identity transform at zero:
# d = 2.0 d^, rot = 1e-2 r^, s = 1 + 5e-2 s^, sh = 1e-1 sh^
TRANSLATION_SCALE = 2.0
ROTATION_SCALE = 1e-2
SCALE_SCALE = 5e-2
SHEAR_SCALE = 1e-1


@dataclass(frozen=True)
class EncodingConfig:
    """Frequency-band count plus the annealing clock."""

    L: int
    anneal_N: int = 1
    current_iter: int = 0

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if self.anneal_N < 1:
            raise ValueError("anneal_N must be at least 1")
        if self.current_iter < 0:
            raise ValueError("current_iter must be non-negative")


def anneal_weights(current_iter: int, anneal_N: int, L: int) -> np.ndarray:
    """Coarse-to-fine band weights w_j = (1 - cos(pi clamp(a - j, 0, 1)))/2
    with a = L * iter / anneal_N: 0 at iter 0, all 1 from iter anneal_N on.
    """
    alpha = L * current_iter / anneal_N
    j = np.arange(L, dtype=np.float64)
    return (1.0 - np.cos(np.pi * np.clip(alpha - j, 0.0, 1.0))) / 2.0


def positional_encode(p, cfg: EncodingConfig, annealed: bool = False):
    """Sinusoidal lift of coordinates across cfg.L frequency bands.

    Each input coordinate c expands to (sin(2^0 pi c), cos(2^0 pi c), ...,
    sin(2^{L-1} pi c), cos(2^{L-1} pi c)); coordinate blocks are
    concatenated, so the output has 2 L dims per coordinate. There is no
    raw-coordinate passthrough. With ``annealed`` the band-j entries are
    scaled by w_j at cfg.current_iter.

    ``p``: scalar (one coordinate), (d,) one point, or (n, d) points;
    numpy in, numpy out; DiffTensor in, DiffTensor out (differentiable
    in p). Coordinates are expected pre-normalized (canvas to [-1, 1],
    time to [0, 1]).
    """
    L = cfg.L
    freqs = (2.0 ** np.arange(L)) * np.pi  # (L,)
    if annealed:
        w = anneal_weights(cfg.current_iter, cfg.anneal_N, L)
    else:
        w = np.ones(L)
    w2 = w[:, None]  # broadcast over the (sin, cos) pair

    if isinstance(p, DiffTensor):
        squeeze = p.value.ndim < 2
        n = 1 if squeeze else p.shape[0]
        d = p.size if squeeze else p.shape[1]
        q = p.reshape((n, d, 1)) * freqs  # (n, d, L)
        enc = ad.stack([ad.sin(q), ad.cos(q)], axis=3) * w2  # (n, d, L, 2)
        enc = enc.reshape((n, d * L * 2))
        return enc.reshape((d * L * 2,)) if squeeze else enc

    arr = np.asarray(p, dtype=np.float64)
    squeeze = arr.ndim < 2
    pts = arr.reshape(1, -1) if squeeze else arr
    q = pts[:, :, None] * freqs
    enc = (np.stack([np.sin(q), np.cos(q)], axis=3) * w2).reshape(
        pts.shape[0], -1
    )
    return enc[0] if squeeze else enc


class MLP:
    """Fully-connected tanh network; weights are held as numpy arrays.

    The final layer is zero-initialized so the net starts as the zero map
    (residual identity for the fields built on top). Hidden weights are
    drawn from the given RNG, scaled by 1/sqrt(fan_in); biases start at
    zero and the final layer consumes no RNG draws.
    """

    def __init__(self, layer_sizes, rng: np.random.Generator):
        if len(layer_sizes) < 2:
            raise ValueError("an MLP needs at least one layer")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.arrays: list[np.ndarray] = []  # W0, b0, W1, b1, ...
        last = len(self.layer_sizes) - 2
        for i, (nin, nout) in enumerate(
            zip(self.layer_sizes, self.layer_sizes[1:])
        ):
            if i == last:
                w = np.zeros((nin, nout))
            else:
                w = rng.standard_normal((nin, nout)) / np.sqrt(nin)
            self.arrays.append(w)
            self.arrays.append(np.zeros(nout))

    def param_names(self, prefix: str) -> list:
        names = []
        for i in range(len(self.arrays) // 2):
            names.append(f"{prefix}.layer{i}.weight")
            names.append(f"{prefix}.layer{i}.bias")
        return names

    def forward(self, x: DiffTensor, lifted: list) -> DiffTensor:
        """Apply the net using tape-lifted copies of the weight arrays."""
        h = x
        n_layers = len(self.arrays) // 2
        for i in range(n_layers):
            h = ad.matmul(h, lifted[2 * i]) + lifted[2 * i + 1]
            if i < n_layers - 1:
                h = ad.tanh(h)
        return h


@dataclass
class FieldParams:
    """All trainable state: base displacement net, local motion net, and
    the global per-frame affine parameter net, plus the fixed raw-to-
    parameter scaling constants (translation, rotation, scale, shear).
    """

    base_net: MLP
    local_net: MLP
    global_net: MLP
    scaling: tuple = (TRANSLATION_SCALE, ROTATION_SCALE,
                      SCALE_SCALE, SHEAR_SCALE)

    @classmethod
    def create(cls, L_spatial: int, L_time: int,
               rng: np.random.Generator) -> "FieldParams":
        """Build zero-displacement fields. RNG draw order: base_net,
        local_net, global_net hidden layers (final layers draw nothing).
        """
        d_xy = 2 * L_spatial * 2
        d_t = 2 * L_time
        base = MLP([d_xy, 128, 128, 128, 2], rng)
        local = MLP([d_xy + d_t, 128, 128, 128, 2], rng)
        glob = MLP([d_t, 64, 7], rng)
        return cls(base, local, glob)

    def groups(self) -> dict:
        """Parameter arrays by optimization group, in a fixed order."""
        return {
            "base": self.base_net.arrays,
            "local": self.local_net.arrays,
            "global": self.global_net.arrays,
        }

    def group_names(self) -> dict:
        return {
            "base": self.base_net.param_names("base_net"),
            "local": self.local_net.param_names("local_net"),
            "global": self.global_net.param_names("global_net"),
        }


def lift_params(tape: Tape, params: FieldParams) -> dict:
    """Create leaf tensors for every weight array, grouped like groups()."""
    return {
        name: [tape.tensor(a) for a in arrays]
        for name, arrays in params.groups().items()
    }


def _normalize(points, canvas):
    """Map canvas coordinates linearly onto [-1, 1] per axis."""
    scale = np.array([2.0 / canvas[0], 2.0 / canvas[1]])
    return points * scale - 1.0


def base_field_forward(params: FieldParams, lifted_base: list,
                       letter_pts: np.ndarray, canvas: tuple,
                       cfg: EncodingConfig, tape: Tape) -> DiffTensor:
    """P_B = P_letter + base_net(encode(P_letter)): the shared deformed
    letter all frames displace from. Encoding at full band weight (no
    annealing); zero weights give P_B = P_letter exactly.
    """
    enc = positional_encode(_normalize(letter_pts, canvas), cfg)
    disp = params.base_net.forward(tape.tensor(enc), lifted_base)
    return tape.tensor(letter_pts) + disp


def global_transform(raw7: DiffTensor, scaling: tuple,
                     points: DiffTensor) -> DiffTensor:
    """Displacement of ``points`` (centered coordinates, (N, 2)) under the
    per-frame affine built from 7 raw parameters.

    raw7 order: (d_x, d_y, rot, s_x, s_y, sh_x, sh_y), each mapped so zero
    is the identity. The affine is applied as written in the source
    formula: rotate by [[cos, sin], [-sin, cos]] first, then
    x' = s_x qx + sh_x s_y qy + d_x,  y' = sh_y s_x qx + s_y qy + d_y.
    """
    t_s, r_s, s_s, sh_s = scaling
    r = raw7.reshape((7,))
    d_x = ad.gather_flat(r, [0]) * t_s
    d_y = ad.gather_flat(r, [1]) * t_s
    rot = ad.gather_flat(r, [2]) * r_s
    s_x = ad.gather_flat(r, [3]) * s_s + 1.0
    s_y = ad.gather_flat(r, [4]) * s_s + 1.0
    sh_x = ad.gather_flat(r, [5]) * sh_s
    sh_y = ad.gather_flat(r, [6]) * sh_s

    x = (points * np.array([1.0, 0.0])).sum(axis=1)  # (N,)
    y = (points * np.array([0.0, 1.0])).sum(axis=1)
    c, s = ad.cos(rot), ad.sin(rot)
    qx = c * x + s * y
    qy = c * y - s * x
    x2 = s_x * qx + sh_x * s_y * qy + d_x
    y2 = sh_y * s_x * qx + s_y * qy + d_y
    return ad.stack([x2 - x, y2 - y], axis=1)


def motion_field_forward(params: FieldParams, lifted_local: list,
                         lifted_global: list, P_B: DiffTensor, k: int,
                         canvas: tuple, spatial_cfg: EncodingConfig,
                         time_cfg: EncodingConfig, tape: Tape) -> list:
    """Per-frame positions P_V[t] = P_B + local + global displacements.

    Frame times t = i/(k-1) (t = 0 when k = 1). local_net sees the jointly
    encoded (x, y, t) with spatial and time band counts from the two
    configs, both annealed; global_net sees annealed encode(t) and emits
    the 7 raw affine parameters. Returns a list of k (N, 2) tensors.
    """
    if k < 1:
        raise ValueError("frame count must be at least 1")
    n = P_B.shape[0]
    center = np.array([canvas[0] / 2.0, canvas[1] / 2.0])
    norm = P_B * np.array([2.0 / canvas[0], 2.0 / canvas[1]]) - 1.0
    enc_xy = positional_encode(norm, spatial_cfg, annealed=True)  # (N, .)
    centered = P_B - center

    frames = []
    for i in range(k):
        t = i / (k - 1) if k > 1 else 0.0
        enc_t = positional_encode(np.array([t]), time_cfg, annealed=True)
        enc_t_rows = tape.tensor(np.tile(enc_t, (n, 1)))
        local_in = ad.concat([enc_xy, enc_t_rows], axis=1)
        d_local = params.local_net.forward(local_in, lifted_local)
        raw7 = params.global_net.forward(
            tape.tensor(enc_t.reshape(1, -1)), lifted_global
        )
        d_global = global_transform(raw7, params.scaling, centered)
        frames.append(P_B + d_local + d_global)
    return frames
