"""The joint optimization loop.

Per iteration: forward the base and motion fields, rasterize all frames,
optionally augment, inject guidance pixel-gradients via a dot-product term,
add the legibility and structure regularizers, backprop once, and apply
Adam — odd iterations update base+local nets, even iterations base+global.

Determinism: a single RNG stream seeded from the config. Draws, in order:
parameter init (once, before the loop), then per iteration tau, eps, crop
(scale, x0, y0) and perspective corners when augmentation is on, plus one
request seed when the backend is external.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import fields as F
from . import guidance, losses, raster
from .autodiff import Tape
from .geometry import triangulate
from .glyph import GlyphPath, normalize_canvas, parse_path, subdivide
from .losses import LossWeights
from .metrics import conformity_proxy, temporal_consistency_proxy

__all__ = ["EngineError", "TrainConfig", "RunResult", "Warp", "sample_warp",
           "augment", "AdamState", "adam_step", "prepare_glyph", "train",
           "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"GLYF"
CHECKPOINT_VERSION = 1


class EngineError(RuntimeError):
    """Aborts of the optimization run (bad gradients, backend failure)."""


@dataclass
class TrainConfig:
    iterations: int = 1000
    frames: int = 24
    resolution: int = 256
    lr_base: float = 5e-3
    lr_local: float = 5e-3
    lr_global: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    L_spatial: int = 6
    L_time: int = 4
    anneal_N: int = 0  # 0 resolves to half the iteration count
    seed: int = 0
    prompt: str = ""
    augment: bool = False
    checkpoint_interval: int = 0  # 0 = no periodic checkpoints
    softness: float = 2.0
    flatten_n: int = 8
    min_points: int = 0  # subdivision target; 0 keeps the parsed points

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.frames < 1:
            raise ValueError("frame count must be at least 1")
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8")
        for lr in (self.lr_base, self.lr_local, self.lr_global):
            if lr <= 0:
                raise ValueError("learning rates must be positive")
        if self.L_spatial < 1 or self.L_time < 1:
            raise ValueError("encoding band counts must be at least 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small CPU-friendly configuration for tests and CI."""
        base = dict(resolution=64, frames=8, iterations=300,
                    L_spatial=4, L_time=4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    def resolved_anneal_N(self) -> int:
        return self.anneal_N if self.anneal_N > 0 else max(
            1, self.iterations // 2
        )


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class Warp:
    """One shared crop + perspective draw, applied to every frame."""

    crop_scale: float
    crop_x0: float
    crop_y0: float
    corner_jitter: np.ndarray  # (4, 2) in normalized units, |j| <= 0.05


def sample_warp(rng: np.random.Generator, h: int, w: int, *,
                crop_min: float = 0.85, jitter: float = 0.05) -> Warp:
    """Draw order: crop scale, crop x0, crop y0, then the 4x2 corner
    jitter (row-major)."""
    s = rng.uniform(crop_min, 1.0)
    x0 = rng.uniform(0.0, (1.0 - s) * w)
    y0 = rng.uniform(0.0, (1.0 - s) * h)
    jit = rng.uniform(-jitter, jitter, (4, 2))
    return Warp(float(s), float(x0), float(y0), jit)


def _unit_square_homography(corners: np.ndarray) -> np.ndarray:
    """3x3 map sending (0,0),(1,0),(1,1),(0,1) to the given corners."""
    src = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    rows, rhs = [], []
    for (u, v), (x, y) in zip(src, corners):
        rows.append([u, v, 1, 0, 0, 0, -u * x, -v * x])
        rhs.append(x)
        rows.append([0, 0, 0, u, v, 1, -u * y, -v * y])
        rhs.append(y)
    sol = np.linalg.solve(np.asarray(rows), np.asarray(rhs))
    return np.append(sol, 1.0).reshape(3, 3)


def _warp_source_coords(warp: Warp, h: int, w: int) -> np.ndarray:
    """Source pixel coordinates for every output pixel center, flat (HW, 2).

    Output centers map through the jittered unit-square perspective, then
    into the crop window. Zero jitter and a full-size crop give the
    identity map exactly.
    """
    ys, xs = np.mgrid[0:h, 0:w]
    q = np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1)
    if np.any(warp.corner_jitter != 0.0):
        base = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        hmat = _unit_square_homography(base + warp.corner_jitter)
        den = hmat[2, 0] * q[:, 0] + hmat[2, 1] * q[:, 1] + hmat[2, 2]
        qx = (hmat[0, 0] * q[:, 0] + hmat[0, 1] * q[:, 1] + hmat[0, 2]) / den
        qy = (hmat[1, 0] * q[:, 0] + hmat[1, 1] * q[:, 1] + hmat[1, 2]) / den
        q = np.stack([qx, qy], axis=1)
    s = warp.crop_scale
    return np.stack([
        warp.crop_x0 + q[:, 0] * s * w,
        warp.crop_y0 + q[:, 1] * s * h,
    ], axis=1)


def _bilinear_taps(src: np.ndarray, h: int, w: int):
    """Four (flat index, weight) taps per sample, border-clamped."""
    u = src[:, 0] - 0.5
    v = src[:, 1] - 0.5
    uf, vf = np.floor(u), np.floor(v)
    fu, fv = u - uf, v - vf
    j0 = np.clip(uf, 0, w - 1).astype(np.intp)
    j1 = np.clip(uf + 1, 0, w - 1).astype(np.intp)
    i0 = np.clip(vf, 0, h - 1).astype(np.intp)
    i1 = np.clip(vf + 1, 0, h - 1).astype(np.intp)
    return [
        (i0 * w + j0, (1 - fu) * (1 - fv)),
        (i0 * w + j1, fu * (1 - fv)),
        (i1 * w + j0, (1 - fu) * fv),
        (i1 * w + j1, fu * fv),
    ]


def augment(frames, warp: Warp):
    """Resample all k frames through the shared warp (bilinear, border
    clamp). DiffTensor in, DiffTensor out; ndarray in, ndarray out."""
    k, h, w = frames.shape
    src = _warp_source_coords(warp, h, w)
    taps = _bilinear_taps(src, h, w)
    offsets = (np.arange(k) * (h * w))[:, None]

    if isinstance(frames, ad.DiffTensor):
        out = None
        for idx, wt in taps:
            flat = (offsets + idx[None, :]).ravel()
            term = ad.gather_flat(frames, flat) * np.tile(wt, k)
            out = term if out is None else out + term
        return out.reshape((k, h, w))

    arr = np.asarray(frames, dtype=np.float64).reshape(k, -1)
    out = np.zeros_like(arr)
    for idx, wt in taps:
        out += arr[:, idx] * wt
    return out.reshape(k, h, w)


# -- optimizer ----------------------------------------------------------------


class AdamState:
    """First/second moment buffers plus the group's own step count."""

    def __init__(self, arrays):
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0


def adam_step(arrays, grads, state: AdamState, lr: float, beta1: float,
              beta2: float, eps: float, names) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for a, g, m, v, name in zip(arrays, grads, state.m, state.v, names):
        if not np.all(np.isfinite(g)):
            raise EngineError(f"non-finite gradient for {name}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        a -= lr * (m / b1t) / (np.sqrt(v / b2t) + eps)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: F.FieldParams, cfg: TrainConfig,
                    iteration: int) -> None:
    """Versioned binary blob: magic, u32 version, u32 header length, JSON
    header (config, iteration, array manifest), then raw little-endian
    float64 array data in manifest order."""
    groups = params.groups()
    names = params.group_names()
    manifest = []
    blobs = []
    for gname in ("base", "local", "global"):
        for arr, name in zip(groups[gname], names[gname]):
            manifest.append({"name": name, "group": gname,
                             "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps({
        "iteration": iteration,
        "config": cfg.to_dict(),
        "scaling": list(params.scaling),
        "arrays": manifest,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (FieldParams, TrainConfig, iteration)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise EngineError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise EngineError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack_from("<I", blob, 8)[0]
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    cfg = TrainConfig.from_dict(header["config"])
    params = F.FieldParams.create(cfg.L_spatial, cfg.L_time,
                                  np.random.default_rng(0))
    params.scaling = tuple(header["scaling"])
    flat = [a for g in ("base", "local", "global")
            for a in params.groups()[g]]
    needed = sum(int(np.prod(m["shape"])) * 8 for m in header["arrays"])
    if len(blob) < 12 + hlen + needed:
        raise EngineError(
            f"{path}: truncated checkpoint "
            f"({len(blob)} bytes, need {12 + hlen + needed})"
        )
    at = 12 + hlen
    for arr, meta in zip(flat, header["arrays"]):
        shape = tuple(meta["shape"])
        if shape != arr.shape:
            raise EngineError(
                f"{path}: array {meta['name']} has shape {shape}, "
                f"expected {arr.shape}"
            )
        n = int(np.prod(shape)) * 8
        arr[...] = np.frombuffer(blob[at : at + n], dtype="<f8").reshape(
            shape
        )
        at += n
    return params, cfg, header["iteration"]


# -- training -----------------------------------------------------------------


@dataclass
class RunResult:
    config: dict
    params: F.FieldParams
    letter: GlyphPath
    base_points: np.ndarray  # (N, 2)
    frame_points: np.ndarray  # (k, N, 2)
    frames: np.ndarray  # (k, H, W) coverage
    letter_img: np.ndarray
    triangles: np.ndarray  # (m, 3)
    history: list
    metrics: dict
    anneal_N: int
    backend: str


def prepare_glyph(path_data: str, cfg: TrainConfig) -> GlyphPath:
    """Parse, fit to the render canvas, and subdivide to the configured
    control-point budget."""
    g = parse_path(path_data, (cfg.resolution, cfg.resolution))
    g = normalize_canvas(g, (cfg.resolution, cfg.resolution))
    if cfg.min_points > 0:
        g = subdivide(g, cfg.min_points)
    return g


def _forward(params, lifted, letter_pts, canvas, cfg: TrainConfig,
             anneal_N: int, current_iter: int, tape: Tape):
    base_enc = F.EncodingConfig(cfg.L_spatial)
    sp_enc = F.EncodingConfig(cfg.L_spatial, anneal_N, current_iter)
    tm_enc = F.EncodingConfig(cfg.L_time, anneal_N, current_iter)
    P_B = F.base_field_forward(params, lifted["base"], letter_pts, canvas,
                               base_enc, tape)
    P_V = F.motion_field_forward(params, lifted["local"], lifted["global"],
                                 P_B, cfg.frames, canvas, sp_enc, tm_enc,
                                 tape)
    return P_B, P_V


def train(letter: GlyphPath, cfg: TrainConfig, backend, *,
          on_iteration=None, checkpoint_dir=None) -> RunResult:
    """Optimize the fields for ``cfg.iterations`` steps and return the
    final artifacts. ``backend`` provides SDS pixel gradients (surrogate
    or external). ``on_iteration`` receives each history record as it is
    produced. Guidance failure writes an abort checkpoint (when a
    directory is given) before raising.
    """
    rng = np.random.default_rng(cfg.seed)
    params = F.FieldParams.create(cfg.L_spatial, cfg.L_time, rng)
    anneal_N = cfg.resolved_anneal_N()
    letter_pts = letter.points()
    topology = letter.topology
    canvas = letter.canvas
    res = cfg.resolution
    tris = np.asarray(triangulate(letter_pts), dtype=np.intp)
    letter_img = raster.coverage(letter_pts, topology, res, res,
                                 softness=cfg.softness,
                                 flatten_n=cfg.flatten_n)
    sched = guidance.NoiseSchedule()
    states = {g: AdamState(arrs) for g, arrs in params.groups().items()}
    lrs = {"base": cfg.lr_base, "local": cfg.lr_local,
           "global": cfg.lr_global}
    names = params.group_names()
    history: list = []

    def write_checkpoint(iteration):
        if checkpoint_dir is None:
            return
        os.makedirs(checkpoint_dir, exist_ok=True)
        save_checkpoint(
            os.path.join(checkpoint_dir, f"checkpoint_{iteration:06d}.glyf"),
            params, cfg, iteration,
        )

    w = cfg.weights
    for n in range(1, cfg.iterations + 1):
        it = n - 1
        tape = Tape()
        lifted = F.lift_params(tape, params)
        try:
            P_B, P_V = _forward(params, lifted, letter_pts, canvas, cfg,
                                anneal_N, it, tape)
            frame_imgs = [
                raster.coverage(p, topology, res, res,
                                softness=cfg.softness,
                                flatten_n=cfg.flatten_n)
                for p in P_V
            ]
            frames_t = ad.stack(frame_imgs, axis=0)

            lo, hi = sched.tau_range
            tau = int(rng.integers(lo, hi + 1))
            eps = rng.standard_normal(frames_t.shape)
            if cfg.augment:
                x = augment(frames_t, sample_warp(rng, res, res))
            else:
                x = frames_t

            gg = guidance.sds_pixel_grad(x.value, backend, cfg.prompt, rng,
                                         sched, tau=tau, eps=eps)
            # dot-product injection: the backward pass hands x exactly
            # w_sds * grads; the term's value is excluded from reporting
            dot = (x * (w.w_sds * gg.grads)).sum()
            leg = losses.legibility_loss(P_B, letter, res,
                                         softness=cfg.softness,
                                         flatten_n=cfg.flatten_n,
                                         letter_img=letter_img)
            struct = losses.structure_loss(letter_pts, P_B, P_V, tris,
                                           w.lambda1, w.lambda2)
            total = losses.total_loss(dot, leg, struct, w, it,
                                      cfg.iterations)
            order = ["base", "local", "global"]
            all_lifted = [t for g in order for t in lifted[g]]
            grads_flat = ad.grad(total, all_lifted)
        except guidance.GuidanceError as e:
            write_checkpoint(n)
            raise EngineError(
                f"guidance failure at iteration {n}: {e}"
            ) from e
        except ad.AutodiffError as e:
            raise EngineError(
                f"non-finite computation at iteration {n}: {e}"
            ) from e

        grads_by_group = {}
        at = 0
        for g in order:
            cnt = len(lifted[g])
            grads_by_group[g] = grads_flat[at : at + cnt]
            at += cnt
        active = ("base", "local") if n % 2 == 1 else ("base", "global")
        for g in active:
            adam_step(params.groups()[g], grads_by_group[g], states[g],
                      lrs[g], cfg.beta1, cfg.beta2, cfg.adam_eps, names[g])

        ramp = min(max(it / (0.5 * cfg.iterations), 0.0), 1.0)
        record = {
            "iteration": n,
            "loss": float(ramp * w.w_legibility * leg.value
                          + struct.value),
            "legibility": float(leg.value),
            "structure": float(struct.value),
            "ramp": ramp,
            "tau": tau,
        }
        history.append(record)
        if on_iteration is not None:
            on_iteration(record)
        if cfg.checkpoint_interval > 0 and n % cfg.checkpoint_interval == 0:
            write_checkpoint(n)

    # final artifacts from a fresh forward at the post-training state
    tape = Tape()
    lifted = F.lift_params(tape, params)
    P_B, P_V = _forward(params, lifted, letter_pts, canvas, cfg, anneal_N,
                        cfg.iterations, tape)
    base_points = P_B.value.copy()
    frame_points = np.stack([p.value for p in P_V])
    frames = np.stack([
        raster.coverage(fp, topology, res, res, softness=cfg.softness,
                        flatten_n=cfg.flatten_n)
        for fp in frame_points
    ])
    metrics = {"conformity": conformity_proxy(frames, letter_img)}
    if cfg.frames >= 2:
        metrics["temporal_consistency"] = temporal_consistency_proxy(frames)
    write_checkpoint(cfg.iterations)
    return RunResult(
        config=cfg.to_dict(), params=params, letter=letter,
        base_points=base_points, frame_points=frame_points, frames=frames,
        letter_img=letter_img, triangles=tris, history=history,
        metrics=metrics, anneal_N=anneal_N, backend=backend.name,
    )
