"""Score-distillation guidance: diffusion-style noising, the pixel-gradient
contract, a closed-form surrogate backend, and the external socket backend.

A backend supplies dL/d(pixel) for a batch of rendered frames; the engine
injects that tensor as the upstream gradient of the frames, so the SDS term
shapes gradients without ever contributing to the scalar loss value.

Wire protocol (external backends): newline-delimited UTF-8 JSON over a
stream socket, one request and one response per line. Request fields:
version (=1), prompt, shape [k, H, W], frames (row-major floats), tau
(int or null to let the server choose), seed. Response fields: version,
shape (echo), grads (row-major), tau_used, backend. All floats are
serialized with 9 significant digits; re-encoding a decoded message is
byte-identical.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GuidanceError", "NoiseSchedule", "GuidanceGrad",
    "noise_image", "surrogate_denoiser",
    "SurrogateBackend", "ExternalBackend", "sds_pixel_grad",
    "encode_request", "decode_request", "encode_response",
    "decode_response", "MockGuidanceServer",
]

PROTOCOL_VERSION = 1


class GuidanceError(Exception):
    """Backend or protocol failure; ``reply`` holds the raw reply if any."""

    def __init__(self, message, reply=None):
        super().__init__(message)
        self.reply = reply


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal retention linear in the step index: 0.9999 at
    tau=1 down to 0.01 at tau=T, with alpha^2 + sigma^2 = 1 exactly."""

    T: int = 1000
    alpha_bar_first: float = 0.9999
    alpha_bar_last: float = 0.01

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("schedule needs at least 2 steps")
        if not (0 < self.alpha_bar_last < self.alpha_bar_first < 1):
            raise ValueError("alpha_bar must decrease inside (0, 1)")

    def _check(self, tau: int):
        if not 1 <= tau <= self.T:
            raise GuidanceError(f"tau {tau} outside [1, {self.T}]")

    def alpha_bar(self, tau: int) -> float:
        self._check(tau)
        span = self.alpha_bar_last - self.alpha_bar_first
        return self.alpha_bar_first + span * (tau - 1) / (self.T - 1)

    def alpha(self, tau: int) -> float:
        return float(np.sqrt(self.alpha_bar(tau)))

    def sigma(self, tau: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar(tau)))

    @property
    def tau_range(self) -> tuple:
        """Inclusive sampling range [0.05 T, 0.95 T]."""
        return int(round(0.05 * self.T)), int(round(0.95 * self.T))


def noise_image(x: np.ndarray, tau: int, sched: NoiseSchedule,
                eps: np.ndarray) -> np.ndarray:
    """z_tau = alpha_tau x + sigma_tau eps."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x.shape:
        raise GuidanceError(
            f"noise shape {eps.shape} does not match image {x.shape}"
        )
    return sched.alpha(tau) * x + sched.sigma(tau) * eps


def surrogate_denoiser(z: np.ndarray, tau: int, sched: NoiseSchedule,
                       target: np.ndarray) -> np.ndarray:
    """The exact noise that would map ``target`` to ``z``:
    eps_hat = (z - alpha tau * target) / sigma_tau, so eps_hat - eps =
    (alpha/sigma) (x - target) and the drawn noise cancels algebraically.
    """
    z = np.asarray(z, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != z.shape:
        raise GuidanceError(
            f"target shape {target.shape} does not match {z.shape}"
        )
    sigma = sched.sigma(tau)
    if sigma == 0.0:
        raise GuidanceError("sigma is zero at this step")
    return (z - sched.alpha(tau) * target) / sigma


@dataclass(frozen=True)
class GuidanceGrad:
    """Pixel gradients with the tau weighting already applied."""

    grads: np.ndarray  # (k, H, W)
    tau_used: int
    backend: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.grads)):
            raise GuidanceError("non-finite guidance gradients")


class SurrogateBackend:
    """Closed-form stand-in for a frozen denoiser: pulls frames toward a
    fixed target raster sequence. w_tau: "one" (w=1) or "sigma2"."""

    name = "surrogate"

    def __init__(self, target: np.ndarray, sched: NoiseSchedule = None,
                 w_tau: str = "one"):
        self.target = np.asarray(target, dtype=np.float64)
        self.sched = sched or NoiseSchedule()
        if w_tau not in ("one", "sigma2"):
            raise ValueError("w_tau must be 'one' or 'sigma2'")
        self.w_tau = w_tau

    def pixel_grads(self, frames, prompt, tau, eps, rng):
        z = noise_image(frames, tau, self.sched, eps)
        eps_hat = surrogate_denoiser(z, tau, self.sched, self.target)
        w = 1.0 if self.w_tau == "one" else self.sched.sigma(tau) ** 2
        return w * (eps_hat - eps), tau


class ExternalBackend:
    """Socket client for the wire protocol; one blocking request at a
    time, fresh connection per request."""

    name = "external"

    def __init__(self, host: str, port: int, timeout: float = 120.0):
        self.host = host
        self.port = int(port)
        self.timeout = timeout

    def pixel_grads(self, frames, prompt, tau, eps, rng):
        frames = np.asarray(frames, dtype=np.float64)
        seed = int(rng.integers(0, 2 ** 31 - 1))
        payload = encode_request(frames, prompt, tau, seed)
        try:
            with socket.create_connection(
                (self.host, self.port), timeout=self.timeout
            ) as conn:
                conn.sendall(payload)
                reply = _read_line(conn, self.timeout)
        except OSError as e:
            raise GuidanceError(f"guidance backend unreachable: {e}") from e
        grad = decode_response(reply, frames.shape)
        return grad.grads, grad.tau_used


def _read_line(conn: socket.socket, timeout: float) -> bytes:
    conn.settimeout(timeout)
    chunks = []
    while True:
        try:
            data = conn.recv(65536)
        except socket.timeout:
            raise GuidanceError(
                f"guidance backend timed out after {timeout}s"
            ) from None
        if not data:
            break
        chunks.append(data)
        if b"\n" in data:
            break
    line = b"".join(chunks)
    if not line:
        raise GuidanceError("guidance backend closed the connection")
    return line.split(b"\n", 1)[0]


def sds_pixel_grad(frames: np.ndarray, backend, prompt: str,
                   rng: np.random.Generator, sched: NoiseSchedule = None,
                   tau: int = None, eps: np.ndarray = None) -> GuidanceGrad:
    """One guidance step: sample tau uniformly from the schedule range and
    eps from the standard normal (in that order, unless supplied), get
    pixel gradients from the backend, validate shape and finiteness.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise GuidanceError(f"frames must be (k, H, W), got {frames.shape}")
    sched = sched or NoiseSchedule()
    if tau is None:
        lo, hi = sched.tau_range
        tau = int(rng.integers(lo, hi + 1))
    if eps is None:
        eps = rng.standard_normal(frames.shape)
    grads, tau_used = backend.pixel_grads(frames, prompt, tau, eps, rng)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != frames.shape:
        raise GuidanceError(
            f"backend returned shape {grads.shape}, expected {frames.shape}"
        )
    return GuidanceGrad(grads=grads, tau_used=int(tau_used),
                        backend=backend.name)


# -- wire codec ---------------------------------------------------------------


def _fmt(v: float) -> str:
    """9-significant-digit decimal; the protocol's float quantization."""
    return f"{float(v):.9g}"


def _fmt_array(a: np.ndarray) -> str:
    return ",".join(_fmt(v) for v in a.ravel())


def encode_request(frames: np.ndarray, prompt: str, tau,
                   seed: int) -> bytes:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise GuidanceError(f"frames must be (k, H, W), got {frames.shape}")
    k, h, w = frames.shape
    tau_s = "null" if tau is None else str(int(tau))
    line = (
        f'{{"version":{PROTOCOL_VERSION},"prompt":{json.dumps(prompt)},'
        f'"shape":[{k},{h},{w}],"frames":[{_fmt_array(frames)}],'
        f'"tau":{tau_s},"seed":{int(seed)}}}\n'
    )
    return line.encode("utf-8")


def _require(obj: dict, field: str):
    if field not in obj:
        raise GuidanceError(f"message missing field '{field}'", reply=obj)
    return obj[field]


def _parse_message(raw) -> dict:
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise GuidanceError(f"malformed message: {e}", reply=text) from e
    if not isinstance(obj, dict):
        raise GuidanceError("message is not an object", reply=text)
    version = _require(obj, "version")
    if version != PROTOCOL_VERSION:
        raise GuidanceError(f"unsupported protocol version {version}",
                            reply=text)
    return obj


def _shaped(values, shape, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    expected = int(np.prod(shape))
    if arr.ndim != 1 or arr.size != expected:
        raise GuidanceError(
            f"{what} has {arr.size} values, shape {list(shape)} needs "
            f"{expected}"
        )
    return arr.reshape(shape)


def decode_request(raw) -> dict:
    """Parse and validate a request line; returns a dict with 'frames' as
    a (k, H, W) array and the remaining fields as plain values."""
    obj = _parse_message(raw)
    prompt = _require(obj, "prompt")
    shape = _require(obj, "shape")
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(s, int) and s > 0 for s in shape)):
        raise GuidanceError(f"bad shape {shape!r}", reply=obj)
    frames = _shaped(_require(obj, "frames"), shape, "frames")
    tau = _require(obj, "tau")
    if tau is not None and not isinstance(tau, int):
        raise GuidanceError(f"tau must be an integer or null, got {tau!r}",
                            reply=obj)
    seed = _require(obj, "seed")
    if not isinstance(seed, int):
        raise GuidanceError(f"seed must be an integer, got {seed!r}",
                            reply=obj)
    return {"prompt": prompt, "shape": tuple(shape), "frames": frames,
            "tau": tau, "seed": seed}


def encode_response(grads: np.ndarray, tau_used: int,
                    backend: str) -> bytes:
    grads = np.asarray(grads, dtype=np.float64)
    k, h, w = grads.shape
    line = (
        f'{{"version":{PROTOCOL_VERSION},"shape":[{k},{h},{w}],'
        f'"grads":[{_fmt_array(grads)}],"tau_used":{int(tau_used)},'
        f'"backend":{json.dumps(backend)}}}\n'
    )
    return line.encode("utf-8")


def encode_error(message: str) -> bytes:
    line = (f'{{"version":{PROTOCOL_VERSION},'
            f'"error":{json.dumps(str(message))}}}\n')
    return line.encode("utf-8")


def decode_response(raw, expected_shape) -> GuidanceGrad:
    obj = _parse_message(raw)
    if "error" in obj:
        raise GuidanceError(f"backend error: {obj['error']}", reply=obj)
    shape = _require(obj, "shape")
    if tuple(shape) != tuple(expected_shape):
        raise GuidanceError(
            f"response shape {shape} does not echo request "
            f"{list(expected_shape)}", reply=obj,
        )
    grads = _shaped(_require(obj, "grads"), shape, "grads")
    if not np.all(np.isfinite(grads)):
        raise GuidanceError("non-finite values in grads", reply=obj)
    tau_used = _require(obj, "tau_used")
    backend = _require(obj, "backend")
    return GuidanceGrad(grads=grads, tau_used=int(tau_used),
                        backend=str(backend))


# -- mock server --------------------------------------------------------------


class _MockHandler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            line = self.rfile.readline()
            if not line:
                return
            if not line.strip():
                continue
            try:
                req = decode_request(line)
            except GuidanceError as e:
                self.wfile.write(encode_error(str(e)))
                self.wfile.flush()
                continue
            tau = req["tau"] if req["tau"] is not None else 500
            grads = np.full(req["shape"], self.server.constant)
            self.wfile.write(encode_response(grads, tau, "mock"))
            self.wfile.flush()


class MockGuidanceServer(socketserver.TCPServer):
    """Constant-gradient echo backend for protocol tests.

    Serves one connection at a time (requests on a connection are handled
    sequentially). Use as a context manager or via start()/stop().
    """

    allow_reuse_address = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 constant: float = 0.0):
        super().__init__((host, port), _MockHandler)
        self.constant = float(constant)
        self._thread = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self):
        self._thread = threading.Thread(
            target=self.serve_forever, daemon=True
        )
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
        return False
