"""Command-line interface.

Every data-plane subcommand is a thin HTTP client: it talks to a running
service (``--server URL``) or, by default, spins up a private in-process
server on a random loopback port for the duration of the command. This
keeps one code path between interactive use and deployments.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading
import time

import httpx
import numpy as np


def _read_arg_text(value: str) -> str:
    """Treat the argument as a file path if one exists, else as inline text."""
    if os.path.exists(value):
        with open(value, "r", encoding="utf-8") as f:
            return f.read()
    return value


class _EphemeralServer:
    """In-process uvicorn bound to a random loopback port."""

    def __enter__(self):
        import uvicorn

        from .service import create_app

        config = uvicorn.Config(create_app(), host="127.0.0.1", port=0,
                                log_level="error")
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()
        deadline = time.monotonic() + 15.0
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("embedded server failed to start")
            time.sleep(0.01)
        port = self._server.servers[0].sockets[0].getsockname()[1]
        self.url = f"http://127.0.0.1:{port}"
        return self

    def __exit__(self, *exc):
        self._server.should_exit = True
        self._thread.join(timeout=10.0)
        return False


class _Client:
    """httpx wrapper that reuses --server or owns an ephemeral one."""

    def __init__(self, server_url):
        self._own = None
        if server_url:
            self.url = server_url.rstrip("/")
        else:
            self._own = _EphemeralServer().__enter__()
            self.url = self._own.url
        self.http = httpx.Client(base_url=self.url, timeout=600.0)

    def close(self):
        self.http.close()
        if self._own is not None:
            self._own.__exit__()

    def post(self, path, payload):
        r = self.http.post(path, json=payload)
        if r.status_code != 200:
            try:
                detail = r.json().get("detail", r.text)
            except Exception:
                detail = r.text
            raise RuntimeError(f"{path}: {detail}")
        return r.json()

    def get(self, path, **params):
        r = self.http.get(path, params=params)
        if r.status_code != 200:
            raise RuntimeError(f"{path}: HTTP {r.status_code}")
        return r.json()


def _cmd_animate(args) -> int:
    client = _Client(args.server)
    try:
        config = {}
        if args.config:
            with open(args.config, "r", encoding="utf-8") as f:
                config = json.load(f)
        payload = {
            "glyph": _read_arg_text(args.glyph),
            "prompt": args.prompt,
            "config": config,
            "out_dir": os.path.abspath(args.out),
        }
        if args.seed is not None:
            payload["seed"] = args.seed
        spec = args.guidance
        if spec.startswith("surrogate:"):
            payload["guidance"] = "surrogate"
            payload["target_glyph"] = _read_arg_text(spec.split(":", 1)[1])
        else:
            payload["guidance"] = spec
        job_id = client.post("/animate", payload)["job_id"]

        last = 0
        while True:
            info = client.get(f"/jobs/{job_id}", since=last)
            for rec in info["history"]:
                print(f"iter {rec['iteration']}/{info['total_iterations']} "
                      f"loss={rec['loss']:.6g} "
                      f"legibility={rec['legibility']:.6g} "
                      f"structure={rec['structure']:.6g}")
                last = rec["iteration"]
            if info["status"] == "done":
                m = info["metrics"] or {}
                parts = " ".join(f"{k}={v:.6g}" for k, v in sorted(m.items()))
                print(f"done. {parts}")
                if info["manifest_path"]:
                    print(f"manifest: {info['manifest_path']}")
                return 0
            if info["status"] == "error":
                print(f"animate failed:\n{info['error']}", file=sys.stderr)
                return 1
            time.sleep(0.05)
    finally:
        client.close()


def _cmd_triangulate(args) -> int:
    client = _Client(args.server)
    try:
        out = client.post("/triangulate", {
            "glyph": _read_arg_text(args.glyph),
            "points": args.points,
        })
        print(f"{out['count']} triangles over {len(out['points'])} points")
        for t in out["triangles"]:
            print(f"{t[0]} {t[1]} {t[2]}")
        return 0
    finally:
        client.close()


def _cmd_rasterize(args) -> int:
    from .io_export import write_ppm

    client = _Client(args.server)
    try:
        out = client.post("/rasterize", {
            "glyph": _read_arg_text(args.glyph),
            "res": args.res,
        })
        img = np.asarray(out["pixels"], dtype=np.float64)
        write_ppm(img, args.out)
        print(f"wrote {args.out} ({args.res}x{args.res})")
        return 0
    finally:
        client.close()


def _cmd_check_grad(args) -> int:
    client = _Client(args.server)
    try:
        out = client.post("/check-grad", {"module": args.module})
        for name in sorted(out["results"]):
            err = out["results"][name]
            status = "ok" if err < 1e-3 else "FAIL"
            print(f"{name}: {err:.3e} {status}")
        return 0 if out["passed"] else 1
    finally:
        client.close()


def _cmd_eval(args) -> int:
    frame_paths = sorted(
        os.path.join(args.frames, n) for n in os.listdir(args.frames)
        if n.endswith(".svg")
    )
    if not frame_paths:
        print(f"no .svg frames in {args.frames}", file=sys.stderr)
        return 1
    frames = []
    for p in frame_paths:
        with open(p, "r", encoding="utf-8") as f:
            frames.append(f.read())
    client = _Client(args.server)
    try:
        out = client.post("/eval", {
            "frames": frames,
            "letter": _read_arg_text(args.letter),
            "res": args.res,
        })
        for k in sorted(out):
            print(f"{k}={out[k]:.6g}")
        return 0
    finally:
        client.close()


def _cmd_mock_guidance(args) -> int:
    from .guidance import MockGuidanceServer

    server = MockGuidanceServer(port=args.port, constant=args.constant)
    server.start()
    print(f"mock guidance listening on 127.0.0.1:{server.port}", flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        return 0
    finally:
        server.stop()


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port,
                log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kinetype",
        description="animate vector letterforms under guidance-driven "
                    "optimization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_server(p):
        p.add_argument("--server", default=None,
                       help="URL of a running service; default spins up a "
                            "private in-process server")

    p = sub.add_parser("animate", help="optimize an animation for a glyph")
    p.add_argument("--glyph", required=True,
                   help="SVG file, path-data file, or inline path data")
    p.add_argument("--prompt", default="", help="guidance prompt text")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--guidance", default="surrogate",
                   help="surrogate | surrogate:<target svg/path> | "
                        "external:<host:port>")
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--seed", type=int, default=None)
    add_server(p)
    p.set_defaults(func=_cmd_animate)

    p = sub.add_parser("triangulate", help="print the control-point mesh")
    p.add_argument("--glyph", required=True)
    p.add_argument("--points", type=int, default=0,
                   help="subdivide outline to at least this many points")
    add_server(p)
    p.set_defaults(func=_cmd_triangulate)

    p = sub.add_parser("rasterize", help="render a glyph to a PPM image")
    p.add_argument("--glyph", required=True)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True)
    add_server(p)
    p.set_defaults(func=_cmd_rasterize)

    p = sub.add_parser("check-grad",
                       help="finite-difference gradient verification")
    p.add_argument("--module", default="all",
                   choices=["all", "raster", "losses", "fields"])
    add_server(p)
    p.set_defaults(func=_cmd_check_grad)

    p = sub.add_parser("eval", help="score exported frames against a letter")
    p.add_argument("--frames", required=True, help="directory of frame SVGs")
    p.add_argument("--letter", required=True)
    p.add_argument("--res", type=int, default=64)
    add_server(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("mock-guidance",
                       help="run a constant-gradient guidance server")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--constant", type=float, default=0.0)
    p.set_defaults(func=_cmd_mock_guidance)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
