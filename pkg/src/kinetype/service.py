"""HTTP facade over the optimization engine.

Animation runs are long, so POST /animate returns a job id immediately and
the run executes on a worker thread; progress (per-iteration loss records)
is polled from GET /jobs/{id}. The one-shot helpers (triangulate,
rasterize, eval, check-grad) respond synchronously. The CLI is a thin
client of this API.
"""

from __future__ import annotations

import threading
import traceback
import uuid
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import gradcheck, guidance, io_export, metrics
from .engine import TrainConfig, prepare_glyph, train
from .geometry import GeometryError, triangulate
from .glyph import PathError, parse_path, subdivide
from .io_export import extract_path_data
from .raster import coverage

__all__ = ["create_app", "JobRegistry"]


class AnimateRequest(BaseModel):
    glyph: str = Field(description="path data or SVG document text")
    prompt: str = ""
    config: dict = Field(default_factory=dict)
    guidance: str = Field(
        default="surrogate",
        description="'surrogate' (target = target_glyph or the input "
                    "letter) or 'external:<host:port>'",
    )
    target_glyph: Optional[str] = None
    out_dir: Optional[str] = Field(
        default=None, description="server-side directory for artifacts"
    )
    seed: Optional[int] = None


class JobInfo(BaseModel):
    id: str
    status: str  # queued | running | done | error
    iteration: int
    total_iterations: int
    history: list
    error: Optional[str] = None
    metrics: Optional[dict] = None
    manifest_path: Optional[str] = None


class TriangulateRequest(BaseModel):
    glyph: str
    points: int = 0  # subdivision target; 0 keeps parsed points
    canvas: float = 64.0


class RasterizeRequest(BaseModel):
    glyph: str
    res: int = 64
    softness: float = 2.0
    flatten_n: int = 8


class EvalRequest(BaseModel):
    frames: list  # SVG/path-data text per frame
    letter: str
    res: int = 64


class CheckGradRequest(BaseModel):
    module: str = "all"
    max_coords: int = 64


class _Job:
    def __init__(self, total: int):
        self.status = "queued"
        self.iteration = 0
        self.total = total
        self.history: list = []
        self.error: Optional[str] = None
        self.metrics: Optional[dict] = None
        self.manifest_path: Optional[str] = None
        self.lock = threading.Lock()


class JobRegistry:
    def __init__(self):
        self._jobs: dict[str, _Job] = {}
        self._lock = threading.Lock()

    def create(self, total: int) -> tuple:
        job_id = uuid.uuid4().hex
        job = _Job(total)
        with self._lock:
            self._jobs[job_id] = job
        return job_id, job

    def get(self, job_id: str) -> _Job:
        with self._lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404,
                                detail=f"no such job {job_id}")
        return job


def _load_glyph_text(text: str, cfg: TrainConfig):
    return prepare_glyph(extract_path_data(text), cfg)


def _make_backend(spec: str, target_frames: np.ndarray):
    if spec == "surrogate":
        return guidance.SurrogateBackend(target_frames)
    if spec.startswith("external:"):
        hostport = spec.split(":", 1)[1]
        host, _, port = hostport.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(
                f"bad external backend '{spec}', want external:<host:port>"
            )
        return guidance.ExternalBackend(host, int(port))
    raise ValueError(f"unknown guidance backend '{spec}'")


def _run_job(job: _Job, req: AnimateRequest, cfg: TrainConfig):
    try:
        letter = _load_glyph_text(req.glyph, cfg)
        target_text = req.target_glyph if req.target_glyph else req.glyph
        target = _load_glyph_text(target_text, cfg)
        target_img = coverage(target.points(), target.topology,
                              cfg.resolution, cfg.resolution,
                              softness=cfg.softness,
                              flatten_n=cfg.flatten_n)
        target_frames = np.broadcast_to(
            target_img, (cfg.frames, cfg.resolution, cfg.resolution)
        ).copy()
        backend = _make_backend(req.guidance, target_frames)

        def on_iteration(record):
            with job.lock:
                job.iteration = record["iteration"]
                job.history.append(record)

        with job.lock:
            job.status = "running"
        result = train(letter, cfg, backend, on_iteration=on_iteration,
                       checkpoint_dir=req.out_dir)
        manifest_path = None
        if req.out_dir:
            io_export.export_run(result, req.out_dir)
            manifest_path = f"{req.out_dir}/manifest.json"
        with job.lock:
            job.status = "done"
            job.metrics = result.metrics
            job.manifest_path = manifest_path
    except Exception as e:  # job errors surface through the API
        with job.lock:
            job.status = "error"
            job.error = f"{e}\n{traceback.format_exc()}"


def create_app() -> FastAPI:
    app = FastAPI(title="kinetype", version="0.1.0")
    registry = JobRegistry()

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/animate")
    def animate(req: AnimateRequest):
        try:
            cfg = TrainConfig.from_dict(dict(req.config))
        except (ValueError, TypeError) as e:
            raise HTTPException(status_code=422, detail=str(e))
        if req.prompt:
            cfg.prompt = req.prompt
        if req.seed is not None:
            cfg.seed = req.seed
        job_id, job = registry.create(cfg.iterations)
        thread = threading.Thread(target=_run_job, args=(job, req, cfg),
                                  daemon=True)
        thread.start()
        return {"job_id": job_id}

    @app.get("/jobs/{job_id}", response_model=JobInfo)
    def job_info(job_id: str, since: int = 0):
        job = registry.get(job_id)
        with job.lock:
            return JobInfo(
                id=job_id, status=job.status, iteration=job.iteration,
                total_iterations=job.total,
                history=[r for r in job.history if r["iteration"] > since],
                error=job.error, metrics=job.metrics,
                manifest_path=job.manifest_path,
            )

    @app.post("/triangulate")
    def do_triangulate(req: TriangulateRequest):
        try:
            g = parse_path(extract_path_data(req.glyph),
                           (req.canvas, req.canvas))
            if req.points > 0:
                g = subdivide(g, req.points)
            tris = triangulate(g.points())
        except (PathError, GeometryError, ValueError) as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {
            "points": g.points().tolist(),
            "triangles": [list(t) for t in tris],
            "count": len(tris),
        }

    @app.post("/rasterize")
    def do_rasterize(req: RasterizeRequest):
        try:
            cfg = TrainConfig.desk(resolution=req.res, iterations=1,
                                   softness=req.softness,
                                   flatten_n=req.flatten_n)
            g = _load_glyph_text(req.glyph, cfg)
            img = coverage(g.points(), g.topology, req.res, req.res,
                           softness=req.softness, flatten_n=req.flatten_n)
        except (PathError, ValueError) as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {"res": req.res, "pixels": img.tolist()}

    @app.post("/eval")
    def do_eval(req: EvalRequest):
        try:
            cfg = TrainConfig.desk(resolution=req.res, iterations=1)
            letter = _load_glyph_text(req.letter, cfg)
            letter_img = coverage(letter.points(), letter.topology,
                                  req.res, req.res)
            frames = []
            for text in req.frames:
                g = parse_path(extract_path_data(text),
                               (req.res, req.res))
                frames.append(coverage(g.points(), g.topology,
                                       req.res, req.res))
            frames = np.stack(frames)
            out = {"conformity": metrics.conformity_proxy(
                frames, letter_img)}
            if frames.shape[0] >= 2:
                out["temporal_consistency"] = (
                    metrics.temporal_consistency_proxy(frames))
            return out
        except (PathError, ValueError) as e:
            raise HTTPException(status_code=422, detail=str(e))

    @app.post("/check-grad")
    def do_check_grad(req: CheckGradRequest):
        try:
            results = gradcheck.run_suite(req.module, req.max_coords)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))
        return {
            "results": results,
            "max_error": max(results.values()),
            "passed": all(v < 1e-3 for v in results.values()),
        }

    return app
