"""Guidance-driven animation of vector letterforms.

A glyph outline (cubic Bézier subpaths) is animated by jointly optimizing
a base displacement field and a per-frame motion field. Rendering is
differentiable end to end through a reverse-mode tape; guidance gradients
from a score-distillation backend pull the frames toward a prompt while
legibility and triangle-structure regularizers keep the letter readable.
"""

from .autodiff import AutodiffError, DiffTensor, Tape
from .engine import EngineError, RunResult, TrainConfig, prepare_glyph, train
from .fields import EncodingConfig, FieldParams, positional_encode
from .geometry import GeometryError, triangle_angles, triangulate
from .glyph import GlyphPath, PathError, normalize_canvas, parse_path, \
    serialize_path, subdivide
from .guidance import ExternalBackend, GuidanceError, MockGuidanceServer, \
    NoiseSchedule, SurrogateBackend, sds_pixel_grad
from .losses import LossWeights, legibility_loss, perceptual_proxy, \
    structure_loss, total_loss
from .metrics import conformity_proxy, temporal_consistency_proxy
from .raster import coverage

__version__ = "0.1.0"

__all__ = [
    "AutodiffError", "DiffTensor", "Tape",
    "EngineError", "RunResult", "TrainConfig", "prepare_glyph", "train",
    "EncodingConfig", "FieldParams", "positional_encode",
    "GeometryError", "triangle_angles", "triangulate",
    "GlyphPath", "PathError", "normalize_canvas", "parse_path",
    "serialize_path", "subdivide",
    "ExternalBackend", "GuidanceError", "MockGuidanceServer",
    "NoiseSchedule", "SurrogateBackend", "sds_pixel_grad",
    "LossWeights", "legibility_loss", "perceptual_proxy",
    "structure_loss", "total_loss",
    "conformity_proxy", "temporal_consistency_proxy",
    "coverage",
    "__version__",
]
