"""Finite-difference verification harness."""

import numpy as np
import pytest

from kinetype import gradcheck


def test_ring_glyph_fixture_shape():
    g = gradcheck.ring_glyph(size=32.0, min_points=24)
    assert g.point_count >= 24
    assert len(g.topology) == 2  # outer loop plus hole


def test_run_suite_selects_modules():
    out = gradcheck.run_suite("raster", max_coords=4)
    assert set(out) == {"raster"}
    out = gradcheck.run_suite("losses", max_coords=4)
    assert set(out) == {"legibility", "structure"}
    out = gradcheck.run_suite("fields", max_coords=4)
    assert set(out) == {"fields"}


def test_run_suite_all_modules(rng):
    out = gradcheck.run_suite("all", max_coords=4)
    assert set(out) == {"raster", "legibility", "structure", "fields"}
    for name, err in out.items():
        assert err < 1e-3, name


def test_run_suite_unknown_module():
    with pytest.raises(ValueError):
        gradcheck.run_suite("spaghetti")
