"""Shared fixtures: small geometries and seeded random images."""

from __future__ import annotations

import numpy as np
import pytest

from respf.arrays import Image
from respf.geometry import make_geometry


@pytest.fixture
def rng():
    return np.random.default_rng(20260825)


@pytest.fixture
def small_geom():
    """32x32 grid, 48 views; fast enough for per-module tests."""
    return make_geometry(32, 32, pixel_size=1.0, n_views=48)


def random_image(rng: np.random.Generator, width: int, height: int, pixel_size: float = 1.0) -> Image:
    return Image(rng.uniform(0.0, 1.0, size=(height, width)), pixel_size=pixel_size)
