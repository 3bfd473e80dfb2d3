"""Shared fixtures: tiny synthetic datasets and camera helpers."""

from __future__ import annotations

import pytest

from voxsplat.dataset import Dataset, ingest
from voxsplat.synthetic import (PseudoDepthSpec, SyntheticSpec,
                                default_primitives, generate)


@pytest.fixture(scope="session")
def planebox_dataset(tmp_path_factory) -> Dataset:
    """Small mixed-geometry dataset with a striped pseudo-depth view."""
    root = tmp_path_factory.mktemp("planebox")
    spec = SyntheticSpec(
        name="planebox", width=64, height=64, view_count=9,
        primitives=default_primitives("plane-box"), point_count=500,
        gaussian_spacing=0.08, seed=5,
        pseudo=PseudoDepthSpec(stripe_views=(2,)))
    return ingest(generate(spec, root))


@pytest.fixture(scope="session")
def plane_dataset(tmp_path_factory) -> Dataset:
    """Pure-plane dataset: every surface pixel is visible from every view."""
    root = tmp_path_factory.mktemp("plane")
    spec = SyntheticSpec(
        name="plane", width=64, height=64, view_count=9,
        primitives=default_primitives("plane"), point_count=500,
        gaussian_spacing=0.08, seed=11,
        pseudo=PseudoDepthSpec(noise_sigma=1e-4, stripe_views=(2,)))
    return ingest(generate(spec, root))
