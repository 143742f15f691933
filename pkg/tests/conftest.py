"""Shared fixtures: small, fast benchmark variants for trainer tests."""

from __future__ import annotations

import pytest

from oodkit.datasynth import make_default_benchmark


@pytest.fixture(scope="session")
def small_benchmark():
    """Default geometry at 1/8 scale; enough signal to reach 100% accuracy."""
    return make_default_benchmark(
        seed=0, n_per_class=64, n_per_ood_component=64
    )


@pytest.fixture(scope="session")
def tiny_benchmark():
    """Minimal benchmark for smoke tests of the training plumbing."""
    return make_default_benchmark(
        seed=1, n_per_class=24, n_per_ood_component=24
    )
