from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


TINY_PHANTOM = dict(height=32, width=32, frames=4, n_patients=6, cores_per_patient=5, benign_fraction=0.6)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """A 30-core, 32x32x4 dataset on disk, shared by tests that only read it."""
    from cinelab.dataset import write_dataset
    from cinelab.phantom import PhantomConfig, generate_dataset

    root = tmp_path_factory.mktemp("tiny") / "ds"
    write_dataset(generate_dataset(PhantomConfig(**TINY_PHANTOM)), root)
    return root


@pytest.fixture
def tiny_dataset(tiny_dataset_dir):
    from cinelab.dataset import read_dataset

    return read_dataset(tiny_dataset_dir, preload=True)
