import numpy as np
import pytest

from fbw3d import phantom

TINY_DIMS = (32, 32, 32)
TINY_SPACING = (4.7, 4.7, 4.7)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Twelve small phantom cases shared across smoke tests."""
    out = tmp_path_factory.mktemp("tiny_data")
    manifest = phantom.generate_dataset(
        12, seed=7, pop=phantom.PopulationParams(), out_dir=out,
        dims=TINY_DIMS, spacing=TINY_SPACING,
        split_counts=(8, 2, 2),
    )
    return manifest


def random_volume(rng: np.random.Generator, dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0)):
    from fbw3d.datamodel import VolumeGrid

    return VolumeGrid(rng.random(dims, dtype=np.float32), spacing)
