"""
Shared fixtures: small manifolds and datasets that are cheap enough for every test.
"""

import pytest

from nlc_lab.manifold import Dataset, ManifoldSpec, generate_dataset, make_manifold_spec
from nlc_lab.numeric_core import STREAM_POINTS, STREAM_ROTATIONS, fork


@pytest.fixture(name="circle_spec")
def fixture_circle_spec() -> ManifoldSpec:
    """
    The unit circle in the first two coordinates of R^3.
    :return: Spec with identity rotation.
    """
    return make_manifold_spec(3, 1, 1, fork(0, STREAM_ROTATIONS), noise_std=0.0, identity=True)


@pytest.fixture(name="small_spec")
def fixture_small_spec() -> ManifoldSpec:
    """
    Four random circles in R^8.
    :return: Spec.
    """
    return make_manifold_spec(8, 1, 4, fork(3, STREAM_ROTATIONS))


@pytest.fixture(name="small_dataset")
def fixture_small_dataset(small_spec: ManifoldSpec) -> Dataset:
    """
    :param small_spec: Manifold to sample.
    :return: 256 points near `small_spec`.
    """
    return generate_dataset(small_spec, 256, fork(3, STREAM_POINTS), seed=3)
