import numpy as np
import pytest

from fullvel import kernels
from fullvel.frames import CameraIntrinsics, RigidTransform, rot_x, rot_y, rot_z


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    """Run the test once per available kernel backend."""
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def k1000():
    return CameraIntrinsics(1000.0, 1000.0, 640.0, 360.0, 1280, 720)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng) -> np.ndarray:
    a = rng.uniform(-np.pi, np.pi, size=3)
    return rot_z(a[0]) @ rot_y(a[1]) @ rot_x(a[2])


def random_transform(rng, scale=5.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-scale, scale, size=3))
