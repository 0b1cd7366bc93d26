import math

import numpy as np
import pytest

from geometry import CameraModel, RigidTransform
from gdsp import MapParams
from robot import planar_3dof, ur5


@pytest.fixture
def planar():
    return planar_3dof()


@pytest.fixture
def arm():
    return ur5()


@pytest.fixture
def unit_params():
    """A 1 m cube of 10 cm voxels with a small particle budget (cap 10 per voxel)."""
    return MapParams(lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), voxel_size=0.1,
                     max_particles=10_000, dt=0.1)


@pytest.fixture
def axis_camera():
    """Camera at the origin looking along +z, 50x50 degree view in 10 degree pyramids."""
    return CameraModel(RigidTransform.identity(), math.radians(50), math.radians(50), math.radians(10),
                       max_range=4.0, rows=40, cols=40)


@pytest.fixture
def top_camera():
    """Camera above the unit cube looking straight down at its center."""
    pose = RigidTransform.look_at((0.5, 0.5, 3.0), (0.5, 0.5, 0.0), up=(0.0, 1.0, 0.0))
    return CameraModel(pose, math.radians(58), math.radians(45), math.radians(2), max_range=4.0,
                       rows=60, cols=80)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
