import pytest

from carfit.scenegen import SceneGenConfig, make_car_database
from carfit.shapespace import build_shape_space, default_landmarks


@pytest.fixture(scope="session")
def db16():
    return make_car_database(16, seed=3)


@pytest.fixture(scope="session")
def space(db16):
    return build_shape_space(db16, K=4, n_max=5, seed=0)


@pytest.fixture(scope="session")
def lifted_space():
    # Wheel-lifted family: blends have non-coplanar wheels.
    meshes = make_car_database(12, seed=7, wheel_lift_scale=0.04)
    return build_shape_space(meshes, K=2, n_max=3, seed=0)


@pytest.fixture(scope="session")
def landmarks(space):
    return default_landmarks(space.n_vertices)


@pytest.fixture(scope="session")
def small_camera_cfg():
    # Desk-scale camera keeps unit tests fast while preserving geometry.
    return SceneGenConfig(image_width=1200, image_height=900, focal=1000.0)


def pytest_addoption(parser):
    parser.addoption(
        "--apollo-mesh-dir",
        default=None,
        help="OBJ database of the 79 reference meshes for dataset-conditional checks",
    )
