"""Shared fixtures: small deterministic scenes reused across test modules."""

import numpy as np
import pytest

from cloudtrack import synthetic
from cloudtrack.geometry import CameraIntrinsics, RigidMagnitude
from cloudtrack.synthetic import BodySpec, SceneSpec


def small_scene_spec(
    num_frames: int = 8,
    num_queries: int = 6,
    seed: int = 7,
    camera_motion: RigidMagnitude = RigidMagnitude(),
    birth_frames: tuple[int, ...] = (0,),
) -> SceneSpec:
    """A fast-to-render scene: one moving blob over a backdrop plane."""
    return SceneSpec(
        num_frames=num_frames,
        intrinsics=CameraIntrinsics(fx=40.0, fy=40.0, cx=16.0, cy=12.0, width=32, height=24),
        bodies=(
            BodySpec(shape="plane", num_points=600, center=(0.0, 0.0, 6.0),
                     extent=4.0, color=(60, 90, 180)),
            BodySpec(shape="blob", num_points=400, center=(0.3, -0.2, 3.0),
                     extent=0.4, color=(200, 90, 60),
                     motion=RigidMagnitude(max_rotation=0.2, max_translation=0.25)),
        ),
        camera_motion=camera_motion,
        num_queries=num_queries,
        query_birth_frames=birth_frames,
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_bundle():
    return synthetic.generate(small_scene_spec())


@pytest.fixture(scope="session")
def moving_camera_bundle():
    spec = small_scene_spec(
        camera_motion=RigidMagnitude(max_rotation=0.15, max_translation=0.2),
        seed=11,
    )
    return synthetic.generate(spec)


@pytest.fixture(scope="session")
def default_bundle():
    """The reference scene used by the training/evaluation criteria."""
    return synthetic.generate(synthetic.default_spec(seed=0))


@pytest.fixture(scope="session")
def two_planes_bundle():
    return synthetic.generate(synthetic.two_planes_spec(seed=0))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
