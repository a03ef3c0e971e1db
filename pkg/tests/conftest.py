import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lidar_uda.geometry import (Box, CameraSpec, Frame, Plane, PointCloud, SceneSpec, SensorConfig,
                                simulate_scan)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def street_scene():
    return SceneSpec([
        Plane(6, 0.0),
        Plane(7, 0.15, (-30, 4, 30, 7)),
        Box(0, (4, -2, 0), (8.4, -0.2, 1.5)),
        Box(3, (-12, 1, 0), (-5, 3.5, 3.2)),
    ])


@pytest.fixture
def small_frame():
    sensor = SensorConfig(beams=8, azimuth_steps=90, mount_height=1.8, vertical_fov=(-25, 5),
                          cameras=(CameraSpec(0.0, width=64, height=32), CameraSpec(180.0, width=64, height=32)))
    return simulate_scan(street_scene(), sensor, seed=3)


def random_cloud(rng, n, labels=True, intensity=True):
    return PointCloud(rng.uniform(-20, 20, (n, 3)),
                      rng.uniform(0, 1, n) if intensity else None,
                      rng.integers(0, 10, n) if labels else None)


# ---------------------------------------------------------------------------
# Shared on-disk fixtures (generated once per session)

SEPARABLE_COUNTS = {"car": 8.0, "truck": 2.0, "tree": 8.0, "hedge": 3.0, "building": 4.0, "pole": 4.0}
# road, sidewalk and terrain one voxel apart in height instead of a few centimetres
SEPARABLE_GROUND = {"curb_height": 0.5, "terrain_height": 1.0}
SURROUND = tuple(CameraSpec(y, width=112, height=56) for y in (0.0, 90.0, 180.0, 270.0))


def tiny_domain(name, beams, frames, counts=None, cameras=SURROUND, **scene):
    from lidar_uda.datasets import DomainSpec, SceneDistribution

    if counts:
        scene["counts"] = dict(counts)
    scenes = SceneDistribution(**scene)
    sensor = SensorConfig(beams=beams, azimuth_steps=90, vertical_fov=(-25, 3), max_range=40, cameras=cameras)
    return DomainSpec(name, sensor, scenes, "shared", frames)


@pytest.fixture(scope="session")
def separable_pair(tmp_path_factory):
    """16- vs 32-beam domains over geometrically separable classes (no size-only distinctions)."""
    from lidar_uda.datasets import GapSpec, make_domain_pair

    root = tmp_path_factory.mktemp("separable")
    gap = GapSpec(tiny_domain("A", 16, 30, SEPARABLE_COUNTS, **SEPARABLE_GROUND),
                  tiny_domain("B", 32, 30, SEPARABLE_COUNTS, **SEPARABLE_GROUND))
    return make_domain_pair(gap, 0, root)


@pytest.fixture(scope="session")
def distilled_separable(separable_pair):
    """Backbone distilled from a noise-free mock teacher on both domains of ``separable_pair``."""
    from lidar_uda.backbone import ArchConfig
    from lidar_uda.datasets import FrameDataset, merge
    from lidar_uda.distill import DistillConfig, MockTeacher, pretrain

    src, tgt = separable_pair
    teacher = MockTeacher(noise_sigma=0.0)
    bb, head, hist = pretrain(merge([FrameDataset(src), FrameDataset(tgt)]), teacher,
                              ArchConfig(width=64, depth=4), DistillConfig(epochs=20, lr=5e-3), 0)
    return bb, head, teacher, hist
