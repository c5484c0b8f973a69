from dataclasses import replace

import pytest

from crossview.config import PipelineConfig, SensorSpec
from crossview.field import FitConfig
from crossview.raysample import RingSpec
from crossview.synthetic import toy_scene, write_completed_clouds, write_dataset


def small_config(root, **kw) -> PipelineConfig:
    """A few-second pipeline over the dataset written by ``small_dataset``."""
    base = PipelineConfig(
        dataset_root=str(root / "data"),
        output_root=str(root / "out"),
        completed_root=str(root / "completed"),
        fit=FitConfig(iterations=3, batch_size=512, eikonal_samples=256),
        rings=RingSpec(radii=(4.0,), heights=(1.0,), origins_per_ring=4, rays_per_origin=16),
        background_voxel=0.5,
        min_points=10,  # car 1 qualifies (34 points per frame), car 2 (at most 6) borrows a donor
        sensors=(SensorSpec("top", position=(12.0, -10.0, 6.0), yaw_deg=90.0, pitch_down_deg=35.0, channels=4,
                            vertical_fov=(-20.0, 0.0), horizontal_fov=(-20.0, 20.0), horizontal_resolution=5.0,
                            max_range=60.0),),
    )
    return replace(base, **kw)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    scene = toy_scene()
    write_dataset(root / "data", scene, n_frames=3, channels=16, horizontal_resolution=2.0)
    write_completed_clouds(root / "completed", scene, spacing=0.2)
    return root


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
