"""Analytic driving scenes for demos and tests.

The scene is a finite ground rectangle at ``z = 0`` plus solid box-shaped cars
moving on straight lines. :meth:`SyntheticScene.raycast` is a brute-force
minimum over every analytic surface and serves as ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import SensorSpec
from .decomp import Frame
from .geom import OrientedBox, RigidTransform, ray_box_intervals
from .render import SensorModel

GROUND = "ground"


def look_pose(position, yaw_deg: float = 0.0, pitch_down_deg: float = 0.0) -> RigidTransform:
    """Sensor-to-world pose for a sensor at ``position`` heading ``yaw`` and pitched down."""
    p = np.deg2rad(pitch_down_deg)
    y = np.deg2rad(yaw_deg)
    ry = np.array([[np.cos(p), 0, np.sin(p)], [0, 1, 0], [-np.sin(p), 0, np.cos(p)]])
    rz = np.array([[np.cos(y), -np.sin(y), 0], [np.sin(y), np.cos(y), 0], [0, 0, 1]])
    return RigidTransform(rz @ ry, position)


@dataclass(frozen=True)
class BoxCar:
    track_id: str
    start: tuple
    velocity: tuple
    size: tuple = (4.5, 1.8, 1.5)

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.velocity[1], self.velocity[0]))

    def box_at(self, time: float) -> OrientedBox:
        x = self.start[0] + self.velocity[0] * time
        y = self.start[1] + self.velocity[1] * time
        return OrientedBox((x, y, self.size[2] / 2.0), self.size, self.yaw)

    def surface_samples(self, spacing: float = 0.05) -> np.ndarray:
        """Points on all six faces in the box-local frame (a stand-in for a completion network)."""
        half = np.asarray(self.size) / 2.0
        out = []
        for ax in range(3):
            a, b = [i for i in range(3) if i != ax]
            ua = np.linspace(-half[a], half[a], int(np.ceil(2 * half[a] / spacing)) + 1)
            ub = np.linspace(-half[b], half[b], int(np.ceil(2 * half[b] / spacing)) + 1)
            ga, gb = np.meshgrid(ua, ub, indexing="ij")
            for sgn in (-1.0, 1.0):
                p = np.zeros((ga.size, 3))
                p[:, a], p[:, b], p[:, ax] = ga.ravel(), gb.ravel(), sgn * half[ax]
                out.append(p)
        return np.unique(np.concatenate(out).round(9), axis=0)


@dataclass
class SyntheticScene:
    cars: list = field(default_factory=list)
    ground_extent: tuple = (-40.0, 40.0, -30.0, 30.0)  # xmin, xmax, ymin, ymax
    dt: float = 0.1

    def boxes_at(self, frame_id: int):
        return [(c.track_id, c.box_at(frame_id * self.dt)) for c in self.cars]

    def raycast(self, origins, directions, max_range, frame_id: int = 0):
        """First analytic surface per ray: ``(ranges, labels)`` with NaN / None for misses."""
        o = np.asarray(origins, dtype=float).reshape(-1, 3)
        d = np.asarray(directions, dtype=float).reshape(-1, 3)
        n = len(o)
        best = np.full(n, np.inf)
        labels = np.full(n, None, dtype=object)
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(d[:, 2] < 0, -o[:, 2] / d[:, 2], np.inf)
        gp = o + np.where(np.isfinite(tg), tg, 0.0)[:, None] * d
        x0, x1, y0, y1 = self.ground_extent
        on = np.isfinite(tg) & (tg >= 0) & (gp[:, 0] >= x0) & (gp[:, 0] <= x1) & (gp[:, 1] >= y0) & (gp[:, 1] <= y1)
        closer = on & (tg < best)
        best[closer] = tg[closer]
        labels[closer] = GROUND
        for tid, box in self.boxes_at(frame_id):
            t0, _, hit = ray_box_intervals(o, d, box, 0.0, np.inf)
            closer = hit & (t0 < best)
            best[closer] = t0[closer]
            labels[closer] = tid
        miss = best > max_range
        best[miss] = np.nan
        labels[miss] = None
        return best, labels

    def scan(self, sensor: SensorModel, frame_id: int, noise: float = 0.0, rng=None) -> Frame:
        """Simulated LiDAR frame: returns in the sensor frame plus world-frame annotations."""
        d_s = sensor.directions()
        d_w = sensor.pose.apply_vector(d_s)
        o = np.broadcast_to(sensor.pose.translation, d_w.shape)
        r, _ = self.raycast(o, d_w, sensor.max_range, frame_id)
        keep = np.isfinite(r)
        r = r[keep]
        if noise > 0:
            r = r + (rng or np.random.default_rng(frame_id)).normal(0.0, noise, r.shape)
        return Frame(frame_id, frame_id * self.dt, sensor.pose, d_s[keep] * r[:, None], self.boxes_at(frame_id))


def toy_scene() -> SyntheticScene:
    """Ground plus two box cars: one ahead in the next lane, one oncoming."""
    return SyntheticScene(
        cars=[
            BoxCar("1", start=(6.0, 3.5), velocity=(6.0, 0.0)),
            BoxCar("2", start=(24.0, -3.5), velocity=(-6.0, 0.0), size=(4.8, 1.9, 1.6)),
        ],
        ground_extent=(-40.0, 40.0, -30.0, 30.0),
    )


def ego_sensor(x: float, y: float = 0.0, height: float = 1.9, **kw) -> SensorModel:
    kw.setdefault("channels", 128)
    kw.setdefault("vertical_fov", (-25.0, 3.0))
    kw.setdefault("horizontal_resolution", 0.4)
    kw.setdefault("max_range", 60.0)
    return SensorModel(RigidTransform.from_translation((x, y, height)), name="ego", **kw)


def ego_drive(scene: SyntheticScene, n_frames: int = 20, speed: float = 8.0, x0: float = -6.0, **sensor_kw):
    """Frames from an ego vehicle driving along +x on ``y = 0``."""
    return [scene.scan(ego_sensor(x0 + speed * k * scene.dt, **sensor_kw), k) for k in range(n_frames)]


def write_dataset(root, scene: SyntheticScene, n_frames: int = 20, fragment: str = "drive", **sensor_kw):
    """Simulate an ego drive and store it in the dataset layout; returns the frames."""
    frames = ego_drive(scene, n_frames, **sensor_kw)
    io.write_fragment(Path(root) / fragment, frames)
    return frames


def write_completed_clouds(root, scene: SyntheticScene, spacing: float = 0.05) -> None:
    """Box-local surface samples per car, in the completed-cloud import layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for car in scene.cars:
        io.write_points(root / f"{car.track_id}.bin", car.surface_samples(spacing))


def toy_sensors() -> tuple:
    """Two virtual sensors 6 m up on the roadside facing the road.

    ``roadside`` is pitched down so every ray meets the road area the ego
    drive observed; ``upright`` is level with the default vertical field of
    view, so half its pattern looks at never-observed sky.
    """
    return (
        SensorSpec("roadside", position=(12.0, -10.0, 6.0), yaw_deg=90.0, pitch_down_deg=35.0, channels=40,
                   vertical_fov=(-30.0, 10.0), horizontal_fov=(-50.0, 50.0), horizontal_resolution=0.5,
                   max_range=60.0),
        SensorSpec("upright", position=(12.0, -10.0, 6.0), yaw_deg=90.0, pitch_down_deg=0.0, channels=32,
                   vertical_fov=(-25.0, 15.0), horizontal_fov=(-180.0, 180.0), horizontal_resolution=1.0,
                   max_range=60.0),
    )
