"""Cross-view LiDAR synthesis: reconstruct a driving scene from vehicle-side
scans as grid SDF fields and re-render it from arbitrary sensor poses."""

from .config import PipelineConfig, SensorSpec, load_config
from .decomp import Frame, TrackedVehicle, BackgroundCloud
from .field import FitConfig, LossWeights, RayBatch, SdfGridField, fit_field, loss_total
from .geom import OrientedBox, Ray, RigidTransform
from .metrics import MetricsReport, evaluate
from .occupancy import OccupancyGrid, build_occupancy, dilate
from .pipeline import run_pipeline
from .raysample import RingSpec, sample_vehicle_rays
from .render import RenderedFrame, SceneGraph, SensorModel, composite, render_frame

__version__ = "0.1.0"
