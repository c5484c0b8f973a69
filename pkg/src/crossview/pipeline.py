"""Stage orchestration: decompose, fit-background, fit-vehicles, occupancy, render, eval.

Each stage writes into ``<output_root>/<stage>/`` and finishes by writing a
``DONE`` marker holding the fingerprint of the configuration it ran with. A
stage is skipped when its marker matches the current configuration and no
upstream stage re-ran, so an interrupted run resumes where it stopped. Every
artifact is a pure function of the inputs, the configuration and the seed.

Track keys are ``<fragment>/<track_id>`` so tracks from different fragments
never collide; rendered outputs use the plain track id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import PipelineConfig, dump_config
from .decomp import align_fragments, build_tracks, complete_vehicle, filter_unreconstructable, inside_any
from .field import RayBatch, fit_field, initialize_field, load_field, save_field
from .geom import OrientedBox
from .metrics import evaluate_ranges, summarize
from .occupancy import build_occupancy, dilate, load_occupancy, save_occupancy
from .raysample import RingSpec, assign_rays, sample_vehicle_rays, scan_to_rays
from .render import SceneGraph, VehicleModel, render_frame, substitute_missing

log = logging.getLogger(__name__)

STAGES = ("decompose", "fit-background", "fit-vehicles", "occupancy", "render", "eval")
UPSTREAM = {
    "decompose": (),
    "fit-background": ("decompose",),
    "fit-vehicles": ("decompose",),
    "occupancy": ("decompose",),
    "render": ("fit-background", "fit-vehicles", "occupancy"),
    "eval": ("render",),
}


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class Locked(RuntimeError):
    pass


def _portable(cfg: PipelineConfig) -> str:
    """The configuration as stored in the tree: everything except where the tree lives."""
    return dump_config(replace(cfg, output_root="."))


def fingerprint(cfg: PipelineConfig) -> str:
    return hashlib.sha256(_portable(cfg).encode()).hexdigest()


@contextmanager
def stage_lock(root: Path):
    """Exclusive ownership of ``root``; a lock left by a dead process is taken over."""
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError):
                lock.unlink(missing_ok=True)
                continue
            except PermissionError:
                pass
            raise Locked(f"{root} is locked by process {pid}") from None
    else:
        raise Locked(f"could not acquire {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


def _write_jsonl(path, rows):
    Path(path).write_text("".join(io.dumps(r) + "\n" for r in rows))


def _read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _box(rec) -> OrientedBox:
    return OrientedBox(rec["center"], rec["size"], rec["yaw"])


def _save_rays(path, origins, endpoints):
    np.concatenate([origins, endpoints], axis=1).astype("<f8").tofile(path)


def _load_rays(path) -> RayBatch:
    data = np.fromfile(path, dtype="<f8").reshape(-1, 6)
    o, p = data[:, :3], data[:, 3:]
    v = p - o
    r = np.linalg.norm(v, axis=1)
    return RayBatch(o, v / r[:, None], r, np.zeros(len(r), bool))


def _seed_for(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _rings_for(box: OrientedBox, spec: RingSpec) -> RingSpec:
    """Push rings outward for boxes whose half-diagonal reaches the nearest ring."""
    half = float(np.linalg.norm(box.size) / 2.0)
    if min(spec.radii) > half:
        return spec
    return replace(spec, radii=tuple(r + half for r in spec.radii))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_decompose(cfg: PipelineConfig, out: Path):
    fragments = io.read_dataset(cfg.dataset_root)
    per_frag_rays, per_frag_frames = [], []
    for frag in fragments:
        o_list, p_list = [], []
        for fr in frag.frames:
            rays = scan_to_rays(fr)
            _, bg = assign_rays(rays, fr.boxes, cfg.extract_margin)
            ends = bg.endpoints()
            if fr.pseudo_boxes:
                keep = ~inside_any(ends, fr.pseudo_boxes, cfg.pseudo_margin)
                bg, ends = bg[keep], ends[keep]
            o_list.append(bg.origins)
            p_list.append(ends)
        per_frag_rays.append((np.concatenate(o_list), np.concatenate(p_list)))
        per_frag_frames.append(frag.frames)

    if cfg.align_fragments and len(fragments) > 1:
        corrections = align_fragments([p for _, p in per_frag_rays])
    else:
        corrections = [None] * len(fragments)
    for k, t in enumerate(corrections):
        if t is None or t.allclose(t.identity(), 0.0):
            continue
        o, p = per_frag_rays[k]
        per_frag_rays[k] = (t.apply(o), t.apply(p))
        for fr in per_frag_frames[k]:
            fr.sensor_pose = t @ fr.sensor_pose
            fr.boxes = [(tid, b.transformed(t)) for tid, b in fr.boxes]

    _save_rays(out / "background_rays.bin",
               np.concatenate([o for o, _ in per_frag_rays]), np.concatenate([p for _, p in per_frag_rays]))

    frame_rows, track_rows = [], []
    (out / "vehicles").mkdir()
    for frag, frames in zip(fragments, per_frag_frames):
        for fr in frames:
            frame_rows.append({"fragment": frag.name, "frame_id": fr.frame_id, "timestamp": fr.timestamp})
        tracks = build_tracks(frames, cfg.extract_margin)
        for tid, tr in tracks.items():
            key = f"{frag.name}/{tid}"
            filter_unreconstructable(tr, cfg.min_points)
            cloud = None
            if tr.reconstructable:
                cloud = complete_vehicle(tr, cfg.ground_band, _imported_cloud(cfg, frag.name, tid))
                if len(cloud) == 0:
                    log.warning("track %s has no points after completion; it will borrow a donor", key)
                    tr.reconstructable = False
            if tr.reconstructable:
                path = out / "vehicles" / frag.name / f"{tid}.bin"
                path.parent.mkdir(parents=True, exist_ok=True)
                io.write_points(path, cloud)
            track_rows.append({
                "key": key, "fragment": frag.name, "track_id": tid, "frame_ids": tr.frame_ids,
                "boxes": [io.box_record(tid, b) for b in tr.boxes], "counts": tr.counts(),
                "reconstructable": tr.reconstructable,
            })
    _write_jsonl(out / "frames.jsonl", frame_rows)
    _write_jsonl(out / "tracks.jsonl", track_rows)
    n_rec = sum(r["reconstructable"] for r in track_rows)
    log.info("decompose: %d fragments, %d frames, %d tracks (%d reconstructable)",
             len(fragments), len(frame_rows), len(track_rows), n_rec)
    return {"fragments": len(fragments), "frames": len(frame_rows), "tracks": len(track_rows),
            "reconstructable": n_rec}


def _imported_cloud(cfg, fragment, tid):
    if cfg.completed_root is None:
        return None
    root = Path(cfg.completed_root)
    for cand in (root / fragment / f"{tid}.bin", root / f"{tid}.bin"):
        if cand.exists():
            return io.read_points(cand)
    return None


def stage_fit_background(cfg: PipelineConfig, out: Path, root: Path):
    rays = _load_rays(root / "decompose" / "background_rays.bin")
    if len(rays) == 0:
        raise ValueError("no background rays")
    init = initialize_field(rays, cfg.background_voxel)
    fld = fit_field(rays, replace(cfg.fit, seed=cfg.seed), cfg.weights, init=init, eps=cfg.trace_eps)
    save_field(fld, out / "background.xvsdf")
    log.info("fit-background: %d rays, grid %s", len(rays), fld.resolution)
    return {"rays": len(rays), "resolution": list(fld.resolution)}


def _load_tracks(root: Path):
    return _read_jsonl(root / "decompose" / "tracks.jsonl")


def stage_fit_vehicles(cfg: PipelineConfig, out: Path, root: Path):
    rows = _load_tracks(root)
    fitted = []
    for i, row in enumerate(rows):
        if not row["reconstructable"]:
            continue
        cloud = io.read_points(root / "decompose" / "vehicles" / row["fragment"] / f"{row['track_id']}.bin")
        box = _box(row["boxes"][0])
        seed = _seed_for(cfg.seed, i)
        rays = sample_vehicle_rays(cloud, box, _rings_for(box, cfg.rings), cfg.hit_threshold, seed)
        if not rays.hit.any():
            log.warning("track %s: no ray sample hit the cloud; it will borrow a donor", row["key"])
            continue
        half = box.size / 2.0 + cfg.vehicle_padding
        fld = fit_field(rays, replace(cfg.fit, seed=seed), cfg.weights, voxel_size=cfg.vehicle_voxel,
                        bounds=(-half, half), eps=cfg.trace_eps)
        path = out / row["fragment"] / f"{row['track_id']}.xvsdf"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_field(fld, path)
        fitted.append(row["key"])
    keys = [r["key"] for r in rows]
    subs = substitute_missing(keys, fitted, cfg.seed)
    (out / "fields.json").write_text(io.dumps({"fitted": fitted, "substitutions": subs}) + "\n")
    log.info("fit-vehicles: %d fitted, %d substituted", len(fitted), len(subs))
    return {"fitted": len(fitted), "substituted": len(subs)}


def stage_occupancy(cfg: PipelineConfig, out: Path, root: Path):
    rays = _load_rays(root / "decompose" / "background_rays.bin")
    grid = dilate(build_occupancy(rays.endpoints(), cfg.occupancy_voxel), cfg.dilation_radius)
    save_occupancy(grid, out / "occupancy.xvocc")
    log.info("occupancy: dims %s, %d observed voxels", grid.dims, grid.count())
    return {"dims": [int(v) for v in grid.dims], "observed": grid.count()}


def load_scene(cfg: PipelineConfig, root: Path):
    """Per-fragment scene graphs and frame lists from the persisted artifacts."""
    background = load_field(root / "fit-background" / "background.xvsdf")
    grid = load_occupancy(root / "occupancy" / "occupancy.xvocc")
    meta = json.loads((root / "fit-vehicles" / "fields.json").read_text())
    rows = _load_tracks(root)
    boxes = {r["key"]: [_box(b) for b in r["boxes"]] for r in rows}
    vehicles = {}
    for key in meta["fitted"]:
        frag, tid = key.split("/", 1)
        vehicles[key] = VehicleModel(load_field(root / "fit-vehicles" / frag / f"{tid}.xvsdf"), boxes[key][0])
    frames = {}
    for r in _read_jsonl(root / "decompose" / "frames.jsonl"):
        frames.setdefault(r["fragment"], []).append(r["frame_id"])
    scenes = {}
    for frag in frames:
        timeline = {}
        for r in rows:
            if r["fragment"] != frag:
                continue
            for fid, b in zip(r["frame_ids"], boxes[r["key"]]):
                timeline.setdefault(fid, []).append((r["key"], b))
        scenes[frag] = SceneGraph(background, grid, vehicles, {k: v[0] for k, v in boxes.items()},
                                  timeline, dict(meta["substitutions"]))
    return scenes, frames


def _strip(frame, fragment):
    prefix = f"{fragment}/"
    def plain(s):
        return s[len(prefix):] if isinstance(s, str) and s.startswith(prefix) else s
    frame.sources = np.array([plain(s) for s in frame.sources], dtype=object)
    frame.boxes = [(plain(t), c) for t, c in frame.boxes]
    return frame


def render_dir(root: Path, sensor: str, fragment: str) -> Path:
    return root / "render" / sensor / fragment


def stage_render(cfg: PipelineConfig, out: Path, root: Path):
    scenes, frames = load_scene(cfg, root)
    count = 0
    for spec in cfg.sensors:
        sensor = spec.model()
        for frag, fids in sorted(frames.items()):
            chosen = [f for f in fids if cfg.frames is None or f in set(cfg.frames)]
            rendered = [_strip(render_frame(scenes[frag], sensor, fid, cfg.trace_eps), frag) for fid in chosen]
            io.write_rendered(out / spec.name / frag, rendered)
            count += len(rendered)
    log.info("render: %d frames over %d sensors", count, len(cfg.sensors))
    return {"frames": count}


def stored_ranges(ref_dir: Path, frame_id, directions) -> np.ndarray:
    """Per-ray ranges of a frame stored in the rendered layout (NaN for drops)."""
    pts, _, drop, _ = io.read_rendered_frame(ref_dir, frame_id)
    ranges = np.full(drop.size, np.nan)
    ranges[~drop.ravel()] = np.linalg.norm(pts, axis=1)
    if len(directions) != ranges.size:
        raise io.FormatError(ref_dir, 0, "reference scan pattern differs from the sensor's")
    return ranges


def stage_eval(cfg: PipelineConfig, out: Path, root: Path):
    if cfg.reference_root is None:
        (out / "metrics.json").write_text(io.dumps({"reference": None}) + "\n")
        log.info("eval: no reference_root configured; nothing to compare")
        return {"evaluated": 0}
    ref_root = Path(cfg.reference_root)
    result, n = {}, 0
    for spec in cfg.sensors:
        dirs = spec.model().directions()
        for frag_dir in sorted(p for p in (root / "render" / spec.name).iterdir() if p.is_dir()):
            reports, per_frame = [], []
            for row in _read_jsonl(frag_dir / "labels.jsonl"):
                fid = row["frame_id"]
                mine = stored_ranges(frag_dir, fid, dirs)
                ref = stored_ranges(ref_root / spec.name / frag_dir.name, fid, dirs)
                rep = evaluate_ranges(mine, ref, dirs)
                reports.append(rep)
                per_frame.append({"frame_id": fid, **rep.to_dict()})
            result[f"{spec.name}/{frag_dir.name}"] = {"summary": summarize(reports), "frames": per_frame}
            n += len(reports)
    (out / "metrics.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
    log.info("eval: %d frames compared", n)
    return {"evaluated": n}


_RUNNERS = {
    "decompose": lambda cfg, out, root: stage_decompose(cfg, out),
    "fit-background": stage_fit_background,
    "fit-vehicles": stage_fit_vehicles,
    "occupancy": stage_occupancy,
    "render": stage_render,
    "eval": stage_eval,
}


def _done(root: Path, stage: str, fp: str) -> bool:
    marker = root / stage / "DONE"
    return marker.exists() and marker.read_text().strip() == fp


def run_stage(cfg: PipelineConfig, stage: str, force: bool = False, _ran=None) -> dict:
    """Run one stage (its inputs must already exist). Returns a report entry."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    root = Path(cfg.output_root)
    fp = fingerprint(cfg)
    upstream_ran = any(u in (_ran or ()) for u in UPSTREAM[stage])
    if not force and not upstream_ran and _done(root, stage, fp):
        log.info("%s: up to date, skipped", stage)
        return {"status": "skipped"}
    for u in UPSTREAM[stage]:
        if not _done(root, u, fp):
            raise StageError(stage, io.MissingFile(f"upstream stage {u!r} has not completed with this config"))
    out = root / stage
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    t0 = time.perf_counter()
    try:
        info = _RUNNERS[stage](cfg, out, root)
    except Exception as exc:  # tag and re-raise with the causing module error attached
        raise StageError(stage, exc) from exc
    (out / "DONE").write_text(fp + "\n")
    return {"status": "ran", "seconds": round(time.perf_counter() - t0, 3), **(info or {})}


def run_pipeline(cfg: PipelineConfig, stages=STAGES, force: bool = False) -> dict:
    """Run ``stages`` in order under the stage-directory lock; returns a JSON-able report."""
    cfg.check_paths()
    root = Path(cfg.output_root)
    report = {"output_root": str(root), "seed": cfg.seed, "stages": {}}
    with stage_lock(root):
        (root / "config.yaml").write_text(_portable(cfg))
        ran = set()
        for stage in stages:
            entry = run_stage(cfg, stage, force, ran)
            if entry["status"] == "ran":
                ran.add(stage)
            report["stages"][stage] = entry
    return report


def tree_digest(root) -> dict:
    """SHA-256 of every file under ``root`` keyed by relative path."""
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}
