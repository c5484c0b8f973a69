"""KITTI-style dataset layout and rendered-output files.

A dataset root holds one directory per fragment (or is itself a fragment)::

    <fragment>/frames/<frame_id:06d>.bin   float32 LE x, y, z, intensity per point
    <fragment>/poses.jsonl                 {"frame_id", "timestamp", "pose": 16 floats, row-major sensor->world}
    <fragment>/labels.jsonl                {"frame_id", "objects": [{"track_id", "type", "center", "size", "yaw"}]}
    <fragment>/pseudo_labels.jsonl         optional, same schema as labels; boxes of unlabeled movers

Boxes are world-frame with a geometric center. JSON is written with sorted
keys and ``repr`` floats so rewriting a parsed file reproduces it byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decomp import Frame, track_sort_key
from .geom import OrientedBox, RigidTransform

VEHICLE_TYPES = ("car", "van", "truck", "bus")


class FormatError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path} (offset {offset}): {message}")
        self.path = str(path)
        self.offset = offset


class MissingFile(FileNotFoundError):
    pass


@dataclass(eq=False)
class Fragment:
    name: str
    frames: list


def read_points(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) % 16:
        raise FormatError(path, len(data) - len(data) % 16, f"byte count {len(data)} is not a multiple of 16")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4)[:, :3].astype(float)


def points_to_bytes(points, intensity=None) -> bytes:
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    out = np.zeros((len(p), 4), dtype="<f4")
    out[:, :3] = p
    if intensity is not None:
        out[:, 3] = intensity
    return out.tobytes()


def write_points(path, points, intensity=None) -> None:
    Path(path).write_bytes(points_to_bytes(points, intensity))


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def box_record(track_id, box: OrientedBox, kind="car") -> dict:
    return {"track_id": str(track_id), "type": kind, "center": box.center.tolist(),
            "size": box.size.tolist(), "yaw": box.yaw}


def _read_jsonl(path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    out = []
    offset = 0
    for line in path.read_text().splitlines(keepends=True):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(path, offset + exc.pos, exc.msg) from None
        offset += len(line.encode())
    return out


def _parse_objects(path, rows, vehicle_types):
    boxes, others = {}, {}
    for row in rows:
        fid = int(row["frame_id"])
        veh, oth = [], []
        for obj in row.get("objects", []):
            try:
                box = OrientedBox(obj["center"], obj["size"], obj["yaw"])
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(path, 0, f"bad object in frame {fid}: {exc}") from None
            kind = str(obj.get("type", "car")).lower()
            if kind in vehicle_types:
                veh.append((str(obj["track_id"]), box))
            else:
                oth.append(box)
        boxes[fid] = sorted(veh, key=lambda tb: track_sort_key(tb[0]))
        others[fid] = oth
    return boxes, others


def read_fragment(root, vehicle_types=VEHICLE_TYPES) -> Fragment:
    root = Path(root)
    poses = _read_jsonl(root / "poses.jsonl")
    label_rows = _read_jsonl(root / "labels.jsonl")
    boxes, others = _parse_objects(root / "labels.jsonl", label_rows, vehicle_types)
    pseudo = {}
    if (root / "pseudo_labels.jsonl").exists():
        p_rows = _read_jsonl(root / "pseudo_labels.jsonl")
        pb, po = _parse_objects(root / "pseudo_labels.jsonl", p_rows, vehicle_types)
        pseudo = {fid: [b for _, b in pb.get(fid, [])] + po.get(fid, []) for fid in set(pb) | set(po)}
    frames = []
    for row in poses:
        fid = int(row["frame_id"])
        pose = row.get("pose")
        if pose is None or len(pose) != 16:
            raise FormatError(root / "poses.jsonl", 0, f"frame {fid}: pose must have 16 entries")
        bin_path = root / "frames" / f"{fid:06d}.bin"
        if not bin_path.exists():
            raise MissingFile(str(bin_path))
        frames.append(Frame(
            frame_id=fid,
            timestamp=float(row.get("timestamp", fid)),
            sensor_pose=RigidTransform.from_matrix(np.array(pose, dtype=float).reshape(4, 4)),
            points=read_points(bin_path),
            boxes=boxes.get(fid, []),
            fragment=root.name,
            pseudo_boxes=others.get(fid, []) + pseudo.get(fid, []),
        ))
    frames.sort(key=lambda f: f.timestamp)
    ts = [f.timestamp for f in frames]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise FormatError(root / "poses.jsonl", 0, "timestamps must be strictly increasing")
    return Fragment(root.name, frames)


def read_dataset(root, vehicle_types=VEHICLE_TYPES) -> list[Fragment]:
    """All fragments under ``root`` in name order."""
    root = Path(root)
    if not root.exists():
        raise MissingFile(str(root))
    if (root / "frames").is_dir():
        return [read_fragment(root, vehicle_types)]
    dirs = sorted(p for p in root.iterdir() if (p / "frames").is_dir())
    if not dirs:
        raise MissingFile(f"no fragment with a frames/ directory under {root}")
    return [read_fragment(d, vehicle_types) for d in dirs]


def write_fragment(root, frames, pseudo: dict | None = None) -> None:
    """Write frames in the dataset layout (intensity is stored as zero)."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    poses, labels = [], []
    for fr in frames:
        write_points(root / "frames" / f"{fr.frame_id:06d}.bin", fr.points)
        poses.append(dumps({"frame_id": fr.frame_id, "timestamp": fr.timestamp,
                            "pose": fr.sensor_pose.matrix.ravel().tolist()}))
        labels.append(dumps({"frame_id": fr.frame_id,
                             "objects": [box_record(t, b) for t, b in fr.boxes]}))
    (root / "poses.jsonl").write_text("\n".join(poses) + "\n")
    (root / "labels.jsonl").write_text("\n".join(labels) + "\n")
    if pseudo:
        rows = [dumps({"frame_id": fid, "objects": [box_record(f"pseudo{i}", b, "pseudo") for i, b in enumerate(bs)]})
                for fid, bs in sorted(pseudo.items())]
        (root / "pseudo_labels.jsonl").write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# rendered frames
# ---------------------------------------------------------------------------

DROP_MAGIC = b"XVDROP\x00\x00"
_DROP_HEADER = struct.Struct("<8s2I")


def drop_mask_to_bytes(mask, shape) -> bytes:
    """Header (magic, channels, azimuth steps) then the mask bit-packed, little bit order, channel-major."""
    mask = np.asarray(mask, dtype=bool).ravel()
    return _DROP_HEADER.pack(DROP_MAGIC, *shape) + np.packbits(mask, bitorder="little").tobytes()


def drop_mask_from_bytes(data: bytes):
    magic, ch, az = _DROP_HEADER.unpack_from(data)
    if magic != DROP_MAGIC:
        raise FormatError("<drop mask>", 0, "bad magic")
    bits = np.frombuffer(data, dtype=np.uint8, offset=_DROP_HEADER.size)
    return np.unpackbits(bits, count=ch * az, bitorder="little").astype(bool).reshape(ch, az)


def sensor_box_record(track_id, corners) -> dict:
    """Center, size and heading of a box given by its 8 sensor-frame corners, plus the corners."""
    c = np.asarray(corners, dtype=float)
    length_axis = c[0] - c[3]
    size = [float(np.linalg.norm(c[0] - c[3])), float(np.linalg.norm(c[0] - c[1])), float(np.linalg.norm(c[4] - c[0]))]
    return {"track_id": str(track_id), "type": "car", "center": c.mean(0).tolist(), "size": size,
            "yaw": float(np.arctan2(length_axis[1], length_axis[0])), "corners": c.tolist()}


def write_rendered(out_dir, frames) -> None:
    """One sensor directory: ``frames/NNNNNN.{bin,drop,src}`` and ``labels.jsonl``.

    ``.src`` holds one little-endian uint16 per point indexing that frame's
    ``sources`` list in ``labels.jsonl``.
    """
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    rows = []
    for fr in frames:
        stem = out_dir / "frames" / f"{int(fr.frame_id):06d}"
        write_points(stem.with_suffix(".bin"), fr.points)
        stem.with_suffix(".drop").write_bytes(drop_mask_to_bytes(fr.drop, fr.pattern_shape))
        srcs = fr.point_sources
        table = sorted(set(srcs), key=track_sort_key)
        lookup = {s: i for i, s in enumerate(table)}
        stem.with_suffix(".src").write_bytes(np.array([lookup[s] for s in srcs], dtype="<u2").tobytes())
        rows.append(dumps({"frame_id": int(fr.frame_id), "sources": table,
                           "objects": [sensor_box_record(t, c) for t, c in fr.boxes]}))
    (out_dir / "labels.jsonl").write_text("".join(r + "\n" for r in rows))


def read_rendered_frame(out_dir, frame_id):
    """Points, per-point source labels, drop mask and annotation row of one rendered frame."""
    out_dir = Path(out_dir)
    stem = out_dir / "frames" / f"{int(frame_id):06d}"
    pts = read_points(stem.with_suffix(".bin"))
    drop = drop_mask_from_bytes(stem.with_suffix(".drop").read_bytes())
    idx = np.frombuffer(stem.with_suffix(".src").read_bytes(), dtype="<u2")
    row = next(r for r in _read_jsonl(out_dir / "labels.jsonl") if int(r["frame_id"]) == int(frame_id))
    sources = [row["sources"][i] for i in idx]
    return pts, sources, drop, row
