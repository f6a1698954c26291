"""File formats: rig.json, dataset.json / poses.json, PNG images and checkpoints.

Checkpoint layout::

    b"GSAV" | version u32 LE | header length u64 LE | JSON header | f64 LE payloads

The header lists ``tensors: [{name, shape}]`` in payload order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from ..core import Camera
from ..rig import CAPSULE_DTYPE, ControlPoints, Pose, Rig, Skeleton

MAGIC = b"GSAV"
CHECKPOINT_VERSION = 1


class DataError(Exception):
    """Malformed or missing input data (CLI exit code 2)."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=1) + "\n").encode())


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"missing file: {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON in {path}: {e}") from e


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors: dict, header: dict | None = None) -> None:
    header = dict(header or {})
    names = list(tensors)
    header["tensors"] = [{"name": k, "shape": list(np.shape(tensors[k]))} for k in names]
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(hbytes)), hbytes]
    for k in names:
        parts.append(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path):
    """Returns ``(header, tensors)``."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"missing checkpoint: {path}") from e
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    off = 16 + hlen
    tensors = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(data):
            raise DataError(f"{path}: truncated payload for {t['name']}")
        tensors[t["name"]] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    return header, tensors


# ---------------------------------------------------------------------------
# rig.json
# ---------------------------------------------------------------------------


def rig_to_dict(rig: Rig) -> dict:
    sk = rig.skeleton
    d = {
        "joints": [{"parent": int(sk.parent[j]) if sk.parent[j] >= 0 else None,
                    "rest_local": sk.rest_local[j].reshape(-1).tolist(),
                    "bone_scale": float(sk.bone_scale[j])} for j in range(sk.joint_count)],
        "control_points": {"positions": rig.control_points.positions.reshape(-1).tolist(),
                           "weights": rig.control_points.weights.reshape(-1).tolist()},
    }
    if len(rig.capsules):
        d["capsules"] = [{"joint": int(c["joint"]), "start": c["start"].tolist(),
                          "end": c["end"].tolist(), "radius": float(c["radius"])} for c in rig.capsules]
    return d


def rig_from_dict(d: dict) -> Rig:
    try:
        joints = d["joints"]
        J = len(joints)
        parent = [-1 if j["parent"] is None else int(j["parent"]) for j in joints]
        skel = Skeleton(parent, np.array([j["rest_local"] for j in joints], dtype=np.float64),
                        np.array([j.get("bone_scale", 1.0) for j in joints], dtype=np.float64))
        cp = ControlPoints(np.array(d["control_points"]["positions"], dtype=np.float64).reshape(-1, 3),
                           np.array(d["control_points"]["weights"], dtype=np.float64).reshape(-1, J))
        caps = np.array([(c["joint"], c["start"], c["end"], c["radius"]) for c in d.get("capsules", [])],
                        dtype=CAPSULE_DTYPE)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"invalid rig description: {e}") from e
    return Rig(skel, cp, caps)


def rig_to_tensors(rig: Rig, prefix: str = "rig.") -> dict:
    sk = rig.skeleton
    t = {prefix + "parent": sk.parent.astype(np.float64), prefix + "rest_local": sk.rest_local,
         prefix + "bone_scale": sk.bone_scale, prefix + "cp_positions": rig.control_points.positions,
         prefix + "cp_weights": rig.control_points.weights}
    if len(rig.capsules):
        c = rig.capsules
        t[prefix + "capsules"] = np.concatenate(
            [c["joint"][:, None].astype(np.float64), c["start"], c["end"], c["radius"][:, None]], axis=1)
    return t


def rig_from_tensors(t: dict, prefix: str = "rig.") -> Rig:
    skel = Skeleton(t[prefix + "parent"].astype(np.int64), t[prefix + "rest_local"], t[prefix + "bone_scale"])
    cp = ControlPoints(t[prefix + "cp_positions"], t[prefix + "cp_weights"])
    caps = np.zeros(0, dtype=CAPSULE_DTYPE)
    if prefix + "capsules" in t:
        c = t[prefix + "capsules"]
        caps = np.array([(int(r[0]), r[1:4], r[4:7], r[7]) for r in c], dtype=CAPSULE_DTYPE)
    return Rig(skel, cp, caps)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    pil = PILImage.fromarray(to_uint8(img), mode="L" if img.ndim == 2 else "RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        pil.save(tmp, format="PNG", optimize=False, compress_level=6)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im)
    except FileNotFoundError as e:
        raise DataError(f"missing image: {path}") from e
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class View:
    frame_id: int
    camera_id: int
    image: str
    mask: str
    split: str


@dataclass
class SceneDataset:
    """A posed multi-view sequence: one pose per frame, one image per (frame, camera)."""

    root: Path
    rig: Rig
    poses: list
    cameras: list
    views: list
    meta: dict = field(default_factory=dict)

    def split_views(self, split: str) -> list:
        return [v for v in self.views if v.split == split]

    def view_index(self) -> dict:
        return {(v.frame_id, v.camera_id): v for v in self.views}

    def image(self, v: View) -> np.ndarray:
        return read_png(self.root / v.image)

    def mask(self, v: View) -> np.ndarray:
        return read_png(self.root / v.mask)


def dataset_to_dict(ds: SceneDataset) -> dict:
    return {
        "rig": "rig.json",
        "frames": [dict(frame_id=i, **p.to_dict()) for i, p in enumerate(ds.poses)],
        "cameras": [dict(camera_id=i, **c.to_dict()) for i, c in enumerate(ds.cameras)],
        "views": [{"frame_id": v.frame_id, "camera_id": v.camera_id, "image": v.image,
                   "mask": v.mask, "split": v.split} for v in ds.views],
        "meta": ds.meta,
    }


def write_dataset(ds: SceneDataset) -> None:
    root = Path(ds.root)
    write_json(root / "rig.json", rig_to_dict(ds.rig))
    write_json(root / "dataset.json", dataset_to_dict(ds))


def read_dataset(root) -> SceneDataset:
    root = Path(root)
    d = read_json(root / "dataset.json")
    rig = rig_from_dict(read_json(root / d.get("rig", "rig.json")))
    try:
        frames = sorted(d["frames"], key=lambda f: f["frame_id"])
        if [f["frame_id"] for f in frames] != list(range(len(frames))):
            raise DataError("frame ids must be dense from 0")
        poses = [Pose.from_dict(f) for f in frames]
        cams = sorted(d["cameras"], key=lambda c: c["camera_id"])
        cameras = [Camera.from_dict(c) for c in cams]
        views = [View(int(v["frame_id"]), int(v["camera_id"]), v["image"], v["mask"], v["split"])
                 for v in d["views"]]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"invalid dataset.json: {e}") from e
    for p in poses:
        if p.joint_rot.shape[0] != rig.skeleton.joint_count:
            raise DataError("pose joint count does not match the rig")
    for v in views:
        for rel in (v.image, v.mask):
            if not (root / rel).exists():
                raise DataError(f"missing file referenced by dataset: {root / rel}")
        if not (0 <= v.frame_id < len(poses) and 0 <= v.camera_id < len(cameras)):
            raise DataError(f"view references unknown frame/camera: {v}")
    return SceneDataset(root, rig, poses, cameras, views, d.get("meta", {}))


def poses_to_records(poses, cameras) -> list:
    """``poses.json`` records: one pose with the camera to render it from."""
    return [dict(frame_id=i, **p.to_dict(), camera=c.to_dict()) for i, (p, c) in enumerate(zip(poses, cameras))]


def read_poses(path):
    """Read ``poses.json``; returns a list of ``(frame_id, Pose, Camera)``."""
    recs = read_json(path)
    try:
        return [(int(r["frame_id"]), Pose.from_dict(r), Camera.from_dict(r["camera"])) for r in recs]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"invalid poses file {path}: {e}") from e
