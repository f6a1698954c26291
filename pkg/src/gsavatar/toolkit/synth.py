"""Synthetic articulated avatars: a capsule humanoid rig, a ground-truth state and posed renders."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import COLOR_FEAT_DIM, Camera, logit, make_transform, quat_from_axis_angle
from ..deform import DeformNets, Mlp
from ..rig import (CAPSULE_DTYPE, ControlPoints, Pose, Rig, Skeleton, inherit_weights,
                   sample_capsule_surface)
from ..train import TrainConfig, init_scales, make_state, pretrain_skinning, render_pose, save_state
from .io import SceneDataset, View, write_dataset, write_png

# name, parent, joint position (world, rest), capsule end, capsule radius; Y up, metres
HUMANOID = [
    ("pelvis", -1, (0.0, 0.95, 0.0), (0.0, 1.12, 0.0), 0.13),
    ("chest", 0, (0.0, 1.12, 0.0), (0.0, 1.40, 0.0), 0.14),
    ("head", 1, (0.0, 1.50, 0.0), (0.0, 1.68, 0.0), 0.10),
    ("l_upper_arm", 1, (0.20, 1.40, 0.0), (0.45, 1.40, 0.0), 0.05),
    ("r_upper_arm", 1, (-0.20, 1.40, 0.0), (-0.45, 1.40, 0.0), 0.05),
    ("l_thigh", 0, (0.10, 0.90, 0.0), (0.10, 0.50, 0.0), 0.07),
    ("r_thigh", 0, (-0.10, 0.90, 0.0), (-0.10, 0.50, 0.0), 0.07),
    ("l_forearm", 3, (0.45, 1.40, 0.0), (0.70, 1.40, 0.0), 0.045),
    ("r_forearm", 4, (-0.45, 1.40, 0.0), (-0.70, 1.40, 0.0), 0.045),
    ("l_shin", 5, (0.10, 0.50, 0.0), (0.10, 0.10, 0.0), 0.055),
    ("r_shin", 6, (-0.10, 0.50, 0.0), (-0.10, 0.10, 0.0), 0.055),
    ("l_foot", 9, (0.10, 0.08, 0.0), (0.10, 0.08, 0.15), 0.04),
]
MAX_JOINTS = len(HUMANOID)
WEIGHT_FALLOFF = 0.05
BODY_CENTER = np.array([0.0, 0.9, 0.0])


@dataclass
class SynthConfig:
    joints: int = 8
    gaussians: int = 2000
    frames: int = 60
    cameras: int = 4
    resolution: int = 128
    seed: int = 0
    amplitude: float = 0.5
    control_points: int = 6890
    test_cameras: int = 1
    camera_radius: float = 3.6
    gt_opacity: float = 0.95
    skin_pretrain_steps: int = 500

    def __post_init__(self):
        if not 2 <= self.joints <= MAX_JOINTS:
            raise ValueError(f"joints must be in [2, {MAX_JOINTS}]")
        for name in ("gaussians", "frames", "cameras", "resolution", "control_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.amplitude < 0 or not 0 <= self.test_cameras < self.cameras:
            raise ValueError("amplitude must be >= 0 and test_cameras < cameras")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SynthConfig":
        d = d or {}
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def template_weights(points: np.ndarray, capsules: np.ndarray, falloff: float = WEIGHT_FALLOFF) -> np.ndarray:
    """Soft assignment to bones by distance to each bone segment: ``softmax(-d_j / falloff)``."""
    d = np.stack([_segment_distance(points, c["start"], c["end"]) for c in capsules], axis=1)
    s = -d / falloff
    s -= s.max(1, keepdims=True)
    w = np.exp(s)
    return w / w.sum(1, keepdims=True)


def _color_field(points: np.ndarray, part: np.ndarray, joints: int) -> np.ndarray:
    hue = part / max(joints, 1)
    base = 0.5 + 0.35 * np.stack([np.cos(2 * np.pi * (hue + k / 3.0)) for k in range(3)], axis=1)
    ripple = 0.1 * np.sin(6.0 * points[:, [1, 2, 0]] + 2.0 * np.pi * hue[:, None])
    return np.clip(base + ripple, 0.05, 0.95)


def identity_color_net(feat_dim: int = COLOR_FEAT_DIM, hidden: int = 64) -> Mlp:
    """Colour MLP with ``rgb = sigmoid(feat[:3])`` exactly, ignoring the view direction."""
    W0 = np.zeros((hidden, feat_dim + 3))
    for k in range(3):
        W0[2 * k, k] = 1.0
        W0[2 * k + 1, k] = -1.0
    W1 = np.zeros((3, hidden))
    for k in range(3):
        W1[k, 2 * k] = 1.0
        W1[k, 2 * k + 1] = -1.0
    return Mlp([W0, W1], [np.zeros(hidden), np.zeros(3)], ["relu", "none"])


def gen_rig(cfg: SynthConfig):
    """Humanoid (or chain prefix of it) with control points, plus a ground-truth cloud.

    Returns ``(rig, gt_cloud_params, part)`` where ``gt_cloud_params`` holds
    canonical Gaussian arrays and ``part`` the capsule each Gaussian lies on.
    """
    rng = np.random.default_rng(cfg.seed)
    spec = HUMANOID[:cfg.joints]
    parent = [p for _, p, _, _, _ in spec]
    pos = np.array([j for _, _, j, _, _ in spec])
    rest_local = np.stack([make_transform(t=pos[j] - (pos[p] if p >= 0 else 0.0)) for j, p in enumerate(parent)])
    skel = Skeleton(parent, rest_local)
    capsules = np.array([(j, s[2], s[3], s[4]) for j, s in enumerate(spec)], dtype=CAPSULE_DTYPE)

    cp_pos, _, _ = sample_capsule_surface(capsules, cfg.control_points, rng)
    rig = Rig(skel, ControlPoints(cp_pos, template_weights(cp_pos, capsules)), capsules)

    means, _, part = sample_capsule_surface(capsules, cfg.gaussians, rng)
    feat = np.zeros((cfg.gaussians, COLOR_FEAT_DIM))
    feat[:, :3] = logit(_color_field(means, part, cfg.joints))
    cloud = dict(means=means, scale_log=init_scales(means),
                 rots=np.tile([1.0, 0.0, 0.0, 0.0], (cfg.gaussians, 1)),
                 opacity_logit=np.full(cfg.gaussians, float(logit(cfg.gt_opacity))), color_feat=feat)
    return rig, cloud, part


def gen_poses(joints: int, cfg: SynthConfig) -> list:
    """Sinusoidal joint trajectories with per-joint axis, frequency and phase from the seed."""
    rng = np.random.default_rng(cfg.seed + 1)
    axes = rng.normal(size=(joints, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    axes[0] = [0.0, 1.0, 0.0]
    freq = rng.integers(1, 3, size=joints).astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=joints)
    scale = np.full(joints, 1.0)
    scale[0] = 0.3
    poses = []
    for f in range(cfg.frames):
        t = 2 * np.pi * f / cfg.frames
        ang = cfg.amplitude * scale * np.sin(freq * t + phase)
        quats = np.stack([quat_from_axis_angle(axes[j], ang[j]) for j in range(joints)])
        trans = cfg.amplitude * np.array([0.1 * np.sin(t), 0.03 * np.sin(2 * t), 0.0])
        poses.append(Pose(trans, quats))
    return poses


def ring_cameras(cfg: SynthConfig) -> list:
    w = h = cfg.resolution
    f = 1.7 * w
    cams = []
    for c in range(cfg.cameras):
        a = 2 * np.pi * c / cfg.cameras
        eye = BODY_CENTER + np.array([cfg.camera_radius * np.sin(a), 0.1, cfg.camera_radius * np.cos(a)])
        cams.append(Camera.look_at(eye, BODY_CENTER, [0.0, 1.0, 0.0], f, f, w, h))
    return cams


def gt_state(rig: Rig, cloud: dict, frames: int, cfg: SynthConfig):
    """A training state that renders the ground truth: zero non-rigid offsets, view-independent colour."""
    rng = np.random.default_rng(cfg.seed + 2)
    nets = DeformNets.init(rig.skeleton.joint_count, rng)
    nets.color = identity_color_net()
    targets = inherit_weights(cloud["means"], rig.control_points)
    pretrain_skinning(nets.skinning, cloud["means"], targets, cfg.skin_pretrain_steps, 5e-3)
    return make_state(cloud, nets, rig.skeleton.joint_count, frames, cfg.seed)


def gen_frames(rig: Rig, state, cfg: SynthConfig, out_dir) -> SceneDataset:
    """Render every (frame, camera) pair with ``state`` and write the dataset to ``out_dir``."""
    root = Path(out_dir)
    poses = gen_poses(rig.skeleton.joint_count, cfg)
    cams = ring_cameras(cfg)
    first_test = cfg.cameras - cfg.test_cameras
    views = []
    for f, pose in enumerate(poses):
        for c, cam in enumerate(cams):
            color, alpha = render_pose(state, rig, pose, cam, frame=f)
            img_rel = f"images/f{f:04d}_c{c:02d}.png"
            mask_rel = f"masks/f{f:04d}_c{c:02d}.png"
            write_png(root / img_rel, color)
            write_png(root / mask_rel, (alpha > 0.5).astype(np.float64))
            views.append(View(f, c, img_rel, mask_rel, "test" if c >= first_test else "train"))
    ds = SceneDataset(root, rig, poses, cams, views, {"synth": cfg.to_dict()})
    write_dataset(ds)
    return ds


def synthesize(cfg: SynthConfig, out_dir):
    """Full synthetic set: rig, ground-truth checkpoint ``gt.ckpt`` and rendered views."""
    rig, cloud, _ = gen_rig(cfg)
    state = gt_state(rig, cloud, cfg.frames, cfg)
    ds = gen_frames(rig, state, cfg, out_dir)
    save_state(Path(out_dir) / "gt.ckpt", state, rig, TrainConfig(init_points=cfg.gaussians, seed=cfg.seed),
               data_dir=Path(out_dir))
    return ds, state
