"""Dynamic avatar adjustment: similar-pose retrieval and the dense motion field.

For a training frame with pose ``p_i`` a partner frame with a similar pose
``p_a`` is retrieved. Every observed Gaussian carries template weights ``w``
(inherited from control points); with ``T_o = sum w_j B_j(p_i)`` and
``T_o' = sum w_j B_j(p_a)`` the field ``F_adj = T_o' T_o^-1`` carries the
observed Gaussians to the partner pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (GaussianCloud, polar_rotation, polar_rotation_backward, quat_conjugate,
                   quat_multiply, quat_normalize, rotmat_to_quat)
from .rig import Pose, lbs_blend

SINGULAR_DET = 1e-10


def rotation_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle (radians) of the relative rotation between quaternions ``a`` and ``b``."""
    rel = quat_multiply(quat_conjugate(quat_normalize(a)), quat_normalize(b))
    return 2.0 * np.arctan2(np.linalg.norm(rel[..., 1:], axis=-1), np.abs(rel[..., 0]))


def pose_distance(a: Pose, b: Pose, root_weight: float = 1.0) -> float:
    """Weighted sum of per-joint geodesic angles; the root term is scaled by ``root_weight``."""
    if a.joint_rot.shape != b.joint_rot.shape:
        raise ValueError(f"joint count mismatch: {a.joint_rot.shape[0]} vs {b.joint_rot.shape[0]}")
    ang = rotation_angle(a.joint_rot, b.joint_rot)
    ang[np.all(a.joint_rot == b.joint_rot, axis=1)] = 0.0  # exact zero for identical joints
    return float(root_weight * ang[0] + ang[1:].sum())


@dataclass
class PoseIndex:
    """Poses of the training frames with a precomputed distance matrix."""

    frame_ids: list
    poses: list
    root_weight: float = 1.0
    distances: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.frame_ids = [int(f) for f in self.frame_ids]
        if len(set(self.frame_ids)) != len(self.frame_ids):
            raise ValueError("frame ids must be unique")
        if len(self.frame_ids) != len(self.poses):
            raise ValueError("frame ids and poses differ in length")
        n = len(self.poses)
        self.distances = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                d = pose_distance(self.poses[i], self.poses[j], self.root_weight)
                self.distances[i, j] = self.distances[j, i] = d
        self._pos = {f: i for i, f in enumerate(self.frame_ids)}

    def __len__(self):
        return len(self.frame_ids)

    def ranked(self, frame: int) -> list:
        """Other frames as ``(frame_id, distance)``, most similar first, ties by lower id."""
        if frame not in self._pos:
            raise KeyError(f"frame {frame} is not in the pose index")
        i = self._pos[frame]
        others = [(self.distances[i, j], self.frame_ids[j]) for j in range(len(self)) if j != i]
        others.sort()
        return [(f, float(d)) for d, f in others]


def select_similar(idx: PoseIndex, frame: int, top_n: int = 1) -> int:
    """The ``top_n``-th most similar other frame (1 = most similar)."""
    if len(idx) < 2:
        raise ValueError("pose index needs at least two frames")
    if top_n < 1 or top_n >= len(idx):
        raise ValueError(f"top_n={top_n} must be in [1, {len(idx) - 1}]")
    return idx.ranked(frame)[top_n - 1][0]


def precompute_partners(idx: PoseIndex, top_n: int = 1) -> dict:
    return {f: select_similar(idx, f, top_n) for f in idx.frame_ids}


@dataclass
class MotionField:
    T_o: np.ndarray
    T_op: np.ndarray
    F_adj: np.ndarray


def motion_field(weights: np.ndarray, bones_o: np.ndarray, bones_a: np.ndarray) -> MotionField:
    """Per-Gaussian ``T_o``, ``T_o'`` and ``F_adj = T_o' T_o^-1`` (general inverse)."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < -1e-9) or np.any(np.abs(weights.sum(1) - 1) > 1e-6):
        raise ValueError("weight rows must be nonnegative and sum to 1")
    T_o = lbs_blend(weights, bones_o)
    T_op = lbs_blend(weights, bones_a)
    det = np.linalg.det(T_o)
    bad = np.nonzero(np.abs(det) < SINGULAR_DET)[0]
    if bad.size:
        raise ValueError(f"singular blended transform at Gaussian {int(bad[0])}")
    return MotionField(T_o, T_op, T_op @ np.linalg.inv(T_o))


def adjust(cloud_o: GaussianCloud, mf: MotionField) -> GaussianCloud:
    """Move observed Gaussians by ``F_adj``: means homogeneously, rotations by its polar factor."""
    if len(cloud_o) != mf.F_adj.shape[0]:
        raise ValueError("cloud and motion field sizes differ")
    F = mf.F_adj
    means = np.einsum("nij,nj->ni", F[:, :3, :3], cloud_o.means) + F[:, :3, 3]
    P, _, _ = polar_rotation(F[:, :3, :3])
    rots = rotmat_to_quat(P @ cloud_o.rotmats())
    return GaussianCloud(means, cloud_o.scale_log.copy(), rots, cloud_o.opacity_logit.copy(),
                         cloud_o.color_feat.copy())


# ---------------------------------------------------------------------------
# differentiable form used in training
# ---------------------------------------------------------------------------


def adjust_forward(X_o: np.ndarray, R_o: np.ndarray, T_o: np.ndarray, T_op: np.ndarray):
    """Returns ``(X_a, R_a, F_adj, cache)`` for matrix-form rotations."""
    Tinv = np.linalg.inv(T_o)
    F = T_op @ Tinv
    X_a = np.einsum("nij,nj->ni", F[:, :3, :3], X_o) + F[:, :3, 3]
    P, V, sig = polar_rotation(F[:, :3, :3])
    R_a = P @ R_o
    return X_a, R_a, F, dict(Tinv=Tinv, F=F, P=P, V=V, sig=sig, X_o=X_o, R_o=R_o)


def adjust_backward(cache: dict, g_X_a, g_R_a, g_F=None):
    """Returns ``(d/X_o, d/R_o, d/T_o, d/T_op)``."""
    F, Tinv, P = cache["F"], cache["Tinv"], cache["P"]
    G = np.zeros_like(F) if g_F is None else g_F.copy()
    G[:, :3, :3] += g_X_a[:, :, None] * cache["X_o"][:, None, :]
    G[:, :3, 3] += g_X_a
    g_P = g_R_a @ np.swapaxes(cache["R_o"], 1, 2)
    G[:, :3, :3] += polar_rotation_backward(P, cache["V"], cache["sig"], g_P)
    g_X_o = np.einsum("nij,ni->nj", F[:, :3, :3], g_X_a)
    g_R_o = np.swapaxes(P, 1, 2) @ g_R_a
    TinvT = np.swapaxes(Tinv, 1, 2)
    g_T_op = G @ TinvT
    g_T_o = -np.swapaxes(F, 1, 2) @ G @ TinvT
    return g_X_o, g_R_o, g_T_o, g_T_op
