"""Skeleton, forward kinematics, linear blend skinning and weight inheritance.

This is the parametric-body-model surrogate: a tree of joints with rest
transforms, plus control points on the body surface carrying template
skinning weights. Gaussians inherit weights from their nearest control points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import (IDENTITY_QUAT, quat_normalize, quat_to_rotmat, quat_to_rotmat_backward,
                   rigid_inverse)

CAPSULE_DTYPE = [("joint", "i8"), ("start", "f8", 3), ("end", "f8", 3), ("radius", "f8")]


@dataclass
class Skeleton:
    parent: np.ndarray
    rest_local: np.ndarray
    bone_scale: np.ndarray = None

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64).reshape(-1)
        J = self.parent.shape[0]
        if J < 1:
            raise ValueError("skeleton needs at least one joint")
        self.rest_local = np.asarray(self.rest_local, dtype=np.float64).reshape(J, 4, 4)
        if self.bone_scale is None:
            self.bone_scale = np.ones(J)
        self.bone_scale = np.asarray(self.bone_scale, dtype=np.float64).reshape(J)
        if self.parent[0] >= 0:
            raise ValueError("joint 0 must be the root")
        self.order = self._topological_order()
        self.rest_world = self._rest_world()

    @property
    def joint_count(self) -> int:
        return self.parent.shape[0]

    def _topological_order(self) -> list[int]:
        J = self.joint_count
        children = [[] for _ in range(J)]
        for j in range(1, J):
            p = int(self.parent[j])
            if not 0 <= p < J or p == j:
                raise ValueError(f"joint {j} has invalid parent {p}")
            children[p].append(j)
        order, stack = [], [0]
        while stack:
            j = stack.pop(0)
            order.append(j)
            stack.extend(children[j])
        if len(order) != J:
            raise ValueError("parent indices do not form a tree rooted at joint 0")
        return order

    def _rest_world(self) -> np.ndarray:
        world = np.empty_like(self.rest_local)
        for j in self.order:
            p = self.parent[j]
            world[j] = self.rest_local[j] if p < 0 else world[p] @ self.rest_local[j]
        return world

    def joint_positions(self) -> np.ndarray:
        return self.rest_world[:, :3, 3].copy()


@dataclass
class Pose:
    root_translation: np.ndarray
    joint_rot: np.ndarray

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        self.joint_rot = np.asarray(self.joint_rot, dtype=np.float64).reshape(-1, 4)

    @classmethod
    def rest(cls, joint_count: int) -> "Pose":
        return cls(np.zeros(3), np.tile(IDENTITY_QUAT, (joint_count, 1)))

    def to_dict(self) -> dict:
        return {"root_translation": self.root_translation.tolist(),
                "joint_rot": self.joint_rot.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["root_translation"], dtype=np.float64),
                   np.array(d["joint_rot"], dtype=np.float64))


@dataclass
class ControlPoints:
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(self.positions.shape[0], -1)
        if np.any(self.weights < -1e-12) or np.any(np.abs(self.weights.sum(1) - 1) > 1e-6):
            raise ValueError("control-point weight rows must be nonnegative and sum to 1")


@dataclass
class Rig:
    """Skeleton + control points, and the capsule surface they were sampled from."""

    skeleton: Skeleton
    control_points: ControlPoints
    capsules: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=CAPSULE_DTYPE))


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------


def _local_transforms(skel: Skeleton, rotmats: np.ndarray, bone_scale: np.ndarray) -> np.ndarray:
    local = skel.rest_local.copy()
    local[:, :3, 3] *= bone_scale[:, None]
    rot4 = np.zeros_like(local)
    rot4[:, :3, :3] = rotmats
    rot4[:, 3, 3] = 1.0
    return local @ rot4


def compute_bone_transforms(skel: Skeleton, pose: Pose, bone_scale=None) -> np.ndarray:
    """Canonical-to-posed bone transforms ``(J, 4, 4)``.

    ``world_j = world_parent(j) @ rest_local_j(scaled) @ rot(q_j)`` and the
    returned bone is ``world_j @ inv(rest_world_j)`` with the root
    translation added, so the rest pose gives identities.
    """
    J = skel.joint_count
    if pose.joint_rot.shape[0] != J:
        raise ValueError(f"pose has {pose.joint_rot.shape[0]} joint rotations, skeleton has {J}")
    bs = skel.bone_scale if bone_scale is None else np.asarray(bone_scale, dtype=np.float64)
    local = _local_transforms(skel, quat_to_rotmat(pose.joint_rot), bs)
    world = np.empty_like(local)
    for j in skel.order:
        p = skel.parent[j]
        world[j] = local[j] if p < 0 else world[p] @ local[j]
    bones = world @ rigid_inverse(skel.rest_world)
    bones[:, :3, 3] += pose.root_translation
    return bones


def compute_bone_transforms_backward(skel: Skeleton, pose: Pose, bone_scale, grad_bones):
    """Gradients ``(d/root_translation, d/joint_rot (raw), d/bone_scale)``."""
    bs = np.asarray(bone_scale, dtype=np.float64)
    rotmats = quat_to_rotmat(pose.joint_rot)
    local = _local_transforms(skel, rotmats, bs)
    world = np.empty_like(local)
    for j in skel.order:
        p = skel.parent[j]
        world[j] = local[j] if p < 0 else world[p] @ local[j]

    g_trans = grad_bones[:, :3, 3].sum(axis=0)
    g_world = grad_bones @ np.swapaxes(rigid_inverse(skel.rest_world), -1, -2)
    g_rot = np.zeros((skel.joint_count, 3, 3))
    g_scale = np.zeros(skel.joint_count)
    for j in reversed(skel.order):
        p = skel.parent[j]
        if p < 0:
            g_local = g_world[j]
        else:
            g_local = world[p].T @ g_world[j]
            g_world[p] = g_world[p] + g_world[j] @ local[j].T
        # local = A @ rot4, A = [R_rest | s * t_rest]
        A = skel.rest_local[j].copy()
        A[:3, 3] *= bs[j]
        g_rot[j] = (A.T @ g_local)[:3, :3]
        # rot4 has zero translation, so local[:3, 3] == s * t_rest
        g_scale[j] = g_local[:3, 3] @ skel.rest_local[j, :3, 3]
    g_quat = quat_to_rotmat_backward(pose.joint_rot, g_rot)
    return g_trans, g_quat, g_scale


# ---------------------------------------------------------------------------
# skinning
# ---------------------------------------------------------------------------


def lbs_apply(weights_row: np.ndarray, bones: np.ndarray) -> np.ndarray:
    """Blend ``sum_j w_j B_j`` for one weight row (the result is generally not rigid)."""
    w = np.asarray(weights_row, dtype=np.float64)
    if np.any(w < -1e-9):
        raise ValueError("negative skinning weight")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("skinning weights must sum to 1")
    return np.tensordot(w, bones, axes=(0, 0))


def lbs_blend(weights: np.ndarray, bones: np.ndarray) -> np.ndarray:
    """Batched blend: ``(N, J)`` weights with ``(J, 4, 4)`` bones -> ``(N, 4, 4)``."""
    J = bones.shape[0]
    return (weights @ bones.reshape(J, 16)).reshape(-1, 4, 4)


def lbs_blend_backward(weights, bones, grad_T):
    """Gradients ``(d/weights, d/bones)`` of :func:`lbs_blend`."""
    J = bones.shape[0]
    G = grad_T.reshape(-1, 16)
    return G @ bones.reshape(J, 16).T, (weights.T @ G).reshape(J, 4, 4)


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------

_BRUTE_FORCE_PAIRS = 2_000_000
_EXTRA_CANDIDATES = 8


def _sq_dists(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return ((query[:, None, :] - reference[None, :, :]) ** 2).sum(-1)


def _sorted_k(d2: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((idx, d2), axis=-1)[..., :k]
    return np.take_along_axis(idx, order, axis=-1)


def _knn_brute(query, reference, k, chunk=None):
    P = reference.shape[0]
    chunk = chunk or max(1, _BRUTE_FORCE_PAIRS // max(P, 1))
    out = np.empty((query.shape[0], k), dtype=np.int64)
    ref_idx = np.arange(P)
    for s in range(0, query.shape[0], chunk):
        d2 = _sq_dists(query[s:s + chunk], reference)
        idx = np.broadcast_to(ref_idx, d2.shape)
        out[s:s + chunk] = _sorted_k(d2, idx, k)
    return out


def knn(query: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """Exact ``k`` nearest reference indices per query, ascending distance, ties by index.

    A kd-tree proposes candidates; distances are recomputed exactly and any
    query whose k-th distance is not safely inside the candidate radius is
    redone by brute force, so the result equals a full scan bit for bit.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    P = reference.shape[0]
    if P == 0:
        raise ValueError("empty reference set")
    if not 1 <= k <= P:
        raise ValueError(f"k={k} must be in [1, {P}]")
    if query.shape[0] * P <= _BRUTE_FORCE_PAIRS or k + _EXTRA_CANDIDATES >= P:
        return _knn_brute(query, reference, k)

    m = k + _EXTRA_CANDIDATES
    tree_d, cand = cKDTree(reference).query(query, m)
    cand = cand.astype(np.int64)
    d2 = ((query[:, None, :] - reference[cand]) ** 2).sum(-1)
    order = np.lexsort((cand, d2), axis=-1)
    out = np.take_along_axis(cand, order[:, :k], -1)
    kth = np.sqrt(np.take_along_axis(d2, order[:, k - 1:k], -1)[:, 0])
    unsafe = kth >= tree_d[:, -1] * (1 - 1e-9) - 1e-12
    if np.any(unsafe):
        out[unsafe] = _knn_brute(query[unsafe], reference, k)
    return out


def neighbor_graph(positions: np.ndarray, k: int) -> np.ndarray:
    """``k`` nearest other points per point (self excluded)."""
    n = positions.shape[0]
    idx = knn(positions, positions, k + 1)
    rows = np.arange(n)[:, None]
    is_self = idx == rows
    # drop self where it appears, otherwise the farthest candidate
    drop = np.where(is_self.any(1), is_self.argmax(1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(n), drop] = False
    return idx[keep].reshape(n, k)


def inherit_weights(query_cano: np.ndarray, cp: ControlPoints, k: int = 1) -> np.ndarray:
    """Skinning weights of ``query_cano`` copied (k=1) or inverse-distance blended from control points."""
    if cp.positions.shape[0] == 0:
        raise ValueError("empty control set")
    query_cano = np.asarray(query_cano, dtype=np.float64).reshape(-1, 3)
    idx = knn(query_cano, cp.positions, k)
    if k == 1:
        return cp.weights[idx[:, 0]].copy()
    d = np.sqrt(((query_cano[:, None, :] - cp.positions[idx]) ** 2).sum(-1))
    exact = d[:, 0] == 0.0
    inv = 1.0 / np.maximum(d, 1e-300)
    w = np.einsum("nk,nkj->nj", inv, cp.weights[idx])
    w /= w.sum(1, keepdims=True)
    w[exact] = cp.weights[idx[exact, 0]]
    return w


def sample_capsule_surface(capsules: np.ndarray, n: int, rng: np.random.Generator):
    """Area-uniform samples on a union of capsule surfaces.

    Returns ``(points (n, 3), normals (n, 3), capsule index (n,))``.
    """
    if len(capsules) == 0:
        raise ValueError("no capsules to sample")
    start, end, radius = capsules["start"], capsules["end"], capsules["radius"]
    axis = end - start
    length = np.linalg.norm(axis, axis=1)
    area = 2 * np.pi * radius * length + 4 * np.pi * radius ** 2
    which = rng.choice(len(capsules), size=n, p=area / area.sum())
    r, L, a0 = radius[which], length[which], start[which]
    u = axis[which] / np.maximum(L, 1e-12)[:, None]
    # orthonormal frame around each axis
    helper = np.where(np.abs(u[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    on_side = rng.uniform(size=n) * (L + 2 * r) < L
    theta = rng.uniform(0, 2 * np.pi, size=n)
    t = rng.uniform(size=n) * L
    radial = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    pts_side = a0 + t[:, None] * u + r[:, None] * radial
    sph = rng.normal(size=(n, 3))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    cap_end = np.where((sph * u).sum(1, keepdims=True) >= 0, a0 + L[:, None] * u, a0)
    pts_cap = cap_end + r[:, None] * sph
    pts = np.where(on_side[:, None], pts_side, pts_cap)
    normals = np.where(on_side[:, None], radial, sph)
    return pts, normals, which
