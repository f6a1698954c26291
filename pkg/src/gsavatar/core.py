"""Foundational math and domain types.

Quaternions are scalar-first ``[w, x, y, z]`` arrays with shape ``(..., 4)``
and are normalized lazily at the point of use. Transforms are plain ``4x4``
float64 arrays with last row ``(0, 0, 0, 1)``. Every batched function here
also works on a single item.

Functions ending in ``_backward`` take the forward inputs plus the upstream
gradient and return the gradient w.r.t. the inputs; the training pipeline
chains them by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COLOR_FEAT_DIM = 16
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-300):
        raise ValueError("degenerate quaternion")
    return q / n


def quat_normalize_backward(q: np.ndarray, grad: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / n
    return (grad - qh * np.sum(qh * grad, axis=-1, keepdims=True)) / n


def _unit_quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion.

    Raises ``ValueError("degenerate quaternion")`` on a zero quaternion and on
    non-finite input.
    """
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("degenerate quaternion")
    return _unit_quat_to_rotmat(quat_normalize(q))


def quat_to_rotmat_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternion."""
    qh = quat_normalize(q)
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
    G = grad_R
    g = np.empty(qh.shape)
    g[..., 0] = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
                     - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    g[..., 1] = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0]
                     - 2 * x * G[..., 1, 1] - w * G[..., 1, 2] + z * G[..., 2, 0]
                     + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    g[..., 2] = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2]
                     + x * G[..., 1, 0] + z * G[..., 1, 2] - w * G[..., 2, 0]
                     + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    g[..., 3] = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2]
                     + w * G[..., 1, 0] - 2 * z * G[..., 1, 1] + y * G[..., 1, 2]
                     + x * G[..., 2, 0] + y * G[..., 2, 1])
    return quat_normalize_backward(q, g)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw Hamilton product ``a * b`` (no normalization)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_multiply_backward(a, b, grad):
    """Gradients ``(d/da, d/db)`` of the raw Hamilton product."""
    gw, gx, gy, gz = grad[..., 0], grad[..., 1], grad[..., 2], grad[..., 3]
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    ga = np.stack(
        [
            bw * gw + bx * gx + by * gy + bz * gz,
            -bx * gw + bw * gx - bz * gy + by * gz,
            -by * gw + bz * gx + bw * gy - bx * gz,
            -bz * gw - by * gx + bx * gy + bw * gz,
        ],
        axis=-1,
    )
    gb = np.stack(
        [
            aw * gw + ax * gx + ay * gy + az * gz,
            -ax * gw + aw * gx + az * gy - ay * gz,
            -ay * gw - az * gx + aw * gy + ax * gz,
            -az * gw + ay * gx - ax * gy + aw * gz,
        ],
        axis=-1,
    )
    return ga, gb


def quat_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Normalized product; rotation of the result is ``R(a) @ R(b)``."""
    out = quat_multiply(a, b)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite quaternion product")
    return quat_normalize(out)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * angle[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (``w >= 0``) of rotation matrices, Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    shape = R.shape[:-2]
    M = R.reshape(-1, 3, 3)
    tr = M[:, 0, 0] + M[:, 1, 1] + M[:, 2, 2]
    diag = np.stack([M[:, 0, 0], M[:, 1, 1], M[:, 2, 2]], axis=-1)
    pick = np.argmax(np.concatenate([tr[:, None], diag], axis=-1), axis=-1)
    q = np.empty((M.shape[0], 4))
    for case in range(4):
        sel = pick == case
        if not np.any(sel):
            continue
        m = M[sel]
        if case == 0:
            s = 2.0 * np.sqrt(1.0 + tr[sel])
            q[sel] = np.stack([0.25 * s, (m[:, 2, 1] - m[:, 1, 2]) / s,
                               (m[:, 0, 2] - m[:, 2, 0]) / s, (m[:, 1, 0] - m[:, 0, 1]) / s], -1)
        elif case == 1:
            s = 2.0 * np.sqrt(1.0 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2])
            q[sel] = np.stack([(m[:, 2, 1] - m[:, 1, 2]) / s, 0.25 * s,
                               (m[:, 0, 1] + m[:, 1, 0]) / s, (m[:, 0, 2] + m[:, 2, 0]) / s], -1)
        elif case == 2:
            s = 2.0 * np.sqrt(1.0 + m[:, 1, 1] - m[:, 0, 0] - m[:, 2, 2])
            q[sel] = np.stack([(m[:, 0, 2] - m[:, 2, 0]) / s, (m[:, 0, 1] + m[:, 1, 0]) / s,
                               0.25 * s, (m[:, 1, 2] + m[:, 2, 1]) / s], -1)
        else:
            s = 2.0 * np.sqrt(1.0 + m[:, 2, 2] - m[:, 0, 0] - m[:, 1, 1])
            q[sel] = np.stack([(m[:, 1, 0] - m[:, 0, 1]) / s, (m[:, 0, 2] + m[:, 2, 0]) / s,
                               (m[:, 1, 2] + m[:, 2, 1]) / s, 0.25 * s], -1)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(q[:, :1] < 0, -q, q)
    return q.reshape(shape + (4,))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def make_transform(R=None, t=None) -> np.ndarray:
    m = np.eye(4)
    if R is not None:
        m[:3, :3] = R
    if t is not None:
        m[:3, 3] = t
    return m


def rigid_inverse(m: np.ndarray) -> np.ndarray:
    """Closed-form inverse ``[R^T | -R^T t]`` of rigid transforms ``(..., 4, 4)``."""
    m = np.asarray(m, dtype=np.float64)
    Rt = np.swapaxes(m[..., :3, :3], -1, -2)
    out = np.zeros_like(m)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, m[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def transform_point(t: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Apply ``(..., 4, 4)`` transforms to ``(..., 3)`` points."""
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return np.einsum("...ij,...j->...i", t[..., :3, :3], p) + t[..., :3, 3]


def polar_rotation(M: np.ndarray):
    """Nearest rotation to each ``3x3`` matrix, with the pieces its backward needs.

    Returns ``(R, V, sigma)`` where ``M = R @ P`` and ``P = V diag(sigma) V^T``.
    A reflection (``det M < 0``) is resolved by flipping the smallest singular
    direction so ``R`` is always proper.
    """
    U, s, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    s = s.copy()
    s[..., 2] *= d
    R = U @ Vt
    return R, np.swapaxes(Vt, -1, -2), s


def polar_rotation_backward(R, V, sigma, grad_R):
    """Gradient of the polar rotation factor w.r.t. the input matrix."""
    A = np.swapaxes(R, -1, -2) @ grad_R
    K = 0.5 * (A - np.swapaxes(A, -1, -2))
    Kt = np.swapaxes(V, -1, -2) @ K @ V
    denom = sigma[..., :, None] + sigma[..., None, :]
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    Y = V @ (Kt / denom) @ np.swapaxes(V, -1, -2)
    return 2.0 * R @ Y


# ---------------------------------------------------------------------------
# Gaussians, cameras
# ---------------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def covariance(scale_log: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``R S S^T R^T`` for log-scales ``(..., 3)`` and rotations ``(..., 3, 3)``."""
    s2 = np.exp(2.0 * np.asarray(scale_log))
    return np.einsum("...ik,...k,...jk->...ij", R, s2, R)


def covariance_backward(scale_log, R, grad_cov):
    """Gradients ``(d/dscale_log, d/dR)`` of :func:`covariance`."""
    s2 = np.exp(2.0 * scale_log)
    G = 0.5 * (grad_cov + np.swapaxes(grad_cov, -1, -2))
    GR = G @ R
    g_R = 2.0 * GR * s2[..., None, :]
    g_s2 = np.einsum("...ik,...ik->...k", R, GR)
    return g_s2 * 2.0 * s2, g_R


@dataclass(frozen=True)
class Gaussian3D:
    mean: np.ndarray
    scale_log: np.ndarray
    rot: np.ndarray
    opacity_logit: float
    color_feat: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return covariance(self.scale_log, quat_to_rotmat(self.rot))

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.array(self.opacity_logit)))


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian set; ``N`` is fixed once constructed."""

    means: np.ndarray
    scale_log: np.ndarray
    rots: np.ndarray
    opacity_logit: np.ndarray
    color_feat: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.scale_log = np.asarray(self.scale_log, dtype=np.float64).reshape(n, 3)
        self.rots = np.asarray(self.rots, dtype=np.float64).reshape(n, 4)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.color_feat = np.asarray(self.color_feat, dtype=np.float64).reshape(n, -1)

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.scale_log[i], self.rots[i],
                          float(self.opacity_logit[i]), self.color_feat[i])

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gs = list(gaussians)
        return cls(
            np.array([g.mean for g in gs]),
            np.array([g.scale_log for g in gs]),
            np.array([g.rot for g in gs]),
            np.array([g.opacity_logit for g in gs]),
            np.array([g.color_feat for g in gs]),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.means.copy(), self.scale_log.copy(), self.rots.copy(),
                             self.opacity_logit.copy(), self.color_feat.copy())

    def rotmats(self) -> np.ndarray:
        return quat_to_rotmat(self.rots)

    def covariances(self) -> np.ndarray:
        return covariance(self.scale_log, self.rotmats())

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.means, self.scale_log, self.rots, self.opacity_logit, self.color_feat))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``view`` maps world to camera coordinates (+z forward)."""

    view: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "view", np.asarray(self.view, dtype=np.float64).reshape(4, 4))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if self.near <= 0:
            raise ValueError("near plane must be positive")

    @property
    def center(self) -> np.ndarray:
        R = self.view[:3, :3]
        return -R.T @ self.view[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, near=0.01) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(make_transform(R, -R @ eye), fx, fy, (width - 1) / 2.0, (height - 1) / 2.0,
                   width, height, near)

    def to_dict(self) -> dict:
        return {"view": self.view.reshape(-1).tolist(), "fx": self.fx, "fy": self.fy,
                "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height,
                "near": self.near}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["view"], dtype=np.float64), float(d["fx"]), float(d["fy"]),
                   float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]),
                   float(d.get("near", 0.01)))


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an image array: ``(H, W)`` or ``(H, W, 3)`` reals in ``[0, 1]``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"bad image shape {img.shape}")
    if not np.all((img >= 0) & (img <= 1)):
        raise ValueError("image values outside [0, 1]")
    return img
