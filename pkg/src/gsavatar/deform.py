"""Canonical-to-observation deformation and view-conditioned color.

The forward chain for one pose is

    pose latent -> non-rigid offsets -> offset Gaussians (X_d, C_d, alpha_d, s_d, r_d)
                -> skinning MLP weights -> blended T -> X_o = T X_d, R_o = polar(T) R_d

``deform_forward``/``deform_backward`` run the whole chain with a hand
derived backward; the single-step ops below are the public building blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (COLOR_FEAT_DIM, GaussianCloud, polar_rotation, polar_rotation_backward,
                   quat_multiply, quat_multiply_backward, quat_normalize, quat_normalize_backward,
                   quat_to_rotmat, quat_to_rotmat_backward, rotmat_to_quat, sigmoid)
from .rig import Pose, lbs_blend, lbs_blend_backward

LATENT_DIM = 32
OFFSET_DIM = 3 + COLOR_FEAT_DIM + 1 + 3 + 3
POSITION_OFFSET_SCALE = 1e-2

_ACTIVATIONS = ("relu", "tanh", "none")


@dataclass
class Mlp:
    """Fully connected network; ``weights[i]`` has shape ``(out, in)``."""

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer lists differ in length")
        for i, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} vs weight {W.shape}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {W.shape[1]} != {self.weights[i - 1].shape[0]}")

    @classmethod
    def init(cls, widths, activations, rng: np.random.Generator, zero_last: bool = False,
             scale: float = 1.0) -> "Mlp":
        """He-uniform initialisation; ``zero_last`` zeroes the final layer."""
        if isinstance(activations, str):
            activations = [activations] * (len(widths) - 2) + ["none"]
        Ws, bs = [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = scale * np.sqrt(6.0 / max(fan_in, 1))
            W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            if zero_last and i == len(widths) - 2:
                W = np.zeros_like(W)
            Ws.append(W)
            bs.append(np.zeros(fan_out))
        return cls(Ws, bs, list(activations))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        cache = []
        h = x.reshape(int(np.prod(lead)), x.shape[-1])
        for W, b, act in zip(self.weights, self.biases, self.activations):
            pre = h @ W.T + b
            if act == "relu":
                out = np.maximum(pre, 0.0)
            elif act == "tanh":
                out = np.tanh(pre)
            else:
                out = pre
            cache.append((h, pre, out))
            h = out
        return h.reshape(lead + (h.shape[-1],)), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Returns ``(d/input, [d/W...], [d/b...])``."""
        lead = grad_out.shape[:-1]
        g = grad_out.reshape(int(np.prod(lead)), grad_out.shape[-1])
        gWs, gbs = [], []
        for (h, pre, out), W, act in zip(reversed(cache), reversed(self.weights),
                                         reversed(self.activations)):
            if act == "relu":
                g = g * (pre > 0)
            elif act == "tanh":
                g = g * (1.0 - out * out)
            gWs.append(g.T @ h)
            gbs.append(g.sum(0))
            g = g @ W
        return g.reshape(lead + (g.shape[-1],)), gWs[::-1], gbs[::-1]


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return y * (grad - np.sum(grad * y, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# pose latent, offsets
# ---------------------------------------------------------------------------


@dataclass
class DeformOut:
    dX: np.ndarray
    dC: np.ndarray
    d_alpha: np.ndarray
    ds: np.ndarray
    dr: np.ndarray

    @classmethod
    def zeros(cls, n: int, feat_dim: int = COLOR_FEAT_DIM) -> "DeformOut":
        return cls(np.zeros((n, 3)), np.zeros((n, feat_dim)), np.zeros(n), np.zeros((n, 3)),
                   np.zeros((n, 3)))

    @classmethod
    def from_raw(cls, raw: np.ndarray, feat_dim: int = COLOR_FEAT_DIM) -> "DeformOut":
        F = feat_dim
        return cls(POSITION_OFFSET_SCALE * raw[:, :3], raw[:, 3:3 + F], raw[:, 3 + F],
                   raw[:, 4 + F:7 + F], raw[:, 7 + F:10 + F])


def pose_encoder_input(joint_rot: np.ndarray) -> np.ndarray:
    """Flattened non-root joint quaternions (normalized)."""
    return quat_normalize(joint_rot[1:]).reshape(-1)


def encode_pose(pose: Pose, encoder: Mlp) -> np.ndarray:
    """Pose latent ``tanh(W q + b)`` over the non-root joint quaternions."""
    return encoder(pose_encoder_input(pose.joint_rot)[None])[0]


def nonrigid_offsets(cloud_cano: GaussianCloud, z: np.ndarray, net: Mlp) -> DeformOut:
    n, F = cloud_cano.color_feat.shape
    if net.in_dim != 3 + z.shape[0] or net.out_dim != 3 + F + 1 + 3 + 3:
        raise ValueError(f"non-rigid net dims {net.in_dim}->{net.out_dim} do not match "
                         f"position+latent {3 + z.shape[0]} -> offsets {3 + F + 7}")
    x = np.concatenate([cloud_cano.means, np.broadcast_to(z, (n, z.shape[0]))], axis=1)
    return DeformOut.from_raw(net(x), F)


def rotation_offset_quat(dr: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ones(dr.shape[:-1] + (1,)), dr], axis=-1)


def apply_offsets(cloud_cano: GaussianCloud, d: DeformOut) -> GaussianCloud:
    """Additive position/feature/opacity-logit, log-scale shift, right-composed rotation."""
    rots = quat_normalize(quat_multiply(cloud_cano.rots, quat_normalize(rotation_offset_quat(d.dr))))
    return GaussianCloud(cloud_cano.means + d.dX, cloud_cano.scale_log + d.ds, rots,
                         cloud_cano.opacity_logit + d.d_alpha, cloud_cano.color_feat + d.dC)


def skinning_weights(positions: np.ndarray, skin_net: Mlp) -> np.ndarray:
    return softmax(skin_net(positions))


def rigid_articulate(cloud_d: GaussianCloud, bones: np.ndarray, skin_net: Mlp):
    """Skin the offset cloud into observation space; returns ``(cloud_o, T)``."""
    if skin_net.out_dim != bones.shape[0]:
        raise ValueError(f"skinning net outputs {skin_net.out_dim} weights for {bones.shape[0]} bones")
    w = skinning_weights(cloud_d.means, skin_net)
    T = lbs_blend(w, bones)
    means = np.einsum("nij,nj->ni", T[:, :3, :3], cloud_d.means) + T[:, :3, 3]
    P, _, _ = polar_rotation(T[:, :3, :3])
    rots = rotmat_to_quat(P @ cloud_d.rotmats())
    out = GaussianCloud(means, cloud_d.scale_log.copy(), rots, cloud_d.opacity_logit.copy(),
                        cloud_d.color_feat.copy())
    return out, T


def canonicalize_viewdir(T: np.ndarray, d: np.ndarray, diagnostics: dict | None = None) -> np.ndarray:
    """``normalize(inv(T[:3, :3]) d)``; singular blocks fall back to ``d``.

    Works on single ``(4, 4)``/``(3,)`` inputs or batches.
    """
    A = np.asarray(T, dtype=np.float64)[..., :3, :3]
    d = np.asarray(d, dtype=np.float64)
    det = np.linalg.det(A)
    bad = np.abs(det) < 1e-12
    safe = np.where(bad[..., None, None], np.eye(3), A)
    out = np.linalg.solve(safe, d[..., None])[..., 0]
    out = np.where(bad[..., None], d, out)
    if diagnostics is not None and np.any(bad):
        diagnostics["singular_viewdir"] = diagnostics.get("singular_viewdir", 0) + int(np.sum(bad))
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def eval_color(color_feat: np.ndarray, dhat: np.ndarray, color_net: Mlp) -> np.ndarray:
    x = np.concatenate([np.asarray(color_feat, dtype=np.float64), np.asarray(dhat, dtype=np.float64)],
                       axis=-1)
    return sigmoid(color_net(x))


# ---------------------------------------------------------------------------
# composed differentiable chain
# ---------------------------------------------------------------------------


@dataclass
class DeformNets:
    encoder: Mlp
    nonrigid: Mlp
    skinning: Mlp
    color: Mlp

    @classmethod
    def init(cls, joint_count: int, rng: np.random.Generator, latent_dim: int = LATENT_DIM,
             feat_dim: int = COLOR_FEAT_DIM) -> "DeformNets":
        enc_in = 4 * (joint_count - 1)
        encoder = Mlp.init([enc_in, latent_dim], ["tanh"], rng, scale=0.5)
        nonrigid = Mlp.init([3 + latent_dim, 128, 128, 3 + feat_dim + 7], "relu", rng, zero_last=True)
        skinning = Mlp.init([3, 64, joint_count], "relu", rng)
        color = Mlp.init([feat_dim + 3, 64, 3], "relu", rng)
        return cls(encoder, nonrigid, skinning, color)

    def items(self):
        return (("encoder", self.encoder), ("nonrigid", self.nonrigid),
                ("skinning", self.skinning), ("color", self.color))


@dataclass
class CanonicalParams:
    """Learnable canonical Gaussian parameters (raw, unnormalized rotations)."""

    means: np.ndarray
    scale_log: np.ndarray
    rots: np.ndarray
    opacity_logit: np.ndarray
    color_feat: np.ndarray

    @classmethod
    def from_cloud(cls, cloud: GaussianCloud) -> "CanonicalParams":
        return cls(cloud.means, cloud.scale_log, cloud.rots, cloud.opacity_logit, cloud.color_feat)

    def to_cloud(self) -> GaussianCloud:
        return GaussianCloud(self.means.copy(), self.scale_log.copy(), self.rots.copy(),
                             self.opacity_logit.copy(), self.color_feat.copy())


@dataclass
class Deformed:
    """Observation-space Gaussians plus everything the backward pass needs."""

    X_o: np.ndarray
    R_o: np.ndarray
    scale_log: np.ndarray
    opacity_logit: np.ndarray
    color_feat: np.ndarray
    T: np.ndarray
    weights: np.ndarray
    X_d: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


def deform_forward(cano: CanonicalParams, qhat_nonroot: np.ndarray, bones: np.ndarray,
                   nets: DeformNets, nonrigid: bool = True) -> Deformed:
    """Run offsets + articulation. ``qhat_nonroot`` is the ``(J-1, 4)`` unit pose input."""
    n = cano.means.shape[0]
    F = cano.color_feat.shape[1]
    enc_in = qhat_nonroot.reshape(1, -1)
    z, enc_cache = nets.encoder.forward(enc_in)
    if nonrigid:
        x_in = np.concatenate([cano.means, np.broadcast_to(z, (n, z.shape[1]))], axis=1)
        raw, nr_cache = nets.nonrigid.forward(x_in)
    else:
        raw, nr_cache = np.zeros((n, OFFSET_DIM - COLOR_FEAT_DIM + F)), None
    d = DeformOut.from_raw(raw, F)

    X_d = cano.means + d.dX
    q_off_raw = rotation_offset_quat(d.dr)
    q_off = quat_normalize(q_off_raw)
    r_d = quat_multiply(cano.rots, q_off)
    R_d = quat_to_rotmat(r_d)

    logits, skin_cache = nets.skinning.forward(X_d)
    w = softmax(logits)
    T = lbs_blend(w, bones)
    T3 = T[:, :3, :3]
    X_o = np.einsum("nij,nj->ni", T3, X_d) + T[:, :3, 3]
    P, V, sig = polar_rotation(T3)
    R_o = P @ R_d

    cache = dict(enc_in=enc_in, enc_cache=enc_cache, nr_cache=nr_cache, nonrigid=nonrigid,
                 q_off_raw=q_off_raw, q_off=q_off, r_d=r_d, R_d=R_d, skin_cache=skin_cache,
                 bones=bones, P=P, V=V, sig=sig, rots=cano.rots)
    return Deformed(X_o, R_o, cano.scale_log + d.ds, cano.opacity_logit + d.d_alpha,
                    cano.color_feat + d.dC, T, w, X_d, cache)


def deform_backward(dfm: Deformed, nets: DeformNets, g_X_o=None, g_R_o=None, g_scale_log=None,
                    g_opacity_logit=None, g_color_feat=None, g_T=None, g_weights=None,
                    g_X_d=None) -> dict:
    """Backward of :func:`deform_forward`.

    Returns a dict with gradients for the canonical params (``means``,
    ``scale_log``, ``rots``, ``opacity_logit``, ``color_feat``), ``bones``,
    ``qhat_nonroot`` and per-network ``(gWs, gbs)`` lists.
    """
    c = dfm.cache
    n = dfm.X_o.shape[0]
    zeros = np.zeros
    g_X_o = zeros((n, 3)) if g_X_o is None else g_X_o
    g_R_o = zeros((n, 3, 3)) if g_R_o is None else g_R_o
    g_T = zeros((n, 4, 4)) if g_T is None else g_T.copy()
    g_X_d = zeros((n, 3)) if g_X_d is None else g_X_d.copy()

    # R_o = P R_d
    g_P = g_R_o @ np.swapaxes(c["R_d"], -1, -2)
    g_R_d = np.swapaxes(c["P"], -1, -2) @ g_R_o
    g_T[:, :3, :3] += polar_rotation_backward(c["P"], c["V"], c["sig"], g_P)
    # X_o = T3 X_d + t
    g_T[:, :3, :3] += g_X_o[:, :, None] * dfm.X_d[:, None, :]
    g_T[:, :3, 3] += g_X_o
    g_X_d += np.einsum("nij,ni->nj", dfm.T[:, :3, :3], g_X_o)
    # T = sum_j w_j B_j
    g_w, g_bones = lbs_blend_backward(dfm.weights, c["bones"], g_T)
    if g_weights is not None:
        g_w = g_w + g_weights
    g_logits = softmax_backward(dfm.weights, g_w)
    gx_skin, gW_skin, gb_skin = nets.skinning.backward(c["skin_cache"], g_logits)
    g_X_d += gx_skin

    # r_d = rots * q_off
    g_r_d = quat_to_rotmat_backward(c["r_d"], g_R_d)
    g_rots, g_q_off = quat_multiply_backward(c["rots"], c["q_off"], g_r_d)
    g_dr = quat_normalize_backward(c["q_off_raw"], g_q_off)[:, 1:]

    F = dfm.color_feat.shape[1]
    g_raw = np.zeros((n, 3 + F + 7))
    g_raw[:, :3] = POSITION_OFFSET_SCALE * g_X_d
    if g_color_feat is not None:
        g_raw[:, 3:3 + F] = g_color_feat
    if g_opacity_logit is not None:
        g_raw[:, 3 + F] = g_opacity_logit
    if g_scale_log is not None:
        g_raw[:, 4 + F:7 + F] = g_scale_log
    g_raw[:, 7 + F:10 + F] = g_dr

    g_means = g_X_d.copy()
    out = dict(scale_log=zeros((n, 3)) if g_scale_log is None else g_scale_log.copy(),
               rots=g_rots,
               opacity_logit=zeros(n) if g_opacity_logit is None else g_opacity_logit.copy(),
               color_feat=zeros((n, F)) if g_color_feat is None else g_color_feat.copy(),
               bones=g_bones, skinning=(gW_skin, gb_skin))
    Z = nets.encoder.out_dim
    if c["nonrigid"]:
        gx_nr, gW_nr, gb_nr = nets.nonrigid.backward(c["nr_cache"], g_raw)
        g_means += gx_nr[:, :3]
        g_z = gx_nr[:, 3:].sum(0, keepdims=True)
        out["nonrigid"] = (gW_nr, gb_nr)
    else:
        g_z = np.zeros((1, Z))
        out["nonrigid"] = ([np.zeros_like(W) for W in nets.nonrigid.weights],
                           [np.zeros_like(b) for b in nets.nonrigid.biases])
    g_enc_in, gW_enc, gb_enc = nets.encoder.backward(c["enc_cache"], g_z)
    out["encoder"] = (gW_enc, gb_enc)
    out["qhat_nonroot"] = g_enc_in.reshape(-1, 4)
    out["means"] = g_means
    return out


def viewdir_color_forward(X: np.ndarray, T3: np.ndarray, color_feat: np.ndarray,
                          cam_center: np.ndarray, color_net: Mlp):
    """Per-Gaussian RGB seen from ``cam_center``; ``T3`` canonicalizes the view direction."""
    v = X - cam_center
    vn = np.linalg.norm(v, axis=1, keepdims=True)
    d = v / vn
    det = np.linalg.det(T3)
    bad = np.abs(det) < 1e-12
    A = np.where(bad[:, None, None], np.eye(3), T3)
    Ainv = np.linalg.inv(A)
    e = np.einsum("nij,nj->ni", Ainv, d)
    e = np.where(bad[:, None], d, e)
    en = np.linalg.norm(e, axis=1, keepdims=True)
    dhat = e / en
    logits, cache = color_net.forward(np.concatenate([color_feat, dhat], axis=1))
    rgb = sigmoid(logits)
    return rgb, dict(v=v, vn=vn, d=d, Ainv=Ainv, bad=bad, e=e, en=en, dhat=dhat, cache=cache,
                     rgb=rgb, F=color_feat.shape[1])


def viewdir_color_backward(cc: dict, color_net: Mlp, g_rgb: np.ndarray):
    """Returns ``(d/X, d/T3, d/color_feat, (gWs, gbs))``."""
    g_logits = g_rgb * cc["rgb"] * (1.0 - cc["rgb"])
    g_in, gWs, gbs = color_net.backward(cc["cache"], g_logits)
    F = cc["F"]
    g_feat = g_in[:, :F]
    g_dhat = g_in[:, F:]
    dhat, en = cc["dhat"], cc["en"]
    g_e = (g_dhat - dhat * np.sum(dhat * g_dhat, axis=1, keepdims=True)) / en
    bad = cc["bad"]
    Ainv = cc["Ainv"]
    g_d = np.where(bad[:, None], g_e, np.einsum("nji,nj->ni", Ainv, g_e))
    # e = Ainv d ; d(Ainv) = -Ainv dA Ainv
    g_Ainv = g_e[:, :, None] * cc["d"][:, None, :]
    g_T3 = -np.swapaxes(Ainv, 1, 2) @ g_Ainv @ np.swapaxes(Ainv, 1, 2)
    g_T3[bad] = 0.0
    d, vn = cc["d"], cc["vn"]
    g_X = (g_d - d * np.sum(d * g_d, axis=1, keepdims=True)) / vn
    return g_X, g_T3, g_feat, (gWs, gbs)
