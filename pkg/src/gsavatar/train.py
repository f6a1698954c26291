"""Losses, pose correction, Adam and the training loop.

One training step for a view of frame ``i``:

1. deform the canonical Gaussians with the (corrected) pose of ``i`` and
   render against image ``i``;
2. with adjustment on, move the observed Gaussians to the partner frame
   ``a(i)`` through the template-weight motion field and render against the
   partner's image;
3. with the contrastive term on, deform the canonical Gaussians directly to
   ``a(i)`` and compare embeddings of the three point sets;
4. add the skinning and isometry regularizers, backpropagate by hand, Adam.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (COLOR_FEAT_DIM, Camera, covariance, covariance_backward, logit, quat_multiply,
                   quat_multiply_backward, quat_normalize, quat_normalize_backward,
                   quat_to_rotmat, quat_to_rotmat_backward)
from .daa import PoseIndex, adjust_backward, adjust_forward, precompute_partners
from .deform import (LATENT_DIM, CanonicalParams, DeformNets, Mlp, deform_backward, deform_forward,
                     softmax, viewdir_color_backward, viewdir_color_forward)
from .geocon import (GeoExtractor, contrastive_loss_and_grad, embed_backward, embed_forward,
                     subsample_indices)
from .rig import (Pose, Rig, compute_bone_transforms, compute_bone_transforms_backward,
                  inherit_weights, lbs_blend, lbs_blend_backward, neighbor_graph,
                  sample_capsule_surface)
from .splat import render_gaussians, render_gaussians_backward
from .toolkit.io import (DataError, SceneDataset, load_checkpoint, rig_from_tensors, rig_to_tensors,
                         save_checkpoint)
from .toolkit.metrics import psnr

log = logging.getLogger(__name__)

NET_NAMES = ("encoder", "nonrigid", "skinning", "color")
QUAT_PARAMS = ("cloud.rots", "pose.d_root", "pose.d_joint")


class NumericalError(Exception):
    """Training produced non-finite values (CLI exit code 3)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _from_dict(cls, d: dict):
    """Build a (possibly nested) config dataclass, rejecting unknown keys."""
    if d is None:
        return cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        sub = names[k].type
        sub_cls = {"LossWeights": LossWeights, "LearningRates": LearningRates}.get(str(sub))
        kwargs[k] = _from_dict(sub_cls, v) if sub_cls is not None else v
    return cls(**kwargs)


@dataclass
class LossWeights:
    mask: float = 0.1
    lpips: float = 0.0
    skin: float = 10.0
    isopos: float = 1.0
    isocov: float = 100.0
    contrastive: float = 0.01

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name}={v} must be finite and >= 0")
        if self.lpips != 0.0:
            raise ValueError("the perceptual (LPIPS) term is not supported; its weight must be 0")


@dataclass
class LearningRates:
    means: float = 1.6e-4
    means_final: float = 1.6e-6
    scale_log: float = 5e-3
    rots: float = 1e-3
    opacity_logit: float = 5e-2
    color_feat: float = 2.5e-3
    nets: float = 1e-4
    pose: float = 1e-4
    pose_warmup: int = 500


@dataclass
class TrainConfig:
    steps: int = 2000
    seed: int = 0
    init_points: int = 20000
    init_opacity: float = 0.1
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    daa: bool = True
    contrastive: bool = True
    nonrigid: bool = True
    top_n: int = 1
    sparse_every: int = 1
    root_weight: float = 1.0
    inherit_k: int = 1
    iso_k: int = 5
    iso_refresh: int = 100
    geo_knn_k: int = 16
    geo_seed: int = 0
    geo_weights: str | None = None
    skin_pretrain_steps: int = 500
    skin_pretrain_lr: float = 5e-3
    save_every: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: LearningRates = field(default_factory=LearningRates)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = _from_dict(LossWeights, self.loss_weights)
        if isinstance(self.lr, dict):
            self.lr = _from_dict(LearningRates, self.lr)
        if self.steps < 0 or self.init_points < 1 or self.top_n < 1 or self.sparse_every < 1:
            raise ValueError("steps, init_points, top_n and sparse_every must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        return _from_dict(cls, d or {})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    """All learnable tensors (flat name -> array) plus Adam moments and counters."""

    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    skipped: int = 0
    seed: int = 0

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))

    @property
    def joint_count(self) -> int:
        return self.params["pose.d_bone_scale"].shape[0]

    @property
    def frame_count(self) -> int:
        return self.params["pose.d_trans"].shape[0]

    def mlp(self, name: str) -> Mlp:
        Ws, bs, acts = [], [], []
        i = 0
        while f"net.{name}.W{i}" in self.params:
            Ws.append(self.params[f"net.{name}.W{i}"])
            bs.append(self.params[f"net.{name}.b{i}"])
            i += 1
        n = len(Ws)
        if name == "encoder":
            acts = ["tanh"]
        else:
            acts = ["relu"] * (n - 1) + ["none"]
        return Mlp(Ws, bs, acts)

    def nets(self) -> DeformNets:
        return DeformNets(*(self.mlp(n) for n in NET_NAMES))

    def cano(self) -> CanonicalParams:
        p = self.params
        return CanonicalParams(p["cloud.means"], p["cloud.scale_log"], p["cloud.rots"],
                               p["cloud.opacity_logit"], p["cloud.color_feat"])

    def copy(self) -> "TrainState":
        cp = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return TrainState(cp(self.params), cp(self.m), cp(self.v), self.step, self.skipped, self.seed)


def _net_params(prefix: str, net: Mlp) -> dict:
    out = {}
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        out[f"net.{prefix}.W{i}"] = W
        out[f"net.{prefix}.b{i}"] = b
    return out


def make_state(cloud_params: dict, nets: DeformNets, joint_count: int, frame_count: int,
               seed: int = 0) -> TrainState:
    params = {f"cloud.{k}": np.asarray(v, dtype=np.float64) for k, v in cloud_params.items()}
    for name, net in nets.items():
        params.update(_net_params(name, net))
    ident = np.array([1.0, 0.0, 0.0, 0.0])
    params["pose.d_trans"] = np.zeros((frame_count, 3))
    params["pose.d_root"] = np.tile(ident, (frame_count, 1))
    params["pose.d_joint"] = np.tile(ident, (frame_count, max(joint_count - 1, 0), 1))
    params["pose.d_bone_scale"] = np.zeros(joint_count)
    return TrainState(params, seed=seed)


def pretrain_skinning(net: Mlp, positions: np.ndarray, targets: np.ndarray, steps: int,
                      lr: float) -> Mlp:
    """Fit the skinning MLP's softmax to target weights (soft cross-entropy, Adam)."""
    params = net.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    n = positions.shape[0]
    for t in range(1, steps + 1):
        logits, cache = net.forward(positions)
        g_logits = (softmax(logits) - targets) / n
        _, gWs, gbs = net.backward(cache, g_logits)
        grads = [g for pair in zip(gWs, gbs) for g in pair]
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= 0.9
            mi += 0.1 * g
            vi *= 0.999
            vi += 0.001 * g * g
            p -= lr * (mi / (1 - 0.9 ** t)) / (np.sqrt(vi / (1 - 0.999 ** t)) + 1e-15)
    return net


def init_scales(points: np.ndarray) -> np.ndarray:
    nbr = neighbor_graph(points, min(3, points.shape[0] - 1))
    d = np.sqrt(((points[nbr] - points[:, None]) ** 2).sum(-1)).mean(1)
    return np.log(np.clip(d, 1e-4, None))[:, None].repeat(3, axis=1)


def init_state(rig: Rig, frame_count: int, config: TrainConfig) -> TrainState:
    """Canonical cloud sampled on the rig surface plus freshly initialised networks."""
    rng = np.random.default_rng(config.seed)
    n = config.init_points
    if len(rig.capsules):
        means, _, _ = sample_capsule_surface(rig.capsules, n, rng)
    else:
        pick = rng.integers(0, rig.control_points.positions.shape[0], size=n)
        means = rig.control_points.positions[pick] + rng.normal(0, 1e-3, size=(n, 3))
    J = rig.skeleton.joint_count
    cloud = dict(means=means, scale_log=init_scales(means), rots=np.tile([1.0, 0, 0, 0], (n, 1)),
                 opacity_logit=np.full(n, float(logit(config.init_opacity))),
                 color_feat=np.zeros((n, COLOR_FEAT_DIM)))
    nets = DeformNets.init(J, rng)
    if config.skin_pretrain_steps > 0:
        targets = inherit_weights(means, rig.control_points, config.inherit_k)
        pretrain_skinning(nets.skinning, means, targets, config.skin_pretrain_steps,
                          config.skin_pretrain_lr)
    return make_state(cloud, nets, J, frame_count, config.seed)


# ---------------------------------------------------------------------------
# pose correction
# ---------------------------------------------------------------------------


@dataclass
class CorrectedPose:
    frame: int
    fitted: Pose
    quats: np.ndarray  # raw corrected (J, 4)
    translation: np.ndarray
    bone_scale: np.ndarray
    bones: np.ndarray
    qhat_nonroot: np.ndarray


def correct_pose(state: TrainState, rig: Rig, pose: Pose, frame: int | None) -> CorrectedPose:
    """Apply learned corrections: ``root <- d_root * root``, ``q_j <- d_j * q_j``, ``t <- t + d_t``."""
    p = state.params
    bone_scale = rig.skeleton.bone_scale + p["pose.d_bone_scale"]
    if frame is None or not 0 <= frame < state.frame_count:
        quats = pose.joint_rot.copy()
        trans = pose.root_translation.copy()
        frame = None
    else:
        d = np.concatenate([p["pose.d_root"][frame][None], p["pose.d_joint"][frame]], axis=0)
        quats = quat_multiply(quat_normalize(d), pose.joint_rot)
        trans = pose.root_translation + p["pose.d_trans"][frame]
    corrected = Pose(trans, quats)
    bones = compute_bone_transforms(rig.skeleton, corrected, bone_scale)
    return CorrectedPose(frame, pose, quats, trans, bone_scale, bones, quat_normalize(quats[1:]))


def correct_pose_backward(state: TrainState, rig: Rig, cp: CorrectedPose, g_bones, g_qhat, grads: dict):
    """Accumulate gradients of a corrected pose into ``grads`` (pose.* entries)."""
    g_trans, g_quats, g_bs = compute_bone_transforms_backward(
        rig.skeleton, Pose(cp.translation, cp.quats), cp.bone_scale, g_bones)
    g_quats = g_quats.copy()
    if g_qhat is not None and g_qhat.size:
        g_quats[1:] += quat_normalize_backward(cp.quats[1:], g_qhat)
    grads["pose.d_bone_scale"] += g_bs
    if cp.frame is None:
        return
    p = state.params
    d = np.concatenate([p["pose.d_root"][cp.frame][None], p["pose.d_joint"][cp.frame]], axis=0)
    g_dn, _ = quat_multiply_backward(quat_normalize(d), cp.fitted.joint_rot, g_quats)
    g_d = quat_normalize_backward(d, g_dn)
    grads["pose.d_root"][cp.frame] += g_d[0]
    grads["pose.d_joint"][cp.frame] += g_d[1:]
    grads["pose.d_trans"][cp.frame] += g_trans


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_dims(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def loss_rgb(rendered, gt) -> float:
    """Mean absolute error over pixels and channels."""
    a, b = _check_dims(rendered, gt)
    return float(np.mean(np.abs(a - b)))


def loss_mask(alpha, mask) -> float:
    a, b = _check_dims(alpha, mask)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b) -> np.ndarray:
    return np.sign(a - b) / a.size


def loss_skin(predicted, inherited) -> float:
    """Mean squared difference between predicted and template weights."""
    a, b = _check_dims(predicted, inherited)
    return float(np.mean((a - b) ** 2))


def _pair_dist(x, nbr):
    diff = x[:, None] - x[nbr]
    flat = diff.reshape(diff.shape[0], diff.shape[1], -1)
    return np.sqrt((flat ** 2).sum(-1)), diff


def loss_iso(cloud_cano, cloud_deformed, neighbors) -> tuple:
    """Isometry of neighbour distances (positions) and covariance Frobenius distances."""
    iso_pos, iso_cov, _ = loss_iso_and_grad(cloud_cano.means, cloud_cano.covariances(),
                                            cloud_deformed.means, cloud_deformed.covariances(),
                                            neighbors)
    return iso_pos, iso_cov


def loss_iso_and_grad(X_c, S_c, X_o, S_o, nbr):
    """Returns ``(iso_pos, iso_cov, (dX_c, dS_c, dX_o, dS_o))``."""
    n_pairs = nbr.size
    dc, vc = _pair_dist(X_c, nbr)
    do, vo = _pair_dist(X_o, nbr)
    sc, Vc = _pair_dist(S_c, nbr)
    so, Vo = _pair_dist(S_o, nbr)
    iso_pos = float(np.mean(np.abs(dc - do)))
    iso_cov = float(np.mean(np.abs(sc - so)))

    def scatter(coef, vec, shape):
        # d|x_i - x_j| contributes +coef*u to i and -coef*u to j
        g_pair = coef[..., None] * vec.reshape(vec.shape[0], vec.shape[1], -1)
        g = g_pair.sum(1)
        np.add.at(g, nbr.reshape(-1), -g_pair.reshape(-1, g_pair.shape[-1]))
        return g.reshape(shape)

    sp = np.sign(dc - do) / n_pairs
    sv = np.sign(sc - so) / n_pairs
    g_Xc = scatter(sp / np.maximum(dc, 1e-12), vc, X_c.shape)
    g_Xo = scatter(-sp / np.maximum(do, 1e-12), vo, X_o.shape)
    g_Sc = scatter(sv / np.maximum(sc, 1e-12), Vc, S_c.shape)
    g_So = scatter(-sv / np.maximum(so, 1e-12), Vo, S_o.shape)
    return iso_pos, iso_cov, (g_Xc, g_Sc, g_Xo, g_So)


def total_loss(parts: dict, w: LossWeights) -> float:
    """Weighted sum; the two render branches' rgb/mask terms are averaged first."""
    def branch_mean(key):
        vals = [parts[k] for k in (key, key + "_daa") if k in parts]
        return float(np.mean(vals)) if vals else 0.0

    return (branch_mean("l_rgb") + w.mask * branch_mean("l_mask") + w.lpips * 0.0
            + w.skin * parts.get("l_skin", 0.0) + w.isopos * parts.get("l_isopos", 0.0)
            + w.isocov * parts.get("l_isocov", 0.0) + w.contrastive * parts.get("l_contrastive", 0.0))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-15


def learning_rates(state: TrainState, lr: LearningRates, total_steps: int) -> dict:
    """Per-parameter learning rates at the current step."""
    frac = min(state.step / max(total_steps, 1), 1.0)
    means_lr = lr.means * (lr.means_final / lr.means) ** frac
    out = {}
    for k in state.params:
        if k == "cloud.means":
            out[k] = means_lr
        elif k.startswith("cloud."):
            out[k] = getattr(lr, k.split(".", 1)[1])
        elif k.startswith("net."):
            out[k] = lr.nets
        else:
            out[k] = lr.pose if state.step >= lr.pose_warmup else 0.0
    return out


def adam_step(state: TrainState, grads: dict, lrs: dict, diagnostics: dict | None = None) -> TrainState:
    """One Adam update in place; non-finite gradients skip the step."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        state.skipped += 1
        if diagnostics is not None:
            diagnostics["nonfinite_grads"] = bad
        log.warning("skipping step %d: non-finite gradients in %s", state.step, bad)
        return state
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    for k, g in grads.items():
        lr = lrs.get(k, 0.0)
        if lr == 0.0:
            continue
        m, v, p = state.m[k], state.v[k], state.params[k]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if k in QUAT_PARAMS:
            p /= np.linalg.norm(p, axis=-1, keepdims=True)
    return state


# ---------------------------------------------------------------------------
# one step: forward + hand backward
# ---------------------------------------------------------------------------


@dataclass
class StepInputs:
    """Everything one step needs besides the state."""

    rig: Rig
    frame: int
    pose: Pose
    camera: Camera
    image: np.ndarray
    mask: np.ndarray
    partner: int | None = None
    partner_pose: Pose | None = None
    partner_camera: Camera | None = None
    partner_image: np.ndarray | None = None
    partner_mask: np.ndarray | None = None
    iso_neighbors: np.ndarray | None = None
    daa: bool = True
    contrastive: bool = True
    nonrigid: bool = True
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    inherit_k: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    extractor: GeoExtractor | None = None


def composite_gt(image, mask, background):
    """Ground truth (stored over black) composited onto the training background."""
    return image + (1.0 - mask)[..., None] * np.asarray(background)


def _zero_grads(state: TrainState) -> dict:
    return {k: np.zeros_like(v) for k, v in state.params.items()}


def _add_net_grads(grads, name, gWs, gbs):
    for i, (gW, gb) in enumerate(zip(gWs, gbs)):
        grads[f"net.{name}.W{i}"] += gW
        grads[f"net.{name}.b{i}"] += gb


def _render_branch(X, R, scale_log, opacity_logit, feat, T3, cam, nets, bg, gt, mask):
    rgb, ccache = viewdir_color_forward(X, T3, feat, cam.center, nets.color)
    cov = covariance(scale_log, R)
    out, ctx = render_gaussians(X, cov, opacity_logit, rgb, cam, bg)
    gt_c = composite_gt(gt, mask, bg)
    l_rgb = loss_rgb(out.color, gt_c)
    l_mask = loss_mask(out.alpha, mask)
    return dict(rgb=rgb, ccache=ccache, cov=cov, out=out, ctx=ctx, gt=gt_c, mask=mask, l_rgb=l_rgb,
                l_mask=l_mask, R=R, scale_log=scale_log)


def _render_branch_backward(b, scale_w, mask_w, nets, grads):
    """Returns ``(g_X, g_R, g_scale_log, g_opacity_logit, g_feat, g_T3)``."""
    g_color = scale_w * l1_grad(b["out"].color, b["gt"])
    g_alpha = mask_w * l1_grad(b["out"].alpha, b["mask"])
    g_X, g_cov, g_op, g_rgb = render_gaussians_backward(b["ctx"], g_color, g_alpha)
    gx2, g_T3, g_feat, (gWs, gbs) = viewdir_color_backward(b["ccache"], nets.color, g_rgb)
    _add_net_grads(grads, "color", gWs, gbs)
    g_s, g_R = covariance_backward(b["scale_log"], b["R"], g_cov)
    return g_X + gx2, g_R, g_s, g_op, g_feat, g_T3


def step_loss(state: TrainState, inp: StepInputs, with_grads: bool = True, counters: dict | None = None):
    """Loss parts, total and (optionally) gradients for one training view."""
    counters = counters if counters is not None else {}
    nets = state.nets()
    cano = state.cano()
    w = inp.weights
    bg = np.asarray(inp.background, dtype=np.float64)
    n = cano.means.shape[0]
    use_partner = (inp.daa or inp.contrastive) and inp.partner is not None

    cp_f = correct_pose(state, inp.rig, inp.pose, inp.frame)
    dfm = deform_forward(cano, cp_f.qhat_nonroot, cp_f.bones, nets, inp.nonrigid)
    T3 = dfm.T[:, :3, :3]
    b1 = _render_branch(dfm.X_o, dfm.R_o, dfm.scale_log, dfm.opacity_logit, dfm.color_feat, T3,
                        inp.camera, nets, bg, inp.image, inp.mask)
    parts = {"l_rgb": b1["l_rgb"], "l_mask": b1["l_mask"]}

    w_inh = inherit_weights(cano.means, inp.rig.control_points, inp.inherit_k)
    parts["l_skin"] = loss_skin(dfm.weights, w_inh)

    R_c = quat_to_rotmat(cano.rots)
    S_c = covariance(cano.scale_log, R_c)
    nbr = inp.iso_neighbors if inp.iso_neighbors is not None else neighbor_graph(cano.means, min(5, n - 1))
    iso_pos, iso_cov, iso_g = loss_iso_and_grad(cano.means, S_c, dfm.X_o, b1["cov"], nbr)
    parts["l_isopos"], parts["l_isocov"] = iso_pos, iso_cov

    b2 = adj = cp_a = dfm_op = emb = None
    if use_partner:
        cp_a = correct_pose(state, inp.rig, inp.partner_pose, inp.partner)
        T_inh = lbs_blend(w_inh, cp_f.bones)
        T_inh_a = lbs_blend(w_inh, cp_a.bones)
        X_a, R_a, F, adj = adjust_forward(dfm.X_o, dfm.R_o, T_inh, T_inh_a)
        if inp.daa:
            counters["daa_branch"] = counters.get("daa_branch", 0) + 1
            T3_a = F[:, :3, :3] @ T3
            b2 = _render_branch(X_a, R_a, dfm.scale_log, dfm.opacity_logit, dfm.color_feat, T3_a,
                                inp.partner_camera, nets, bg, inp.partner_image, inp.partner_mask)
            b2["T3_a"] = T3_a
            parts["l_rgb_daa"], parts["l_mask_daa"] = b2["l_rgb"], b2["l_mask"]
        if inp.contrastive:
            counters["contrastive_branch"] = counters.get("contrastive_branch", 0) + 1
            dfm_op = deform_forward(cano, cp_a.qhat_nonroot, cp_a.bones, nets, inp.nonrigid)
            sub = subsample_indices(n)
            ex = inp.extractor
            f_o, c_o = embed_forward(dfm.X_o[sub], ex)
            f_a, c_a = embed_forward(X_a[sub], ex)
            f_op, c_op = embed_forward(dfm_op.X_o[sub], ex)
            l_con, (g_fo, g_fa, g_fop) = contrastive_loss_and_grad(f_o, f_a, f_op)
            parts["l_contrastive"] = l_con
            emb = (sub, c_o, c_a, c_op, g_fo, g_fa, g_fop)

    total = total_loss(parts, w)
    if not with_grads:
        return total, parts, None, b1

    grads = _zero_grads(state)
    n_branch = 2.0 if b2 is not None else 1.0
    g_X_o = np.zeros((n, 3))
    g_R_o = np.zeros((n, 3, 3))
    g_s_d = np.zeros((n, 3))
    g_op_d = np.zeros(n)
    g_feat_d = np.zeros_like(dfm.color_feat)
    g_T = np.zeros((n, 4, 4))
    g_bones_f = np.zeros_like(cp_f.bones)
    g_bones_a = None if cp_a is None else np.zeros_like(cp_a.bones)
    g_qhat_a = None

    # branch 1 render; the iso covariance term joins the observed covariance gradient
    gX, gR, gs, gop, gfeat, gT3 = _render_branch_backward(b1, 1.0 / n_branch, w.mask / n_branch, nets, grads)
    g_X_o += gX
    g_R_o += gR
    g_s_d += gs
    g_op_d += gop
    g_feat_d += gfeat
    g_T[:, :3, :3] += gT3
    g_Xc_iso, g_Sc_iso, g_Xo_iso, g_So_iso = iso_g
    g_X_o += w.isopos * g_Xo_iso
    gs_iso, gR_iso = covariance_backward(dfm.scale_log, dfm.R_o, w.isocov * g_So_iso)
    g_s_d += gs_iso
    g_R_o += gR_iso

    g_X_a = np.zeros((n, 3)) if adj is not None else None
    g_R_a = np.zeros((n, 3, 3)) if adj is not None else None
    g_F = np.zeros((n, 4, 4)) if adj is not None else None
    if b2 is not None:
        gX, gR, gs, gop, gfeat, gT3a = _render_branch_backward(b2, 1.0 / n_branch, w.mask / n_branch,
                                                               nets, grads)
        g_X_a += gX
        g_R_a += gR
        g_s_d += gs
        g_op_d += gop
        g_feat_d += gfeat
        # T3_a = F3 T3
        g_F[:, :3, :3] += gT3a @ np.swapaxes(T3, 1, 2)
        g_T[:, :3, :3] += np.swapaxes(adj["F"][:, :3, :3], 1, 2) @ gT3a
    if emb is not None:
        sub, c_o, c_a, c_op, g_fo, g_fa, g_fop = emb
        ex = inp.extractor
        lam = w.contrastive
        g_X_o[sub] += embed_backward(c_o, ex, lam * g_fo)
        g_X_a[sub] += embed_backward(c_a, ex, lam * g_fa)
        g_Xop = np.zeros((n, 3))
        g_Xop[sub] += embed_backward(c_op, ex, lam * g_fop)
        dop = deform_backward(dfm_op, nets, g_X_o=g_Xop)
        _accumulate_deform(grads, dop)
        g_bones_a += dop["bones"]
        g_qhat_a = dop["qhat_nonroot"]
    if adj is not None:
        gXo, gRo, gTi, gTia = adjust_backward(adj, g_X_a, g_R_a, g_F)
        g_X_o += gXo
        g_R_o += gRo
        g_bones_f += lbs_blend_backward(w_inh, cp_f.bones, gTi)[1]
        g_bones_a += lbs_blend_backward(w_inh, cp_a.bones, gTia)[1]

    g_w = w.skin * 2.0 * (dfm.weights - w_inh) / dfm.weights.size
    d = deform_backward(dfm, nets, g_X_o=g_X_o, g_R_o=g_R_o, g_scale_log=g_s_d, g_opacity_logit=g_op_d,
                        g_color_feat=g_feat_d, g_T=g_T, g_weights=g_w)
    _accumulate_deform(grads, d)
    g_bones_f += d["bones"]

    # canonical iso terms
    grads["cloud.means"] += w.isopos * g_Xc_iso
    gs_c, gR_c = covariance_backward(cano.scale_log, R_c, w.isocov * g_Sc_iso)
    grads["cloud.scale_log"] += gs_c
    grads["cloud.rots"] += quat_to_rotmat_backward(cano.rots, gR_c)

    correct_pose_backward(state, inp.rig, cp_f, g_bones_f, d["qhat_nonroot"], grads)
    if cp_a is not None:
        correct_pose_backward(state, inp.rig, cp_a, g_bones_a, g_qhat_a, grads)
    return total, parts, grads, b1


def _accumulate_deform(grads: dict, d: dict):
    for k in ("means", "scale_log", "rots", "opacity_logit", "color_feat"):
        grads[f"cloud.{k}"] += d[k]
    for name in ("encoder", "nonrigid", "skinning"):
        _add_net_grads(grads, name, *d[name])


# ---------------------------------------------------------------------------
# rendering a state (inference)
# ---------------------------------------------------------------------------


def render_pose(state: TrainState, rig: Rig, pose: Pose, cam: Camera, frame: int | None = None,
                background=(0.0, 0.0, 0.0), nonrigid: bool = True):
    """Render the avatar in ``pose``; returns ``(color (H, W, 3), alpha (H, W))``."""
    nets = state.nets()
    cp = correct_pose(state, rig, pose, frame)
    dfm = deform_forward(state.cano(), cp.qhat_nonroot, cp.bones, nets, nonrigid)
    rgb, _ = viewdir_color_forward(dfm.X_o, dfm.T[:, :3, :3], dfm.color_feat, cam.center, nets.color)
    out, _ = render_gaussians(dfm.X_o, covariance(dfm.scale_log, dfm.R_o), dfm.opacity_logit, rgb,
                              cam, background)
    return np.clip(out.color, 0.0, 1.0), np.clip(out.alpha, 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

STATE_FORMAT = "gsavatar-state"


def save_state(path, state: TrainState, rig: Rig, config: TrainConfig, data_dir=None, extra: dict | None = None):
    """Atomic checkpoint with parameters, Adam moments, the rig and a config echo."""
    tensors = {}
    for k in sorted(state.params):
        tensors["param." + k] = state.params[k]
        tensors["adam_m." + k] = state.m[k]
        tensors["adam_v." + k] = state.v[k]
    tensors.update(rig_to_tensors(rig))
    header = {"format": STATE_FORMAT, "step": state.step, "skipped": state.skipped, "seed": state.seed,
              "config": config.to_dict(), "data_dir": None if data_dir is None else str(Path(data_dir).resolve())}
    header.update(extra or {})
    save_checkpoint(path, tensors, header)


def load_state(path):
    """Returns ``(state, rig, config, header)``."""
    header, t = load_checkpoint(path)
    if header.get("format") != STATE_FORMAT:
        raise DataError(f"{path}: not a training-state checkpoint")
    params = {k[6:]: v for k, v in t.items() if k.startswith("param.")}
    m = {k[7:]: v for k, v in t.items() if k.startswith("adam_m.")}
    v = {k[7:]: v for k, v in t.items() if k.startswith("adam_v.")}
    state = TrainState(params, m, v, int(header["step"]), int(header["skipped"]), int(header["seed"]))
    return state, rig_from_tensors(t), TrainConfig.from_dict(header["config"]), header


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train_frames(frame_count: int, sparse_every: int = 1) -> list:
    """Frames used for training under the sparse protocol (every ``sparse_every``-th)."""
    if sparse_every < 1:
        raise ValueError("sparse_every must be >= 1")
    return list(range(0, frame_count, sparse_every))


def partner_view(views: dict, frame: int, camera: int):
    """The partner frame's view from the same camera, else from its lowest training camera."""
    if (frame, camera) in views:
        return views[(frame, camera)]
    cams = sorted(c for f, c in views if f == frame)
    return views[(frame, cams[0])]


class Trainer:
    """Holds the dataset in memory and runs :func:`step_loss` + Adam over shuffled epochs."""

    def __init__(self, ds: SceneDataset, config: TrainConfig, state: TrainState | None = None):
        self.ds = ds
        self.config = config
        self.rig = ds.rig
        frames = set(train_frames(len(ds.poses), config.sparse_every))
        self.views = [v for v in ds.split_views("train") if v.frame_id in frames]
        if not self.views:
            raise DataError("no training views after sparse selection")
        self.view_map = {(v.frame_id, v.camera_id): v for v in self.views}
        self.images = {(v.frame_id, v.camera_id): (ds.image(v)[..., :3], ds.mask(v)) for v in self.views}
        self.frame_ids = sorted({v.frame_id for v in self.views})
        self.partners = {}
        self.use_partner = (config.daa or config.contrastive) and len(self.frame_ids) > config.top_n
        if self.use_partner:
            idx = PoseIndex(self.frame_ids, [ds.poses[f] for f in self.frame_ids], config.root_weight)
            self.partners = precompute_partners(idx, config.top_n)
        elif config.daa or config.contrastive:
            log.warning("too few training frames for top-%d retrieval; partner branches disabled", config.top_n)
        if config.geo_weights:
            self.extractor = GeoExtractor.load(config.geo_weights)
        else:
            self.extractor = GeoExtractor.create(config.geo_seed, config.geo_knn_k)
        self.state = state if state is not None else init_state(self.rig, len(ds.poses), config)
        self.rng = np.random.default_rng(config.seed)
        self.order: list = []
        self.counters = {"daa_branch": 0, "contrastive_branch": 0}
        self.iso_nbr = None

    def _next_view(self):
        if not self.order:
            self.order = list(self.rng.permutation(len(self.views)))
        return self.views[self.order.pop(0)]

    def inputs(self, v) -> StepInputs:
        c = self.config
        if self.iso_nbr is None or self.state.step % c.iso_refresh == 0:
            means = self.state.params["cloud.means"]
            self.iso_nbr = neighbor_graph(means, min(c.iso_k, means.shape[0] - 1))
        img, mask = self.images[(v.frame_id, v.camera_id)]
        inp = StepInputs(self.rig, v.frame_id, self.ds.poses[v.frame_id], self.ds.cameras[v.camera_id], img, mask,
                         iso_neighbors=self.iso_nbr, daa=c.daa and self.use_partner,
                         contrastive=c.contrastive and self.use_partner, nonrigid=c.nonrigid,
                         background=np.asarray(c.background, dtype=np.float64), inherit_k=c.inherit_k,
                         weights=c.loss_weights, extractor=self.extractor)
        if self.use_partner:
            a = self.partners[v.frame_id]
            pv = partner_view(self.view_map, a, v.camera_id)
            inp.partner, inp.partner_pose = a, self.ds.poses[a]
            inp.partner_camera = self.ds.cameras[pv.camera_id]
            inp.partner_image, inp.partner_mask = self.images[(pv.frame_id, pv.camera_id)]
        return inp

    def step(self) -> dict:
        v = self._next_view()
        inp = self.inputs(v)
        total, parts, grads, b1 = step_loss(self.state, inp, True, self.counters)
        if not np.isfinite(total):
            raise NumericalError(f"non-finite loss at step {self.state.step} (frame {v.frame_id})")
        lrs = learning_rates(self.state, self.config.lr, self.config.steps)
        step = self.state.step
        adam_step(self.state, grads, lrs)
        if not all(np.all(np.isfinite(p)) for p in self.state.params.values()):
            raise NumericalError(f"non-finite parameters after step {step}")
        rec = {"step": step, "frame": v.frame_id, "camera": v.camera_id}
        for k in ("l_rgb", "l_mask", "l_skin", "l_isopos", "l_isocov", "l_contrastive"):
            rec[k] = float(parts.get(k, 0.0))
        if "l_rgb_daa" in parts:
            rec["l_rgb_daa"], rec["l_mask_daa"] = parts["l_rgb_daa"], parts["l_mask_daa"]
        rec["total"] = float(total)
        rec["psnr_train"] = float(psnr(np.clip(b1["out"].color, 0, 1), b1["gt"]))
        rec["daa_branch"] = self.counters["daa_branch"]
        rec["contrastive_branch"] = self.counters["contrastive_branch"]
        return rec


def train_loop(ds: SceneDataset, config: TrainConfig, out_path=None, log_path=None, state=None) -> TrainState:
    """Train for ``config.steps`` steps; writes checkpoints and a JSON-lines metrics log."""
    tr = Trainer(ds, config, state)
    out_path = None if out_path is None else Path(out_path)
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w")
    try:
        for _ in range(config.steps):
            rec = tr.step()
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            s = tr.state.step
            if out_path is not None and config.save_every and s % config.save_every == 0:
                save_state(out_path.with_name(f"{out_path.stem}.step{s:06d}{out_path.suffix}"), tr.state, tr.rig,
                           config, ds.root)
    finally:
        if log_file is not None:
            log_file.close()
    if out_path is not None:
        save_state(out_path, tr.state, tr.rig, config, ds.root)
    return tr.state
