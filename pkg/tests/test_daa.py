import numpy as np
import pytest
from conftest import random_pose, random_quats

from gsavatar.core import GaussianCloud, make_transform, quat_from_axis_angle, quat_to_rotmat
from gsavatar.daa import PoseIndex, adjust, motion_field, pose_distance, precompute_partners, select_similar
from gsavatar.deform import CanonicalParams, DeformNets, Mlp, deform_forward
from gsavatar.rig import Pose, compute_bone_transforms, inherit_weights


def trace_angle(qa, qb):
    Ra, Rb = quat_to_rotmat(qa), quat_to_rotmat(qb)
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def test_pose_distance_examples(rng):
    p = random_pose(rng, 5)
    assert pose_distance(p, p) == 0.0
    q = Pose(p.root_translation.copy(), p.joint_rot.copy())
    from gsavatar.core import quat_multiply
    q.joint_rot[2] = quat_multiply(p.joint_rot[2], quat_from_axis_angle([0, 0, 1.0], np.pi / 2))
    assert np.isclose(pose_distance(p, q), np.pi / 2, atol=1e-9)
    with pytest.raises(ValueError):
        pose_distance(p, random_pose(rng, 4))


def test_pose_distance_trace_oracle(rng):
    for _ in range(10):
        a, b = random_pose(rng, 6, angle=2.5), random_pose(rng, 6, angle=2.5)
        angles = [trace_angle(a.joint_rot[j], b.joint_rot[j]) for j in range(6)]
        assert np.isclose(pose_distance(a, b), sum(angles), atol=1e-6)
        assert np.isclose(pose_distance(a, b, root_weight=0.25), 0.25 * angles[0] + sum(angles[1:]), atol=1e-6)
        assert pose_distance(a, b) == pytest.approx(pose_distance(b, a), abs=1e-12)


def test_pose_distance_triangle_inequality(rng):
    for _ in range(30):
        a, b, c = (random_pose(rng, 4, angle=3.0) for _ in range(3))
        assert pose_distance(a, c) <= pose_distance(a, b) + pose_distance(b, c) + 1e-9


def test_select_similar(rng):
    idx = PoseIndex([3, 7], [random_pose(rng, 4), random_pose(rng, 4)])
    assert select_similar(idx, 3) == 7 and select_similar(idx, 7) == 3
    with pytest.raises(ValueError):
        select_similar(idx, 3, top_n=2)
    with pytest.raises(ValueError):
        select_similar(PoseIndex([0], [random_pose(rng, 4)]), 0)
    ids = list(range(0, 200, 20))
    poses = [random_pose(rng, 4) for _ in ids]
    idx = PoseIndex(ids, poses)
    for f, p in zip(ids, poses):
        oracle = sorted((pose_distance(p, q), g) for g, q in zip(ids, poses) if g != f)
        assert select_similar(idx, f, 3) == oracle[2][1]
        assert select_similar(idx, f, 1) != f
    assert set(precompute_partners(idx)) == set(ids)


def test_select_similar_ties_by_lower_id(rng):
    p = random_pose(rng, 3)
    idx = PoseIndex([5, 2, 9], [p, Pose(p.root_translation, p.joint_rot.copy()), p])
    assert select_similar(idx, 5) == 2
    assert select_similar(idx, 2) == 5


def _weights(rng, n, J):
    w = rng.uniform(size=(n, J))
    return w / w.sum(1, keepdims=True)


def test_motion_field(chain_rig, rng):
    b_o = compute_bone_transforms(chain_rig.skeleton, random_pose(rng, 3))
    b_a = compute_bone_transforms(chain_rig.skeleton, random_pose(rng, 3))
    w = _weights(rng, 20, 3)
    assert np.allclose(motion_field(w, b_o, b_o).F_adj, np.eye(4), atol=1e-12)
    onehot = np.zeros((2, 3))
    onehot[:, 2] = 1.0
    mf = motion_field(onehot, b_o, b_a)
    assert np.allclose(mf.F_adj, b_a[2] @ np.linalg.inv(b_o[2]), atol=1e-12)
    mf = motion_field(w, b_o, b_a)
    assert np.max(np.abs(mf.F_adj @ mf.T_o - mf.T_op)) < 1e-8


def test_motion_field_singular_names_index(rng):
    bones = np.stack([make_transform(np.diag([1.0, 1.0, 1.0])), make_transform(np.diag([-1.0, 1.0, 1.0]))])
    w = np.array([[1.0, 0.0], [0.3, 0.7], [0.5, 0.5]])
    with pytest.raises(ValueError, match="Gaussian 2"):
        motion_field(w, bones, bones)
    with pytest.raises(ValueError):
        motion_field(np.array([[0.6, 0.6]]), bones, bones)


def _cloud(rng, n):
    return GaussianCloud(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), random_quats(rng, n), rng.normal(size=n),
                         rng.normal(size=(n, 16)))


def test_adjust(chain_rig, rng):
    cloud = _cloud(rng, 6)
    w = _weights(rng, 6, 3)
    b = compute_bone_transforms(chain_rig.skeleton, random_pose(rng, 3))
    same = adjust(cloud, motion_field(w, b, b))
    assert np.allclose(same.means, cloud.means) and np.allclose(same.rotmats(), cloud.rotmats())
    t = np.array([0.3, -0.2, 1.0])
    shifted = adjust(cloud, motion_field(w, b, make_transform(t=t) @ b))
    assert np.allclose(shifted.means, cloud.means + t)
    assert np.allclose(shifted.rotmats(), cloud.rotmats())
    moved = adjust(cloud, motion_field(w, b, compute_bone_transforms(chain_rig.skeleton, random_pose(rng, 3))))
    assert len(moved) == len(cloud)
    for a in ("scale_log", "opacity_logit", "color_feat"):
        assert np.array_equal(getattr(moved, a), getattr(cloud, a))


def test_daa_consistency_identity(chain_rig, rng):
    """Re-posing the observed cloud equals deforming straight into the partner pose."""
    n = 40
    means = rng.uniform([-0.1, 0.4, -0.1], [0.1, 1.3, 0.1], size=(n, 3))
    w_inh = inherit_weights(means, chain_rig.control_points)
    nets = DeformNets.init(3, rng)
    # a linear skinning "net" whose softmax reproduces the inherited weights exactly
    nets.skinning = Mlp([np.zeros((3, 3))], [np.zeros(3)], ["none"])
    cano = CanonicalParams(means, np.zeros((n, 3)), random_quats(rng, n), np.zeros(n), np.zeros((n, 16)))
    p_i, p_a = random_pose(rng, 3), random_pose(rng, 3)
    b_i = compute_bone_transforms(chain_rig.skeleton, p_i)
    b_a = compute_bone_transforms(chain_rig.skeleton, p_a)
    d_i = deform_forward(cano, p_i.joint_rot[1:], b_i, nets)
    d_a = deform_forward(cano, p_a.joint_rot[1:], b_a, nets)
    w = d_i.weights  # matched weights: the articulation weights
    cloud_o = GaussianCloud(d_i.X_o, cano.scale_log, random_quats(rng, n), cano.opacity_logit, cano.color_feat)
    got = adjust(cloud_o, motion_field(w, b_i, b_a)).means
    assert np.max(np.abs(got - d_a.X_o)) <= 1e-8
    assert w_inh.shape == w.shape


def test_adjust_backward_fd(chain_rig, rng):
    from conftest import assert_grad_close, central_fd
    from gsavatar.daa import adjust_backward, adjust_forward
    n = 4
    X, R = rng.normal(size=(n, 3)), quat_to_rotmat(random_quats(rng, n))
    w = _weights(rng, n, 3)
    T_o = motion_field(w, compute_bone_transforms(chain_rig.skeleton, random_pose(rng, 3)),
                       compute_bone_transforms(chain_rig.skeleton, random_pose(rng, 3))).T_o
    T_op = T_o + 0.1 * rng.normal(size=T_o.shape)
    gX, gR = rng.normal(size=(n, 3)), rng.normal(size=(n, 3, 3))

    def loss():
        Xa, Ra, _, _ = adjust_forward(X, R, T_o, T_op)
        return np.sum(Xa * gX) + np.sum(Ra * gR)

    cache = adjust_forward(X, R, T_o, T_op)[3]
    g = adjust_backward(cache, gX, gR)
    for analytic, x in zip(g, (X, R, T_o, T_op)):
        assert_grad_close(analytic, central_fd(loss, x, 1e-6), rtol=1e-5)
