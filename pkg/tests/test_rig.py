import numpy as np
import pytest
from conftest import assert_grad_close, central_fd, random_pose

from gsavatar.core import make_transform, quat_from_axis_angle, quat_to_rotmat, transform_point
from gsavatar.rig import (CAPSULE_DTYPE, ControlPoints, Pose, Skeleton, compute_bone_transforms,
                          compute_bone_transforms_backward, inherit_weights, knn, lbs_apply, lbs_blend,
                          lbs_blend_backward, neighbor_graph, sample_capsule_surface)


def naive_fk(skel, pose, bone_scale):
    """Independent accumulation: walk each joint's ancestor chain explicitly."""
    J = skel.joint_count
    out = []
    for j in range(J):
        chain = []
        k = j
        while k >= 0:
            chain.append(k)
            k = skel.parent[k]
        world = np.eye(4)
        rest = np.eye(4)
        for k in reversed(chain):
            local = skel.rest_local[k].copy()
            local[:3, 3] *= bone_scale[k]
            rot = make_transform(quat_to_rotmat(pose.joint_rot[k]))
            world = world @ local @ rot
            rest = rest @ skel.rest_local[k]
        b = world @ np.linalg.inv(rest)
        b[:3, 3] += pose.root_translation
        out.append(b)
    return np.stack(out)


def test_rest_pose_gives_identity(chain_rig):
    bones = compute_bone_transforms(chain_rig.skeleton, Pose.rest(3))
    assert np.allclose(bones, np.eye(4), atol=1e-15)
    pts = chain_rig.control_points.positions
    T = lbs_blend(chain_rig.control_points.weights, bones)
    assert np.allclose(transform_point(T, pts), pts, atol=1e-15)


def test_single_joint_root_rotation():
    skel = Skeleton([-1], make_transform(t=[0.3, 0.2, 0.1])[None])
    q = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    bones = compute_bone_transforms(skel, Pose(np.zeros(3), q[None]))
    # rotation about the joint location
    c = np.array([0.3, 0.2, 0.1])
    R = quat_to_rotmat(q)
    assert np.allclose(bones[0][:3, :3], R)
    assert np.allclose(transform_point(bones[0], c), c)


def test_fk_matches_naive_oracle(chain_rig, rng):
    skel = chain_rig.skeleton
    for _ in range(5):
        pose = random_pose(rng, 3)
        bs = rng.uniform(0.8, 1.2, 3)
        assert np.allclose(compute_bone_transforms(skel, pose, bs), naive_fk(skel, pose, bs), atol=1e-12)


def test_fk_branching_tree(rng):
    parent = [-1, 0, 0, 1, 2]
    rest = np.stack([make_transform(t=rng.normal(size=3)) for _ in parent])
    skel = Skeleton(parent, rest)
    pose = random_pose(rng, 5)
    assert np.allclose(compute_bone_transforms(skel, pose), naive_fk(skel, pose, np.ones(5)), atol=1e-12)


def test_fk_length_mismatch(chain_rig):
    with pytest.raises(ValueError):
        compute_bone_transforms(chain_rig.skeleton, Pose.rest(2))


def test_skeleton_rejects_cycles():
    with pytest.raises(ValueError):
        Skeleton([-1, 2, 1], np.tile(np.eye(4), (3, 1, 1)))


def test_fk_backward_fd(chain_rig, rng):
    skel = chain_rig.skeleton
    pose = random_pose(rng, 3)
    pose.joint_rot = pose.joint_rot * 1.3
    bs = rng.uniform(0.8, 1.2, 3)
    G = rng.normal(size=(3, 4, 4))
    gt, gq, gs = compute_bone_transforms_backward(skel, pose, bs, G)
    f = lambda: np.sum(compute_bone_transforms(skel, pose, bs) * G)  # noqa: E731
    assert_grad_close(gt, central_fd(f, pose.root_translation, 1e-6), rtol=1e-6)
    assert_grad_close(gq, central_fd(f, pose.joint_rot, 1e-6), rtol=1e-6)
    assert_grad_close(gs, central_fd(f, bs, 1e-6), rtol=1e-6)


def test_lbs_apply_cases(rng):
    bones = np.stack([make_transform(t=[1, 0, 0]), make_transform(t=[0, 1, 0]), np.eye(4)])
    assert np.array_equal(lbs_apply(np.array([0.0, 1.0, 0.0]), bones), bones[1])
    T = lbs_apply(np.array([0.5, 0.5, 0.0]), bones)
    assert np.allclose(T[:3, 3], [0.5, 0.5, 0.0])
    w = rng.dirichlet(np.ones(3))
    assert np.allclose(lbs_apply(w, np.tile(np.eye(4), (3, 1, 1))), np.eye(4))
    with pytest.raises(ValueError):
        lbs_apply(np.array([1.1, -0.1, 0.0]), bones)
    with pytest.raises(ValueError):
        lbs_apply(np.array([0.5, 0.4, 0.0]), bones)


def test_lbs_rigid_equivariance(chain_rig, rng):
    bones = compute_bone_transforms(chain_rig.skeleton, random_pose(rng, 3))
    G = make_transform(quat_to_rotmat(rng.normal(size=4)), rng.normal(size=3))
    w = chain_rig.control_points.weights
    pts = chain_rig.control_points.positions
    T = lbs_blend(w, bones)
    T_g = lbs_blend(w, G @ bones)
    assert np.allclose(T_g, G @ T, atol=1e-9)
    assert np.allclose(transform_point(T_g, pts), transform_point(G, transform_point(T, pts)), atol=1e-9)


def test_lbs_blend_backward_fd(rng):
    w = rng.dirichlet(np.ones(3), size=4)
    bones = rng.normal(size=(3, 4, 4))
    G = rng.normal(size=(4, 4, 4))
    gw, gb = lbs_blend_backward(w, bones, G)
    assert_grad_close(gw, central_fd(lambda: np.sum(lbs_blend(w, bones) * G), w, 1e-6), rtol=1e-6)
    assert_grad_close(gb, central_fd(lambda: np.sum(lbs_blend(w, bones) * G), bones, 1e-6), rtol=1e-6)


def brute_knn(q, r, k):
    d2 = ((q[:, None] - r[None]) ** 2).sum(-1)
    return np.array([sorted(range(r.shape[0]), key=lambda j: (d2[i, j], j))[:k] for i in range(q.shape[0])])


def test_knn_matches_brute_force(rng):
    ref = rng.normal(size=(1000, 3))
    q = rng.normal(size=(1000, 3))
    got = knn(q, ref, 5)
    d2 = ((q[:, None] - ref[None]) ** 2).sum(-1)
    expect = np.lexsort((np.broadcast_to(np.arange(1000), d2.shape), d2), axis=-1)[:, :5]
    assert np.array_equal(got, expect)


def test_knn_small_cases(rng):
    ref = rng.normal(size=(7, 3))
    assert np.array_equal(knn(ref[3:4], ref, 7), brute_knn(ref[3:4], ref, 7))
    assert knn(ref[3:4], ref, 1)[0, 0] == 3
    with pytest.raises(ValueError):
        knn(ref, ref, 8)
    # ties broken by lower index
    grid = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
    assert np.array_equal(knn(np.zeros((1, 3)), grid, 4)[0], [0, 1, 2, 3])


def test_knn_tree_path_with_ties(rng):
    ref = np.round(rng.uniform(0, 5, size=(3000, 3)))
    q = np.round(rng.uniform(0, 5, size=(800, 3))) + 0.5
    got = knn(q, ref, 6)
    d2 = ((q[:, None] - ref[None]) ** 2).sum(-1)
    expect = np.lexsort((np.broadcast_to(np.arange(3000), d2.shape), d2), axis=-1)[:, :6]
    assert np.array_equal(got, expect)


def test_neighbor_graph_excludes_self(rng):
    pts = rng.normal(size=(200, 3))
    nbr = neighbor_graph(pts, 5)
    assert nbr.shape == (200, 5)
    assert not np.any(nbr == np.arange(200)[:, None])


def test_inherit_weights(chain_rig, rng):
    cp = chain_rig.control_points
    w = inherit_weights(cp.positions[7:8], cp, 1)
    assert np.array_equal(w[0], cp.weights[7])
    q = rng.uniform(-0.2, 1.5, size=(100, 3))
    for k in (1, 3):
        w = inherit_weights(q, cp, k)
        assert np.allclose(w.sum(1), 1.0, atol=1e-6) and np.all(w >= 0)
    two = ControlPoints(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(inherit_weights(np.array([[0.5, 0, 0]]), two, 2), [[0.5, 0.5]])
    with pytest.raises(ValueError):
        ControlPoints(np.zeros((1, 3)), np.array([[0.7, 0.2]]))


def test_default_control_point_count_accepted(rng):
    from gsavatar.toolkit.synth import SynthConfig
    assert SynthConfig().control_points == 6890


def test_capsule_sampling_on_surface(rng):
    caps = np.array([(0, [0, 0, 0], [0, 1, 0], 0.2), (1, [0, 1, 0], [1, 1, 0], 0.1)], dtype=CAPSULE_DTYPE)
    pts, normals, which = sample_capsule_surface(caps, 2000, rng)
    for c in range(2):
        p = pts[which == c]
        a, b, r = caps[c]["start"], caps[c]["end"], caps[c]["radius"]
        t = np.clip((p - a) @ (b - a) / ((b - a) @ (b - a)), 0, 1)
        d = np.linalg.norm(p - (a + t[:, None] * (b - a)), axis=1)
        assert np.allclose(d, r, atol=1e-12)
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)
