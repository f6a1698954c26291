import sys
import numpy as np
import pytest

from gsavatar.core import make_transform, quat_from_axis_angle
from gsavatar.rig import ControlPoints, Pose, Rig, Skeleton


def central_fd(f, x, h):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = (diff > atol) & (diff > rtol * scale)
    assert not bad.any(), f"max diff {diff.max():.3e}; analytic={analytic[bad][:5]} numeric={numeric[bad][:5]}"


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain_rig(rng):
    """3-joint chain along +y with 300 control points."""
    parent = [-1, 0, 1]
    rest = np.stack([make_transform(t=[0.0, 0.5, 0.0]), make_transform(t=[0.0, 0.4, 0.0]),
                     make_transform(t=[0.0, 0.3, 0.0])])
    skel = Skeleton(parent, rest)
    pos = rng.uniform([-0.1, 0.4, -0.1], [0.1, 1.3, 0.1], size=(300, 3))
    joints = skel.joint_positions()
    d = np.linalg.norm(pos[:, None] - joints[None], axis=-1)
    w = np.exp(-d / 0.05)
    w /= w.sum(1, keepdims=True)
    return Rig(skel, ControlPoints(pos, w))


def random_pose(rng, J, angle=0.6, trans=0.2):
    axes = rng.normal(size=(J, 3))
    q = np.stack([quat_from_axis_angle(a / np.linalg.norm(a), rng.uniform(-angle, angle)) for a in axes])
    return Pose(rng.uniform(-trans, trans, 3), q)


TINY_SYNTH = dict(joints=4, gaussians=300, frames=6, cameras=2, resolution=32, control_points=600,
                  skin_pretrain_steps=150, seed=3)


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    """A small synthetic dataset on disk (plus its ground-truth state)."""
    from gsavatar.toolkit.synth import SynthConfig, synthesize
    root = tmp_path_factory.mktemp("tiny")
    ds, state = synthesize(SynthConfig(**TINY_SYNTH), root)
    return ds, state


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
