"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``)
to see the lines as they happen; they are also repeated in the terminal summary.
Criteria 4 and 5 train four avatars and take tens of minutes on one core.
"""

import json
import os
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from conftest import TINY_SYNTH, random_pose
from oracles import brute_render_vectorized, psnr_reference, random_scene, scene_cov, ssim_reference

from gsavatar.core import Camera, make_transform, quat_to_rotmat
from gsavatar.daa import motion_field
from gsavatar.deform import CanonicalParams, DeformNets, Mlp, deform_forward
from gsavatar.geocon import GeoExtractor, contrastive_loss
from gsavatar.rig import compute_bone_transforms, inherit_weights, lbs_apply, lbs_blend
from gsavatar.splat import project_cloud, render_forward, render_gaussians
from gsavatar.toolkit.cli import evaluate
from gsavatar.toolkit.io import read_dataset
from gsavatar.toolkit.metrics import psnr, ssim
from gsavatar.toolkit.synth import SynthConfig, gen_poses, gen_rig, synthesize
from gsavatar.train import LossWeights, StepInputs, TrainConfig, make_state, step_loss, train_loop

RESULTS = {}


def report(n, ok, detail, warn_only=False):
    tag = "PASS" if ok else ("WARN" if warn_only else "FAIL")
    line = f"[criterion {n}] {tag}: {detail}"
    RESULTS[n] = line
    print("\n" + line, flush=True)
    return ok


# 1 -----------------------------------------------------------------------------

def test_criterion_1_rasterizer_matches_brute_force():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        means, sl, q, op, rgb, cam = random_scene(rng, 100, 64)
        bg = rng.uniform(size=3)
        s, _ = project_cloud(means, scene_cov(sl, q), op, rgb, cam)
        out = render_forward(s, cam, bg)
        c, a = brute_render_vectorized(s.mean2d, s.conic, s.depth, s.alpha_base, s.rgb, 64, 64, bg)
        worst = max(worst, np.max(np.abs(out.color - c)), np.max(np.abs(out.alpha - a)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt < 10.0
    report(1, ok, f"50 scenes, max abs error {worst:.2e} (<= 1e-5), {dt:.1f} s (< 10 s)")
    assert ok


# 2 -----------------------------------------------------------------------------

def _audit_setup(seed=7):
    cfg = SynthConfig(joints=4, gaussians=5, frames=3, cameras=2, resolution=16, control_points=200,
                      skin_pretrain_steps=0)
    rig, cloud, _ = gen_rig(cfg)
    poses = gen_poses(4, cfg)
    rng = np.random.default_rng(seed)
    cloud["scale_log"] = np.log(rng.uniform(0.08, 0.2, size=(5, 3)))
    cloud["rots"] = rng.normal(size=(5, 4))
    cloud["opacity_logit"] = rng.normal(size=5)
    cloud["color_feat"] = rng.normal(size=(5, 16))
    nets = DeformNets.init(4, rng)
    nets.nonrigid.weights[-1][:] = rng.normal(size=nets.nonrigid.weights[-1].shape) * 0.3
    nets.nonrigid.biases[-1][:] = rng.normal(size=nets.nonrigid.biases[-1].shape) * 0.1
    st = make_state(cloud, nets, 4, 3)
    for k in ("pose.d_trans", "pose.d_root", "pose.d_joint", "pose.d_bone_scale"):
        st.params[k] = st.params[k] + rng.normal(size=st.params[k].shape) * 0.05
    cam = Camera.look_at([0, 1.0, 1.6], [0, 1.1, 0], [0, 1, 0], 14, 14, 16, 16)
    cam2 = Camera.look_at([1.2, 1.0, 1.2], [0, 1.1, 0], [0, 1, 0], 14, 14, 16, 16)
    img, m = rng.uniform(size=(16, 16, 3)), (rng.uniform(size=(16, 16)) > 0.5) * 1.0
    img2, m2 = rng.uniform(size=(16, 16, 3)), (rng.uniform(size=(16, 16)) > 0.5) * 1.0
    inp = StepInputs(rig, 0, poses[0], cam, img, m, partner=2, partner_pose=poses[2], partner_camera=cam2,
                     partner_image=img2, partner_mask=m2, extractor=GeoExtractor.create(0, knn_k=3),
                     background=np.array([0.2, 0.3, 0.4]), weights=LossWeights(contrastive=1.0))
    return st, inp, rng


def test_criterion_2_gradient_audit():
    t0 = time.perf_counter()
    st, inp, rng = _audit_setup()
    total, parts, grads, _ = step_loss(st, inp)
    worst, worst_abs, checked, bad = 0.0, 0.0, 0, []
    for k in sorted(st.params):
        flat, g = st.params[k].reshape(-1), grads[k].reshape(-1)
        # the largest analytic entries plus a few random ones
        idx = set(np.argsort(-np.abs(g))[:4].tolist()) | set(rng.choice(flat.size, min(3, flat.size), False).tolist())
        h = 1e-5 if k.startswith("net.") else 1e-4
        for i in sorted(idx):
            old = flat[i]
            flat[i] = old + h
            lp = step_loss(st, inp, False)[0]
            flat[i] = old - h
            lm = step_loss(st, inp, False)[0]
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            diff = abs(fd - g[i])
            err = 0.0 if diff < 1e-6 else diff / max(abs(fd), abs(g[i]))
            worst = max(worst, err)
            worst_abs = max(worst_abs, diff)
            checked += 1
            if err >= 1e-3:
                bad.append(f"{k}[{i}] analytic={g[i]:.6g} fd={fd:.6g}")
    dt = time.perf_counter() - t0
    classes = sorted({k.split(".")[0] + "." + k.split(".")[1] for k in st.params})
    ok = not bad and dt < 60.0
    report(2, ok, f"{checked} entries over {len(classes)} parameter groups ({', '.join(classes)}), "
                  f"worst rel err {worst:.1e} (< 1e-3, abs floor 1e-6; max abs diff {worst_abs:.1e}), contrastive term {parts['l_contrastive']:.3g}, {dt:.1f} s")
    assert not bad, bad[:5]
    assert dt < 60.0


# 3 -----------------------------------------------------------------------------

def _chain_rig(rng):
    from gsavatar.rig import ControlPoints, Rig, Skeleton
    skel = Skeleton([-1, 0, 1, 1], np.stack([make_transform(t=t) for t in
                                            ([0, 0.5, 0], [0, 0.4, 0], [0, 0.3, 0], [0.2, 0.1, 0])]))
    pos = rng.uniform([-0.2, 0.4, -0.1], [0.3, 1.3, 0.1], size=(400, 3))
    d = np.linalg.norm(pos[:, None] - skel.joint_positions()[None], axis=-1)
    w = np.exp(-d / 0.05)
    return Rig(skel, ControlPoints(pos, w / w.sum(1, keepdims=True)))


def test_criterion_3_algebraic_invariants():
    rng = np.random.default_rng(3)
    rig = _chain_rig(rng)
    J, n = 4, 30
    checks = {}
    rest = compute_bone_transforms(rig.skeleton, random_pose(rng, J, angle=0.0, trans=0.0))
    p = rng.normal(size=(n, 3))
    w = rng.uniform(size=(n, J))
    w /= w.sum(1, keepdims=True)
    checks["lbs rest identity"] = max(np.max(np.abs(lbs_apply(w[i], rest) @ np.append(p[i], 1)
                                                    - np.append(p[i], 1))) for i in range(n))
    pose = random_pose(rng, J)
    bones = compute_bone_transforms(rig.skeleton, pose)
    G = make_transform(quat_to_rotmat(rng.normal(size=4)), rng.normal(size=3))
    # the same pose moved rigidly: the root turns about its own joint, so the translation absorbs the pivot
    c = rig.skeleton.rest_world[0][:3, 3]
    from gsavatar.core import quat_multiply, rotmat_to_quat
    moved = pose.__class__(G[:3, :3] @ (pose.root_translation + c) + G[:3, 3] - c, pose.joint_rot.copy())
    moved.joint_rot[0] = quat_multiply(rotmat_to_quat(G[:3, :3]), pose.joint_rot[0])
    moved_bones = compute_bone_transforms(rig.skeleton, moved)
    checks["rigid equivariance"] = max(np.max(np.abs(moved_bones - G @ bones)),
                                       np.max(np.abs(lbs_blend(w, moved_bones) - G @ lbs_blend(w, bones))))

    nets = DeformNets.init(J, rng)
    means = rng.uniform([-0.1, 0.4, -0.1], [0.1, 1.3, 0.1], size=(n, 3))
    qr = rng.normal(size=(n, 4))
    cano = CanonicalParams(means, rng.normal(-2, 0.2, (n, 3)), qr / np.linalg.norm(qr, axis=1)[:, None],
                           rng.normal(size=n), rng.normal(size=(n, 16)))
    d0 = deform_forward(cano, random_pose(rng, J).joint_rot[1:], rest, nets)
    checks["zero-offset identity"] = max(np.max(np.abs(d0.X_o - cano.means)),
                                         np.max(np.abs(d0.R_o - quat_to_rotmat(cano.rots))),
                                         np.max(np.abs(d0.scale_log - cano.scale_log)))
    checks["F_adj identity"] = np.max(np.abs(motion_field(w, bones, bones).F_adj - np.eye(4)))

    # DAA consistency: weights matched between articulation and the motion field
    nets.skinning = Mlp([np.zeros((J, 3))], [np.zeros(J)], ["none"])
    p_a = random_pose(rng, J)
    b_a = compute_bone_transforms(rig.skeleton, p_a)
    di = deform_forward(cano, pose.joint_rot[1:], bones, nets)
    da = deform_forward(cano, p_a.joint_rot[1:], b_a, nets)
    mf = motion_field(di.weights, bones, b_a)
    X_a = np.einsum("nij,nj->ni", mf.F_adj[:, :3, :3], di.X_o) + mf.F_adj[:, :3, 3]
    checks["DAA consistency"] = np.max(np.abs(X_a - da.X_o))
    assert inherit_weights(means, rig.control_points).shape == (n, J)

    unit = lambda v: v / np.linalg.norm(v)  # noqa: E731
    Ls = [contrastive_loss(unit(rng.normal(size=64)), unit(rng.normal(size=64)), unit(rng.normal(size=64)))
          for _ in range(500)]
    f_o, f_a = unit(rng.normal(size=64)), unit(rng.normal(size=64))
    hinge_ok = min(Ls) >= 0 and max(Ls) <= 2 and contrastive_loss(f_o, f_a, f_a) == 0.0

    tol = {"lbs rest identity": 1e-12, "rigid equivariance": 1e-9, "zero-offset identity": 1e-12,
           "F_adj identity": 1e-12, "DAA consistency": 1e-8}
    ok = hinge_ok and all(checks[k] <= tol[k] for k in tol)
    report(3, ok, "; ".join(f"{k} {checks[k]:.1e} (<= {tol[k]:.0e})" for k in tol)
           + f"; hinge in [0, 2] and zero at f_a = f_o': {hinge_ok}")
    assert ok


# 4 / 5 ---------------------------------------------------------------------------

STUDY_SYNTH = dict(joints=8, gaussians=2000, frames=60, cameras=4, resolution=128, seed=0)
STUDY_TRAIN = dict(steps=2000, init_points=2000, seed=0)
RUNS = {"full": dict(sparse_every=1, daa=True, contrastive=True),
        "full_baseline": dict(sparse_every=1, daa=False, contrastive=False),
        "sparse": dict(sparse_every=20, daa=True, contrastive=True),
        "sparse_baseline": dict(sparse_every=20, daa=False, contrastive=False)}


class Study:
    def __init__(self, root: Path):
        self.root = root
        self.results = {}
        data = root / "data"
        if not (data / "dataset.json").exists():
            synthesize(SynthConfig(**STUDY_SYNTH), data)
        self.ds = read_dataset(data)

    def run(self, name):
        if name not in self.results:
            cfg = TrainConfig.from_dict(dict(STUDY_TRAIN, **RUNS[name]))
            t0 = time.perf_counter()
            state = train_loop(self.ds, cfg, self.root / f"{name}.ckpt", self.root / f"{name}.jsonl")
            minutes = (time.perf_counter() - t0) / 60
            recs = [json.loads(x) for x in open(self.root / f"{name}.jsonl")]
            totals = np.array([r["total"] for r in recs])
            ev = evaluate(state, self.ds.rig, self.ds, "test", cfg.background)
            self.results[name] = dict(run=name, sparse_every=cfg.sparse_every, daa=cfg.daa,
                                      contrastive=cfg.contrastive, psnr=ev["psnr"], ssim=ev["ssim"],
                                      loss_step100=float(totals[90:110].mean()),
                                      loss_final=float(totals[-20:].mean()), minutes=minutes)
        return self.results[name]


@pytest.fixture(scope="session")
def study(tmp_path_factory):
    root = os.environ.get("GSAVATAR_STUDY_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("study")
    root.mkdir(parents=True, exist_ok=True)
    return Study(root)


@pytest.mark.slow
def test_criterion_4_synthetic_reconstruction(study):
    r = study.run("full")
    ok = r["psnr"] >= 28.0 and r["ssim"] >= 0.95 and r["minutes"] <= 30.0
    report(4, ok, f"held-out PSNR {r['psnr']:.2f} dB (>= 28), SSIM {r['ssim']:.4f} (>= 0.95), "
                  f"{r['minutes']:.1f} min on {os.cpu_count()} core(s) (<= 30)")
    assert ok


@pytest.mark.slow
def test_criterion_5_sparse_ablation(study):
    rows = [study.run(name) for name in RUNS]
    table = [{k: r[k] for k in ("run", "sparse_every", "daa", "contrastive", "psnr", "ssim")} for r in rows]
    print("\n" + json.dumps(table, indent=1))
    (study.root / "ablation.json").write_text(json.dumps(table, indent=1))
    by = {r["run"]: r for r in rows}
    gap = by["sparse"]["psnr"] - by["sparse_baseline"]["psnr"]
    converged = {r["run"]: r["loss_final"] < 0.25 * r["loss_step100"] for r in rows}
    ok = gap >= -0.1 and all(converged.values())
    ratios = ", ".join(f"{r['run']} {r['loss_final'] / r['loss_step100']:.2f}" for r in rows)
    report(5, ok, f"sparse DAA+contrastive minus sparse baseline = {gap:+.2f} dB (>= -0.1); "
                  f"final/step-100 loss: {ratios} (< 0.25)")
    assert gap >= -0.1
    assert all(converged.values()), converged


# 6 -----------------------------------------------------------------------------

def test_criterion_6_determinism(tiny_ds, tmp_path):
    ds, _ = tiny_ds
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"steps": 4, "init_points": 300, "skin_pretrain_steps": 20, "seed": 5}))
    outs = []
    for threads in ("1", "2", "3"):
        env = dict(os.environ, NUMBA_NUM_THREADS=threads, OMP_NUM_THREADS=threads, OPENBLAS_NUM_THREADS=threads,
                   MKL_NUM_THREADS=threads)
        out = tmp_path / f"t{threads}.ckpt"
        subprocess.run([sys.executable, "-m", "gsavatar.toolkit.cli", "train", "--data", str(ds.root),
                        "--config", str(cfg), "--out", str(out)], env=env, check=True, capture_output=True)
        outs.append(out.read_bytes())
    ok = all(o == outs[0] for o in outs)
    report(6, ok, f"checkpoints from 1, 2 and 3 threads are {'bitwise identical' if ok else 'different'} "
                  f"({len(outs[0])} bytes)")
    assert ok


# 7 -----------------------------------------------------------------------------

def test_criterion_7_render_benchmark():
    rng = np.random.default_rng(7)
    means, sl, q, op, rgb, cam = random_scene(rng, 10000, 256, spread=0.8, scale=(-4.0, -3.0))
    cov = scene_cov(sl, q)
    render_gaussians(means, cov, op, rgb, cam)  # compile / warm up
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        render_gaussians(means, cov, op, rgb, cam)
        times.append(time.perf_counter() - t0)
    ms = 1000 * min(times)
    ok = ms < 200.0
    report(7, ok, f"10k splats at 256x256: {ms:.0f} ms best of 5 on {os.cpu_count()} core(s) (< 200 ms target)",
           warn_only=True)
    if not ok:
        warnings.warn(f"render benchmark {ms:.0f} ms exceeds the 200 ms target")


# 8 -----------------------------------------------------------------------------

def test_criterion_8_metric_correctness():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10):
        a = rng.uniform(size=(32, 40, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        worst = max(worst, abs(psnr(a, b) - psnr_reference(a, b)), abs(ssim(a, b) - ssim_reference(a, b)))
    ok = worst <= 1e-6
    report(8, ok, f"10 random pairs, max |delta| vs reference psnr/ssim {worst:.1e} (<= 1e-6)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-v"]))
