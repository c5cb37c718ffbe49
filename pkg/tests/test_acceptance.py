"""Exit-criteria suite: every criterion at its stated tolerance, one summary line each.

Run alone with ``pytest tests/test_acceptance.py -v``; the per-criterion lines
appear under "acceptance criteria" in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from pseudobox.boxfit import fit_bev_rectangle
from pseudobox.config import PipelineConfig
from pseudobox.evaluation import evaluate_ap
from pseudobox.evolution import EvolutionState, decay_threshold, merge_boxes, trigger_epochs
from pseudobox.filtering import FilterParams, global_statistical_mask, local_radius_filter, local_radius_mask
from pseudobox.frame_io import read_boxes
from pseudobox.geometry import (
    BevBox, Box3D, CameraModel, backproject_pixels, bev_iou, bev_iou_boxes, iou3d, project_points,
)
from pseudobox.pipeline import cmd_evolve, cmd_generate
from pseudobox.synth import SceneSpec, cmd_synth, load_visibility

from references import (
    as_set, brute_global, brute_local, damped_trace, detector_dir, grid_with_outliers, mc_iou3d,
    random_box_pair, random_instance, reference_merge, reference_triggers,
)
from shapes import even_l_shape_points

pytestmark = pytest.mark.acceptance

SEED = 20240601


def percent(x) -> str:
    return f"{100 * x:.1f}%"


# ── 1. geometry ──────────────────────────────────────────────────────────

def random_camera(rng) -> CameraModel:
    fx, fy = rng.uniform(300, 2000, 2)
    width, height = int(rng.integers(200, 2000)), int(rng.integers(200, 1200))
    K = np.array([[fx, 0, rng.uniform(0.3, 0.7) * width], [0, fy, rng.uniform(0.3, 0.7) * height], [0, 0, 1.0]])
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    R = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                  [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                  [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = rng.uniform(-5, 5, 3)
    return CameraModel("c", K, T, width, height)


def test_criterion_1_geometry(criterion):
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    worst_rt, n_rt = 0.0, 0
    while n_rt < 10_000:
        cam = random_camera(rng)
        # points placed in view through the camera frame, then checked in ego frame
        n = 100
        u = rng.uniform(0, cam.width, n)
        v = rng.uniform(0, cam.height, n)
        depth = rng.uniform(0.5, 80, n)
        pc = np.column_stack([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
        pts = pc @ cam.rotation.T + cam.position
        uv, d, ok = project_points(pts, cam)
        back = backproject_pixels(uv[ok, 0], uv[ok, 1], d[ok], cam)
        worst_rt = max(worst_rt, float(np.abs(back - pts[ok]).max()))
        n_rt += int(ok.sum())
    samples = rng.random((1_000_000, 3))
    worst_mc = 0.0
    for _ in range(1000):
        a, b = random_box_pair(rng)
        worst_mc = max(worst_mc, abs(iou3d(a, b) - mc_iou3d(a, b, samples)))
    sq = bev_iou(BevBox(0, 0, 1, 1, 0), BevBox(0.5, 0, 1, 1, 0))
    vert = iou3d(Box3D((0, 0, 1), 2, 2, 2, 0.3, 1), Box3D((0, 0, 2), 2, 2, 2, 0.3, 1))
    analytic = max(abs(sq - 1 / 3), abs(vert - 1 / 3))
    elapsed = time.perf_counter() - t0
    ok = worst_rt < 1e-6 and worst_mc <= 0.01 and analytic <= 1e-9 and elapsed < 60
    criterion("C1 geometry", ok,
              f"{n_rt} round trips max err {worst_rt:.2e} m (<1e-6); 1000 pairs max |iou3d-MC| "
              f"{worst_mc:.4f} (<=0.01); analytic err {analytic:.1e} (<=1e-9); {elapsed:.1f} s (<60)")
    assert ok


# ── 2. local radius filter ───────────────────────────────────────────────

def test_criterion_2_local_filter(criterion):
    rng = np.random.default_rng(SEED + 2)
    lams = (0.001, 0.01, 0.1, 1.0)
    mismatches = monotone_breaks = subset_breaks = 0
    for _ in range(200):
        n_real = int(rng.integers(1, 60))
        cloud = random_instance(rng, n_real=n_real, n_pseudo=int(rng.integers(0, 500 - n_real + 1)))
        prev = None
        for lam in lams:
            mask = local_radius_mask(cloud.real, cloud.pseudo, lam)
            mismatches += not np.array_equal(mask, brute_local(cloud.real, cloud.pseudo, lam))
            if prev is not None:
                monotone_breaks += bool(np.any(prev & ~mask))
            prev = mask
            fused = local_radius_filter(cloud, FilterParams(lam=lam))
            subset_breaks += not as_set(cloud.real) <= as_set(fused.points)
    ok = mismatches == monotone_breaks == subset_breaks == 0
    criterion("C2 local radius filter", ok,
              f"200 instances x 4 lambda: {mismatches} oracle mismatches, {monotone_breaks} monotonicity "
              f"breaks, {subset_breaks} real-subset breaks")
    assert ok


# ── 3. global statistical filter ─────────────────────────────────────────

def test_criterion_3_global_filter(criterion):
    rng = np.random.default_rng(SEED + 3)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(1, 200))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.2, 3, size=3)
        k = int(rng.integers(1, 20))
        alpha = float(rng.uniform(0, 2))
        mask = global_statistical_mask(pts, FilterParams(k_neighbors=k, alpha=alpha))
        mismatches += not np.array_equal(mask, brute_global(pts, k, alpha))
    planted = [[54.5, 4.5, 0.0], [-40.0, 4.5, 0.0], [4.5, 60.0, 0.0]]
    pts = grid_with_outliers(planted)
    removed = np.flatnonzero(~global_statistical_mask(pts, FilterParams(k_neighbors=16, alpha=1.0))).tolist()
    ok = mismatches == 0 and removed == [100, 101, 102]
    criterion("C3 global statistical filter", ok,
              f"200 clouds: {mismatches} mismatches vs O(n^2) reference; grid fixture removed {removed} "
              f"(planted [100, 101, 102])")
    assert ok


# ── 4. L-shape fitting ───────────────────────────────────────────────────

def lshape_rates(rng, n, sigma):
    """(yaw ok, dims ok, both ok) fractions over ``n`` random two-side views."""
    yaw_ok = dim_ok = both = 0
    for _ in range(n):
        length, width = rng.uniform(3.5, 5.0), rng.uniform(1.5, 2.0)
        r, az, yaw = rng.uniform(8, 40), rng.uniform(-math.pi, math.pi), rng.uniform(-math.pi, math.pi)
        # both visible sides sampled end to end every 0.1 m
        pts = even_l_shape_points(rng, r * math.cos(az), r * math.sin(az), length, width, yaw,
                                  spacing=0.1, sigma=sigma)
        box = fit_bev_rectangle(pts).box
        d = math.degrees((box.yaw - yaw) % (math.pi / 2))
        y_ok = min(d, 90 - d) <= 2.0
        d_ok = abs(box.length - length) <= 0.05 * length and abs(box.width - width) <= 0.05 * width
        yaw_ok += y_ok
        dim_ok += d_ok
        both += y_ok and d_ok
    return yaw_ok / n, dim_ok / n, both / n


def test_criterion_4_lshape(criterion):
    t0 = time.perf_counter()
    yaw_ok, dim_ok, both = lshape_rates(np.random.default_rng(SEED + 4), 500, sigma=0.05)
    elapsed = time.perf_counter() - t0
    # noise-free control on the same poses, reported only
    control = lshape_rates(np.random.default_rng(SEED + 4), 500, sigma=0.0)[2]
    ok = both >= 0.95 and elapsed < 30
    criterion("C4 L-shape fitting", ok,
              f"500 rectangles, sigma 0.05 m: yaw<=2 deg {percent(yaw_ok)}, dims<=5% {percent(dim_ok)}, "
              f"both {percent(both)} (need >=95%); {elapsed:.1f} s (<30); noise-free control {percent(control)}")
    assert ok


# ── 5. convergence trigger and merge ─────────────────────────────────────

# first trigger epochs of damped_trace(60), frozen from reference_triggers
FROZEN_TRIGGERS = {1.0: 17, 0.1: 22, 0.01: 27}


def random_box_set(rng, n):
    out = []
    for _ in range(n):
        w = rng.uniform(0.5, 2.0)
        out.append(Box3D(tuple(rng.uniform(-8, 8, 3) * [1, 1, 0.1]), w + rng.uniform(0, 3), w,
                         rng.uniform(1, 2), rng.uniform(-math.pi, math.pi), int(rng.integers(1, 3))))
    return out


def test_criterion_5_evolution(criterion):
    trace = damped_trace(60)
    got = {psi: trigger_epochs({i + 1: v for i, v in enumerate(trace)}, EvolutionState(psi=psi))
           for psi in FROZEN_TRIGGERS}
    ref = {psi: reference_triggers(trace, psi) for psi in FROZEN_TRIGGERS}
    trig_ok = all(got[p] == ref[p] == [FROZEN_TRIGGERS[p]] for p in FROZEN_TRIGGERS)

    rng = np.random.default_rng(SEED + 5)
    merge_bad = 0
    for _ in range(500):
        old = random_box_set(rng, int(rng.integers(0, 51)))
        new = random_box_set(rng, int(rng.integers(0, 51)))
        v = float(rng.choice([0.0, 0.1, 0.2, 0.5]))
        res = merge_boxes(old, new, v)
        added, reserved = reference_merge(old, new, v)
        merge_bad += res.boxes != [new[i] for i in added] + [old[j] for j in reserved]

    thr = [decay_threshold(0.1, p) for p in range(1, 21)]
    mono_ok = all(a > b for a, b in zip(thr, thr[1:]))
    ok = trig_ok and merge_bad == 0 and mono_ok
    criterion("C5 convergence and merge", ok,
              f"triggers {{psi: epochs}} {got} (expected {FROZEN_TRIGGERS}); 500 merges, {merge_bad} differ "
              f"from double-loop reference; threshold strictly decreasing p=1..20: {mono_ok}")
    assert ok


# ── 6. end-to-end synthetic ──────────────────────────────────────────────

E2E_SEED = 0
NON_OCCLUDED = 0.99     # visible fraction of the unoccluded mask


def best_ious(truth, boxes):
    return [max([bev_iou_boxes(b, t) for b in boxes if b.class_id == t.class_id] + [0.0]) for t in truth]


def e2e_round(frames, out, config):
    cmd_generate(config, frames, out)
    rows, preds, truths = [], [], []
    for fdir in sorted(p for p in frames.iterdir() if p.is_dir()):
        truth = [b.replace(frame_id=fdir.name) for b in read_boxes(fdir / "truth.txt")]
        boxes = [b.replace(frame_id=fdir.name) for b in read_boxes(out / f"{fdir.name}.txt")]
        vis = load_visibility(fdir)
        for t, iou in zip(truth, best_ious(truth, boxes)):
            rows.append((t.class_id, iou, vis[t.instance_id]))
        preds += boxes
        truths += truth
    return rows, preds, truths


def test_criterion_6_end_to_end(criterion, tmp_path):
    t0 = time.perf_counter()
    clean = tmp_path / "clean"
    cmd_synth(E2E_SEED, SceneSpec(n_frames=10, n_vehicles=5, n_pedestrians=3, n_cyclists=2), clean)
    rows, preds, truths = e2e_round(clean, tmp_path / "gen_clean", PipelineConfig())
    per_class = {}
    for c in (1, 2, 3):
        ious = [iou for cls, iou, vis in rows if cls == c and vis >= NON_OCCLUDED]
        per_class[c] = sum(i >= 0.7 for i in ious) / len(ious)
    report = evaluate_ap(preds, truths, 0.25)
    aps = {c: report.ap(c) for c in (1, 2, 3)}

    noisy = tmp_path / "noisy"
    cmd_synth(E2E_SEED, SceneSpec(n_frames=10, depth_noise=0.02, mask_bleed=0.05), noisy)
    on, _, _ = e2e_round(noisy, tmp_path / "gen_on", PipelineConfig())
    off, _, _ = e2e_round(noisy, tmp_path / "gen_off", PipelineConfig(local_filter=False, global_filter=False))
    mean_on = float(np.mean([r[1] for r in on]))
    mean_off = float(np.mean([r[1] for r in off]))
    elapsed = time.perf_counter() - t0

    iou_ok = all(f >= 0.9 for f in per_class.values())
    ap_ok = all(a is not None and a >= 0.9 for a in aps.values())
    gain_ok = mean_on - mean_off >= 0.05
    ok = iou_ok and ap_ok and gain_ok and elapsed < 300
    criterion("C6 end-to-end synthetic", ok,
              "share of non-occluded objects with BEV IoU>=0.7 per class "
              + ", ".join(f"{c}: {percent(f)}" for c, f in per_class.items()) + " (need >=90%); "
              + "AP@0.25 " + ", ".join(f"{c}: {a:.3f}" for c, a in aps.items()) + " (need >=0.9); "
              + f"noisy mean IoU filters on {mean_on:.3f} vs off {mean_off:.3f} (gain >=0.05); "
              + f"{elapsed:.1f} s (<300)")
    assert ok


# ── 7. determinism ───────────────────────────────────────────────────────

def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(criterion, tmp_path):
    frames = tmp_path / "frames"
    cmd_synth(7, SceneSpec(n_frames=3, depth_noise=0.02, mask_bleed=0.05), frames)
    rng = np.random.default_rng(SEED + 7)
    phase1 = {}
    for fdir in sorted(p for p in frames.iterdir() if p.is_dir()):
        truth = read_boxes(fdir / "truth.txt")
        phase1[fdir.name] = [t.replace(center=tuple(np.add(t.center, rng.normal(0, 0.3, 3))),
                                       score=float(rng.uniform(0.3, 1.0)), instance_id=None) for t in truth]
    det = detector_dir(tmp_path, damped_trace(40), {1: phase1})
    config = PipelineConfig(psi=1.0, workers=4)
    runs = []
    for name in ("a", "b"):
        cmd_generate(config, frames, tmp_path / name / "gen")
        cmd_evolve(config, frames, tmp_path / name / "gen", det, tmp_path / name / "evo")
        runs.append(tree_bytes(tmp_path / name))
    log = runs[0]["evo/phase_log.txt"].decode().strip()
    ok = runs[0] == runs[1] and log.startswith("epoch=17 phase=1")
    criterion("C7 determinism", ok,
              f"{len(runs[0])} output files byte-identical across two generate+evolve runs: {runs[0] == runs[1]}; "
              f"phase log '{log}'")
    assert ok
