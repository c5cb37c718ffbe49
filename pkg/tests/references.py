"""Independent oracles and fixtures shared by the unit and acceptance suites."""
import math
import statistics

import numpy as np

from pseudobox.frame_io import LossTrace, write_boxes, write_loss_trace
from pseudobox.fusion import InstanceCloud
from pseudobox.geometry import Box3D, iou3d, wrap_angle


# geometry

def oracle_project(p, K, T):
    """Pixel via explicit K [R|t] arithmetic, T being ego_from_camera."""
    Tinv = np.linalg.inv(T)
    ph = np.array([p[0], p[1], p[2], 1.0])
    pc = Tinv @ ph
    uvw = K @ pc[:3]
    return uvw[0] / uvw[2], uvw[1] / uvw[2], pc[2]


def mc_iou3d(a: Box3D, b: Box3D, unit_samples: np.ndarray) -> float:
    """Monte-Carlo volume IoU: sample uniformly inside ``a``, count hits in ``b``.

    Samples are mapped from ``a``'s frame straight into ``b``'s frame; float32
    keeps a 10^6-sample estimate fast.
    """
    u = np.asarray(unit_samples, dtype=np.float32) - np.float32(0.5)
    lx, ly, lz = u[:, 0] * a.length, u[:, 1] * a.width, u[:, 2] * a.height
    d = a.yaw - b.yaw
    cb, sb = math.cos(b.yaw), math.sin(b.yaw)
    ox, oy = a.center[0] - b.center[0], a.center[1] - b.center[1]
    ox, oy = cb * ox + sb * oy, -sb * ox + cb * oy
    cd, sd = np.float32(math.cos(d)), np.float32(math.sin(d))
    bx = cd * lx - sd * ly + np.float32(ox)
    by = sd * lx + cd * ly + np.float32(oy)
    bz = lz + np.float32(a.center[2] - b.center[2])
    inside = (np.abs(bx) <= b.length / 2) & (np.abs(by) <= b.width / 2) & (np.abs(bz) <= b.height / 2)
    inter = a.volume * float(np.count_nonzero(inside)) / len(u)
    return inter / (a.volume + b.volume - inter)


def random_box(rng, near=None, class_id=1):
    length = rng.uniform(0.5, 6.0)
    width = rng.uniform(0.3, length)
    height = rng.uniform(0.5, 3.0)
    if near is None:
        center = rng.uniform(-20, 20, size=3)
    else:
        center = np.asarray(near.center) + rng.normal(0, 1.0, size=3)
    return Box3D(tuple(center), length, width, height, wrap_angle(rng.uniform(-4, 4)), class_id)


def random_box_pair(rng):
    a = random_box(rng)
    return a, random_box(rng, near=a)


# filters

def brute_local(real, pseudo, lam, origin=(0.0, 0.0, 0.0)):
    keep = []
    for v in pseudo:
        best, best_d = None, math.inf
        for j, r in enumerate(real):
            d = math.dist(v, r)
            if d < best_d:
                best, best_d = j, d
        keep.append(best_d <= lam * math.dist(real[best], origin))
    return np.array(keep, dtype=bool)


def brute_global(points, k, alpha):
    n = len(points)
    if n <= k:
        return np.ones(n, dtype=bool)
    mean_d = []
    for i in range(n):
        ds = sorted(math.dist(points[i], points[j]) for j in range(n) if j != i)
        mean_d.append(sum(ds[:k]) / k)
    mu = sum(mean_d) / n
    sigma = math.sqrt(sum((m - mu) ** 2 for m in mean_d) / n)
    return np.array([m <= mu + alpha * sigma + 1e-12 * mu for m in mean_d], dtype=bool)


def random_instance(rng, n_real=None, n_pseudo=None):
    center = rng.uniform(-60, 60, size=3) * np.array([1, 1, 0.05])
    n_real = rng.integers(1, 60) if n_real is None else n_real
    n_pseudo = rng.integers(0, 440) if n_pseudo is None else n_pseudo
    real = center + rng.normal(0, 1.0, size=(n_real, 3))
    pseudo = center + rng.normal(0, 1.5, size=(n_pseudo, 3))
    return InstanceCloud(("cam", 1), 1, real, pseudo)


def as_set(arr):
    return {tuple(p) for p in np.asarray(arr).tolist()}


def grid_with_outliers(outliers):
    g = np.arange(10, dtype=np.float64)
    grid = np.array([(x, y, 0.0) for x in g for y in g])
    return np.vstack([grid, np.asarray(outliers, dtype=np.float64).reshape(-1, 3)])


# self-evolution

def reference_triggers(losses, psi, window=5, cap=1):
    """Pure-python replay of the convergence rule over a 1-based loss list."""
    by_epoch = {i + 1: v for i, v in enumerate(losses)}
    phase, prev, fired = 1, None, []
    for e in range(1, len(losses) + 1):
        t = None
        if e >= window + 1:
            t = statistics.pvariance([by_epoch[i] - by_epoch[i - 1] for i in range(e - window + 1, e + 1)])
        if phase <= cap and t is not None and prev is not None and abs(t - prev) <= psi * phase * math.exp(-phase):
            fired.append(e)
            phase += 1
        prev = t
    return fired


def reference_merge(old, new, v):
    """Double loop, no matrix; returns (added new indices, reserved old indices)."""
    added, reserved = [], []
    for i, nb in enumerate(new):
        best, best_j = -1.0, None
        for j, ob in enumerate(old):
            iou = iou3d(ob, nb) if ob.class_id == nb.class_id else 0.0
            if iou > best:
                best, best_j = iou, j
        if best_j is None or best < v:
            added.append(i)
        elif best_j not in reserved:
            reserved.append(best_j)
    return added, sorted(reserved)


def damped_trace(n=60, amp=8.0, rate=0.8):
    return [5 + 10 / i + amp * rate ** i * (-1) ** i for i in range(1, n + 1)]


def detector_dir(tmp_path, losses, phases):
    root = tmp_path / "det"
    root.mkdir()
    write_loss_trace(root / "loss.csv", LossTrace.from_losses(losses))
    for phase, per_frame in phases.items():
        (root / f"phase_{phase}").mkdir()
        for fid, boxes in per_frame.items():
            write_boxes(root / f"phase_{phase}" / f"{fid}.txt", boxes)
    return root
