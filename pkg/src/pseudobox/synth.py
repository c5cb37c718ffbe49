"""Synthetic frames with known ground truth: ray-cast LiDAR, rendered masks and depth.

Scenes use a ring of six outward-looking cameras around a LiDAR at the ego
origin and box-shaped objects standing on a flat ground plane. Each object
sits wholly inside one camera's field of view.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .frame_io import CameraView, DepthMap, Frame, FramePaths, InstanceMask, write_boxes, write_frame
from .geometry import Box3D, CameraModel

log = logging.getLogger(__name__)

CAMERA_YAWS_DEG = {"front": 0.0, "front_left": 60.0, "back_left": 120.0,
                   "back": 180.0, "back_right": -120.0, "front_right": -60.0}

# (length, width, height) uniform ranges per class
CLASS_DIMS = {
    1: ((3.8, 5.0), (1.7, 2.0), (1.4, 1.8)),
    2: ((0.5, 0.8), (0.5, 0.8), (1.6, 1.85)),
    3: ((1.6, 1.9), (0.5, 0.7), (1.5, 1.8)),
}
CLASS_RANGES = {1: (10.0, 45.0), 2: (8.0, 35.0), 3: (8.0, 40.0)}


@dataclass(frozen=True)
class SceneSpec:
    n_frames: int = 1
    n_vehicles: int = 5
    n_pedestrians: int = 3
    n_cyclists: int = 2
    n_occluders: int = 0
    depth_noise: float = 0.0          # sigma as a fraction of true depth
    mask_bleed: float = 0.0           # extra background pixels as a fraction of mask size
    lidar_dropout: float = 0.1
    lidar_beams: int = 32
    lidar_min_elev: float = -30.0
    lidar_max_elev: float = 10.0
    lidar_azimuth_step: float = 0.2
    lidar_max_range: float = 100.0
    ground_z: float = -1.8
    background_depth: float = 100.0
    image_width: int = 800
    image_height: int = 450
    focal: float = 630.0
    camera_offset: float = 0.05
    camera_z: float = -0.3

    def __post_init__(self):
        counts = (self.n_frames, self.n_vehicles, self.n_pedestrians, self.n_cyclists, self.n_occluders)
        if any(int(c) != c or c < 0 for c in counts):
            raise ConfigurationError("scene counts must be non-negative integers")
        if self.n_occluders > self.n_vehicles:
            raise ConfigurationError("each occluder needs a vehicle behind it")
        if not (0 <= self.depth_noise < 1 and 0 <= self.mask_bleed < 1 and 0 <= self.lidar_dropout < 1):
            raise ConfigurationError("noise, bleed and dropout fractions must lie in [0, 1)")
        if self.image_width < 2 or self.image_height < 2 or self.focal <= 0:
            raise ConfigurationError("invalid camera geometry")

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown scene fields: {', '.join(sorted(unknown))}")
        return cls(**doc)


def camera_rig(spec: SceneSpec) -> list[CameraModel]:
    cams = []
    K = np.array([[spec.focal, 0.0, spec.image_width / 2], [0.0, spec.focal, spec.image_height / 2],
                  [0.0, 0.0, 1.0]])
    for name, yaw_deg in CAMERA_YAWS_DEG.items():
        yaw = math.radians(yaw_deg)
        fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        T = np.eye(4)
        T[:3, 0] = [math.sin(yaw), -math.cos(yaw), 0.0]     # image x: right
        T[:3, 1] = [0.0, 0.0, -1.0]                          # image y: down
        T[:3, 2] = fwd
        T[:3, 3] = spec.camera_offset * fwd + [0.0, 0.0, spec.camera_z]
        cams.append(CameraModel(name, K.copy(), T, spec.image_width, spec.image_height))
    return cams


def half_fov(cam: CameraModel) -> float:
    return math.atan2(cam.width / 2, cam.fx)


# --------------------------------------------------------------------------
# Ray casting
# --------------------------------------------------------------------------

def ray_box_hits(origins: np.ndarray, dirs: np.ndarray, box: Box3D) -> np.ndarray:
    """Entry parameter of each ray into ``box`` (inf when missed or starting inside)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = (origins - np.asarray(box.center)) @ rot.T
    d = dirs @ rot.T
    half = np.array([box.length, box.width, box.height]) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # parallel rays outside a slab never hit
    parallel_out = (d == 0) & (np.abs(o) > half)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0) & ~parallel_out.any(axis=-1)
    return np.where(hit, t_near, np.inf)


def ground_hits(origins: np.ndarray, dirs: np.ndarray, ground_z: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ground_z - origins[..., 2]) / dirs[..., 2]
    return np.where((dirs[..., 2] < 0) & (t > 0), t, np.inf)


# --------------------------------------------------------------------------
# Scene layout
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    box: Box3D
    camera: str
    object_id: int


def _random_box(rng, class_id, azimuth, rng_range, ground_z, frame_id, object_id) -> Box3D:
    (l0, l1), (w0, w1), (h0, h1) = CLASS_DIMS[class_id]
    length, width, height = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
    x, y = rng_range * math.cos(azimuth), rng_range * math.sin(azimuth)
    yaw = rng.uniform(-math.pi, math.pi)
    return Box3D.canonical((x, y, ground_z + height / 2), length, width, height, yaw, class_id,
                           score=1.0, instance_id=f"obj{object_id}", frame_id=frame_id)


def _camera_yaw(cam: CameraModel) -> float:
    return math.atan2(cam.principal_axis[1], cam.principal_axis[0])


def _corner_offsets(box: Box3D, yaw: float) -> np.ndarray:
    corners = box.corners()[:, :2]
    az = np.arctan2(corners[:, 1], corners[:, 0]) - yaw
    return (az + np.pi) % (2 * np.pi) - np.pi


def _fits_in_camera(box: Box3D, cam: CameraModel, cams, margin_deg: float = 2.0) -> bool:
    """Wholly inside ``cam``'s horizontal view and wholly outside every other camera's."""
    margin = math.radians(margin_deg)
    if not np.all(np.abs(_corner_offsets(box, _camera_yaw(cam))) <= half_fov(cam) - margin):
        return False
    return all(np.all(np.abs(_corner_offsets(box, _camera_yaw(o))) >= half_fov(o) + margin)
               for o in cams if o.name != cam.name)


def _clear_of(box: Box3D, placed, gap: float = 0.5) -> bool:
    r = math.hypot(box.length, box.width) / 2
    for other in placed:
        ro = math.hypot(other.box.length, other.box.width) / 2
        if math.dist(box.center[:2], other.box.center[:2]) < r + ro + gap:
            return False
    return True


def layout_scene(rng: np.random.Generator, spec: SceneSpec, cams, frame_id: str) -> list[SceneObject]:
    """Place objects without overlap, each inside a single camera's view."""
    plan = [1] * spec.n_vehicles + [2] * spec.n_pedestrians + [3] * spec.n_cyclists
    placed: list[SceneObject] = []
    fov = half_fov(cams[0])
    for class_id in plan:
        for _ in range(1000):
            cam = cams[int(rng.integers(len(cams)))]
            az = _camera_yaw(cam) + rng.uniform(-fov, fov)
            box = _random_box(rng, class_id, az, rng.uniform(*CLASS_RANGES[class_id]), spec.ground_z,
                              frame_id, len(placed) + 1)
            if _fits_in_camera(box, cam, cams) and _clear_of(box, placed):
                placed.append(SceneObject(box, cam.name, len(placed) + 1))
                break
        else:
            raise ConfigurationError("could not place all objects; scene too crowded")
    vehicles = [o for o in placed if o.box.class_id == 1]
    for target in vehicles[: spec.n_occluders]:
        # a pedestrian on the sight line, halfway to the target
        cx, cy = target.box.center[:2]
        rng_t = math.hypot(cx, cy)
        az = math.atan2(cy, cx)
        for _ in range(200):
            box = _random_box(rng, 2, az + rng.normal(0, 0.01), rng_t * rng.uniform(0.4, 0.6), spec.ground_z,
                              frame_id, len(placed) + 1)
            cam = next(c for c in cams if c.name == target.camera)
            if _fits_in_camera(box, cam, cams) and _clear_of(box, placed, gap=0.2):
                placed.append(SceneObject(box, target.camera, len(placed) + 1))
                break
        else:
            raise ConfigurationError("could not place occluder")
    return placed


# --------------------------------------------------------------------------
# Sensors
# --------------------------------------------------------------------------

def lidar_rays(spec: SceneSpec) -> np.ndarray:
    elev = np.deg2rad(np.linspace(spec.lidar_min_elev, spec.lidar_max_elev, spec.lidar_beams))
    az = np.deg2rad(np.arange(0.0, 360.0, spec.lidar_azimuth_step))
    e, a = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def scan_lidar(rng, spec: SceneSpec, objects) -> np.ndarray:
    dirs = lidar_rays(spec)
    origins = np.zeros_like(dirs)
    t = ground_hits(origins, dirs, spec.ground_z)
    for obj in objects:
        t = np.minimum(t, ray_box_hits(origins, dirs, obj.box))
    keep = (t <= spec.lidar_max_range) & (rng.random(len(t)) >= spec.lidar_dropout)
    xyz = dirs[keep] * t[keep, None]
    return np.column_stack([xyz, np.zeros(len(xyz))])


def pixel_rays(cam: CameraModel, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Ego-frame ray directions with unit camera-frame z, so t equals planar depth."""
    d_cam = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones_like(cols, dtype=float)], -1)
    return d_cam @ cam.rotation.T


def _pixel_window(cam: CameraModel, box: Box3D):
    """Pixel bounding window of the projected box, or None when out of view."""
    corners = box.corners()
    local = (corners - cam.position) @ cam.rotation
    if np.any(local[:, 2] <= 0.05):
        return None
    u = cam.fx * local[:, 0] / local[:, 2] + cam.cx
    v = cam.fy * local[:, 1] / local[:, 2] + cam.cy
    c0, c1 = int(max(0, math.floor(u.min()) - 1)), int(min(cam.width - 1, math.ceil(u.max()) + 1))
    r0, r1 = int(max(0, math.floor(v.min()) - 1)), int(min(cam.height - 1, math.ceil(v.max()) + 1))
    if c0 > c1 or r0 > r1:
        return None
    return r0, r1, c0, c1


def render_camera(cam: CameraModel, spec: SceneSpec, objects):
    """(instance ids, planar depth, per-object unoccluded pixel counts) for one camera."""
    rows, cols = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    dirs = pixel_rays(cam, rows, cols)
    origin = np.broadcast_to(cam.position, dirs.shape)
    depth = np.minimum(ground_hits(origin, dirs, spec.ground_z), spec.background_depth)
    ids = np.zeros((cam.height, cam.width), dtype=np.uint16)
    alone = {}
    for obj in objects:
        win = _pixel_window(cam, obj.box)
        if win is None:
            continue
        r0, r1, c0, c1 = win
        t = ray_box_hits(origin[r0:r1 + 1, c0:c1 + 1], dirs[r0:r1 + 1, c0:c1 + 1], obj.box)
        hit = np.isfinite(t)
        alone[obj.object_id] = int(hit.sum())
        sub_d = depth[r0:r1 + 1, c0:c1 + 1]
        closer = hit & (t < sub_d)
        sub_d[closer] = t[closer]
        ids[r0:r1 + 1, c0:c1 + 1][closer] = obj.object_id
    return ids, depth, alone


def bleed_masks(rng, ids: np.ndarray, fraction: float) -> np.ndarray:
    """Grow every instance by ``fraction`` of its area into neighbouring background pixels."""
    if fraction <= 0:
        return ids
    out = ids.copy()
    for iid in np.unique(ids[ids > 0]):
        own = ids == iid
        n_extra = int(round(fraction * own.sum()))
        if n_extra == 0:
            continue
        ring = np.zeros_like(own)
        grown = own
        while ring.sum() < n_extra:
            nxt = ndimage.binary_dilation(grown)
            if nxt.sum() == grown.sum():
                break
            grown = nxt
            ring = grown & (ids == 0)
        candidates = np.flatnonzero(ring & (out == 0))
        pick = rng.choice(candidates, size=min(n_extra, len(candidates)), replace=False)
        out.flat[np.sort(pick)] = iid
    return out


@dataclass
class SynthFrame:
    frame: Frame
    truth: list
    visibility: dict      # instance_id -> visible fraction of its unoccluded mask


def synth_frame(rng: np.random.Generator, spec: SceneSpec, frame_id: str) -> SynthFrame:
    cams = camera_rig(spec)
    objects = layout_scene(rng, spec, cams, frame_id)
    points = scan_lidar(rng, spec, objects)
    views = []
    visible = {o.box.instance_id: 0 for o in objects}
    alone_total = {o.box.instance_id: 0 for o in objects}
    by_id = {o.object_id: o for o in objects}
    for cam in cams:
        ids, depth, alone = render_camera(cam, spec, objects)
        for oid, n in alone.items():
            alone_total[by_id[oid].box.instance_id] += n
        for oid in np.unique(ids[ids > 0]):
            visible[by_id[int(oid)].box.instance_id] += int((ids == oid).sum())
        if spec.depth_noise > 0:
            depth = depth * (1.0 + spec.depth_noise * rng.standard_normal(depth.shape))
            depth = np.maximum(depth, 0.1)
        ids = bleed_masks(rng, ids, spec.mask_bleed)
        table = {int(i): by_id[int(i)].box.class_id for i in np.unique(ids[ids > 0])}
        views.append(CameraView(cam, InstanceMask(ids, table), DepthMap(depth.astype(np.float32))))
    vis = {k: (visible[k] / alone_total[k] if alone_total[k] else 0.0) for k in visible}
    truth = [o.box for o in objects]
    return SynthFrame(Frame(frame_id, points, tuple(views)), truth, vis)


def frame_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def cmd_synth(seed: int, spec: SceneSpec, out_dir, first_index: int = 0) -> list[Path]:
    """Write ``spec.n_frames`` frames (and truth files) under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k in range(spec.n_frames):
        index = first_index + k
        frame_id = f"{index:06d}"
        sf = synth_frame(frame_rng(seed, index), spec, frame_id)
        root = write_frame(out / frame_id, sf.frame)
        paths = FramePaths(root)
        write_boxes(paths.truth, sf.truth)
        (root / "visibility.json").write_text(json.dumps(sf.visibility, indent=1, sort_keys=True) + "\n")
        written.append(root)
        log.info("synth frame %s: %d objects, %d lidar points", frame_id, len(sf.truth), len(sf.frame.points))
    (out / "scene.json").write_text(json.dumps({"seed": int(seed), **asdict(spec)}, indent=1, sort_keys=True) + "\n")
    return written


def load_visibility(frame_dir) -> Optional[dict]:
    path = Path(frame_dir) / "visibility.json"
    return json.loads(path.read_text()) if path.exists() else None
