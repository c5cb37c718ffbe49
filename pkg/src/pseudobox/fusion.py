"""Bi-directional LiDAR/image fusion.

Real LiDAR points take class and instance labels from the mask pixel they
project onto; mask pixels with a valid depth are lifted to labelled pseudo
points. Labels are keyed by ``(camera name, instance id)`` since instance ids
are only unique within one camera image.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .frame_io import CameraView, Frame
from .geometry import backproject_pixels, project_points

log = logging.getLogger(__name__)

DEFAULT_MAX_PER_INSTANCE = 4096
MIN_SCALE_ANCHORS = 5

InstanceKey = tuple[str, int]


@dataclass(frozen=True, eq=False)
class LabeledPoints:
    """Column store of labelled points.

    ``source`` is the LiDAR point index for real points and the flat pixel
    index (row * width + col) for pseudo points.
    """
    positions: np.ndarray
    class_ids: np.ndarray
    cameras: np.ndarray
    instance_ids: np.ndarray
    pseudo: np.ndarray
    source: np.ndarray

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls) -> "LabeledPoints":
        return cls(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, dtype=object),
                   np.zeros(0, np.int64), np.zeros(0, bool), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts) -> "LabeledPoints":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("positions", "class_ids", "cameras", "instance_ids", "pseudo", "source")))

    def take(self, idx) -> "LabeledPoints":
        return LabeledPoints(self.positions[idx], self.class_ids[idx], self.cameras[idx],
                             self.instance_ids[idx], self.pseudo[idx], self.source[idx])

    def keys(self) -> list[InstanceKey]:
        return [(str(c), int(i)) for c, i in zip(self.cameras, self.instance_ids)]


@dataclass(frozen=True, eq=False)
class InstanceCloud:
    key: InstanceKey
    class_id: int
    real: np.ndarray       # (N, 3)
    pseudo: np.ndarray     # (M, 3)

    @property
    def instance_id(self) -> str:
        return f"{self.key[0]}:{self.key[1]}"


@dataclass(frozen=True, eq=False)
class FusionResult:
    real: LabeledPoints
    pseudo: LabeledPoints
    background_count: int
    clouds: list[InstanceCloud]
    scales: dict[InstanceKey, float]


def pixel_indices(uv: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-pixel (row, col) for in-view coordinates; pixel centres sit on integers."""
    col = np.clip(np.floor(uv[:, 0] + 0.5), 0, width - 1).astype(np.int64)
    row = np.clip(np.floor(uv[:, 1] + 0.5), 0, height - 1).astype(np.int64)
    return row, col


def _lookup(view: CameraView, xyz: np.ndarray):
    """Per-point (instance id, row, col, planar depth, in_view) for one camera."""
    cam = view.camera
    uv, depth, in_view = project_points(xyz, cam)
    ids = np.zeros(len(xyz), dtype=np.int64)
    row = np.zeros(len(xyz), dtype=np.int64)
    col = np.zeros(len(xyz), dtype=np.int64)
    if in_view.any():
        r, c = pixel_indices(uv[in_view], cam.width, cam.height)
        row[in_view], col[in_view] = r, c
        ids[in_view] = view.mask.values[r, c]
    return ids, row, col, depth, in_view


def label_real_points(frame: Frame) -> tuple[LabeledPoints, int]:
    """Label LiDAR points from the instance masks.

    A point hitting foreground in several cameras takes the label of the camera
    whose optical axis makes the smallest angle with the camera-to-point ray.
    Returns the foreground points (in LiDAR order) and the background count.
    """
    xyz = frame.xyz
    n = len(xyz)
    best_cos = np.full(n, -np.inf)
    best_cam = np.full(n, -1, dtype=np.int64)
    best_id = np.zeros(n, dtype=np.int64)
    for k, view in enumerate(frame.cameras):
        ids, _, _, _, _ = _lookup(view, xyz)
        fg = ids > 0
        if not fg.any():
            continue
        ray = xyz[fg] - view.camera.position
        cos = (ray @ view.camera.principal_axis) / np.linalg.norm(ray, axis=1)
        better = cos > best_cos[fg]
        idx = np.flatnonzero(fg)[better]
        best_cos[idx] = cos[better]
        best_cam[idx] = k
        best_id[idx] = ids[fg][better]

    fg_idx = np.flatnonzero(best_cam >= 0)
    if len(fg_idx) == 0:
        return LabeledPoints.empty(), n
    names = np.array([v.camera.name for v in frame.cameras], dtype=object)
    cam_of = best_cam[fg_idx]
    iid = best_id[fg_idx]
    classes = np.array([frame.cameras[k].mask.class_table[int(i)] for k, i in zip(cam_of, iid)], dtype=np.int64)
    labelled = LabeledPoints(
        positions=xyz[fg_idx].copy(),
        class_ids=classes,
        cameras=names[cam_of],
        instance_ids=iid,
        pseudo=np.zeros(len(fg_idx), bool),
        source=fg_idx.astype(np.int64),
    )
    return labelled, n - len(fg_idx)


def align_depth_scale(frame: Frame, min_anchors: int = MIN_SCALE_ANCHORS) -> dict[InstanceKey, float]:
    """Per-instance median ratio of LiDAR planar depth to depth-map value.

    Anchors are LiDAR points that land on a valid-depth pixel of the instance in
    that camera. Instances with fewer than ``min_anchors`` anchors get 1.0.
    """
    xyz = frame.xyz
    scales: dict[InstanceKey, float] = {}
    for view in frame.cameras:
        name = view.camera.name
        ids, row, col, depth, in_view = _lookup(view, xyz)
        dvals = view.depth.values[row, col].astype(np.float64)
        ok = in_view & (ids > 0) & view.depth.valid[row, col]
        for iid in sorted(view.mask.class_table):
            sel = ok & (ids == iid)
            if sel.sum() >= min_anchors:
                scales[(name, iid)] = float(np.median(depth[sel] / dvals[sel]))
            else:
                scales[(name, iid)] = 1.0
    return scales


def generate_pseudo_points(frame: Frame, max_per_instance: int = DEFAULT_MAX_PER_INSTANCE,
                           scales: Optional[Mapping[InstanceKey, float]] = None) -> LabeledPoints:
    """Lift every foreground pixel with valid depth to a labelled pseudo point.

    Instances with more than ``max_per_instance`` pixels keep an evenly strided
    subset (row-major order), exactly ``max_per_instance`` long.
    """
    if max_per_instance < 1:
        raise ValueError("max_per_instance must be >= 1")
    parts = []
    for view in frame.cameras:
        cam, mask = view.camera, view.mask.values
        valid = view.depth.valid
        name = cam.name
        for iid in sorted(view.mask.class_table):
            rows, cols = np.nonzero((mask == iid) & valid)
            n = len(rows)
            if n == 0:
                continue
            if n > max_per_instance:
                keep = np.arange(max_per_instance, dtype=np.int64) * n // max_per_instance
                rows, cols = rows[keep], cols[keep]
            d = view.depth.values[rows, cols].astype(np.float64)
            if scales is not None:
                d = d * scales.get((name, iid), 1.0)
            pts = backproject_pixels(cols, rows, d, cam)
            m = len(pts)
            parts.append(LabeledPoints(
                positions=pts,
                class_ids=np.full(m, view.mask.class_table[iid], dtype=np.int64),
                cameras=np.full(m, name, dtype=object),
                instance_ids=np.full(m, iid, dtype=np.int64),
                pseudo=np.ones(m, bool),
                source=rows * cam.width + cols,
            ))
    return LabeledPoints.concat(parts)


def group_by_instance(real: LabeledPoints, pseudo: LabeledPoints) -> list[InstanceCloud]:
    """Partition labelled points into per-instance clouds ordered by (camera, id)."""
    buckets: dict[InstanceKey, list] = {}
    for pts, slot in ((real, 0), (pseudo, 1)):
        keys = pts.keys()
        for i, key in enumerate(keys):
            entry = buckets.setdefault(key, [int(pts.class_ids[i]), [], []])
            if entry[0] != int(pts.class_ids[i]):
                raise ValueError(f"instance {key} carries conflicting class ids")
            entry[1 + slot].append(i)
    clouds = []
    for key in sorted(buckets):
        cls, ri, pi = buckets[key]
        clouds.append(InstanceCloud(
            key, cls,
            real.positions[np.asarray(ri, dtype=np.int64)].reshape(-1, 3),
            pseudo.positions[np.asarray(pi, dtype=np.int64)].reshape(-1, 3),
        ))
    return clouds


def fuse_frame(frame: Frame, max_per_instance: int = DEFAULT_MAX_PER_INSTANCE,
               align_depth: bool = False) -> FusionResult:
    real, background = label_real_points(frame)
    scales = align_depth_scale(frame) if align_depth else {}
    pseudo = generate_pseudo_points(frame, max_per_instance, scales if align_depth else None)
    clouds = group_by_instance(real, pseudo)
    log.debug("frame %s: %d real fg, %d background, %d pseudo, %d instances",
              frame.frame_id, len(real), background, len(pseudo), len(clouds))
    return FusionResult(real, pseudo, background, clouds, scales)
