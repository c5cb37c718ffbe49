"""Initial pseudo-box generation: BEV L-shape fitting, size priors, 3D lifting."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError
from .filtering import FilterParams, global_statistical_mask, local_radius_filter
from .fusion import InstanceCloud
from .geometry import BevBox, Box3D

log = logging.getLogger(__name__)

HEADINGS = np.deg2rad(np.arange(90.0))
CLOSENESS_D0 = 0.05
FIT_SCORE = 1.0
FALLBACK_SCORE = 0.5


@dataclass(frozen=True)
class ClassSize:
    min_length: float
    min_width: float
    min_height: float
    prior_length: float
    prior_width: float
    prior_height: float

    def __post_init__(self):
        for dim in ("length", "width", "height"):
            lo, pr = getattr(self, f"min_{dim}"), getattr(self, f"prior_{dim}")
            if not 0 < lo <= pr:
                raise ConfigurationError(f"size prior needs 0 < min_{dim} <= prior_{dim}, got {lo}, {pr}")


DEFAULT_SIZE_PRIORS: dict[int, ClassSize] = {
    1: ClassSize(3.0, 1.4, 1.0, 4.6, 1.9, 1.7),
    2: ClassSize(0.4, 0.4, 1.2, 0.7, 0.7, 1.7),
    3: ClassSize(1.2, 0.4, 1.0, 1.8, 0.6, 1.6),
}


def load_size_priors(path) -> dict[int, ClassSize]:
    """Read ``class_id min_l min_w min_h prior_l prior_w prior_h`` lines."""
    path = Path(path)
    priors = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise FormatError("size prior lines need 7 fields", path, lineno)
        try:
            cid = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError:
            raise FormatError("non-numeric size prior field", path, lineno) from None
        if cid in priors:
            raise ConfigurationError(f"duplicate size prior for class {cid} ({path}, line {lineno})")
        priors[cid] = ClassSize(*vals)
    return priors


def write_size_priors(path, priors: Mapping[int, ClassSize]) -> None:
    lines = []
    for cid, p in sorted(priors.items()):
        vals = (p.min_length, p.min_width, p.min_height, p.prior_length, p.prior_width, p.prior_height)
        lines.append(f"{cid} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def _prior(priors: Mapping[int, ClassSize], class_id) -> ClassSize:
    try:
        return priors[int(class_id)]
    except KeyError:
        raise ConfigurationError(f"no size prior for class {class_id}") from None


# --------------------------------------------------------------------------
# BEV rectangle fitting
# --------------------------------------------------------------------------

class BevFit(NamedTuple):
    box: BevBox
    fallback: bool


def closeness_scores(xy: np.ndarray, headings: np.ndarray = HEADINGS, d0: float = CLOSENESS_D0) -> np.ndarray:
    """Closeness criterion for each candidate heading (higher is better).

    For each axis, the edge (min or max side) whose distance vector has the
    smaller norm is chosen; each point contributes 1 / max(d, d0) where d is its
    distance to the nearer of the two chosen edges.
    """
    c, s = np.cos(headings), np.sin(headings)
    c1 = xy[:, :1] * c + xy[:, 1:] * s
    c2 = -xy[:, :1] * s + xy[:, 1:] * c

    def nearer_edge(proj):
        to_max = proj.max(axis=0) - proj
        to_min = proj - proj.min(axis=0)
        use_max = np.linalg.norm(to_max, axis=0) < np.linalg.norm(to_min, axis=0)
        return np.where(use_max, to_max, to_min)

    d = np.maximum(np.minimum(nearer_edge(c1), nearer_edge(c2)), d0)
    return (1.0 / d).sum(axis=0)


def _is_degenerate(xy: np.ndarray) -> bool:
    if len(xy) < 3:
        return True
    centred = xy - xy.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    return sv[-1] <= 1e-9 * max(sv[0], 1e-12) or sv[0] < 1e-12


def fit_bev_rectangle(points, fallback_size=(1.0, 1.0), d0: float = CLOSENESS_D0) -> BevFit:
    """Fit the best-scoring enclosing rectangle over 1-degree heading candidates.

    Fewer than three points or collinear BEV footprints yield an axis-aligned
    ``fallback_size`` box at the centroid with ``fallback=True``.
    """
    pts = np.asarray(points, dtype=np.float64)
    xy = pts[:, :2].reshape(-1, 2)
    if _is_degenerate(xy):
        cx, cy = xy.mean(axis=0) if len(xy) else (0.0, 0.0)
        return BevFit(BevBox.canonical(cx, cy, *fallback_size, 0.0), True)
    # work relative to the centroid; keeps projections well conditioned far from origin
    ref = xy.mean(axis=0)
    local = xy - ref
    scores = closeness_scores(local, HEADINGS, d0)
    theta = float(HEADINGS[int(np.argmax(scores))])
    e1 = np.array([math.cos(theta), math.sin(theta)])
    e2 = np.array([-e1[1], e1[0]])
    p1, p2 = local @ e1, local @ e2
    lo1, hi1, lo2, hi2 = p1.min(), p1.max(), p2.min(), p2.max()
    center = ref + 0.5 * (lo1 + hi1) * e1 + 0.5 * (lo2 + hi2) * e2
    return BevFit(BevBox.canonical(center[0], center[1], hi1 - lo1, hi2 - lo2, theta), False)


# --------------------------------------------------------------------------
# Size prior
# --------------------------------------------------------------------------

def sensor_facing_edge(center, half, axes, origin) -> tuple[int, float]:
    """``(axis, side)`` of the edge whose outward normal points most directly at the sensor.

    Closest-midpoint selection fails for long faces seen broadside: the near end
    of the face is closer than its middle, so an end edge would be picked.
    """
    best = None
    for k in (0, 1):
        for sign in (1.0, -1.0):
            mid = center + sign * half[k] * axes[k]
            to_sensor = origin - mid
            dist = float(np.linalg.norm(to_sensor))
            facing = float(sign * axes[k] @ to_sensor) / dist if dist > 0 else 1.0
            key = (-facing, k, -sign)
            if best is None or key < best[0]:
                best = (key, k, sign)
    return best[1], best[2]


def apply_size_prior(box: BevBox, class_id, priors: Mapping[int, ClassSize],
                     sensor_origin=(0.0, 0.0, 0.0)) -> BevBox:
    """Grow implausibly small footprints to the class prior.

    The sensor-facing edge keeps its midpoint: growth perpendicular to it
    extends away from the sensor, growth along it is symmetric.
    """
    prior = _prior(priors, class_id)
    if box.length >= prior.min_length and box.width >= prior.min_width:
        return box
    extents = (box.length, box.width)

    def grown(lo_hi):
        # per box axis: (min, prior) pair that axis is held to
        return tuple(p if e < m else e for e, (m, p) in zip(extents, lo_hi))

    as_fitted = grown(((prior.min_length, prior.prior_length), (prior.min_width, prior.prior_width)))
    swapped = grown(((prior.min_width, prior.prior_width), (prior.min_length, prior.prior_length)))
    # a partial view can put the object's long side along the fitted short axis;
    # take the axis assignment that grows fewer axes, then the smaller area
    def cost(ext):
        return (sum(g != e for g, e in zip(ext, extents)), ext[0] * ext[1])
    new_ext = swapped if cost(swapped) < cost(as_fitted) else as_fitted

    c, s = math.cos(box.yaw), math.sin(box.yaw)
    axes = (np.array([c, s]), np.array([-s, c]))
    half = (box.length / 2, box.width / 2)
    center = np.array([box.cx, box.cy])
    origin = np.asarray(sensor_origin, dtype=np.float64)[:2]
    k, sign = sensor_facing_edge(center, half, axes, origin)
    new_half = (new_ext[0] / 2, new_ext[1] / 2)
    # keep the nearest edge's line fixed; the far side moves outward
    new_center = center + sign * (half[k] - new_half[k]) * axes[k]
    return BevBox.canonical(new_center[0], new_center[1], new_ext[0], new_ext[1], box.yaw)


# --------------------------------------------------------------------------
# Lifting
# --------------------------------------------------------------------------

def lift_to_3d(box: BevBox, points, class_id, priors: Mapping[int, ClassSize], **fields) -> Box3D:
    """Box3D whose top is the highest point; the bottom is the lowest point,
    pushed down to honour the class minimum height."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("lift_to_3d needs at least one point")
    prior = _prior(priors, class_id)
    z_top = float(pts[:, 2].max())
    z_bot = float(pts[:, 2].min())
    if z_top - z_bot < prior.min_height:
        z_bot = z_top - prior.min_height
    return Box3D((box.cx, box.cy, (z_top + z_bot) / 2), box.length, box.width, z_top - z_bot,
                 box.yaw, int(class_id), **fields)


# --------------------------------------------------------------------------
# Composition
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxfitOptions:
    local_filter: bool = True
    global_filter: bool = True
    keep_unanchored: bool = False
    fit_score: float = FIT_SCORE
    fallback_score: float = FALLBACK_SCORE
    d0: float = CLOSENESS_D0
    sensor_origin: tuple = (0.0, 0.0, 0.0)


@dataclass
class InstanceStats:
    key: tuple
    n_real: int
    n_pseudo: int
    n_local: int
    n_global: int
    anchored: bool
    fallback: bool = False


def clean_instance(cloud: InstanceCloud, params: FilterParams, options: BoxfitOptions):
    """Run the enabled filters. Returns ``(points, stats)``; points is None when dropped."""
    n_real, n_pseudo = len(cloud.real), len(cloud.pseudo)
    if options.local_filter:
        fused = local_radius_filter(cloud, params, options.sensor_origin, options.keep_unanchored)
        pts, anchored = fused.points, fused.anchored
    else:
        pts = np.vstack([np.asarray(cloud.real).reshape(-1, 3), np.asarray(cloud.pseudo).reshape(-1, 3)])
        anchored = n_real > 0
    n_local = len(pts)
    if len(pts) and options.global_filter:
        pts = pts[global_statistical_mask(pts, params)]
    stats = InstanceStats(cloud.key, n_real, n_pseudo, n_local, len(pts), anchored)
    if len(pts) == 0 or (not anchored and not options.keep_unanchored):
        return None, stats
    return pts, stats


def box_from_points(points, class_id, priors, options: BoxfitOptions = BoxfitOptions(), **fields):
    prior = _prior(priors, class_id)
    fit = fit_bev_rectangle(points, (prior.min_length, prior.min_width), options.d0)
    bev = apply_size_prior(fit.box, class_id, priors, options.sensor_origin)
    score = options.fallback_score if fit.fallback else options.fit_score
    return lift_to_3d(bev, points, class_id, priors, score=score, **fields), fit.fallback


def generate_initial_boxes(clouds: Sequence[InstanceCloud], params: FilterParams = FilterParams(),
                           priors: Optional[Mapping[int, ClassSize]] = None,
                           options: BoxfitOptions = BoxfitOptions(), frame_id: str = "",
                           stats: Optional[list] = None) -> list[Box3D]:
    """filter -> fit -> size prior -> lift, one box per surviving instance."""
    priors = DEFAULT_SIZE_PRIORS if priors is None else priors
    boxes = []
    for cloud in clouds:
        _prior(priors, cloud.class_id)
        pts, st = clean_instance(cloud, params, options)
        if pts is not None:
            box, st.fallback = box_from_points(pts, cloud.class_id, priors, options,
                                               instance_id=cloud.instance_id, frame_id=frame_id)
            boxes.append(box)
        if stats is not None:
            stats.append(st)
    return boxes


def canonical_yaw_error(yaw_a: float, yaw_b: float, period: float = math.pi / 2) -> float:
    """Smallest angular difference modulo ``period``."""
    d = (yaw_a - yaw_b) % period
    return min(d, period - d)


__all__ = [
    "BevFit", "BoxfitOptions", "ClassSize", "DEFAULT_SIZE_PRIORS", "InstanceStats",
    "apply_size_prior", "box_from_points", "canonical_yaw_error", "clean_instance",
    "closeness_scores", "fit_bev_rectangle", "generate_initial_boxes", "lift_to_3d",
    "load_size_priors", "write_size_priors",
]
