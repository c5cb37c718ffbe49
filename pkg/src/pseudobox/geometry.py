"""Camera projection, oriented boxes and rotated-rectangle IoU.

Conventions
-----------
Ego/LiDAR frame: x forward, y left, z up, meters. The sensor origin is (0, 0, 0).
Camera frame: x right, y down, z forward (pinhole). ``ego_from_camera`` maps
camera coordinates into the ego frame.
Yaw is counterclockwise about +z from +x and is kept in [-pi, pi).
Pixel (row i, col j) is centred at u=j, v=i.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import CalibrationError

ORTHONORMAL_TOL = 1e-6
AREA_EPS = 1e-12
INSIDE_TOL = 1e-9


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def wrap_angle(yaw: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    w = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if w < 0.0:
        w += 2.0 * math.pi
    w -= math.pi
    # fmod can land exactly on +pi after rounding
    if w >= math.pi:
        w -= 2.0 * math.pi
    return w


# --------------------------------------------------------------------------
# Camera
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CameraModel:
    name: str
    intrinsics: np.ndarray
    ego_from_camera: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.ego_from_camera, dtype=np.float64).reshape(4, 4)
        K.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "ego_from_camera", T)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        self._validate()

    def _validate(self):
        K, T = self.intrinsics, self.ego_from_camera
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(T))):
            raise CalibrationError(f"camera {self.name!r}: non-finite calibration")
        if self.width < 1 or self.height < 1:
            raise CalibrationError(f"camera {self.name!r}: image size must be >= 1")
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError(f"camera {self.name!r}: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise CalibrationError(f"camera {self.name!r}: principal point outside image")
        R = T[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise CalibrationError(f"camera {self.name!r}: rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise CalibrationError(f"camera {self.name!r}: rotation is a reflection")
        if np.max(np.abs(T[3] - [0.0, 0.0, 0.0, 1.0])) > ORTHONORMAL_TOL:
            raise CalibrationError(f"camera {self.name!r}: last transform row must be 0 0 0 1")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.ego_from_camera[:3, :3]

    @property
    def position(self) -> np.ndarray:
        """Camera centre in the ego frame."""
        return self.ego_from_camera[:3, 3]

    @property
    def principal_axis(self) -> np.ndarray:
        """Unit optical axis expressed in the ego frame."""
        return self.ego_from_camera[:3, 2]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return (pts - self.position) @ self.rotation

    def to_ego(self, points_cam: np.ndarray) -> np.ndarray:
        pts = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.position


def project_points(points, cam: CameraModel):
    """Vectorised projection.

    Returns ``(uv, depth, in_view)`` where ``uv`` is (N, 2), ``depth`` the camera
    z coordinate and ``in_view`` the mask of points in front of the camera that
    land in [0, width) x [0, height).
    """
    pc = cam.to_camera(points)
    depth = pc[:, 2]
    in_front = depth > 0
    uv = np.full((len(pc), 2), np.nan)
    z = depth[in_front]
    uv[in_front, 0] = cam.fx * pc[in_front, 0] / z + cam.cx
    uv[in_front, 1] = cam.fy * pc[in_front, 1] / z + cam.cy
    with np.errstate(invalid="ignore"):
        in_view = (
            in_front
            & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        )
    return uv, depth, in_view


def project_to_image(p, cam: CameraModel) -> Optional[tuple[float, float, float]]:
    """Project one ego-frame point; ``None`` when behind the camera or outside the image."""
    uv, depth, in_view = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), cam)
    if not in_view[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def backproject_pixels(u, v, depth, cam: CameraModel) -> np.ndarray:
    """Vectorised inverse of :func:`project_points` for planar depth."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("depth must be positive")
    pc = np.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], axis=-1)
    return cam.to_ego(pc.reshape(-1, 3))


def backproject(u: float, v: float, depth: float, cam: CameraModel) -> Point3:
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return Point3(*backproject_pixels([u], [v], [depth], cam)[0].tolist())


# --------------------------------------------------------------------------
# Boxes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BevBox:
    cx: float
    cy: float
    length: float
    width: float
    yaw: float

    def __post_init__(self):
        if not (self.length >= self.width > 0):
            raise ValueError(f"BevBox needs length >= width > 0, got {self.length}x{self.width}")

    @classmethod
    def canonical(cls, cx, cy, length, width, yaw) -> "BevBox":
        """Build a box in normal form: length >= width, yaw in [-pi, pi)."""
        if width > length:
            length, width = width, length
            yaw = yaw + math.pi / 2
        return cls(float(cx), float(cy), float(length), float(width), wrap_angle(float(yaw)))

    def corners(self) -> np.ndarray:
        return rectangle_corners(self.cx, self.cy, self.length, self.width, self.yaw)

    @property
    def area(self) -> float:
        return self.length * self.width


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    length: float
    width: float
    height: float
    yaw: float
    class_id: int
    score: float = 1.0
    instance_id: Optional[str] = None
    frame_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        vals = (*self.center, self.length, self.width, self.height, self.yaw, self.score)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("Box3D fields must be finite")
        if not (self.length >= self.width > 0 and self.height > 0):
            raise ValueError(
                f"Box3D needs length >= width > 0 and height > 0, "
                f"got {self.length}x{self.width}x{self.height}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @classmethod
    def canonical(cls, center, length, width, height, yaw, class_id, **kw) -> "Box3D":
        if width > length:
            length, width = width, length
            yaw = yaw + math.pi / 2
        return cls(tuple(center), float(length), float(width), float(height),
                   wrap_angle(float(yaw)), int(class_id), **kw)

    @property
    def bev(self) -> BevBox:
        return BevBox(self.center[0], self.center[1], self.length, self.width, self.yaw)

    @property
    def z_min(self) -> float:
        return self.center[2] - self.height / 2

    @property
    def z_max(self) -> float:
        return self.center[2] + self.height / 2

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    def replace(self, **changes) -> "Box3D":
        return replace(self, **changes)

    def corners(self) -> np.ndarray:
        """(8, 3) corners, bottom face first, counterclockwise."""
        bev = rectangle_corners(self.center[0], self.center[1], self.length, self.width, self.yaw)
        lo = np.column_stack([bev, np.full(4, self.z_min)])
        hi = np.column_stack([bev, np.full(4, self.z_max)])
        return np.vstack([lo, hi])


def rectangle_corners(cx, cy, length, width, yaw) -> np.ndarray:
    """Counterclockwise (4, 2) corner list of a rotated rectangle."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = ((hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw))
    return np.array([(cx + c * a - s * b, cy + s * a + c * b) for a, b in local])


# --------------------------------------------------------------------------
# Polygon clipping and IoU
# --------------------------------------------------------------------------

def _polygon_area(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_convex(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` by a counterclockwise convex ``clip``."""
    out = [tuple(p) for p in subject]
    m = len(clip)
    for k in range(m):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % m]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - cur_side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return out


def bev_intersection_area(a: BevBox, b: BevBox) -> float:
    ra = math.hypot(a.length, a.width) / 2
    rb = math.hypot(b.length, b.width) / 2
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    poly = clip_convex(a.corners().tolist(), b.corners().tolist())
    area = abs(_polygon_area(poly))
    return area if area > AREA_EPS else 0.0


def bev_iou(a: BevBox, b: BevBox) -> float:
    if a == b:
        return 1.0
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def iou3d(a: Box3D, b: Box3D) -> float:
    if (a.center, a.length, a.width, a.height, a.yaw) == (b.center, b.length, b.width, b.height, b.yaw):
        return 1.0
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a.bev, b.bev) * dz
    if inter == 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


def bev_iou_boxes(a: Box3D, b: Box3D) -> float:
    return bev_iou(a.bev, b.bev)


def points_in_box(points, box: Box3D, tol: float = INSIDE_TOL) -> np.ndarray:
    """Indices of points inside the oriented box, boundary included within ``tol``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(points_in_box_mask(pts, box, tol))


def points_in_box_mask(pts: np.ndarray, box: Box3D, tol: float = INSIDE_TOL) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.center[0]
    dy = pts[:, 1] - box.center[1]
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    lz = pts[:, 2] - box.center[2]
    return (
        (np.abs(lx) <= box.length / 2 + tol)
        & (np.abs(ly) <= box.width / 2 + tol)
        & (np.abs(lz) <= box.height / 2 + tol)
    )


def rigid_transform_z(points, angle: float, translation=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Rotate points about +z by ``angle`` then translate."""
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ R.T + np.asarray(translation, dtype=np.float64)


def transform_box(box: Box3D, angle: float, translation=(0.0, 0.0, 0.0)) -> Box3D:
    center = rigid_transform_z(np.array(box.center), angle, translation)[0]
    return box.replace(center=tuple(center.tolist()), yaw=wrap_angle(box.yaw + angle))
