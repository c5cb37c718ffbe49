"""Point samplers on rectangle outlines, shared by the box-fitting tests."""
import math

import numpy as np


def rect_corners(cx, cy, length, width, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]]) * [length / 2, width / 2]
    return local @ np.array([[c, s], [-s, c]]) + [cx, cy]


def sample_segment(a, b, spacing):
    n = max(2, int(math.ceil(np.linalg.norm(b - a) / spacing)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return a + t * (b - a)


def perimeter_points(cx, cy, length, width, yaw, spacing=0.05):
    corners = rect_corners(cx, cy, length, width, yaw)
    return np.vstack([sample_segment(corners[i], corners[(i + 1) % 4], spacing) for i in range(4)])


def visible_sides(cx, cy, length, width, yaw, origin=(0.0, 0.0)):
    """The two sides adjacent to the corner nearest ``origin``, as (corner, end_a, end_b)."""
    corners = rect_corners(cx, cy, length, width, yaw)
    k = int(np.argmin(np.linalg.norm(corners - np.asarray(origin), axis=1)))
    return corners[k], corners[(k - 1) % 4], corners[(k + 1) % 4]


def l_shape_points(rng, cx, cy, length, width, yaw, density=10.0, sigma=0.0):
    """Uniform samples on the two sensor-facing sides with isotropic Gaussian noise."""
    corner, a, b = visible_sides(cx, cy, length, width, yaw)
    parts = []
    for end in (a, b):
        n = max(2, int(round(np.linalg.norm(end - corner) * density)))
        t = rng.uniform(0, 1, size=(n, 1))
        parts.append(corner + t * (end - corner))
    pts = np.vstack(parts)
    return pts + rng.normal(0, sigma, size=pts.shape) if sigma > 0 else pts


def even_l_shape_points(rng, cx, cy, length, width, yaw, spacing=0.1, sigma=0.0):
    """Evenly spaced samples covering both sensor-facing sides end to end, plus Gaussian noise."""
    corner, a, b = visible_sides(cx, cy, length, width, yaw)
    parts = []
    for end in (a, b):
        n = max(2, int(round(np.linalg.norm(end - corner) / spacing)))
        parts.append(corner + np.linspace(0.0, 1.0, n + 1)[:, None] * (end - corner))
    pts = np.vstack(parts)
    return pts + rng.normal(0, sigma, size=pts.shape) if sigma > 0 else pts


def distance_to_segment(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def distance_to_outline(p, corners):
    return np.min([distance_to_segment(p, corners[i], corners[(i + 1) % 4]) for i in range(4)], axis=0)


def inside_rect(p, cx, cy, length, width, yaw, tol=1e-9):
    c, s = math.cos(yaw), math.sin(yaw)
    d = np.asarray(p)[:, :2] - [cx, cy]
    along = d @ [c, s]
    across = d @ [-s, c]
    return (np.abs(along) <= length / 2 + tol) & (np.abs(across) <= width / 2 + tol)


def yaw_error_deg(a, b):
    d = math.degrees(a - b) % 90.0
    return min(d, 90.0 - d)
