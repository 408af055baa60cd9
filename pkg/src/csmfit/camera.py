"""Orthographic camera and image-coordinate conventions.

Conventions
-----------
* The camera looks along +z; larger camera-frame z is farther away.
* Normalized image coordinates span ``[-1, 1]^2`` across the image, x to the
  right and y *down*, so rows follow raster order.
* Quaternions are stored ``(w, x, y, z)`` and normalized on construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def quat_to_matrix(q):
    """Rotation matrices for unit quaternions of shape (..., 4)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def rotation_geodesic(r1, r2):
    """Angle (radians) of the relative rotation ``r1^T r2``."""
    c = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def azimuth_elevation_quat(azimuth, elevation=0.0, roll=0.0):
    """Camera rotation turning the model by ``azimuth`` about the model's vertical
    (y) axis, then tilting by ``elevation`` about x and rolling about z."""
    qa = quat_from_axis_angle([0, 1, 0], azimuth)
    qe = quat_from_axis_angle([1, 0, 0], elevation)
    qr = quat_from_axis_angle([0, 0, 1], roll)
    return quat_multiply(qr, quat_multiply(qe, qa))


@dataclass(frozen=True, eq=False)
class Camera:
    scale: float
    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        q = np.array(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("camera quaternion must be finite and non-zero")
        q = q / n
        t = np.array(self.trans, dtype=float).reshape(2)
        s = float(self.scale)
        if not s > 0 or not np.isfinite(s):
            raise ValueError(f"camera scale must be positive, got {self.scale}")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @classmethod
    def identity(cls):
        return cls(1.0, [1.0, 0.0, 0.0, 0.0], [0.0, 0.0])

    @property
    def rotation(self):
        return quat_to_matrix(self.quat)

    def to_json(self):
        return {"scale": self.scale, "quat": [float(x) for x in self.quat],
                "trans": [float(x) for x in self.trans]}

    @classmethod
    def from_json(cls, data):
        try:
            return cls(data["scale"], data["quat"], data["trans"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed camera ({exc})") from None


def project(cam, x):
    """``s * (R x).xy + t`` for points of shape (..., 3)."""
    xc = np.asarray(x, dtype=float) @ cam.rotation.T
    return cam.scale * xc[..., :2] + cam.trans


def depth(cam, x):
    """Unscaled camera-frame z of points (..., 3)."""
    return (np.asarray(x, dtype=float) @ cam.rotation.T)[..., 2]


def pixel_to_norm(px, w, h):
    """Pixel ``(col, row)`` -> normalized coordinates of its center."""
    px = np.asarray(px)
    col, row = px[..., 0], px[..., 1]
    if np.any(col < 0) or np.any(col >= w) or np.any(row < 0) or np.any(row >= h):
        raise ValueError(f"pixel {px.tolist()} outside a {w}x{h} image")
    return np.stack([2.0 * (col + 0.5) / w - 1.0, 2.0 * (row + 0.5) / h - 1.0], axis=-1)


def norm_to_continuous_pixel(pt, w, h):
    pt = np.asarray(pt, dtype=float)
    return np.stack([(pt[..., 0] + 1.0) * w / 2.0 - 0.5,
                     (pt[..., 1] + 1.0) * h / 2.0 - 0.5], axis=-1)


def norm_to_pixel(pt, w, h):
    """Nearest pixel ``(col, row)`` to a normalized point, clamped to the image."""
    c = np.floor(norm_to_continuous_pixel(pt, w, h) + 0.5).astype(np.int64)
    return np.stack([np.clip(c[..., 0], 0, w - 1), np.clip(c[..., 1], 0, h - 1)], axis=-1)


def pixel_grid_norm(w, h):
    """Normalized centers of every pixel, shape (h, w, 2)."""
    cols = 2.0 * (np.arange(w) + 0.5) / w - 1.0
    rows = 2.0 * (np.arange(h) + 0.5) / h - 1.0
    return np.stack(np.meshgrid(cols, rows, indexing="xy"), axis=-1)
