"""Hard z-buffer rasterization, distance fields and canonical-map rendering.

Pixels are sampled at their centers in normalized image coordinates (see
:mod:`csmfit.camera`).  A pixel is covered by a face when all three
barycentrics of its center are non-negative; the smallest interpolated depth
wins, ties going to the lowest face index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from . import camera as cam_mod
from .articulation import compose_global, skin_vertices
from .mesh_param import inverse_param_batch

AREA_EPS = 1e-14


@dataclass(frozen=True, eq=False)
class RasterSet:
    width: int
    height: int
    mask: np.ndarray  # (h, w) bool
    depth: np.ndarray  # (h, w) float, +inf on background
    face_id: np.ndarray  # (h, w) int, -1 on background
    bary: np.ndarray  # (h, w, 3)
    skipped_faces: int = 0


@dataclass(frozen=True, eq=False)
class DistanceField:
    width: int
    height: int
    dist: np.ndarray


@dataclass(frozen=True, eq=False)
class CsmMap:
    """Per-pixel canonical coordinates; background pixels hold NaN pairs."""

    width: int
    height: int
    u: np.ndarray  # (h, w, 2)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.shape != (self.height, self.width, 2):
            raise ValueError(f"csm must have shape ({self.height}, {self.width}, 2)")
        nan = np.isnan(u)
        if np.any(nan[..., 0] != nan[..., 1]):
            raise ValueError("csm pixels must be fully NaN or fully defined")
        fg = u[~nan[..., 0]]
        if np.any(fg < 0) or np.any(fg >= 1):
            raise ValueError("csm coordinates must lie in [0, 1)")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @property
    def foreground(self):
        return ~np.isnan(self.u[..., 0])

    def foreground_pixels(self):
        """``(col, row)`` of foreground pixels in row-major order."""
        rows, cols = np.nonzero(self.foreground)
        return np.stack([cols, rows], axis=1)

    def foreground_coords(self):
        return self.u[self.foreground]


@numba.njit(cache=True)
def _raster_core(xy, z, faces, w, h, depth, face_id, bary):
    # face_id/bary of size 0 select the depth-only path
    attrs = face_id.shape[0] > 0
    pxs = np.empty(w)
    pys = np.empty(h)
    for col in range(w):
        pxs[col] = 2.0 * (col + 0.5) / w - 1.0
    for row in range(h):
        pys[row] = 2.0 * (row + 0.5) / h - 1.0
    skipped = 0
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0 = xy[i0, 0], xy[i0, 1]
        x1, y1 = xy[i1, 0], xy[i1, 1]
        x2, y2 = xy[i2, 0], xy[i2, 1]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < AREA_EPS:
            skipped += 1
            continue
        sgn = 1.0 if area > 0 else -1.0
        # pixel centers inside the bounding box, padded by 1e-7 px against rounding
        c0 = max(0, int(np.ceil((min(x0, min(x1, x2)) + 1.0) * w / 2.0 - 0.5 - 1e-7)))
        c1 = min(w - 1, int(np.floor((max(x0, max(x1, x2)) + 1.0) * w / 2.0 - 0.5 + 1e-7)))
        r0 = max(0, int(np.ceil((min(y0, min(y1, y2)) + 1.0) * h / 2.0 - 0.5 - 1e-7)))
        r1 = min(h - 1, int(np.floor((max(y0, max(y1, y2)) + 1.0) * h / 2.0 - 0.5 + 1e-7)))
        for row in range(r0, r1 + 1):
            py = pys[row]
            for col in range(c0, c1 + 1):
                px = pxs[col]
                e0 = (x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)
                e1 = (x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)
                e2 = (x0 - px) * (y1 - py) - (y0 - py) * (x1 - px)
                # sign tests on the numerators equal the sign tests on w_i
                inside = min(e0 * sgn, min(e1 * sgn, e2 * sgn)) >= 0.0
                w0 = e0 / area
                w1 = e1 / area
                w2 = e2 / area
                d = w0 * z0 + w1 * z1 + w2 * z2
                cur = depth[row, col]
                win = inside & (d < cur)
                if attrs:
                    if win:
                        depth[row, col] = d
                        face_id[row, col] = f
                        bary[row, col, 0] = w0
                        bary[row, col, 1] = w1
                        bary[row, col, 2] = w2
                else:
                    # branch-free select keeps the hot loop free of mispredictions
                    depth[row, col] = d if win else cur
    return skipped


@numba.njit(cache=True)
def _raster_kernel(xy, z, faces, w, h):
    depth = np.full((h, w), np.inf)
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    skipped = _raster_core(xy, z, faces, w, h, depth, face_id, bary)
    return depth, face_id, bary, skipped


@numba.njit(cache=True)
def _depth_kernel(xy, z, faces, w, h):
    depth = np.full((h, w), np.inf)
    _raster_core(xy, z, faces, w, h, depth, np.empty((0, 0), dtype=np.int64),
                 np.empty((0, 0, 3)))
    return depth


def depth_only(verts2d, depths, faces, w, h):
    """Depth buffer of :func:`rasterize` without face ids or barycentrics."""
    return _depth_kernel(np.ascontiguousarray(verts2d, dtype=np.float64),
                         np.ascontiguousarray(depths, dtype=np.float64),
                         np.ascontiguousarray(faces, dtype=np.int64), int(w), int(h))


def rasterize(verts2d, depths, faces, w, h):
    """Rasterize projected triangles into a :class:`RasterSet`."""
    xy = np.ascontiguousarray(verts2d, dtype=np.float64).reshape(-1, 2)
    z = np.ascontiguousarray(depths, dtype=np.float64).reshape(-1)
    f = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    if not (np.all(np.isfinite(xy)) and np.all(np.isfinite(z))):
        raise ValueError("rasterize needs finite vertex positions and depths")
    depth, face_id, bary, skipped = _raster_kernel(xy, z, f, int(w), int(h))
    return RasterSet(int(w), int(h), face_id >= 0, depth, face_id, bary, int(skipped))


def edf(mask):
    """Exact Euclidean distance (pixels) to the nearest foreground pixel.

    An empty mask yields ``w + h`` everywhere so downstream losses stay finite.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if not mask.any():
        return DistanceField(w, h, np.full((h, w), float(w + h)))
    dist = ndimage.distance_transform_edt(~mask)
    return DistanceField(w, h, dist)


def sample_bilinear(grid, pts):
    """Bilinear interpolation over pixel centers with border clamping.

    Neighbors with zero weight are skipped, so an infinite neighbor only
    contaminates queries that actually blend it in.
    """
    grid = np.asarray(grid, dtype=float)
    h, w = grid.shape
    pts = np.asarray(pts, dtype=float)
    c = cam_mod.norm_to_continuous_pixel(pts, w, h)
    cx = np.clip(c[..., 0], 0.0, w - 1.0)
    cy = np.clip(c[..., 1], 0.0, h - 1.0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    out = np.zeros(np.broadcast(cx, cy).shape)
    for wt, yy, xx in (((1 - fx) * (1 - fy), y0, x0), (fx * (1 - fy), y0, x1),
                       ((1 - fx) * fy, y1, x0), (fx * fy, y1, x1)):
        out = out + wt * np.where(wt > 0, grid[yy, xx], 0.0)
    return out


def render(mesh, rig, params, cam, w, h):
    """Rasterize the articulated template; returns ``(raster, skinned vertices)``."""
    skinned = skin_vertices(mesh, rig, compose_global(rig, params))
    raster = rasterize(cam_mod.project(cam, skinned), cam_mod.depth(cam, skinned),
                       mesh.faces, w, h)
    return raster, skinned


def csm_from_raster(raster, sphere):
    u = np.full((raster.height, raster.width, 2), np.nan)
    fg = raster.mask
    if fg.any():
        u[fg] = inverse_param_batch(sphere, raster.face_id[fg], raster.bary[fg])
    return CsmMap(raster.width, raster.height, u)


def render_csm(mesh, rig, params, cam, sphere, w, h):
    """Ground-truth canonical map consistent with ``(params, cam)``."""
    raster, _ = render(mesh, rig, params, cam, w, h)
    return csm_from_raster(raster, sphere)
