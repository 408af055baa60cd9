"""Cycle-consistency, visibility, mask, keypoint and regularization losses.

Units: ``gcc``, ``mask_coverage`` and ``kp`` are distances in normalized
image coordinates, ``mask_consistency`` is in pixels (it sums distance-field
values), ``vis`` is in model depth units.

Every term is reported both as a plain sum and as a mean over its natural
count: csm foreground pixels for ``gcc``/``vis``, ground-truth foreground
pixels for the two mask terms, visible keypoints for ``kp``.  The
translation regularizer is never normalized.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import camera as cam_mod
from .articulation import (ArticulationParams, articulate_points, compose_global,
                           compose_global_batch, skin_batch, skin_vertices)
from .camera import Camera, quat_to_matrix
from .errors import EmptyForegroundError, FormatError
from .mesh_param import phi_batch
from .raster import CsmMap, _raster_core, edf, sample_bilinear

logger = logging.getLogger(__name__)

TERMS = ("gcc", "vis", "mask_consistency", "mask_coverage", "kp", "reg_trans")
_GCC, _VIS, _CONS, _COV, _KP, _REG = range(6)


@dataclass(frozen=True)
class LossConfig:
    w_gcc: float = 1.0
    w_vis: float = 1.0
    w_mask_cons: float = 1.0
    w_mask_cov: float = 1.0
    w_kp: float = 1.0
    w_reg_trans: float = 0.1
    normalization: str = "mean"

    def __post_init__(self):
        if self.normalization not in ("sum", "mean"):
            raise ValueError("normalization must be 'sum' or 'mean'")

    @property
    def weights(self):
        return np.array([self.w_gcc, self.w_vis, self.w_mask_cons, self.w_mask_cov,
                         self.w_kp, self.w_reg_trans])

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        try:
            return cls(**data)
        except TypeError as exc:
            raise FormatError(f"malformed loss config ({exc})") from None


@dataclass(frozen=True, eq=False)
class Keypoints2D:
    """Annotated 2D keypoints (normalized coords) with their template anchors."""

    names: tuple
    x: np.ndarray
    face_ids: np.ndarray
    barys: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1, 2)
        vis = np.asarray(self.visible, dtype=bool).reshape(-1)
        if np.any(np.abs(x[vis]) > 1):
            raise ValueError("visible keypoints must lie in [-1, 1]^2")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "face_ids", np.asarray(self.face_ids, dtype=np.int64))
        object.__setattr__(self, "barys", np.asarray(self.barys, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def from_anchors(cls, names, x, anchors, visible):
        return cls(names, x, [a.face_id for a in anchors], [a.bary for a in anchors], visible)

    def to_json(self):
        return [{"name": n, "x": [float(a) for a in xi], "X_face": int(f),
                 "X_bary": [float(b) for b in bb], "visible": bool(v)}
                for n, xi, f, bb, v in zip(self.names, self.x, self.face_ids, self.barys,
                                           self.visible)]

    @classmethod
    def from_json(cls, items):
        try:
            return cls([it["name"] for it in items], [it["x"] for it in items],
                       [it["X_face"] for it in items], [it["X_bary"] for it in items],
                       [it["visible"] for it in items])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed keypoint file ({exc})") from None


@dataclass(frozen=True, eq=False)
class Observation:
    gt_mask: np.ndarray
    keypoints: Keypoints2D | None = None
    csm: CsmMap | None = None

    def __post_init__(self):
        m = np.asarray(self.gt_mask, dtype=bool)
        object.__setattr__(self, "gt_mask", m)
        if self.csm is not None and (self.csm.height, self.csm.width) != m.shape:
            raise ValueError("csm and mask resolutions differ")

    @property
    def size(self):
        h, w = self.gt_mask.shape
        return w, h


@dataclass(frozen=True, eq=False)
class State:
    camera: Camera
    params: ArticulationParams


@dataclass(frozen=True, eq=False)
class Model:
    """Template mesh, rig and spherical parametrization used together."""

    mesh: object
    rig: object
    sphere: object


@dataclass
class LossReport:
    gcc: float
    vis: float
    mask_consistency: float
    mask_coverage: float
    kp: float
    reg_trans: float
    total: float
    sums: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    normalization: str = "mean"

    def to_json(self):
        return asdict(self)


def state_to_vector(state):
    """Flat parameters ``q[4], s, t[2], theta[K], t_k[3K]``."""
    c, p = state.camera, state.params
    return np.concatenate([c.quat, [c.scale], c.trans, p.angle, p.trans.ravel()])


def vector_to_state(x, n_parts):
    x = np.asarray(x, dtype=float)
    cam = Camera(x[4], x[:4], x[5:7])
    params = ArticulationParams(x[7:7 + n_parts], x[7 + n_parts:].reshape(n_parts, 3))
    return State(cam, params)


def parameter_slices(n_parts):
    return {"quat": slice(0, 4), "scale": slice(4, 5), "trans": slice(5, 7),
            "angles": slice(7, 7 + n_parts), "part_trans": slice(7 + n_parts, 7 + 4 * n_parts)}


def _fg_centers(mask):
    rows, cols = np.nonzero(mask)
    h, w = mask.shape
    return np.stack([2.0 * (cols + 0.5) / w - 1.0, 2.0 * (rows + 0.5) / h - 1.0], axis=1)


def _require_fg(csm):
    if csm is None or not csm.foreground.any():
        raise EmptyForegroundError("canonical map has no foreground pixel")


def _csm_reprojection(csm, mesh, rig, params, cam, sphere):
    face_ids, barys, _ = phi_batch(sphere, mesh, csm.foreground_coords())
    pts = articulate_points(mesh, rig, compose_global(rig, params), face_ids, barys)
    return cam_mod.project(cam, pts), cam_mod.depth(cam, pts)


def loss_gcc(csm, mesh, rig, params, cam, sphere):
    """Sum over csm foreground of ``|p - project(articulate(phi(C[p])))|``.

    Returns ``(sum, residuals)`` with residuals in row-major pixel order.
    """
    _require_fg(csm)
    pbar, _ = _csm_reprojection(csm, mesh, rig, params, cam, sphere)
    res = np.linalg.norm(_fg_centers(csm.foreground) - pbar, axis=1)
    return math.fsum(res), res


def loss_vis(csm, mesh, rig, params, cam, sphere, raster):
    """Hinge on reprojected points lying behind the rendered depth."""
    _require_fg(csm)
    pbar, z = _csm_reprojection(csm, mesh, rig, params, cam, sphere)
    rendered = sample_bilinear(raster.depth, pbar)
    return math.fsum(np.maximum(0.0, z - rendered))


def loss_mask_consistency(raster, gt_edf):
    if (raster.width, raster.height) != (gt_edf.width, gt_edf.height):
        raise ValueError("rendered mask and distance field resolutions differ")
    return math.fsum(gt_edf.dist[raster.mask])


def _nearest_dist(pts, verts, chunk=4096):
    out = np.empty(len(pts))
    for lo in range(0, len(pts), chunk):
        d = pts[lo:lo + chunk, None, :] - verts[None, :, :]
        out[lo:lo + chunk] = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]).min(axis=1)
    return out


def loss_mask_coverage(gt_mask, verts2d):
    """Sum over ground-truth foreground pixel centers of the distance to the
    nearest projected vertex (brute-force scan)."""
    verts2d = np.asarray(verts2d, dtype=float).reshape(-1, 2)
    if len(verts2d) == 0:
        raise ValueError("mask coverage needs at least one vertex")
    return math.fsum(_nearest_dist(_fg_centers(np.asarray(gt_mask, bool)), verts2d))


def keypoint_reprojection(keypoints, mesh, rig, params, cam):
    pts = articulate_points(mesh, rig, compose_global(rig, params),
                            keypoints.face_ids, keypoints.barys)
    return cam_mod.project(cam, pts)


def loss_kp(keypoints, mesh, rig, params, cam):
    """Sum of reprojection distances over visible keypoints."""
    if keypoints is None or not keypoints.visible.any():
        logger.warning("no visible keypoints; keypoint loss is 0")
        return 0.0
    proj = keypoint_reprojection(keypoints, mesh, rig, params, cam)
    res = np.linalg.norm(keypoints.x - proj, axis=1)[keypoints.visible]
    return math.fsum(res)


def reg_trans(params):
    return math.fsum((np.asarray(params.trans) ** 2).ravel())


def kp_gradient_analytic(keypoints, model, state, config=LossConfig()):
    """Closed-form gradient of the weighted keypoint term.

    Covers camera scale and translation, part angles and part translations;
    the quaternion block is left at zero.  Used to cross-check the
    finite-difference path.
    """
    mesh, rig = model.mesh, model.rig
    cam, params = state.camera, state.params
    k = rig.n_parts
    grad = np.zeros(7 + 4 * k)
    vis = keypoints.visible
    if not vis.any():
        return grad
    gt = compose_global(rig, params)
    corner_ids = mesh.faces[keypoints.face_ids[vis]]  # (N, 3)
    beta = keypoints.barys[vis]
    corners = mesh.vertices[corner_ids]  # (N, 3, 3)
    # per-corner, per-part blend weight beta_b * alpha_{v_b, m}
    wt = beta[:, :, None] * rig.weights[corner_ids]  # (N, 3, K)
    moved = np.einsum("mij,nbj->mnbi", gt.rotation, corners) + gt.translation[:, None, None]
    pts = keypoint_reprojection_3d(keypoints, mesh, rig, gt)[vis]

    rc = cam.rotation
    cam_pts = pts @ rc.T
    r = keypoints.x[vis] - (cam.scale * cam_pts[:, :2] + cam.trans)
    dl = -r / np.linalg.norm(r, axis=1, keepdims=True)  # d|x - pbar| / d pbar
    jac = cam.scale * rc[:2]  # d pbar / d world point

    grad[4] = np.sum(dl * cam_pts[:, :2])
    grad[5:7] = dl.sum(axis=0)
    for j in range(k):
        subtree = [m for m in range(k) if _is_ancestor(rig.parent, j, m)]
        p = rig.parent[j]
        rp = gt.rotation[p] if p >= 0 else np.eye(3)
        tp = gt.translation[p] if p >= 0 else np.zeros(3)
        axis_w = rp @ rig.axis[j]
        pivot_w = rp @ (rig.pivot[j] + params.trans[j]) + tp
        d_theta = np.zeros_like(pts)
        mass = np.zeros(len(pts))
        for m in subtree:
            d_theta += np.einsum("nb,nbi->ni", wt[:, :, m], np.cross(axis_w, moved[m] - pivot_w))
            mass += wt[:, :, m].sum(axis=1)
        grad[7 + j] = np.sum(dl * (d_theta @ jac.T))
        grad[7 + k + 3 * j:7 + k + 3 * j + 3] = ((mass[:, None] * dl) @ (jac @ rp)).sum(axis=0)
    scale = config.w_kp / (vis.sum() if config.normalization == "mean" else 1.0)
    return grad * scale


def _is_ancestor(parent, a, b):
    node = b
    while node >= 0:
        if node == a:
            return True
        node = parent[node]
    return False


def keypoint_reprojection_3d(keypoints, mesh, rig, gt):
    return articulate_points(mesh, rig, gt, keypoints.face_ids, keypoints.barys)


class LossContext:
    """Precomputed observation data for repeated loss evaluation.

    Surface points of the csm foreground, the ground-truth distance field and
    the keypoint anchors depend only on the observation, so they are computed
    once.  :meth:`objective_batch` evaluates many flat parameter vectors at
    once; rasterized quantities are re-rendered for every row.
    """

    def __init__(self, obs, model, config=LossConfig()):
        self.obs = obs
        self.model = model
        self.config = config
        mesh = model.mesh
        self.n_parts = model.rig.n_parts
        self.w, self.h = obs.size
        self.faces = np.ascontiguousarray(mesh.faces, dtype=np.int64)
        self.gt_edf = edf(obs.gt_mask)
        self.mask_pts = _fg_centers(obs.gt_mask)
        self.missing = []

        nv = mesh.n_vertices
        if obs.csm is not None and obs.csm.foreground.any():
            face_ids, barys, _ = phi_batch(model.sphere, mesh, obs.csm.foreground_coords())
            self.csm_pts = _fg_centers(obs.csm.foreground)
            self.csm_interp = _bary_matrix(mesh.faces, face_ids, barys, nv)
        else:
            self.csm_pts = None
            self.missing += ["gcc", "vis"]
        kp = obs.keypoints
        if kp is not None and kp.visible.any():
            self.kp_x = kp.x[kp.visible]
            self.kp_interp = _bary_matrix(mesh.faces, kp.face_ids[kp.visible],
                                          kp.barys[kp.visible], nv)
        else:
            self.kp_x = None
            self.missing.append("kp")
        self.counts = {
            "gcc": 0 if self.csm_pts is None else len(self.csm_pts),
            "vis": 0 if self.csm_pts is None else len(self.csm_pts),
            "mask_consistency": len(self.mask_pts),
            "mask_coverage": len(self.mask_pts),
            "kp": 0 if self.kp_x is None else len(self.kp_x),
            "reg_trans": 1,
        }
        norm = np.array([max(self.counts[t], 1) for t in TERMS], dtype=float)
        norm[_REG] = 1.0
        self._norm = norm

    # -- batched geometry -------------------------------------------------
    def _project_batch(self, x):
        k = self.n_parts
        q = x[:, :4] / np.linalg.norm(x[:, :4], axis=1, keepdims=True)
        rc = quat_to_matrix(q)
        s = x[:, 4]
        t = x[:, 5:7]
        rg, tg = compose_global_batch(self.model.rig, x[:, 7:7 + k],
                                      x[:, 7 + k:].reshape(len(x), k, 3))
        verts = skin_batch(self.model.mesh.vertices, self.model.rig.weights, rg, tg)
        cam_pts = np.matmul(verts, rc.transpose(0, 2, 1))
        xy = s[:, None, None] * cam_pts[..., :2] + t[:, None, :]
        return xy, np.ascontiguousarray(cam_pts[..., 2])

    def term_sums(self, x):
        """Raw per-term sums for flat parameter rows ``x`` (B, n) -> (B, 6)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = len(x)
        xy, z = self._project_batch(x)
        out = np.zeros((b, 6))
        nv = xy.shape[1]
        stacked = np.concatenate([xy, z[..., None]], axis=-1).transpose(1, 0, 2).reshape(nv, 3 * b)

        pbar = zp = None
        if self.csm_pts is not None:
            interp = (self.csm_interp @ stacked).reshape(-1, b, 3).transpose(1, 0, 2)
            pbar, zp = interp[..., :2], interp[..., 2]
            diff = self.csm_pts[None] - pbar
            out[:, _GCC] = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2).sum(axis=1)
        if self.kp_x is not None:
            kp = (self.kp_interp @ stacked).reshape(-1, b, 3).transpose(1, 0, 2)[..., :2]
            out[:, _KP] = np.linalg.norm(self.kp_x[None] - kp, axis=-1).sum(axis=1)
        out[:, _REG] = np.sum(x[:, 7 + self.n_parts:] ** 2, axis=1)
        if len(self.mask_pts):
            out[:, _COV] = self._coverage(xy)

        if pbar is None:
            pbar, zp = np.zeros((b, 0, 2)), np.zeros((b, 0))
        out[:, _CONS], out[:, _VIS] = _raster_terms(
            np.ascontiguousarray(xy), np.ascontiguousarray(z), self.faces, self.w, self.h,
            self.gt_edf.dist, np.ascontiguousarray(pbar), np.ascontiguousarray(zp))
        return out

    def _coverage(self, xy, k=5):
        """Exact nearest-vertex coverage for every row.

        Candidates are the ``k - 1`` nearest vertices of row 0; a row can
        reuse them when its best candidate is provably closer than any
        other vertex, else that pixel falls back to a full scan.
        """
        pts = self.mask_pts
        nv = xy.shape[1]
        if nv <= k:
            return np.array([_nearest_dist(pts, xy[i]).sum() for i in range(len(xy))])
        dk, idx = cKDTree(xy[0]).query(pts, k=k)
        guard = dk[:, -1] * (1 - 1e-9) - 1e-12
        return _coverage_rows(np.ascontiguousarray(xy), pts, np.ascontiguousarray(idx[:, :-1]),
                              guard)

    # -- scalar objective ---------------------------------------------------
    def normalized_terms(self, sums):
        if self.config.normalization == "mean":
            return sums / self._norm
        return sums

    def objective_batch(self, x):
        return self.normalized_terms(self.term_sums(x)) @ self.config.weights

    def objective(self, x):
        return float(self.objective_batch(np.asarray(x)[None])[0])

    def report(self, state):
        sums = self.term_sums(state_to_vector(state)[None])[0]
        means = sums / self._norm
        used = means if self.config.normalization == "mean" else sums
        total = float(used @ self.config.weights)
        return LossReport(
            *[float(v) for v in used], total=total,
            sums=dict(zip(TERMS, map(float, sums))), means=dict(zip(TERMS, map(float, means))),
            counts=dict(self.counts), missing=list(self.missing),
            normalization=self.config.normalization,
        )

    # -- gradients ------------------------------------------------------------
    def fd_steps(self, x):
        h = np.full(len(x), 1e-4)
        h[4] = 1e-4 * x[4]
        return h

    def value_and_grad(self, x, free=None, scheme="central"):
        """Finite-difference gradient of the scalar objective at ``x``.

        ``free`` is a boolean mask of differentiated coordinates (others get
        zero).  The quaternion block is projected onto the tangent space of
        the unit sphere.
        """
        x = np.asarray(x, dtype=float)
        n = len(x)
        free = np.ones(n, dtype=bool) if free is None else np.asarray(free, dtype=bool)
        idx = np.flatnonzero(free)
        h = self.fd_steps(x)
        rows = [x]
        for j in idx:
            e = np.zeros(n)
            e[j] = h[j]
            rows.append(x + e)
            if scheme == "central":
                rows.append(x - e)
        vals = self.objective_batch(np.array(rows))
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite loss during finite differencing")
        f0 = vals[0]
        grad = np.zeros(n)
        if scheme == "central":
            grad[idx] = (vals[1::2] - vals[2::2]) / (2 * h[idx])
        elif scheme == "forward":
            grad[idx] = (vals[1:] - f0) / h[idx]
        else:
            raise ValueError(f"unknown difference scheme {scheme!r}")
        q = x[:4] / np.linalg.norm(x[:4])
        grad[:4] -= (grad[:4] @ q) * q
        return float(f0), grad


@numba.njit(cache=True)
def _coverage_rows(xy, pts, cand, guard):
    b, nv = xy.shape[0], xy.shape[1]
    out = np.zeros(b)
    for i in range(b):
        moved = 0.0
        for v in range(nv):
            dx = xy[i, v, 0] - xy[0, v, 0]
            dy = xy[i, v, 1] - xy[0, v, 1]
            moved = max(moved, dx * dx + dy * dy)
        moved = np.sqrt(moved)
        total = 0.0
        for p in range(pts.shape[0]):
            best = np.inf
            for c in range(cand.shape[1]):
                v = cand[p, c]
                dx = xy[i, v, 0] - pts[p, 0]
                dy = xy[i, v, 1] - pts[p, 1]
                best = min(best, np.sqrt(dx * dx + dy * dy))
            if best > guard[p] - moved:
                best = np.inf
                for v in range(nv):
                    dx = xy[i, v, 0] - pts[p, 0]
                    dy = xy[i, v, 1] - pts[p, 1]
                    best = min(best, np.sqrt(dx * dx + dy * dy))
            total += best
        out[i] = total
    return out


@numba.njit(cache=True)
def _bilinear_at(grid, px, py):
    # mirrors raster.sample_bilinear for a single point
    h, w = grid.shape
    cx = min(max((px + 1.0) * w / 2.0 - 0.5, 0.0), w - 1.0)
    cy = min(max((py + 1.0) * h / 2.0 - 0.5, 0.0), h - 1.0)
    x0 = int(np.floor(cx))
    y0 = int(np.floor(cy))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    out = 0.0
    wt = (1 - fx) * (1 - fy)
    if wt > 0:
        out += wt * grid[y0, x0]
    wt = fx * (1 - fy)
    if wt > 0:
        out += wt * grid[y0, x1]
    wt = (1 - fx) * fy
    if wt > 0:
        out += wt * grid[y1, x0]
    wt = fx * fy
    if wt > 0:
        out += wt * grid[y1, x1]
    return out


@numba.njit(cache=True)
def _raster_terms(xy, z, faces, w, h, gt_dist, pbar, zp):
    """Mask-consistency and visibility sums, one z-buffer per row."""
    b = xy.shape[0]
    cons = np.zeros(b)
    vis = np.zeros(b)
    empty_ids = np.empty((0, 0), dtype=np.int64)
    empty_bary = np.empty((0, 0, 3))
    for i in range(b):
        depth = np.full((h, w), np.inf)
        _raster_core(xy[i], z[i], faces, w, h, depth, empty_ids, empty_bary)
        c = 0.0
        for r in range(h):
            for col in range(w):
                if depth[r, col] < np.inf:
                    c += gt_dist[r, col]
        cons[i] = c
        v = 0.0
        for p in range(pbar.shape[1]):
            v += max(0.0, zp[i, p] - _bilinear_at(depth, pbar[i, p, 0], pbar[i, p, 1]))
        vis[i] = v
    return cons, vis


def _bary_matrix(faces, face_ids, barys, n_vertices):
    rows = np.repeat(np.arange(len(face_ids)), 3)
    cols = np.asarray(faces)[np.asarray(face_ids)].ravel()
    return sparse.csr_matrix((np.asarray(barys, float).ravel(), (rows, cols)),
                             shape=(len(face_ids), n_vertices))


def loss_total(obs, state, config, model):
    """Weighted total of every available term, as a :class:`LossReport`."""
    return LossContext(obs, model, config).report(state)


def grad_total(obs, state, config, model, free=None, scheme="central"):
    """Finite-difference gradient over ``(q, s, t, theta_1..K, t_1..K)``."""
    ctx = LossContext(obs, model, config)
    return ctx.value_and_grad(state_to_vector(state), free=free, scheme=scheme)[1]


def reg_trans_gradient(params, config=LossConfig()):
    """Analytic gradient of the weighted translation regularizer (flat layout)."""
    k = params.n_parts
    g = np.zeros(7 + 4 * k)
    g[7 + k:] = 2.0 * config.w_reg_trans * np.asarray(params.trans).ravel()
    return g


__all__ = [
    "LossConfig", "Keypoints2D", "Observation", "State", "Model", "LossReport", "LossContext",
    "loss_gcc", "loss_vis", "loss_mask_consistency", "loss_mask_coverage", "loss_kp",
    "reg_trans", "loss_total", "grad_total", "kp_gradient_analytic", "reg_trans_gradient",
    "state_to_vector", "vector_to_state", "parameter_slices", "skin_vertices",
]
