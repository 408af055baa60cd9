"""Template meshes and the unit-square to surface parametrization.

The map from ``u in [0,1)^2`` to the template surface is a composition of
two pieces: an equal-area latitude/longitude map from the square onto the
unit sphere, and a face-level bijection between a spherical embedding of the
template (same connectivity) and the template itself.  Points are carried
across the bijection by face id and barycentric coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InvertedFaceError, MeshParseError, TopologyError

logger = logging.getLogger(__name__)

REFERENCE_VERTEX_COUNT = 642
REFERENCE_FACE_COUNT = 1280
SPHERE_HEADER = "ACSM-SPHERE 1"

# half-space slack for the face lookup; shared edges resolve to the lowest id
_CONE_TOL = 1e-12


def triangle_areas(vertices, faces):
    """Flat area of every face."""
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.linalg.norm(n, axis=1)


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    """Closed genus-0 triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (V, 3)
    faces : array_like, shape (F, 3)
        0-based vertex indices, consistently oriented.
    strict_size : bool
        Also require the reference resolution of 642 vertices / 1280 faces.
    """

    vertices: np.ndarray
    faces: np.ndarray
    strict_size: bool = False

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshParseError(f"vertices must have shape (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshParseError(f"faces must have shape (F, 3), got {f.shape}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        self._validate()

    def _validate(self):
        v, f = self.vertices, self.faces
        nv = len(v)
        if not np.all(np.isfinite(v)):
            raise MeshParseError("non-finite vertex coordinate")
        if f.size and (f.min() < 0 or f.max() >= nv):
            bad = int(np.flatnonzero((f < 0).any(1) | (f >= nv).any(1))[0])
            raise TopologyError(f"face {bad} references a vertex outside [0, {nv})")
        areas = triangle_areas(v, f)
        if np.any(areas <= 1e-12):
            bad = np.flatnonzero(areas <= 1e-12)
            raise TopologyError(f"degenerate faces (area <= 1e-12): {bad[:10].tolist()}")

        # every directed edge once, every undirected edge exactly twice
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        d_keys = directed[:, 0] * nv + directed[:, 1]
        uniq, counts = np.unique(d_keys, return_counts=True)
        if np.any(counts > 1):
            k = int(uniq[counts > 1][0])
            raise TopologyError(
                f"non-manifold or inconsistently oriented edge ({k // nv}, {k % nv})"
            )
        reverse = directed[:, 1] * nv + directed[:, 0]
        if not np.all(np.isin(reverse, uniq)):
            k = int(d_keys[~np.isin(reverse, uniq)][0])
            raise TopologyError(f"open boundary at edge ({k // nv}, {k % nv})")
        used = np.unique(f)
        if len(used) != nv:
            missing = np.setdiff1d(np.arange(nv), used)
            raise TopologyError(f"unreferenced vertices: {missing[:10].tolist()}")

        n_edges = len(directed) // 2
        chi = nv - n_edges + len(f)
        if chi != 2:
            raise TopologyError(f"Euler characteristic {chi} != 2 (not genus-0)")
        if self.strict_size and (nv, len(f)) != (REFERENCE_VERTEX_COUNT, REFERENCE_FACE_COUNT):
            raise TopologyError(
                f"strict size: expected {REFERENCE_VERTEX_COUNT} vertices and "
                f"{REFERENCE_FACE_COUNT} faces, got {nv} and {len(f)}"
            )

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def euler_characteristic(self):
        return self.n_vertices - 3 * self.n_faces // 2 + self.n_faces

    @cached_property
    def face_areas(self):
        return triangle_areas(self.vertices, self.faces)

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def load_obj(path, strict_size=False):
    """Read an ASCII OBJ holding ``v`` and triangular ``f`` records."""
    verts, faces = [], []
    path = Path(path)
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    xyz = [float(t) for t in parts[1:4]]
                except ValueError:
                    raise MeshParseError(f"{path}:{lineno}: malformed vertex record") from None
                if len(xyz) != 3:
                    raise MeshParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append(xyz)
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshParseError(
                        f"{path}:{lineno}: non-triangle face with {len(parts) - 1} vertices"
                    )
                try:
                    idx = [int(t.split("/")[0]) for t in parts[1:]]
                except ValueError:
                    raise MeshParseError(f"{path}:{lineno}: malformed face record") from None
                if min(idx) < 1:
                    raise MeshParseError(f"{path}:{lineno}: face indices must be 1-based positive")
                faces.append([i - 1 for i in idx])
    if not verts or not faces:
        raise MeshParseError(f"{path}: no vertices or faces found")
    return TemplateMesh(np.array(verts), np.array(faces), strict_size=strict_size)


def write_obj(mesh, path):
    with Path(path).open("w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.faces + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


@dataclass(frozen=True)
class SurfacePoint:
    face_id: int
    bary: tuple

    def __post_init__(self):
        b = np.asarray(self.bary, dtype=float)
        if b.shape != (3,) or np.any(b < 0) or abs(b.sum() - 1.0) > 1e-9:
            raise ValueError(f"barycentrics must lie in the simplex, got {self.bary}")
        object.__setattr__(self, "bary", tuple(float(x) for x in b))


@dataclass(frozen=True, eq=False)
class SphereParam:
    """Unit-sphere embedding with the template's connectivity.

    ``meta`` holds provenance (optimizer, objective trace) and does not take
    part in any geometric query.
    """

    sphere_vertices: np.ndarray
    faces: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.array(self.sphere_vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        norms = np.linalg.norm(s, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("sphere vertices must be unit length (tolerance 1e-9)")
        s.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "sphere_vertices", s)
        object.__setattr__(self, "faces", f)

    @cached_property
    def orientation(self):
        """+1 if faces wind counter-clockwise seen from outside, else -1."""
        return 1.0 if _signed_volumes(self.sphere_vertices, self.faces).sum() >= 0 else -1.0

    @cached_property
    def _edge_normals(self):
        s, f = self.sphere_vertices, self.faces
        a, b, c = s[f[:, 0]], s[f[:, 1]], s[f[:, 2]]
        n = np.stack([np.cross(a, b), np.cross(b, c), np.cross(c, a)], axis=1)
        return n * self.orientation  # (F, 3 edges, 3)

    def inverted_faces(self):
        vol = _signed_volumes(self.sphere_vertices, self.faces) * self.orientation
        return np.flatnonzero(vol <= 0)

    def locate(self, directions):
        """Face id and barycentrics of each direction's ray from the origin.

        Brute force over all faces; a direction on a shared edge or vertex
        goes to the lowest face index.
        """
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        f = self.faces
        s = self.sphere_vertices
        en = self._edge_normals.reshape(-1, 3)  # (3F, 3)
        n_faces = len(f)
        face_ids = np.empty(len(d), dtype=np.int64)
        chunk = max(1, 2_000_000 // (3 * n_faces))
        for lo in range(0, len(d), chunk):
            dd = d[lo:lo + chunk]
            side = (dd @ en.T).reshape(len(dd), n_faces, 3)
            inside = np.all(side >= -_CONE_TOL, axis=2)
            hit = inside.any(axis=1)
            if not np.all(hit):
                bad = lo + int(np.flatnonzero(~hit)[0])
                raise TopologyError(
                    f"direction {d[bad].tolist()} hits no face; sphere embedding is corrupted"
                )
            face_ids[lo:lo + chunk] = np.argmax(inside, axis=1)
        a, b, c = s[f[face_ids, 0]], s[f[face_ids, 1]], s[f[face_ids, 2]]
        n = np.cross(b - a, c - a)
        t = np.einsum("ij,ij->i", n, a) / np.einsum("ij,ij->i", n, d)
        p = d * t[:, None]
        nn = np.einsum("ij,ij->i", n, n)
        w0 = np.einsum("ij,ij->i", n, np.cross(b - p, c - p)) / nn
        w1 = np.einsum("ij,ij->i", n, np.cross(c - p, a - p)) / nn
        w2 = np.einsum("ij,ij->i", n, np.cross(a - p, b - p)) / nn
        bary = np.clip(np.stack([w0, w1, w2], axis=1), 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return face_ids, bary


def _signed_volumes(vertices, faces):
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return np.einsum("ij,ij->i", a, np.cross(b, c))


def spherical_embed_init(mesh):
    """Project every vertex radially from the centroid onto the unit sphere."""
    centered = mesh.vertices - mesh.vertices.mean(axis=0)
    norms = np.linalg.norm(centered, axis=1)
    if np.any(norms < 1e-12):
        raise TopologyError(
            f"vertex {int(np.argmin(norms))} coincides with the centroid"
        )
    param = SphereParam(centered / norms[:, None], mesh.faces, meta={"init": "centroid"})
    flipped = param.inverted_faces()
    if len(flipped):
        logger.warning(
            "centroid projection inverts %d faces (first: %s); template is not star-shaped",
            len(flipped), flipped[:10].tolist(),
        )
    return param


def log_area_objective(template_areas, sphere_vertices, faces):
    """Sum over faces of squared log-area mismatch after matching total area."""
    sa = triangle_areas(sphere_vertices, faces)
    target = template_areas * (sa.sum() / template_areas.sum())
    return float(np.sum((np.log(sa) - np.log(target)) ** 2))


def _objective_and_grad(template_areas, x, faces):
    a, b, c = x[faces[:, 0]], x[faces[:, 1]], x[faces[:, 2]]
    n = np.cross(b - a, c - a)
    two_area = np.linalg.norm(n, axis=1)
    area = 0.5 * two_area
    total = area.sum()
    r = np.log(area) - np.log(template_areas) - np.log(total) + np.log(template_areas.sum())
    obj = float(np.sum(r * r))

    nhat = n / two_area[:, None]
    # d area / d vertex, per corner
    ga = 0.5 * np.cross(nhat, c - b)
    gb = 0.5 * np.cross(nhat, a - c)
    gc = 0.5 * np.cross(nhat, b - a)
    coef = 2.0 * r / area - 2.0 * r.sum() / total
    grad = np.zeros_like(x)
    np.add.at(grad, faces[:, 0], coef[:, None] * ga)
    np.add.at(grad, faces[:, 1], coef[:, None] * gb)
    np.add.at(grad, faces[:, 2], coef[:, None] * gc)
    return obj, grad


def _project(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def equalize_areas(mesh, init, steps=500, lr=1e-2, optimizer="gd", checkpoint_every=10):
    """Deform the sphere embedding so face areas match the template's.

    Minimizes the squared log-area mismatch with vertices re-projected to the
    unit sphere after each step.  ``optimizer="gd"`` is gradient descent with
    step halving on any increase or face inversion, so every step is
    non-increasing.  ``optimizer="adam"`` takes free Adam steps but rolls back
    to the last checkpoint (halving the rate) whenever a checkpoint objective
    would increase.

    Returns a new :class:`SphereParam` whose ``meta`` records the optimizer,
    the step count and the objective at every checkpoint.
    """
    if steps < 0 or lr <= 0:
        raise ValueError("steps must be >= 0 and lr > 0")
    if optimizer not in ("gd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if steps == 0:
        return init
    flipped = init.inverted_faces()
    if len(flipped):
        raise InvertedFaceError(
            f"initial embedding has {len(flipped)} inverted faces, first {int(flipped[0])}",
            flipped,
        )
    areas = mesh.face_areas
    if np.any(areas <= 0):
        raise TopologyError("template has non-positive face areas")
    faces = mesh.faces
    orient = init.orientation

    def valid(x):
        return np.all(_signed_volumes(x, faces) * orient > 0)

    x = np.array(init.sphere_vertices)
    obj, grad = _objective_and_grad(areas, x, faces)
    trace = [obj]
    rate = lr
    if optimizer == "gd":
        for it in range(1, steps + 1):
            while True:
                cand = _project(x - rate * grad)
                cobj, cgrad = _objective_and_grad(areas, cand, faces)
                if np.isfinite(cobj) and cobj <= obj and valid(cand):
                    break
                rate *= 0.5
                if rate < 1e-12:
                    cand, cobj, cgrad = x, obj, grad
                    break
            x, obj, grad = cand, cobj, cgrad
            if not np.isfinite(obj):
                raise FloatingPointError("NaN in area-equalization objective")
            if it % checkpoint_every == 0 or it == steps:
                trace.append(obj)
    else:
        m = np.zeros_like(x)
        v = np.zeros_like(x)
        b1, b2, eps = 0.9, 0.999, 1e-8
        ckpt = (x.copy(), m.copy(), v.copy(), obj)
        t = 0
        it = 0
        while it < steps:
            it += 1
            t += 1
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            step = rate * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            x = _project(x - step)
            obj, grad = _objective_and_grad(areas, x, faces)
            if it % checkpoint_every == 0 or it == steps:
                if not np.isfinite(obj) or obj > ckpt[3] or not valid(x):
                    x, m, v, obj = (a.copy() if isinstance(a, np.ndarray) else a for a in ckpt)
                    obj, grad = _objective_and_grad(areas, x, faces)
                    rate *= 0.5
                    if rate < 1e-12:
                        break
                ckpt = (x.copy(), m.copy(), v.copy(), obj)
                trace.append(obj)

    result = SphereParam(
        x, faces,
        meta={"init": init.meta.get("init", "given"), "optimizer": optimizer,
              "steps": steps, "lr": lr, "objective_trace": trace},
    )
    flipped = result.inverted_faces()
    if len(flipped):
        raise InvertedFaceError(
            f"area equalization inverted face {int(flipped[0])}", flipped
        )
    return result


def square_to_sphere(u):
    """Equal-area map from ``[0,1)^2`` to the unit sphere."""
    u = np.asarray(u, dtype=float)
    az = 2.0 * np.pi * u[..., 0]
    z = 1.0 - 2.0 * u[..., 1]
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([r * np.cos(az), r * np.sin(az), z], axis=-1)


def sphere_to_square(p):
    """Inverse of :func:`square_to_sphere` for (not necessarily unit) points."""
    p = np.asarray(p, dtype=float)
    p = p / np.linalg.norm(p, axis=-1, keepdims=True)
    u1 = np.mod(np.arctan2(p[..., 1], p[..., 0]) / (2.0 * np.pi), 1.0)
    u1 = np.where(u1 >= 1.0, 0.0, u1)
    u2 = np.minimum((1.0 - p[..., 2]) / 2.0, np.nextafter(1.0, 0.0))
    u2 = np.maximum(u2, 0.0)
    return np.stack([u1, u2], axis=-1)


def check_coords(u):
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[-1] != 2 or np.any(u < 0) or np.any(u >= 1) or not np.all(np.isfinite(u)):
        raise ValueError("surface coordinates must lie in [0, 1)^2")
    return u


def phi_batch(param, mesh, u):
    """Vectorized :func:`phi`; returns ``(face_ids, barys, points)``."""
    u = check_coords(u)
    face_ids, bary = param.locate(square_to_sphere(u))
    tri = mesh.vertices[mesh.faces[face_ids]]  # (N, 3, 3)
    points = np.einsum("nk,nkj->nj", bary, tri)
    return face_ids, bary, points


def phi(param, mesh, u):
    """Map one coordinate ``u`` to ``(SurfacePoint, 3D template point)``."""
    face_ids, bary, points = phi_batch(param, mesh, [u])
    return SurfacePoint(int(face_ids[0]), tuple(bary[0])), points[0]


def inverse_param_batch(param, face_ids, barys):
    tri = param.sphere_vertices[param.faces[np.asarray(face_ids)]]
    return sphere_to_square(np.einsum("nk,nkj->nj", np.asarray(barys, dtype=float), tri))


def inverse_param(param, sp):
    """Surface coordinate ``u`` of a surface point."""
    return tuple(inverse_param_batch(param, [sp.face_id], [sp.bary])[0])


def surface_points_to_3d(vertices, faces, face_ids, barys):
    """Barycentric interpolation of (possibly articulated) vertex positions."""
    tri = np.asarray(vertices)[np.asarray(faces)[np.asarray(face_ids)]]
    return np.einsum("nk,nkj->nj", np.asarray(barys, dtype=float), tri)


def closest_surface_point(mesh, x):
    """Nearest point on the mesh to ``x`` as a :class:`SurfacePoint`."""
    x = np.asarray(x, dtype=float)
    tri = mesh.vertices[mesh.faces]
    bary = _closest_bary(tri, x)
    pts = np.einsum("fk,fkj->fj", bary, tri)
    d2 = np.sum((pts - x) ** 2, axis=1)
    best = int(np.argmin(d2))
    b = np.clip(bary[best], 0.0, None)
    return SurfacePoint(best, tuple(b / b.sum()))


def _closest_bary(tri, p):
    # closest point on each triangle, region-by-region (Ericson, RTCD 5.1.5)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty((len(tri), 3))
    done = np.zeros(len(tri), dtype=bool)

    def put(mask, w):
        m = mask & ~done
        out[m] = w[m]
        done[m] = True

    one = np.ones(len(tri))
    zero = np.zeros(len(tri))
    put((d1 <= 0) & (d2 <= 0), np.stack([one, zero, zero], 1))
    put((d3 >= 0) & (d4 <= d3), np.stack([zero, one, zero], 1))
    put((d6 >= 0) & (d5 <= d6), np.stack([zero, zero, one], 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, zero], 1))
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, zero, w], 1))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([zero, 1 - w, w], 1))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(tri), dtype=bool), np.stack([1 - v - w, v, w], 1))
    return out


def save_sphere(param, path):
    lines = [SPHERE_HEADER] + [f"{x!r} {y!r} {z!r}" for x, y, z in param.sphere_vertices.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_sphere(path, mesh):
    from .errors import FormatError

    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != SPHERE_HEADER:
        raise FormatError(f"{path}: missing '{SPHERE_HEADER}' header")
    try:
        pts = np.array([[float(t) for t in ln.split()] for ln in lines[1:] if ln.strip()])
    except ValueError:
        raise FormatError(f"{path}: malformed coordinate line") from None
    if pts.shape != (mesh.n_vertices, 3):
        raise FormatError(
            f"{path}: expected {mesh.n_vertices} vertices, found {pts.shape[0]}"
        )
    return SphereParam(pts, mesh.faces, meta={"init": "file"})
