"""Procedural template meshes and example rigs.

The animal templates are star-shaped radial deformations of a level-3
icosphere (642 vertices, 1280 faces), so centroid projection yields a valid
spherical embedding.  Model "up" is -y: an identity camera renders them
upright.  Parts are Gaussian bumps on an ellipsoidal body; a vertex is
hard-labeled with the bump that lifts it most (or the body).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .articulation import rig_from_labels
from .mesh_param import SurfacePoint, TemplateMesh, closest_surface_point


def octahedron(scale=1.0):
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                  [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    return TemplateMesh(v * scale, f)


def _icosahedron():
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def icosphere_arrays(level=3):
    v, f = _icosahedron()
    verts = [tuple(p) for p in v]
    for _ in range(level):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = (np.asarray(verts[i]) + np.asarray(verts[j])) / 2.0
                verts.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = np.array(new_faces)
    return np.array(verts), f


def icosphere(level=3, radius=1.0):
    v, f = icosphere_arrays(level)
    return TemplateMesh(v * radius, f)


def ellipsoid(axes=(1.0, 0.6, 0.4), level=3):
    v, f = icosphere_arrays(level)
    return TemplateMesh(v * np.asarray(axes, float), f)


def box_mesh(n=(8, 2, 2), size=(4.0, 1.0, 1.0)):
    """Closed box surface with an ``n``-cell grid on each face pair."""
    n = np.asarray(n)
    size = np.asarray(size, float)
    verts = {}
    faces = []

    def vid(p):
        key = tuple(int(x) for x in p)
        if key not in verts:
            verts[key] = len(verts)
        return verts[key]

    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for side in (0, n[axis]):
            for i in range(n[u_ax]):
                for j in range(n[v_ax]):
                    quad = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis] = side
                        p[u_ax] = i + du
                        p[v_ax] = j + dv
                        quad.append(vid(p))
                    a, b, c, d = quad
                    faces += [[a, b, c], [a, c, d]]
    grid = np.array(sorted(verts, key=verts.get), float)
    v = (grid / n - 0.5) * size
    f = np.array(faces)
    # the box is convex and centered: orient every face away from the origin
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    centers = (a + b + c) / 3
    normals = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", normals, centers) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    return TemplateMesh(v, f)


@dataclass(frozen=True)
class Bump:
    name: str
    direction: tuple
    amplitude: float
    width: float
    parent: str
    axis: tuple


@dataclass(frozen=True)
class CreatureSpec:
    body_axes: tuple
    bumps: tuple
    body_axis: tuple
    keypoints: dict
    sigma: float = 0.12


def _n(v):
    v = np.asarray(v, float)
    return tuple(v / np.linalg.norm(v))


_LEG = dict(amplitude=0.55, width=0.025, parent="torso", axis=(0.0, 0.0, 1.0))

CREATURES = {
    "quadruped": CreatureSpec(
        body_axes=(0.9, 0.4, 0.38),
        bumps=(
            Bump("front_left_leg", _n((0.55, 0.8, 0.38)), **_LEG),
            Bump("front_right_leg", _n((0.55, 0.8, -0.38)), **_LEG),
            Bump("back_left_leg", _n((-0.55, 0.8, 0.38)), **_LEG),
            Bump("back_right_leg", _n((-0.55, 0.8, -0.38)), **_LEG),
            Bump("neck", _n((0.85, -0.45, 0.0)), 0.3, 0.03, "torso", (0.0, 0.0, 1.0)),
            Bump("head", _n((0.6, -0.8, 0.0)), 0.5, 0.025, "neck", (0.0, 0.0, 1.0)),
        ),
        body_axis=(0.0, 1.0, 0.0),
        keypoints={
            "nose": (0.6, -0.8, 0.0), "withers": (0.2, -1.0, 0.0),
            "rump": (-1.0, -0.3, 0.0), "belly": (0.0, 1.0, 0.0),
            "front_left_foot": (0.55, 0.8, 0.38), "front_right_foot": (0.55, 0.8, -0.38),
            "back_left_foot": (-0.55, 0.8, 0.38), "back_right_foot": (-0.55, 0.8, -0.38),
            "left_flank": (0.0, 0.0, 1.0), "right_flank": (0.0, 0.0, -1.0),
            "chest": (1.0, 0.1, 0.0), "neck_top": (0.85, -0.45, 0.0),
        },
    ),
    "bird": CreatureSpec(
        body_axes=(0.75, 0.5, 0.45),
        bumps=(
            Bump("head", _n((0.6, -0.8, 0.0)), 0.45, 0.04, "torso", (0.0, 0.0, 1.0)),
            Bump("tail", _n((-1.0, -0.15, 0.0)), 0.5, 0.03, "torso", (0.0, 0.0, 1.0)),
        ),
        body_axis=(0.0, 1.0, 0.0),
        keypoints={
            "beak": (0.6, -0.8, 0.0), "crown": (0.4, -0.9, 0.0), "tail_tip": (-1.0, -0.15, 0.0),
            "breast": (1.0, 0.3, 0.0), "belly": (0.0, 1.0, 0.0), "back": (-0.2, -1.0, 0.0),
            "left_wing": (0.0, -0.2, 1.0), "right_wing": (0.0, -0.2, -1.0),
        },
    ),
}
CREATURES["elephant"] = CreatureSpec(
    body_axes=(0.9, 0.45, 0.42),
    bumps=CREATURES["quadruped"].bumps + (
        Bump("trunk_upper", _n((0.9, 0.1, 0.0)), 0.35, 0.02, "head", (0.0, 0.0, 1.0)),
        Bump("trunk_lower", _n((0.8, 0.45, 0.0)), 0.35, 0.02, "trunk_upper", (0.0, 0.0, 1.0)),
    ),
    body_axis=(0.0, 1.0, 0.0),
    keypoints=dict(CREATURES["quadruped"].keypoints, trunk_tip=(0.8, 0.45, 0.0)),
)


def _ellipsoid_radius(d, axes):
    return 1.0 / np.sqrt(np.sum((d / np.asarray(axes)) ** 2, axis=-1))


def _bump_heights(d, bumps):
    return np.stack([b.amplitude * np.exp((d @ np.asarray(b.direction) - 1.0) / b.width)
                     for b in bumps], axis=1)


def _radius(d, spec):
    return _ellipsoid_radius(d, spec.body_axes) + _bump_heights(d, spec.bumps).sum(axis=1)


@dataclass(frozen=True, eq=False)
class Template:
    """A mesh with its rig and named keypoint anchors on the surface."""

    mesh: TemplateMesh
    rig: object
    keypoints: dict  # name -> SurfacePoint
    sphere_directions: np.ndarray


def build_template(kind="quadruped", level=3):
    """Procedural template of the given kind ("quadruped", "bird", "elephant")."""
    spec = CREATURES[kind]
    d, f = icosphere_arrays(level)
    verts = d * _radius(d, spec)[:, None]
    offset = verts.mean(axis=0)
    mesh = TemplateMesh(verts - offset, f)

    heights = _bump_heights(d, spec.bumps)
    labels = np.where(heights.max(axis=1) > 0.15, heights.argmax(axis=1) + 1, 0)
    names = ["torso"] + [b.name for b in spec.bumps]
    parts = [{"name": "torso", "parent": -1, "axis": list(spec.body_axis),
              "pivot": [0.0, 0.0, 0.0]}]
    for b in spec.bumps:
        base = np.asarray(b.direction) * _ellipsoid_radius(np.asarray(b.direction), spec.body_axes)
        parts.append({"name": b.name, "parent": names.index(b.parent), "axis": list(b.axis),
                      "pivot": list(base * 0.9 - offset)})
    rig = rig_from_labels(mesh, parts, labels, spec.sigma)

    keypoints = {}
    for name, direction in spec.keypoints.items():
        u = np.asarray(_n(direction))
        keypoints[name] = closest_surface_point(mesh, u * _radius(u[None], spec)[0] - offset)
    return Template(mesh, rig, keypoints, d)


def example_files(kind="quadruped"):
    """Paths of the shipped example files for ``kind``: obj, rig, anchors, sphere.

    These are the output of ``csmfit template --sphere-steps 200``.
    """
    if kind not in CREATURES:
        raise ValueError(f"unknown template kind {kind!r}; choose from {sorted(CREATURES)}")
    root = resources.files("csmfit") / "data"
    return {"mesh": root / f"{kind}.obj", "rig": root / f"{kind}_rig.json",
            "anchors": root / f"{kind}_anchors.json", "sphere": root / f"{kind}.sphere.txt"}


def keypoints_to_json(keypoints):
    return [{"name": n, "face": sp.face_id, "bary": list(sp.bary)} for n, sp in keypoints.items()]


def keypoints_from_json(items):
    return {it["name"]: SurfacePoint(int(it["face"]), tuple(it["bary"])) for it in items}
