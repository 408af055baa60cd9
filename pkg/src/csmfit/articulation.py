"""Part hierarchy, soft skinning weights and articulated template geometry.

A part ``k`` carries a hinge axis ``a_k`` and a pivot ``c_k``.  Its local
rigid motion is ``x -> R(a_k, theta_k) (x - c_k) + c_k + t_k`` and global
transforms compose root-to-leaf, ``T_k = T_parent o T_k_local``.  Vertices
move by the membership-weighted blend of the global part transforms.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, RigError

logger = logging.getLogger(__name__)


def rotation_matrices(axes, angles):
    """Rodrigues rotation for broadcastable ``axes (..., 3)`` and ``angles (...)``."""
    axes = np.asarray(axes, dtype=float)
    angles = np.asarray(angles, dtype=float)
    c = np.cos(angles)[..., None, None]
    s = np.sin(angles)[..., None, None]
    x, y, z = axes[..., 0], axes[..., 1], axes[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)],
        -2,
    )
    outer = axes[..., :, None] * axes[..., None, :]
    eye = np.eye(3)
    return c * eye + s * k + (1.0 - c) * outer


def wrap_angle(a):
    """Wrap to ``[-pi, pi]``; values already inside are returned unchanged."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(np.abs(a) <= np.pi, a, out)


@dataclass(frozen=True, eq=False)
class PartRig:
    """Kinematic tree plus per-vertex soft memberships.

    ``parent[0]`` must be -1 (the body); every other part points at a part
    that is closer to the root.  ``weights`` has shape (V, K).
    """

    names: tuple
    parent: np.ndarray
    axis: np.ndarray
    pivot: np.ndarray
    weights: np.ndarray
    sigma: float | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        axis = np.asarray(self.axis, dtype=float).reshape(-1, 3)
        pivot = np.asarray(self.pivot, dtype=float).reshape(-1, 3)
        weights = np.asarray(self.weights, dtype=float)
        k = len(parent)
        if len(self.names) != k or len(axis) != k or len(pivot) != k:
            raise RigError("names, parent, axis and pivot must all have one entry per part")
        if weights.ndim != 2 or weights.shape[1] != k:
            raise RigError(f"weights must have shape (V, {k}), got {weights.shape}")
        norms = np.linalg.norm(axis, axis=1)
        if np.any(norms < 1e-12):
            raise RigError(f"part {int(np.argmin(norms))} has a zero rotation axis")
        axis = axis / norms[:, None]
        if np.any(weights < 0) or np.any(weights > 1):
            raise RigError("memberships must lie in [0, 1]")
        sums = weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise RigError(f"memberships of vertex {int(np.argmax(np.abs(sums - 1)))} do not sum to 1")
        order = _topological_order(parent)
        for name, arr in (("parent", parent), ("axis", axis), ("pivot", pivot), ("weights", weights)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "order", order)

    @property
    def n_parts(self):
        return len(self.parent)

    def argmax_part(self):
        return np.argmax(self.weights, axis=1)


def _topological_order(parent):
    k = len(parent)
    if k == 0:
        raise RigError("rig needs at least one part")
    if parent[0] != -1:
        raise RigError("part 0 must be the root (parent -1)")
    if np.any(parent[1:] < 0) or np.any(parent >= k):
        raise RigError("only part 0 may be a root; parent indices must be valid part ids")
    depth = np.full(k, -1)
    depth[0] = 0
    for start in range(k):
        chain = []
        node = start
        while depth[node] < 0:
            if node in chain:
                raise RigError(f"cycle in part hierarchy through part {node}")
            chain.append(node)
            node = parent[node]
        d = depth[node]
        for n in reversed(chain):
            d += 1
            depth[n] = d
    return tuple(int(i) for i in np.argsort(depth, kind="stable"))


@dataclass(frozen=True, eq=False)
class ArticulationParams:
    angle: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        angle = wrap_angle(np.array(self.angle, dtype=float).reshape(-1))
        trans = np.array(self.trans, dtype=float).reshape(-1, 3)
        if len(trans) != len(angle):
            raise ValueError("angle and trans need one entry per part")
        if not (np.all(np.isfinite(angle)) and np.all(np.isfinite(trans))):
            raise ValueError("articulation parameters must be finite")
        angle.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "angle", angle)
        object.__setattr__(self, "trans", trans)

    @classmethod
    def zeros(cls, n_parts):
        return cls(np.zeros(n_parts), np.zeros((n_parts, 3)))

    @property
    def n_parts(self):
        return len(self.angle)


@dataclass(frozen=True, eq=False)
class GlobalTransforms:
    rotation: np.ndarray  # (K, 3, 3)
    translation: np.ndarray  # (K, 3)

    def apply(self, k, x):
        return np.asarray(x, dtype=float) @ self.rotation[k].T + self.translation[k]


def compose_global_batch(rig, angles, trans):
    """Global rotations/translations for a batch of parameter sets.

    ``angles`` is (B, K) and ``trans`` (B, K, 3); returns (B, K, 3, 3) and
    (B, K, 3).
    """
    angles = np.asarray(angles, dtype=float)
    trans = np.asarray(trans, dtype=float)
    r_local = rotation_matrices(rig.axis[None], angles)
    t_local = rig.pivot[None] - np.einsum("bkij,kj->bki", r_local, rig.pivot) + trans
    r_glob = np.empty_like(r_local)
    t_glob = np.empty_like(t_local)
    for k in rig.order:
        p = rig.parent[k]
        if p < 0:
            r_glob[:, k] = r_local[:, k]
            t_glob[:, k] = t_local[:, k]
        else:
            r_glob[:, k] = r_glob[:, p] @ r_local[:, k]
            t_glob[:, k] = np.einsum("bij,bj->bi", r_glob[:, p], t_local[:, k]) + t_glob[:, p]
    return r_glob, t_glob


def compose_global(rig, params):
    """Per-part global transform ``T_k`` for one parameter set."""
    if params.n_parts != rig.n_parts:
        raise RigError(f"rig has {rig.n_parts} parts, params have {params.n_parts}")
    if np.all(params.angle == 0) and np.all(params.trans == 0):
        eye = np.broadcast_to(np.eye(3), (rig.n_parts, 3, 3)).copy()
        return GlobalTransforms(eye, np.zeros((rig.n_parts, 3)))
    r, t = compose_global_batch(rig, params.angle[None], params.trans[None])
    return GlobalTransforms(r[0], t[0])


def skin_batch(vertices, weights, rot, trans):
    """Blend part transforms for (B, K) transform batches -> (B, V, 3).

    Displacements are blended rather than positions so that identity
    transforms reproduce the input exactly.
    """
    vt = np.ascontiguousarray(np.asarray(vertices, dtype=float).T)
    disp = np.matmul(rot, vt) + trans[..., None] - vt  # (B, K, 3, V)
    blended = np.einsum("kv,bkiv->biv", np.ascontiguousarray(weights.T), disp, optimize=True)
    return vertices[None] + blended.transpose(0, 2, 1)


def skin_vertices(mesh, rig, gt):
    if rig.weights.shape[0] != mesh.n_vertices:
        raise RigError("rig weights do not match the mesh vertex count")
    return skin_batch(mesh.vertices, rig.weights, gt.rotation[None], gt.translation[None])[0]


def articulate_points(mesh, rig, gt, face_ids, barys):
    skinned = skin_vertices(mesh, rig, gt)
    tri = skinned[mesh.faces[np.asarray(face_ids)]]
    return np.einsum("nk,nkj->nj", np.asarray(barys, dtype=float), tri)


def articulate_point(mesh, rig, gt, sp):
    """Articulated position of a surface point (face id + barycentrics)."""
    return articulate_points(mesh, rig, gt, [sp.face_id], [sp.bary])[0]


def soften_weights(mesh, hard_labels, sigma, n_parts=None):
    """Soft memberships from a hard per-vertex part labeling.

    The weight of part ``k`` at vertex ``v`` is ``exp(-d^2 / 2 sigma^2)`` with
    ``d`` the distance from ``v`` to the nearest *other* vertex labeled ``k``;
    parts farther than ``3 sigma`` get zero weight, except the vertex's own
    part which always keeps its weight.  Rows are normalized to sum to one.
    """
    labels = np.asarray(hard_labels, dtype=np.int64)
    v = mesh.vertices
    if labels.shape != (len(v),):
        raise RigError("need exactly one hard label per vertex")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = int(labels.max()) + 1 if n_parts is None else n_parts
    if labels.min() < 0 or labels.max() >= k:
        raise RigError("hard labels must lie in [0, n_parts)")
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        raise RigError(f"part {int(np.flatnonzero(counts == 0)[0])} has no labeled vertex")

    d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    dist2 = np.empty((len(v), k))
    for part in range(k):
        dist2[:, part] = d2[:, labels == part].min(axis=1)
    # a singleton part is at distance 0 from its only vertex
    own = np.arange(len(v)), labels
    dist2[own] = np.where(np.isinf(dist2[own]), 0.0, dist2[own])

    w = np.exp(-dist2 / (2.0 * sigma * sigma))
    w[dist2 > (3.0 * sigma) ** 2] = 0.0
    w[own] = np.exp(-dist2[own] / (2.0 * sigma * sigma))
    return w / w.sum(axis=1, keepdims=True)


def default_pivots(vertices, weights):
    """Membership-weighted centroid of the vertices whose argmax part is k."""
    arg = np.argmax(weights, axis=1)
    piv = np.zeros((weights.shape[1], 3))
    for k in range(weights.shape[1]):
        sel = arg == k
        if not np.any(sel):
            sel = weights[:, k] > 0
        w = weights[sel, k]
        piv[k] = (w[:, None] * vertices[sel]).sum(0) / w.sum()
    return piv


def rig_from_labels(mesh, parts, labels, sigma):
    """Build a :class:`PartRig` from part descriptions and hard labels.

    ``parts`` is a list of dicts with ``name``, ``parent`` (index, -1 for the
    root), ``axis`` and optional ``pivot``.
    """
    names = [p["name"] for p in parts]
    parent = [int(-1 if p.get("parent") is None else p["parent"]) for p in parts]
    axis = [p["axis"] for p in parts]
    weights = soften_weights(mesh, labels, sigma, n_parts=len(parts))
    piv = default_pivots(mesh.vertices, weights)
    for k, p in enumerate(parts):
        if p.get("pivot") is not None:
            piv[k] = p["pivot"]
    return PartRig(names, parent, axis, piv, weights, sigma=float(sigma),
                   labels=np.asarray(labels, dtype=np.int64))


def load_rig(path, mesh):
    try:
        data = json.loads(Path(path).read_text())
        parts = data["parts"]
        labels = data["labels"]
        sigma = float(data["sigma"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed rig file ({exc})") from None
    if len(labels) != mesh.n_vertices:
        raise RigError(f"{path}: {len(labels)} labels for {mesh.n_vertices} vertices")
    return rig_from_labels(mesh, parts, labels, sigma)


def rig_to_json(rig):
    parts = []
    for k, name in enumerate(rig.names):
        parts.append({
            "name": name,
            "parent": int(rig.parent[k]),
            "axis": [float(x) for x in rig.axis[k]],
            "pivot": [float(x) for x in rig.pivot[k]],
        })
    labels = rig.labels if rig.labels is not None else rig.argmax_part()
    return {"parts": parts, "labels": [int(x) for x in labels], "sigma": rig.sigma}


def save_rig(rig, path):
    Path(path).write_text(json.dumps(rig_to_json(rig), indent=1) + "\n")


def params_to_json(params):
    return {"angles": [float(a) for a in params.angle],
            "translations": [[float(x) for x in t] for t in params.trans]}


def params_from_json(data):
    try:
        return ArticulationParams(data["angles"], data["translations"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed articulation params ({exc})") from None
