"""Keypoint transfer, PCK metrics and induced part labels.

Pixel positions of keypoints are continuous pixel coordinates: the center of
pixel ``(col, row)`` sits at ``(col, row)``.  A transfer is correct when the
predicted pixel lies within ``0.1 * max(w, h)`` pixels of the annotation in
the target image.  PCK aggregates over individual keypoint transfers (not
per pair).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .articulation import articulate_points, compose_global
from .camera import norm_to_continuous_pixel, project
from .errors import EmptyForegroundError, FormatError
from .mesh_param import phi_batch

PCK_ALPHA = 0.1


def pck_threshold(w, h, alpha=PCK_ALPHA):
    return alpha * max(w, h)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    width: int
    height: int
    names: tuple
    px: np.ndarray  # (N, 2) continuous (col, row)
    visible: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.px, dtype=float).reshape(-1, 2)
        vis = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(px) != len(self.names) or len(vis) != len(self.names):
            raise ValueError("names, px and visible must have equal length")
        inside = ((px[:, 0] >= -0.5) & (px[:, 0] < self.width - 0.5)
                  & (px[:, 1] >= -0.5) & (px[:, 1] < self.height - 0.5))
        if np.any(vis & ~inside):
            raise ValueError("visible keypoints must lie inside the image")
        object.__setattr__(self, "px", px)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "names", tuple(self.names))

    def get(self, name):
        """``(px, visible)`` for a named keypoint, ``(None, False)`` if absent."""
        try:
            i = self.names.index(name)
        except ValueError:
            return None, False
        return self.px[i], bool(self.visible[i])

    def to_json(self):
        return {"width": self.width, "height": self.height,
                "keypoints": [{"name": n, "px": [float(a) for a in p], "visible": bool(v)}
                              for n, p, v in zip(self.names, self.px, self.visible)]}

    @classmethod
    def from_json(cls, data):
        try:
            kps = data["keypoints"]
            return cls(int(data["width"]), int(data["height"]), [k["name"] for k in kps],
                       np.array([k["px"] for k in kps], dtype=float).reshape(-1, 2),
                       [k["visible"] for k in kps])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed keypoint annotation ({exc})") from None


@dataclass
class PckReport:
    entries: list
    n_correct: int
    n_total: int
    threshold: float | None
    skipped_pairs: int = 0
    per_image: list = field(default_factory=list)

    @property
    def percentage(self):
        return 100.0 * self.n_correct / self.n_total if self.n_total else 0.0

    def to_json(self):
        return {"entries": self.entries, "n_correct": self.n_correct, "n_total": self.n_total,
                "percentage": self.percentage, "threshold": self.threshold,
                "skipped_pairs": self.skipped_pairs, "per_image": self.per_image}

    def to_text(self):
        head = ("pair", "keypoint", "pred", "gt", "err_px", "ok")
        rows = [(str(e.get("pair", e.get("image"))), e["name"],
                 "-" if e["pred"] is None else "%g,%g" % tuple(e["pred"]),
                 "%.2f,%.2f" % tuple(e["gt"]),
                 "-" if e["error"] is None else f"{e['error']:.2f}",
                 "yes" if e["correct"] else "no") for e in self.entries]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in [head] + rows]
        thr = "per-image" if self.threshold is None else f"{self.threshold:g} px"
        lines.append(f"PCK {self.percentage:.2f}% ({self.n_correct}/{self.n_total}), "
                     f"threshold {thr}, skipped pairs {self.skipped_pairs}")
        return "\n".join(lines) + "\n"


def _pixel_index(px):
    p = np.floor(np.asarray(px, dtype=float) + 0.5).astype(np.int64)
    return int(p[0]), int(p[1])


def csm_surface_points(csm, mesh, sphere):
    """Foreground pixels ``(col, row)`` (row-major) and their template points."""
    pix = csm.foreground_pixels()
    if len(pix) == 0:
        return pix, np.zeros((0, 3))
    _, _, pts = phi_batch(sphere, mesh, csm.u[pix[:, 1], pix[:, 0]])
    return pix, pts


def _transfer(src_csm, src_px, tgt_pix, tgt_pts, mesh, sphere):
    col, row = _pixel_index(src_px)
    if not (0 <= col < src_csm.width and 0 <= row < src_csm.height) \
            or not src_csm.foreground[row, col]:
        raise EmptyForegroundError(f"source pixel ({col}, {row}) is background")
    if len(tgt_pix) == 0:
        raise EmptyForegroundError("target csm has no foreground")
    _, _, p = phi_batch(sphere, mesh, src_csm.u[row, col][None])
    d = np.sum((tgt_pts - p[0]) ** 2, axis=1)
    # argmin returns the first minimum: ties resolve in row-major order
    return tuple(int(v) for v in tgt_pix[int(np.argmin(d))])


def transfer_keypoint(src_csm, tgt_csm, src_px, mesh, sphere):
    """Target pixel ``(col, row)`` whose surface point is closest to the source's."""
    tgt_pix, tgt_pts = csm_surface_points(tgt_csm, mesh, sphere)
    return _transfer(src_csm, src_px, tgt_pix, tgt_pts, mesh, sphere)


def pck_transfer(pairs, mesh, sphere, alpha=PCK_ALPHA):
    """PCK-Transfer over ``(src_kps, src_csm, tgt_kps, tgt_csm)`` tuples.

    Every keypoint visible in both images is transferred.  A source pixel on
    the background counts as an incorrect transfer; pairs without a shared
    visible keypoint are skipped and counted.
    """
    entries = []
    skipped = 0
    thresholds = set()
    for pi, (src_kps, src_csm, tgt_kps, tgt_csm) in enumerate(pairs):
        shared = [n for n in src_kps.names if src_kps.get(n)[1] and tgt_kps.get(n)[1]]
        if not shared:
            skipped += 1
            continue
        thr = pck_threshold(tgt_csm.width, tgt_csm.height, alpha)
        thresholds.add(thr)
        tgt_pix, tgt_pts = csm_surface_points(tgt_csm, mesh, sphere)
        for name in shared:
            gt = tgt_kps.get(name)[0]
            try:
                pred = _transfer(src_csm, src_kps.get(name)[0], tgt_pix, tgt_pts, mesh, sphere)
            except EmptyForegroundError:
                entries.append({"pair": pi, "name": name, "pred": None, "gt": gt.tolist(),
                                "error": None, "threshold": thr, "correct": False})
                continue
            err = float(np.hypot(pred[0] - gt[0], pred[1] - gt[1]))
            entries.append({"pair": pi, "name": name, "pred": list(pred), "gt": gt.tolist(),
                            "error": err, "threshold": thr, "correct": bool(err <= thr)})
    n_ok = sum(e["correct"] for e in entries)
    thr = thresholds.pop() if len(thresholds) == 1 else None
    return PckReport(entries, n_ok, len(entries), thr, skipped)


def reproject_keypoints(kp3d, names, mesh, rig, cam, params, w, h):
    """Continuous pixel positions of articulated template anchors."""
    missing = [n for n in names if n not in kp3d]
    if missing:
        raise FormatError(f"missing 3D anchor for keypoint(s): {', '.join(missing)}")
    anchors = [kp3d[n] for n in names]
    pts = articulate_points(mesh, rig, compose_global(rig, params),
                            [a.face_id for a in anchors], [a.bary for a in anchors])
    return norm_to_continuous_pixel(project(cam, pts), w, h)


def pck_reprojection(images, kp3d, mesh, rig, alpha=PCK_ALPHA):
    """PCK of reprojected template keypoints for ``(KeypointSet, Camera, params)`` triples."""
    entries, per_image = [], []
    thresholds = set()
    for ii, (kps, cam, params) in enumerate(images):
        names = [n for n, v in zip(kps.names, kps.visible) if v]
        thr = pck_threshold(kps.width, kps.height, alpha)
        thresholds.add(thr)
        pred = reproject_keypoints(kp3d, names, mesh, rig, cam, params, kps.width, kps.height) \
            if names else np.zeros((0, 2))
        ok = 0
        for name, p in zip(names, pred):
            gt = kps.get(name)[0]
            err = float(np.hypot(*(p - gt)))
            entries.append({"image": ii, "name": name, "pred": [float(p[0]), float(p[1])],
                            "gt": gt.tolist(), "error": err, "threshold": thr,
                            "correct": bool(err <= thr)})
            ok += err <= thr
        per_image.append({"image": ii, "n_correct": int(ok), "n_total": len(names),
                          "percentage": 100.0 * ok / len(names) if names else 0.0})
    n_ok = sum(e["correct"] for e in entries)
    thr = thresholds.pop() if len(thresholds) == 1 else None
    return PckReport(entries, n_ok, len(entries), thr, 0, per_image)


def _labels_from_surface(rig, mesh, face_ids, barys):
    alpha = np.einsum("nk,nkp->np", np.asarray(barys, float), rig.weights[mesh.faces[face_ids]])
    return np.argmax(alpha, axis=1)


def induce_part_labels(csm, mesh, rig, sphere):
    """Per-pixel part ids from canonical coordinates; background is -1."""
    out = np.full((csm.height, csm.width), -1, dtype=np.int64)
    fg = csm.foreground
    if fg.any():
        face_ids, barys, _ = phi_batch(sphere, mesh, csm.u[fg])
        out[fg] = _labels_from_surface(rig, mesh, face_ids, barys)
    return out


def raster_part_labels(raster, mesh, rig):
    """Part ids of the rasterized surface points (argmax interpolated membership)."""
    out = np.full((raster.height, raster.width), -1, dtype=np.int64)
    fg = raster.mask
    if fg.any():
        out[fg] = _labels_from_surface(rig, mesh, raster.face_id[fg], raster.bary[fg])
    return out


__all__ = ["KeypointSet", "PckReport", "pck_threshold", "transfer_keypoint", "pck_transfer",
           "pck_reprojection", "reproject_keypoints", "induce_part_labels", "raster_part_labels",
           "csm_surface_points"]
