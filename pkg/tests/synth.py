"""Synthetic observations rendered from known camera and articulation."""

from dataclasses import dataclass

import numpy as np

from csmfit.articulation import ArticulationParams, articulate_points, compose_global
from csmfit.camera import Camera, azimuth_elevation_quat, norm_to_continuous_pixel, project
from csmfit.evaluation import KeypointSet
from csmfit.losses import Keypoints2D, Observation
from csmfit.raster import csm_from_raster, render


@dataclass
class Scene:
    obs: Observation
    camera: Camera
    params: ArticulationParams
    raster: object
    kpset: KeypointSet


def random_pose(rng, n_parts, max_angle=0.3):
    params = ArticulationParams(np.r_[0.0, rng.uniform(-max_angle, max_angle, n_parts - 1)],
                                np.zeros((n_parts, 3)))
    cam = Camera(rng.uniform(0.7, 0.9),
                 azimuth_elevation_quat(rng.uniform(0, 2 * np.pi), rng.uniform(-0.3, 0.3)),
                 rng.uniform(-0.1, 0.1, 2))
    return cam, params


def keypoints_for(template, cam, params, raster, occlusion_tol=1e-3):
    """Projected anchors; a keypoint is visible when its pixel is foreground and
    the anchor is not occluded there."""
    w, h = raster.width, raster.height
    names = list(template.keypoints)
    anchors = [template.keypoints[n] for n in names]
    pts = articulate_points(template.mesh, template.rig, compose_global(template.rig, params),
                            [a.face_id for a in anchors], [a.bary for a in anchors])
    x = project(cam, pts)
    px = norm_to_continuous_pixel(x, w, h)
    zc = (pts @ cam.rotation.T)[:, 2]
    vis = np.zeros(len(names), dtype=bool)
    for i, (c, r) in enumerate(np.floor(px + 0.5).astype(int)):
        if 0 <= c < w and 0 <= r < h and raster.mask[r, c]:
            vis[i] = zc[i] <= raster.depth[r, c] + occlusion_tol
    return names, anchors, x, px, vis


def make_observation(template, sphere, rng, size=128, cam=None, params=None,
                     all_keypoints_visible=True):
    if cam is None or params is None:
        cam, params = random_pose(rng, template.rig.n_parts)
    raster, _ = render(template.mesh, template.rig, params, cam, size, size)
    csm = csm_from_raster(raster, sphere)
    names, anchors, x, px, vis = keypoints_for(template, cam, params, raster)
    kp_vis = np.all(np.abs(x) <= 1, axis=1) if all_keypoints_visible else vis
    kp = Keypoints2D.from_anchors(names, x, anchors, kp_vis)
    return Scene(Observation(raster.mask, kp, csm), cam, params, raster,
                 KeypointSet(size, size, names, px, vis))


def transfer_pairs(template, sphere, n_pairs, size=128, seed=0, max_angle=0.3):
    """``n_pairs`` (src_kps, src_csm, tgt_kps, tgt_csm) from independent random renders."""
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n_pairs + 1):
        cam, params = random_pose(rng, template.rig.n_parts, max_angle)
        scenes.append(make_observation(template, sphere, rng, size, cam, params))
    return [(a.kpset, a.obs.csm, b.kpset, b.obs.csm) for a, b in zip(scenes, scenes[1:])]
