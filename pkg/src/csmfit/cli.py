"""Command-line front end: ``csmfit <command> ...``.

Every command writes a run manifest next to its main output recording the
command line, resolved configuration, SHA-256 of inputs and outputs, seed,
thread count, tool version and wall-clock time.  ``csmfit replay`` re-runs a
manifest and checks that every output is reproduced byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
import warnings
from pathlib import Path

FORMATS = """\
file formats (little-endian, row-major, rows top to bottom):
  mesh .obj         'v x y z' and 'f i j k' lines (1-based, triangles only,
                    optional /vt/vn suffixes ignored); closed genus-0 surface
  sphere .txt       line 1 'ACSM-SPHERE 1', then one 'x y z' unit vector per
                    mesh vertex, in vertex order
  rig .json         {"parts": [{"name", "parent", "axis": [3], "pivot": [3]}],
                     "labels": [part id per vertex], "sigma": float}; part 0
                    is the root (parent -1)
  anchors .json     [{"name", "face", "bary": [3]}]  3D keypoints on the template
  pose .json        {"camera": {"scale", "quat": [w,x,y,z], "trans": [2]},
                     "articulation": {"angles": [K], "translations": [[3]*K]}}
  depth .grid       ASCII header 'ACSM-GRID 1 <w> <h>\\n', then w*h float32
                    (4 bytes each); +inf on background
  csm .bin          ASCII header 'ACSM-CSM 1 <w> <h>\\n', then w*h pairs of
                    float32 (u1, u2) in [0,1), 8 bytes per pixel; background
                    pixels hold two NaNs
  mask .png         8-bit grayscale, value >= 128 is foreground
  labels .png       8-bit grayscale part id, 255 on background
  kp .json (fit)    [{"name", "x": [2] normalized, "X_face", "X_bary": [3],
                     "visible"}]
  kpset .json       {"width", "height", "keypoints": [{"name", "px": [2],
                     "visible"}]}; px in pixels, pixel centers at integers
  pairs .json       [{"src_csm", "src_kp", "tgt_csm", "tgt_kp"}] paths
  images .json      [{"kp", "fit"}] paths to kpset and fit result files

normalized image coordinates span [-1,1]^2, x right, y down; the camera
looks along +z.

exit codes: 0 ok, 1 other error, 2 usage, 3 malformed input file,
  4 invalid topology or rig, 5 fit diverged, 6 empty foreground
"""


def _parse_size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 128x128, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


class Run:
    """Collects input/output paths and writes the manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = {}
        self.outputs = []
        self.config = {}
        self.t0 = time.perf_counter()

    def input(self, path):
        if path is not None:
            self.inputs[str(path)] = None
        return path

    def output(self, path):
        self.outputs.append(str(path))
        return path

    def write_manifest(self, path):
        from . import __version__
        from .io import sha256_file, write_json

        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "config": self.config,
            "inputs": {p: sha256_file(p) for p in self.inputs},
            "outputs": {p: sha256_file(p) for p in self.outputs},
            "seed": self.config.get("seed", 0),
            "threads": self.args.threads,
            "version": __version__,
            "wall_clock": time.perf_counter() - self.t0,
        }
        write_json(path, manifest)
        return manifest


def _load_mesh(path):
    from .mesh_param import load_obj
    return load_obj(path)


def _load_model(run, a):
    from .articulation import load_rig
    from .mesh_param import load_sphere

    mesh = _load_mesh(run.input(a.mesh))
    rig = load_rig(run.input(a.rig), mesh) if getattr(a, "rig", None) else None
    sphere = load_sphere(run.input(a.sphere), mesh) if getattr(a, "sphere", None) else None
    return mesh, rig, sphere


def cmd_template(a, run):
    from . import templates
    from .articulation import save_rig
    from .io import write_json
    from .mesh_param import equalize_areas, save_sphere, spherical_embed_init, write_obj

    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = templates.build_template(a.kind)
    write_obj(t.mesh, run.output(out / f"{a.kind}.obj"))
    save_rig(t.rig, run.output(out / f"{a.kind}_rig.json"))
    write_json(run.output(out / f"{a.kind}_anchors.json"), templates.keypoints_to_json(t.keypoints))
    if a.sphere_steps is not None:
        sphere = equalize_areas(t.mesh, spherical_embed_init(t.mesh), steps=a.sphere_steps)
        save_sphere(sphere, run.output(out / f"{a.kind}.sphere.txt"))
    run.config = {"kind": a.kind, "sphere_steps": a.sphere_steps}
    print(f"wrote {a.kind} template to {out}")
    return out / f"{a.kind}.manifest.json"


def cmd_param(a, run):
    from .mesh_param import (equalize_areas, log_area_objective, save_sphere,
                             spherical_embed_init)

    mesh = _load_mesh(run.input(a.mesh))
    init = spherical_embed_init(mesh)
    f0 = log_area_objective(mesh.face_areas, init.sphere_vertices, mesh.faces)
    sphere = equalize_areas(mesh, init, steps=a.steps, lr=a.lr, optimizer=a.optimizer)
    f1 = log_area_objective(mesh.face_areas, sphere.sphere_vertices, mesh.faces)
    save_sphere(sphere, run.output(a.out))
    run.config = {"steps": a.steps, "lr": a.lr, "optimizer": a.optimizer}
    print(f"initial objective {f0:.6g}")
    print(f"final objective   {f1:.6g}")
    return Path(str(a.out) + ".manifest.json")


def _load_pose(path, n_parts):
    from .articulation import ArticulationParams, params_from_json
    from .camera import Camera
    from .errors import FormatError
    from .io import read_json

    data = read_json(path)
    if "camera" not in data:
        raise FormatError(f"{path}: pose file needs a 'camera' entry")
    cam = Camera.from_json(data["camera"])
    params = params_from_json(data["articulation"]) if "articulation" in data \
        else ArticulationParams.zeros(n_parts)
    if params.n_parts != n_parts:
        raise FormatError(f"{path}: pose has {params.n_parts} parts, rig has {n_parts}")
    return cam, params


def cmd_render(a, run):
    import numpy as np

    from .camera import norm_to_continuous_pixel, project
    from .evaluation import KeypointSet, raster_part_labels
    from .io import read_json, write_csm, write_grid, write_json, write_labels, write_mask
    from .losses import Keypoints2D
    from .raster import csm_from_raster, render
    from .templates import keypoints_from_json
    from .articulation import articulate_points, compose_global

    mesh, rig, sphere = _load_model(run, a)
    cam, params = _load_pose(run.input(a.pose), rig.n_parts)
    w, h = a.size
    raster, _ = render(mesh, rig, params, cam, w, h)
    pre = str(a.out_prefix)
    Path(pre).parent.mkdir(parents=True, exist_ok=True)
    write_mask(run.output(pre + "mask.png"), raster.mask)
    write_grid(run.output(pre + "depth.grid"), raster.depth)
    write_csm(run.output(pre + "csm.bin"), csm_from_raster(raster, sphere))
    write_labels(run.output(pre + "labels.png"), raster_part_labels(raster, mesh, rig))
    if a.anchors:
        anchors = keypoints_from_json(read_json(run.input(a.anchors)))
        names = list(anchors)
        sps = [anchors[n] for n in names]
        pts = articulate_points(mesh, rig, compose_global(rig, params),
                                [s.face_id for s in sps], [s.bary for s in sps])
        x = project(cam, pts)
        px = norm_to_continuous_pixel(x, w, h)
        # a keypoint is visible when it is inside the image and not occluded
        col = np.floor(px[:, 0] + 0.5).astype(int)
        row = np.floor(px[:, 1] + 0.5).astype(int)
        inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        vis = np.zeros(len(names), dtype=bool)
        zc = (pts @ cam.rotation.T)[:, 2]
        for i in np.flatnonzero(inside):
            d = raster.depth[row[i], col[i]]
            vis[i] = np.isfinite(d) and zc[i] <= d + a.occlusion_tol
        vis &= np.all(np.abs(x) <= 1, axis=1)
        write_json(run.output(pre + "kp.json"),
                   Keypoints2D.from_anchors(names, x, sps, vis).to_json())
        write_json(run.output(pre + "kpset.json"), KeypointSet(w, h, names, px, vis).to_json())
    run.config = {"size": [w, h], "occlusion_tol": a.occlusion_tol}
    print(f"rendered {int(raster.mask.sum())} foreground pixels at {w}x{h}")
    return Path(pre + "manifest.json")


def _fit_config(path):
    from .fit import FitConfig
    from .io import read_json

    if path is None:
        return FitConfig()
    data = read_json(path)
    data.pop("version", None)
    return FitConfig.from_json(data)


def cmd_config(a, run):
    from . import __version__
    from .fit import FitConfig
    from .io import write_json

    data = dict(FitConfig().to_json(), version=__version__)
    write_json(run.output(a.out), data)
    run.config = data
    print(f"wrote default fit config to {a.out}")
    return Path(str(a.out) + ".manifest.json")


def cmd_fit(a, run):
    from .errors import FitDivergenceError
    from .fit import fit
    from .io import read_csm, read_json, read_mask, write_json
    from .losses import Keypoints2D, Observation

    mesh, rig, sphere = _load_model(run, a)
    config = _fit_config(run.input(a.config))
    mask = read_mask(run.input(a.mask))
    csm = read_csm(run.input(a.csm)) if a.csm else None
    kp = Keypoints2D.from_json(read_json(run.input(a.kp))) if a.kp else None
    obs = Observation(mask, kp, csm)
    run.config = config.to_json()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = fit(obs, mesh, rig, sphere, config)
        except FitDivergenceError as exc:
            write_json(run.output(a.out), {"error": str(exc), "trace": exc.trace})
            raise
    for wmsg in caught:
        print(f"warning: {wmsg.message}", file=sys.stderr)
    data = result.to_json()
    # wall-clock lives in the manifest so result files stay reproducible
    data.pop("wall_clock")
    write_json(run.output(a.out), data)
    rep = result.report
    print(f"selected hypothesis {result.best}, total loss {rep.total:.6g} "
          f"(gcc {rep.gcc:.4g}, vis {rep.vis:.4g}, mask {rep.mask_consistency:.4g}/"
          f"{rep.mask_coverage:.4g}, kp {rep.kp:.4g})")
    return Path(str(a.out) + ".manifest.json")


def cmd_transfer(a, run):
    import numpy as np

    from .evaluation import KeypointSet, csm_surface_points, pck_transfer, _transfer
    from .errors import EmptyForegroundError
    from .io import read_csm, read_json, write_json

    mesh, _, sphere = _load_model(run, a)
    src = read_csm(run.input(a.src_csm))
    tgt = read_csm(run.input(a.tgt_csm))
    kps = KeypointSet.from_json(read_json(run.input(a.src_kp)))
    tgt_pix, tgt_pts = csm_surface_points(tgt, mesh, sphere)
    px = np.zeros((len(kps.names), 2))
    vis = np.zeros(len(kps.names), dtype=bool)
    for i, (p, v) in enumerate(zip(kps.px, kps.visible)):
        if not v:
            continue
        try:
            px[i] = _transfer(src, p, tgt_pix, tgt_pts, mesh, sphere)
            vis[i] = True
        except EmptyForegroundError as exc:
            print(f"warning: {kps.names[i]}: {exc}", file=sys.stderr)
    out = KeypointSet(tgt.width, tgt.height, kps.names, px, vis)
    write_json(run.output(a.out), out.to_json())
    if a.tgt_kp:
        tk = KeypointSet.from_json(read_json(run.input(a.tgt_kp)))
        rep = pck_transfer([(kps, src, tk, tgt)], mesh, sphere)
        _write_report(run, rep, a.out)
    print(f"transferred {int(vis.sum())} keypoints")
    return Path(str(a.out) + ".manifest.json")


def _write_report(run, rep, out):
    from .io import write_json

    stem = str(out)
    base = stem[:-5] if stem.endswith(".json") else stem
    write_json(run.output(base + ".pck.json"), rep.to_json())
    text = rep.to_text()
    Path(run.output(base + ".pck.txt")).write_text(text)
    print(text, end="")


def cmd_eval_pck(a, run):
    from .articulation import params_from_json
    from .camera import Camera
    from .errors import FormatError
    from .evaluation import KeypointSet, pck_reprojection, pck_transfer
    from .io import read_csm, read_json
    from .templates import keypoints_from_json

    mesh, rig, sphere = _load_model(run, a)
    base = Path(a.list).parent
    items = read_json(run.input(a.list))

    def rel(p):
        return run.input(str(base / p))

    if a.protocol == "transfer":
        try:
            pairs = [(KeypointSet.from_json(read_json(rel(it["src_kp"]))), read_csm(rel(it["src_csm"])),
                      KeypointSet.from_json(read_json(rel(it["tgt_kp"]))), read_csm(rel(it["tgt_csm"])))
                     for it in items]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{a.list}: malformed pair list ({exc})") from None
        rep = pck_transfer(pairs, mesh, sphere)
    else:
        if rig is None or a.anchors is None:
            raise FormatError("reprojection protocol needs --rig and --anchors")
        anchors = keypoints_from_json(read_json(run.input(a.anchors)))
        images = []
        try:
            for it in items:
                res = read_json(rel(it["fit"]))
                images.append((KeypointSet.from_json(read_json(rel(it["kp"]))),
                               Camera.from_json(res["camera"]),
                               params_from_json(res["articulation"])))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{a.list}: malformed image list ({exc})") from None
        rep = pck_reprojection(images, anchors, mesh, rig)
    run.config = {"protocol": a.protocol}
    _write_report(run, rep, a.out)
    return Path(str(a.out) + ".manifest.json")


def cmd_replay(a, run):
    from .io import read_json, sha256_file

    man = read_json(a.manifest)
    old = os.getcwd()
    cwd = man.get("cwd", old)
    changed = [p for p, digest in man["inputs"].items()
               if not os.path.exists(os.path.join(cwd, p))
               or sha256_file(os.path.join(cwd, p)) != digest]
    if changed:
        for p in changed:
            print(f"INPUT CHANGED {p}")
        print(f"cannot replay: {len(changed)} input(s) differ from the manifest")
        return 1
    os.chdir(cwd)
    try:
        code = main(man["argv"])
    finally:
        os.chdir(old)
    if code != 0:
        return code
    bad = [p for p, digest in man["outputs"].items()
           if sha256_file(os.path.join(cwd, p)) != digest]
    for p in bad:
        print(f"MISMATCH {p}")
    print("replay identical" if not bad else f"replay differs in {len(bad)} file(s)")
    return 0 if not bad else 1


def build_parser():
    p = argparse.ArgumentParser(
        prog="csmfit", description="Canonical surface mapping with articulation: "
        "template parametrization, rendering, fitting and evaluation.",
        epilog=FORMATS, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=1, help="worker thread cap (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=FORMATS,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=fn)
        return sp

    def model_args(sp, rig=True, sphere=True):
        sp.add_argument("--mesh", required=True, help="template .obj")
        if rig:
            sp.add_argument("--rig", required=True, help="rig .json")
        if sphere:
            sp.add_argument("--sphere", required=True, help="sphere parametrization .txt")

    sp = add("template", cmd_template, "write a built-in procedural template (mesh, rig, anchors)")
    sp.add_argument("--kind", choices=["quadruped", "bird", "elephant"], default="quadruped")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--sphere-steps", type=int, default=None,
                    help="also write an equalized sphere parametrization")

    sp = add("param", cmd_param, "spherical parametrization of a genus-0 mesh")
    sp.add_argument("mesh")
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--optimizer", choices=["gd", "adam"], default="gd")
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render mask, depth, canonical map and part labels")
    model_args(sp)
    sp.add_argument("--pose", required=True, help="pose .json")
    sp.add_argument("--size", type=_parse_size, default=(128, 128), help="WxH (default 128x128)")
    sp.add_argument("--anchors", help="anchors .json; also writes kp.json and kpset.json")
    sp.add_argument("--occlusion-tol", type=float, default=1e-3,
                    help="depth slack when deciding keypoint visibility")
    sp.add_argument("--out-prefix", required=True,
                    help="prefix for <prefix>mask.png, depth.grid, csm.bin, labels.png")

    sp = add("config", cmd_config, "write the default fit configuration")
    sp.add_argument("--out", required=True)

    sp = add("fit", cmd_fit, "fit camera and articulation to an observation")
    model_args(sp)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--csm")
    sp.add_argument("--kp", help="keypoint .json (fit format)")
    sp.add_argument("--config", help="fit config .json (default: built-in defaults)")
    sp.add_argument("--out", required=True)

    sp = add("transfer", cmd_transfer, "transfer keypoints from a source to a target image")
    model_args(sp, rig=False)
    sp.add_argument("--src-csm", required=True)
    sp.add_argument("--tgt-csm", required=True)
    sp.add_argument("--src-kp", required=True, help="kpset .json of the source")
    sp.add_argument("--tgt-kp", help="kpset .json of the target; adds a PCK report")
    sp.add_argument("--out", required=True)

    sp = add("eval-pck", cmd_eval_pck, "PCK-Transfer or keypoint reprojection PCK")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--sphere")
    sp.add_argument("--rig")
    sp.add_argument("--anchors")
    sp.add_argument("--protocol", choices=["transfer", "reprojection"], default="transfer")
    sp.add_argument("--list", required=True, help="pairs .json or images .json")
    sp.add_argument("--out", required=True)

    sp = add("replay", cmd_replay, "re-run a manifest and compare outputs bytewise")
    sp.add_argument("manifest")
    return p


def _limit_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    _limit_threads(args.threads)
    import logging

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import CsmError

    run = Run(args, argv)
    try:
        res = args.func(args, run)
    except CsmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        ids = getattr(exc, "face_ids", None)
        if ids:
            print(f"offending faces: {ids}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, OSError) else 1
    if isinstance(res, int):
        return res
    if args.command != "replay":
        run.write_manifest(res)
    return 0


if __name__ == "__main__":
    sys.exit(main())
