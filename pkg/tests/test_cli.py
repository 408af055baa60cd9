import json
import subprocess
import sys
import time

import numpy as np
import pytest

from csmfit.cli import main
from csmfit.io import read_csm, read_json, read_mask, write_json
from csmfit.mesh_param import load_obj, load_sphere, spherical_embed_init, write_obj
from csmfit.templates import octahedron


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Template files for the quadruped plus a one-part octahedron model."""
    d = tmp_path_factory.mktemp("cli")
    assert run("template", "--kind", "quadruped", "--out-dir", d, "--sphere-steps", 100) == 0
    write_obj(octahedron(0.8), d / "octa.obj")
    write_json(d / "octa_rig.json", {"parts": [{"name": "body", "parent": -1,
                                                "axis": [0, 0, 1]}],
                                     "labels": [0] * 6, "sigma": 1.0})
    assert run("param", d / "octa.obj", "--steps", 0, "--out", d / "octa.sphere.txt") == 0
    write_json(d / "identity.json", {"camera": {"scale": 1.0, "quat": [1, 0, 0, 0],
                                                "trans": [0, 0]}})
    write_json(d / "pose.json", {"camera": {"scale": 0.8, "quat": [0.95, 0.1, 0.3, 0.0],
                                            "trans": [0.02, -0.03]},
                                 "articulation": {"angles": [0, .2, -.2, .1, -.1, .15, -.1],
                                                  "translations": [[0, 0, 0]] * 7}})
    return d


def quad(d):
    return ["--mesh", d / "quadruped.obj", "--rig", d / "quadruped_rig.json",
            "--sphere", d / "quadruped.sphere.txt"]


def test_template_files(ws):
    for name in ("quadruped.obj", "quadruped_rig.json", "quadruped_anchors.json",
                 "quadruped.sphere.txt", "quadruped.manifest.json"):
        assert (ws / name).exists()
    man = read_json(ws / "quadruped.manifest.json")
    assert man["command"] == "template" and man["threads"] == 1 and man["seed"] == 0
    assert set(man["outputs"]) >= {str(ws / "quadruped.obj")}


def test_param_octahedron_prints_objectives(ws, capsys):
    out = ws / "octa_eq.sphere.txt"
    assert run("param", ws / "octa.obj", "--steps", 50, "--out", out) == 0
    text = capsys.readouterr().out
    f0 = float(text.split("initial objective")[1].split()[0])
    f1 = float(text.split("final objective")[1].split()[0])
    assert f1 <= f0


def test_param_zero_steps_is_centroid_projection(ws):
    mesh = load_obj(ws / "octa.obj")
    got = load_sphere(ws / "octa.sphere.txt", mesh)
    assert np.array_equal(got.sphere_vertices, spherical_embed_init(mesh).sphere_vertices)


def test_param_full_template_under_30s(ws):
    t0 = time.perf_counter()
    assert run("param", ws / "quadruped.obj", "--out", ws / "q500.sphere.txt") == 0
    assert time.perf_counter() - t0 < 30


def test_render_octahedron_identity(ws):
    pre = ws / "octa_"
    assert run("render", "--mesh", ws / "octa.obj", "--rig", ws / "octa_rig.json",
               "--sphere", ws / "octa.sphere.txt", "--pose", ws / "identity.json",
               "--size", "64x64", "--out-prefix", pre) == 0
    mask = read_mask(str(pre) + "mask.png")
    csm = read_csm(str(pre) + "csm.bin")
    assert mask.any()
    assert np.array_equal(csm.foreground, mask)
    assert np.all(np.isnan(csm.u[~mask]))


def test_render_replay_bitwise(ws, capsys):
    pre = ws / "quad_"
    assert run("render", *quad(ws), "--pose", ws / "pose.json",
               "--anchors", ws / "quadruped_anchors.json", "--out-prefix", pre) == 0
    before = (ws / "quad_csm.bin").read_bytes()
    capsys.readouterr()
    assert run("replay", str(pre) + "manifest.json") == 0
    assert "replay identical" in capsys.readouterr().out
    assert (ws / "quad_csm.bin").read_bytes() == before


def small_config(ws, **kw):
    path = ws / "fit_small.json"
    assert run("config", "--out", ws / "default.json") == 0
    cfg = read_json(ws / "default.json")
    cfg.update(iterations=6, warmup_iterations=3, **kw)
    write_json(path, cfg)
    return path


def test_config_defaults(ws):
    assert run("config", "--out", ws / "cfg.json") == 0
    cfg = read_json(ws / "cfg.json")
    assert cfg["n_hypotheses"] == 8 and "version" in cfg


def test_fit_and_replay(ws, capsys):
    assert run("render", *quad(ws), "--pose", ws / "pose.json",
               "--anchors", ws / "quadruped_anchors.json", "--out-prefix", ws / "quad_") == 0
    out = ws / "fit.json"
    assert run("fit", *quad(ws), "--mask", ws / "quad_mask.png", "--csm", ws / "quad_csm.bin",
               "--kp", ws / "quad_kp.json", "--config", small_config(ws), "--out", out) == 0
    res = read_json(out)
    assert len(res["state"]["x"]) == 8  # default hypothesis count honored
    assert "wall_clock" not in res
    man = read_json(str(out) + ".manifest.json")
    assert man["wall_clock"] > 0 and man["config"]["n_hypotheses"] == 8
    capsys.readouterr()
    assert run("replay", str(out) + ".manifest.json") == 0
    assert "replay identical" in capsys.readouterr().out


def test_fit_pose_ambiguity(ws, capsys):
    out = ws / "fit_mask_only.json"
    assert run("fit", *quad(ws), "--mask", ws / "quad_mask.png",
               "--config", small_config(ws), "--out", out) == 0
    assert "pose ambiguity" in capsys.readouterr().err
    assert any("pose ambiguity" in w for w in read_json(out)["warnings"])


def test_fit_divergence_exit_code(ws):
    cfg = small_config(ws)
    data = read_json(cfg)
    data["loss"]["w_gcc"] = 1e9
    write_json(ws / "fit_div.json", data)
    out = ws / "fit_div_out.json"
    assert run("fit", *quad(ws), "--mask", ws / "quad_mask.png", "--csm", ws / "quad_csm.bin",
               "--config", ws / "fit_div.json", "--out", out) == 5
    assert "trace" in read_json(out)


def test_transfer_self_pair(ws, capsys):
    pre = ws / "quad_"
    out = ws / "self.json"
    assert run("transfer", "--mesh", ws / "quadruped.obj", "--sphere",
               ws / "quadruped.sphere.txt", "--src-csm", str(pre) + "csm.bin",
               "--tgt-csm", str(pre) + "csm.bin", "--src-kp", str(pre) + "kpset.json",
               "--tgt-kp", str(pre) + "kpset.json", "--out", out) == 0
    text = capsys.readouterr().out
    assert "PCK 100.00%" in text and "threshold 12.8 px" in text
    rep = read_json(ws / "self.pck.json")
    assert rep["percentage"] == 100.0 and rep["threshold"] == pytest.approx(12.8)


def test_eval_pck_pair_suite_hand_count(ws, rng):
    names = []
    for i in range(5):
        q = rng.normal(size=4)
        q[0] = abs(q[0]) + 2
        write_json(ws / f"p{i}.json", {"camera": {"scale": 0.8, "quat": q.tolist(),
                                                 "trans": [0, 0]}})
        assert run("render", *quad(ws), "--pose", ws / f"p{i}.json", "--anchors",
                   ws / "quadruped_anchors.json", "--out-prefix", ws / f"r{i}_") == 0
        names.append(f"r{i}_")
    pairs = [{"src_csm": a + "csm.bin", "src_kp": a + "kpset.json",
              "tgt_csm": b + "csm.bin", "tgt_kp": b + "kpset.json"}
             for a in names for b in names if a != b]
    write_json(ws / "pairs.json", pairs)
    assert len(pairs) == 20
    assert run("eval-pck", "--mesh", ws / "quadruped.obj", "--sphere",
               ws / "quadruped.sphere.txt", "--list", ws / "pairs.json",
               "--out", ws / "suite.json") == 0
    rep = read_json(ws / "suite.pck.json")
    assert rep["n_total"] == len(rep["entries"])
    assert rep["n_correct"] == sum(1 for e in rep["entries"] if e["correct"])
    assert rep["percentage"] == pytest.approx(100.0 * rep["n_correct"] / rep["n_total"])


def test_eval_pck_reprojection(ws):
    assert run("render", *quad(ws), "--pose", ws / "pose.json",
               "--anchors", ws / "quadruped_anchors.json", "--out-prefix", ws / "quad_") == 0
    pose = read_json(ws / "pose.json")
    write_json(ws / "truth_fit.json", pose)
    write_json(ws / "images.json", [{"kp": "quad_kpset.json", "fit": "truth_fit.json"}])
    assert run("eval-pck", "--protocol", "reprojection", *quad(ws), "--anchors",
               ws / "quadruped_anchors.json", "--list", ws / "images.json",
               "--out", ws / "reproj.json") == 0
    rep = read_json(ws / "reproj.pck.json")
    assert rep["percentage"] == 100.0 and rep["per_image"][0]["n_total"] > 0


def test_exit_codes(ws, tmp_path, capsys):
    (tmp_path / "bad.obj").write_text("v 1 2\nf 1 2 3\n")
    assert run("param", tmp_path / "bad.obj", "--out", tmp_path / "s.txt") == 3
    write_obj(octahedron(), tmp_path / "open.obj")
    # dropping the last face leaves a hole
    text = (tmp_path / "open.obj").read_text().rstrip("\n").rsplit("\n", 1)[0] + "\n"
    (tmp_path / "open.obj").write_text(text)
    assert run("param", tmp_path / "open.obj", "--out", tmp_path / "s.txt") == 4
    assert run("param", tmp_path / "missing.obj", "--out", tmp_path / "s.txt") == 3
    with pytest.raises(SystemExit) as err:
        run("render")
    assert err.value.code == 2
    capsys.readouterr()


def test_help_documents_formats():
    out = subprocess.run([sys.executable, "-m", "csmfit.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for token in ("ACSM-GRID 1", "ACSM-CSM 1", "float32", "exit codes", "NaN"):
        assert token in out


def test_replay_refuses_changed_input(ws, tmp_path, capsys):
    pose = tmp_path / "pose.json"
    pose.write_bytes((ws / "identity.json").read_bytes())
    pre = tmp_path / "o_"
    assert run("render", "--mesh", ws / "octa.obj", "--rig", ws / "octa_rig.json",
               "--sphere", ws / "octa.sphere.txt", "--pose", pose, "--size", "16x16",
               "--out-prefix", pre) == 0
    write_json(pose, {"camera": {"scale": 0.5, "quat": [1, 0, 0, 0], "trans": [0, 0]}})
    capsys.readouterr()
    assert run("replay", str(pre) + "manifest.json") == 1
    assert f"INPUT CHANGED {pose}" in capsys.readouterr().out
