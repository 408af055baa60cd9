import numpy as np
import pytest

from csmfit.articulation import load_rig
from csmfit.io import read_json
from csmfit.mesh_param import load_obj, load_sphere
from csmfit.templates import build_template, example_files, keypoints_from_json


@pytest.mark.parametrize("kind,n_parts", [("quadruped", 7), ("bird", 3), ("elephant", 9)])
def test_shipped_examples_load(kind, n_parts):
    files = example_files(kind)
    mesh = load_obj(files["mesh"], strict_size=True)
    rig = load_rig(files["rig"], mesh)
    assert rig.n_parts == n_parts and rig.parent[0] == -1
    sphere = load_sphere(files["sphere"], mesh)
    assert np.allclose(np.linalg.norm(sphere.sphere_vertices, axis=1), 1.0)
    anchors = keypoints_from_json(read_json(files["anchors"]))
    built = build_template(kind)
    assert anchors == built.keypoints
    assert np.array_equal(mesh.faces, built.mesh.faces)
    assert np.array_equal(mesh.vertices, built.mesh.vertices)
    assert np.allclose(rig.weights, built.rig.weights)


def test_unknown_kind():
    with pytest.raises(ValueError):
        example_files("dragon")
