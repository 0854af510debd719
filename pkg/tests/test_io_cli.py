import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tuttedeform import checkpoint as ckpt
from tuttedeform.fileio import (Normalization, fit_normalization, load_geometry,
                                normalize_jointly, save_geometry)
from tuttedeform.jobfile import ConfigError, load_jobfile

from conftest import random_net


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "tuttedeform.cli", *args],
                          capture_output=True, text=True)


# ---------------------------------------------------------------- geometry

def test_obj_parse_features(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("# comment\n"
                 "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                 "f 1 2 3 4\n"          # quad, fan-triangulated
                 "f -4//1 -3/2/1 -2\n")  # negative indices and v/vt/vn forms
    g = load_geometry(p, normalize=False)
    assert g.points.shape == (4, 3)
    assert g.triangles.shape == (3, 3)
    assert np.array_equal(g.triangles[0], [0, 1, 2])
    assert np.array_equal(g.triangles[2], [0, 1, 2])


def test_obj_rejects_bad_face(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nf 1 2 3\n")
    with pytest.raises(ValueError):
        load_geometry(p)


def test_ply_parse_with_weights(tmp_path):
    p = tmp_path / "m.ply"
    p.write_text("ply\nformat ascii 1.0\n"
                 "element vertex 3\n"
                 "property float x\nproperty float y\nproperty float z\n"
                 "property float density\n"
                 "element face 1\nproperty list uchar int vertex_indices\n"
                 "end_header\n"
                 "0 0 0 1.5\n1 0 0 2.5\n0 1 0 3.5\n"
                 "3 0 1 2\n")
    g = load_geometry(p, normalize=False)
    assert np.array_equal(g.weights, [1.5, 2.5, 3.5])
    assert np.array_equal(g.triangles, [[0, 1, 2]])


def test_ply_rejects_binary(tmp_path):
    p = tmp_path / "b.ply"
    p.write_text("ply\nformat binary_little_endian 1.0\n"
                 "element vertex 0\nend_header\n")
    with pytest.raises(ValueError):
        load_geometry(p)


def test_grid_layout_and_threshold(tmp_path):
    # 2x1x2 grid, values laid out in C order with z fastest
    p = tmp_path / "g.json"
    json.dump({"dims": [2, 1, 2], "origin": [0, 0, 0], "spacing": [1, 1, 1],
               "values": [0.0, 2.0, 3.0, 0.5]}, open(p, "w"))
    g = load_geometry(p, grid_threshold=1.0, normalize=False)
    # kept cells: (0,0,1) value 2 and (1,0,0) value 3, at the cell centers
    assert np.allclose(sorted(g.points.tolist()), [[0.5, 0.5, 1.5], [1.5, 0.5, 0.5]])
    assert sorted(g.weights.tolist()) == [2.0, 3.0]
    json.dump({"dims": [2, 1, 2], "origin": [0, 0, 0], "spacing": [1, 1, 1],
               "values": [0.0]}, open(p, "w"))
    with pytest.raises(ValueError):
        load_geometry(p)


def test_normalization_bounds_and_roundtrip():
    rng = np.random.default_rng(0)
    pts = rng.uniform([-3, 5, 0], [9, 6, 40], size=(500, 3))
    tr = fit_normalization(pts)
    q = tr.apply(pts)
    assert np.abs(q).max() <= 0.7 + 1e-12
    # the longest axis spans the full target box
    assert np.isclose(q[:, 2].max() - q[:, 2].min(), 1.4, atol=1e-3)
    assert np.abs(tr.invert(q) - pts).max() < 1e-9


def test_joint_normalization_shares_transform(tmp_path):
    a = load_geometry(_write_obj(tmp_path / "a.obj", np.array([[0, 0, 0], [1, 0, 0]])))
    b = load_geometry(_write_obj(tmp_path / "b.obj", np.array([[0, 0, 0], [3, 0, 0]])))
    tr = normalize_jointly(a, b)
    assert a.transform is tr and b.transform is tr
    assert np.isclose(b.points[:, 0].max(), 0.7)
    assert np.isclose(a.points[1, 0] - a.points[0, 0], (0.7 + 0.7) / 3)


def _write_obj(path, pts, tris=None):
    lines = [f"v {p[0]} {p[1]} {p[2]}" for p in np.asarray(pts)]
    if tris is not None:
        lines += [f"f {a+1} {b+1} {c+1}" for a, b, c in tris]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_save_load_roundtrips(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(50, 3))
    tris = np.array([[0, 1, 2], [3, 4, 5]])
    w = rng.uniform(0, 2, size=50)
    for name in ("r.obj", "r.ply"):
        path = tmp_path / name
        save_geometry(path, pts, triangles=tris,
                      weights=w if name.endswith(".ply") else None)
        g = load_geometry(path, normalize=False)
        assert np.array_equal(g.points, pts)  # %.17g is repr-exact
        assert np.array_equal(g.triangles, tris)
        if name.endswith(".ply"):
            assert np.array_equal(g.weights, w)
        assert not os.path.exists(str(path) + ".tmp")


# ---------------------------------------------------------------- job files

def _base_job(tmp_path, **over):
    geom = _write_obj(tmp_path / "geo.obj",
                      np.random.default_rng(2).uniform(-1, 1, size=(100, 3)))
    job = {
        "workflow": "elastic",
        "seed": 3,
        "net": {"layers": 2, "resolution": 5},
        "optimizer": {"max_steps": 5},
        "constraints": [
            {"region": {"kind": "box", "min": [-2, -2, -2], "max": [2, 2, 0]},
             "static": True},
            {"region": {"kind": "sphere", "center": [0, 0, 0.8], "radius": 1.0},
             "motion": {"translation": [0.05, 0, 0]}},
        ],
        "input": {"geometry": "geo.obj"},
        "output": {"checkpoint": "out.ckpt.json"},
    }
    job.update(over)
    path = tmp_path / "job.json"
    json.dump(job, open(path, "w"))
    return path


def test_jobfile_defaults(tmp_path):
    job = load_jobfile(_base_job(tmp_path))
    assert job.budgets == {"moving": 10000, "static": 15000, "free": 10000}
    assert job.weights.elastic == 0.004 and job.weights.reg == 0.005
    assert job.lr.initial == 0.02 and job.lr.decay_steps == 4000
    assert job.net.layers == 2 and job.net.resolution == 5
    assert os.path.isabs(job.inputs["geometry"])


def test_jobfile_rejects_unknown_keys(tmp_path):
    path = _base_job(tmp_path, net={"layers": 2, "resolutionn": 5})
    with pytest.raises(ConfigError) as ei:
        load_jobfile(path)
    assert "$.net" in str(ei.value) and "resolutionn" in str(ei.value)


def test_jobfile_rejects_bad_workflow(tmp_path):
    with pytest.raises(ConfigError):
        load_jobfile(_base_job(tmp_path, workflow="train"))


def test_jobfile_requires_inputs(tmp_path):
    path = _base_job(tmp_path, input={})
    with pytest.raises(ConfigError) as ei:
        load_jobfile(path)
    assert "input.geometry" in str(ei.value)


def test_jobfile_missing_file(tmp_path):
    path = _base_job(tmp_path, input={"geometry": "nope.obj"})
    with pytest.raises(ConfigError) as ei:
        load_jobfile(path)
    assert "nope.obj" in str(ei.value)


def test_jobfile_region_validation(tmp_path):
    bad_box = [{"region": {"kind": "box", "min": [1, 1, 1], "max": [0, 2, 2]},
                "static": True}]
    with pytest.raises(ConfigError):
        load_jobfile(_base_job(tmp_path, constraints=bad_box))
    bad_sphere = [{"region": {"kind": "sphere", "center": [0, 0, 0]},
                   "static": True}]
    with pytest.raises(ConfigError):
        load_jobfile(_base_job(tmp_path, constraints=bad_sphere))
    conflict = [{"region": {"kind": "sphere", "center": [0, 0, 0], "radius": 1},
                 "static": True, "motion": {"translation": [0.1, 0, 0]}}]
    with pytest.raises(ConfigError):
        load_jobfile(_base_job(tmp_path, constraints=conflict))


def test_region_membership():
    from tuttedeform.jobfile import _parse_region
    pts = np.array([[0.0, 0, 0], [2.0, 0, 0], [0, 0, -1.0]])
    sphere = _parse_region({"kind": "sphere", "center": [0, 0, 0], "radius": 1.5}, "$")
    assert sphere.contains(pts).tolist() == [True, False, True]
    box = _parse_region({"kind": "box", "min": [-1, -1, -1], "max": [1, 1, 0]}, "$")
    assert box.contains(pts).tolist() == [True, False, True]
    half = _parse_region({"kind": "halfspace", "normal": [0, 0, 2], "offset": 0}, "$")
    assert half.contains(pts).tolist() == [True, True, False]


def test_motion_conjugation():
    from tuttedeform.jobfile import _parse_motion
    m = _parse_motion({"axis": [0, 0, 1], "angle_degrees": 90,
                       "pivot": [1, 0, 0], "translation": [0, 0, 0.5]}, "$")
    p = np.array([2.0, 0.0, 0.0])
    raw_target = m.rotation @ p + m.translation
    assert np.allclose(raw_target, [1.0, 1.0, 0.5])
    tr = Normalization(center=np.array([1.0, 0, 0]), scale=0.5)
    R, t = m.in_normalized(tr)
    assert np.allclose(R @ tr.apply(p) + t, tr.apply(raw_target))


# --------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(4)
    net = random_net(rng, resolution=5, layers=3, scale=1.3)
    ck = ckpt.from_net(net, seed=7)
    path = tmp_path / "a.json"
    ckpt.save_checkpoint(path, ck)
    loaded = ckpt.load_checkpoint(path)
    path2 = tmp_path / "b.json"
    ckpt.save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()
    for p, q in zip(ck.params, loaded.params):
        assert np.array_equal(p.raw_edge_weights, q.raw_edge_weights)
    net2 = loaded.realize()
    pts = rng.uniform(-0.8, 0.8, size=(50, 3))
    from tuttedeform.deform import forward
    assert np.array_equal(forward(net, pts), forward(net2, pts))


def test_checkpoint_triplane_kind_detected(tmp_path):
    rng = np.random.default_rng(5)
    net = random_net(rng, resolution=5, layers=4)
    d = ckpt.to_dict(ckpt.from_net(net))
    assert d["frames"] == {"kind": "triplane"}
    assert "seed" not in d


def test_checkpoint_rejects_foreign_files():
    with pytest.raises(ValueError):
        ckpt.from_dict({"format": "something-else"})
    with pytest.raises(ValueError):
        ckpt.from_dict({"format": "tuttedeform-checkpoint", "version": 99})


# ---------------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def cli_workdir(tmp_path_factory):
    """One tiny elastic run shared by the CLI tests."""
    work = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(6)
    pts = rng.uniform([-0.15, -0.15, -0.6], [0.15, 0.15, 0.6], size=(800, 3))
    _write_obj(work / "bar.obj", pts)
    job = {
        "workflow": "elastic", "seed": 5,
        "net": {"layers": 2, "resolution": 7},
        "optimizer": {"max_steps": 10, "log_every": 100},
        "samples": {"moving": 200, "static": 300, "free": 200},
        "constraints": [
            {"region": {"kind": "halfspace", "normal": [0, 0, -1], "offset": 0.35},
             "static": True},
            {"region": {"kind": "halfspace", "normal": [0, 0, 1], "offset": 0.35},
             "motion": {"axis": [1, 0, 0], "angle_degrees": 5,
                        "pivot": [0, 0, 0.45]}},
        ],
        "input": {"geometry": "bar.obj"},
        "output": {"checkpoint": "bar.ckpt.json", "report": "bar.csv"},
    }
    json.dump(job, open(work / "job.json", "w"))
    r = run_cli("elastic", str(work / "job.json"), "--quiet")
    assert r.returncode == 0, r.stderr
    return work


def test_cli_elastic_outputs(cli_workdir):
    assert (cli_workdir / "bar.ckpt.json").exists()
    report = (cli_workdir / "bar.csv").read_text().splitlines()
    assert report[0] == "metric,value"
    assert any(row.startswith("min_triangle_det,") for row in report)


def test_cli_check_passes(cli_workdir):
    json.dump({"workflow": "check", "input": {"checkpoint": "bar.ckpt.json"}},
              open(cli_workdir / "check.json", "w"))
    r = run_cli("check", str(cli_workdir / "check.json"))
    assert r.returncode == 0, r.stdout + r.stderr
    assert "check=PASS name=triangle_orientation" in r.stdout
    assert "check=PASS name=inverse_roundtrip" in r.stdout


def test_cli_apply_invert_roundtrip(cli_workdir):
    json.dump({"workflow": "apply",
               "input": {"geometry": "bar.obj", "checkpoint": "bar.ckpt.json"},
               "output": {"geometry": "fwd.obj"}},
              open(cli_workdir / "apply.json", "w"))
    json.dump({"workflow": "invert",
               "input": {"geometry": "fwd.obj", "checkpoint": "bar.ckpt.json"},
               "output": {"geometry": "back.obj"}},
              open(cli_workdir / "invert.json", "w"))
    assert run_cli("apply", str(cli_workdir / "apply.json"), "--quiet").returncode == 0
    assert run_cli("invert", str(cli_workdir / "invert.json"), "--quiet").returncode == 0
    orig = load_geometry(cli_workdir / "bar.obj", normalize=False)
    back = load_geometry(cli_workdir / "back.obj", normalize=False)
    assert np.abs(back.points - orig.points).max() < 1e-8


def test_cli_report(cli_workdir):
    json.dump({"workflow": "report",
               "input": {"checkpoint": "bar.ckpt.json", "geometry": "bar.obj"},
               "output": {"report": "diag.csv"}},
              open(cli_workdir / "report.json", "w"))
    r = run_cli("report", str(cli_workdir / "report.json"), "--quiet")
    assert r.returncode == 0, r.stderr
    text = (cli_workdir / "diag.csv").read_text()
    assert "strain_energy_mean" in text and "sample_count" in text


def test_cli_workflow_mismatch_is_config_error(cli_workdir):
    r = run_cli("fit", str(cli_workdir / "job.json"))
    assert r.returncode == 2
    assert "workflow" in r.stderr


def test_cli_unknown_key_is_config_error(cli_workdir):
    bad = json.load(open(cli_workdir / "job.json"))
    bad["outputs"] = bad.pop("output")
    json.dump(bad, open(cli_workdir / "bad.json", "w"))
    r = run_cli("elastic", str(cli_workdir / "bad.json"))
    assert r.returncode == 2
    assert "outputs" in r.stderr


def test_cli_corrupt_checkpoint_is_config_error(cli_workdir):
    (cli_workdir / "corrupt.json").write_text('{"format": "nope"}')
    json.dump({"workflow": "check", "input": {"checkpoint": "corrupt.json"}},
              open(cli_workdir / "check_bad.json", "w"))
    r = run_cli("check", str(cli_workdir / "check_bad.json"))
    assert r.returncode == 2


def test_cli_empty_region_is_config_error(cli_workdir):
    job = json.load(open(cli_workdir / "job.json"))
    job["constraints"][1]["region"] = {"kind": "sphere",
                                       "center": [50, 50, 50], "radius": 1}
    job["output"] = {"checkpoint": "unused.ckpt.json"}
    json.dump(job, open(cli_workdir / "job_empty.json", "w"))
    r = run_cli("elastic", str(cli_workdir / "job_empty.json"))
    assert r.returncode == 2
    assert "selects no geometry" in r.stderr


def test_cli_out_of_domain_apply_is_numerical_error(cli_workdir):
    rng = np.random.default_rng(7)
    _write_obj(cli_workdir / "huge.obj", rng.uniform(-50, 50, size=(20, 3)))
    json.dump({"workflow": "apply",
               "input": {"geometry": "huge.obj", "checkpoint": "bar.ckpt.json"},
               "output": {"geometry": "huge_out.obj"}},
              open(cli_workdir / "apply_huge.json", "w"))
    r = run_cli("apply", str(cli_workdir / "apply_huge.json"))
    assert r.returncode == 3


def test_cli_seed_override_recorded(cli_workdir):
    job = json.load(open(cli_workdir / "job.json"))
    job["output"] = {"checkpoint": "seeded.ckpt.json"}
    json.dump(job, open(cli_workdir / "job_seed.json", "w"))
    r = run_cli("elastic", str(cli_workdir / "job_seed.json"),
                "--seed", "42", "--quiet")
    assert r.returncode == 0, r.stderr
    ck = json.load(open(cli_workdir / "seeded.ckpt.json"))
    assert ck["seed"] == 42
