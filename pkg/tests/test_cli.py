import json
import subprocess
import sys

import numpy as np
import pytest

from occscene.cli import main
from occscene.formats import decode_latent, decode_pfm, decode_pgm, decode_ply
from occscene.gsrender import Camera, format_camera_rig
from occscene.lidarsim import SensorRig, format_rig_config
from occscene.voxgrid import (BevLayout, ClassEmbeddingTable, SemanticOccupancyGrid, decode_svo,
                              edit_layout, encode_bvl, encode_cemb, encode_svo)

from conftest import random_grid


@pytest.fixture
def scene(tmp_path):
    grid = random_grid(3, (24, 24, 8), occupancy=0.1, voxel_size=1.0, origin=(-12, -12, -4),
                       clear_center=True)
    (tmp_path / "g.svo").write_bytes(encode_svo(grid))
    rig = SensorRig(beams=8, azimuth_steps=64, max_range=40)
    (tmp_path / "rig.cfg").write_text(format_rig_config(rig))
    cams = [Camera.look_at((0, 0, 0), (1, 0, 0), fx=30, width=48, height=32, name="front"),
            Camera.look_at((0, 0, 0), (-1, 0, 0), fx=30, width=48, height=32, name="back")]
    (tmp_path / "cams.txt").write_text(format_camera_rig(cams))
    codes = np.zeros((24, 24), np.uint8)
    codes[:, 10:14] = 1
    codes[4:8, 10:12] = 4
    lay = BevLayout(codes)
    (tmp_path / "ori.bvl").write_bytes(encode_bvl(lay))
    (tmp_path / "new.bvl").write_bytes(encode_bvl(edit_layout(lay, [((4, 10, 8, 12), 1)])))
    return tmp_path, grid


def _run(*argv):
    return main([str(a) for a in argv])


def _stable_manifest(path):
    doc = json.loads(path.read_text())
    doc.pop("duration_s")
    doc["params"].pop("threads")
    return doc


def test_lidar_repeatable_and_thread_independent(scene):
    d, _ = scene
    outs = []
    for i, threads in enumerate((1, 1, 3)):
        out = d / f"pc{i}.ply"
        assert _run("lidar", "--grid", d / "g.svo", "--rig", d / "rig.cfg", "--seed", 7,
                    "--threads", threads, "--out", out) == 0
        outs.append(out)
    data = [o.read_bytes() for o in outs]
    assert data[0] == data[1] == data[2]
    verts = decode_ply(data[0])
    assert len(verts) > 0 and verts.dtype.names == ("x", "y", "z", "intensity", "drop_prob", "dropped")
    m = [_stable_manifest(o.with_name(o.name + ".manifest.json")) for o in outs]
    assert m[0]["seed"] == 7 and m[0]["command"] == "lidar"
    for doc in m:
        doc.pop("outputs")
        doc["params"].pop("out")
    assert m[0] == m[1] == m[2]


def test_lidar_seed_changes_output(scene):
    d, _ = scene
    _run("lidar", "--grid", d / "g.svo", "--rig", d / "rig.cfg", "--seed", 1, "--out", d / "a.ply")
    _run("lidar", "--grid", d / "g.svo", "--rig", d / "rig.cfg", "--seed", 2, "--out", d / "b.ply")
    assert (d / "a.ply").read_bytes() != (d / "b.ply").read_bytes()


def test_threads_from_environment(scene, monkeypatch):
    d, _ = scene
    monkeypatch.setenv("OCCSCENE_THREADS", "2")
    assert _run("raycast-oracle", "--grid", d / "g.svo", "--rig", d / "rig.cfg", "--out", d / "o.ply") == 0
    doc = json.loads((d / "o.ply.manifest.json").read_text())
    assert doc["params"]["threads"] == 2


def test_render_one_pair_per_camera(scene):
    d, grid = scene
    out = d / "views"
    assert _run("render", "--grid", d / "g.svo", "--cams", d / "cams.txt", "--out-dir", out) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["back_depth.pfm", "back_sem.pgm", "front_depth.pfm", "front_sem.pgm", "manifest.json"]
    depth = decode_pfm((out / "front_depth.pfm").read_bytes())
    sem = decode_pgm((out / "front_sem.pgm").read_bytes())
    assert depth.shape == sem.shape == (32, 48)
    assert set(np.unique(sem)) <= set(range(grid.num_classes))
    first = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix != ".json"}
    out2 = d / "views2"
    _run("render", "--grid", d / "g.svo", "--cams", d / "cams.txt", "--out-dir", out2, "--threads", 4)
    assert first == {p.name: p.read_bytes() for p in out2.iterdir() if p.suffix != ".json"}


def test_render_with_layout(scene):
    d, _ = scene
    assert _run("render", "--grid", d / "g.svo", "--cams", d / "cams.txt", "--layout", d / "ori.bvl",
                "--out-dir", d / "v") == 0


def test_convert_round_trip(scene):
    d, grid = scene
    assert _run("convert", d / "g.svo", "--out", d / "g.ply") == 0
    verts = decode_ply((d / "g.ply").read_bytes())
    assert len(verts) == grid.occupied.sum()
    assert _run("convert", d / "g.ply", "--out", d / "back.svo", "--dims", 24, 24, 8,
                "--origin", -12, -12, -4) == 0
    assert (d / "back.svo").read_bytes() == (d / "g.svo").read_bytes()
    assert _run("convert", d / "g.ply", "--out", d / "x.svo") == 1


def test_edit_writes_latent_and_grid(scene):
    d, grid = scene
    (d / "t.cemb").write_bytes(encode_cemb(ClassEmbeddingTable.orthonormal(17, 8)))
    args = ["edit", "--grid", d / "g.svo", "--layout-ori", d / "ori.bvl", "--table", d / "t.cemb",
            "--denoiser", "zero", "--steps", 10]
    assert _run(*args, "--layout-new", d / "new.bvl", "--out-latent", d / "z.ltnt",
                "--out-grid", d / "e.svo") == 0
    z = decode_latent((d / "z.ltnt").read_bytes())
    assert z.shape == (1, 8 * 8, 24, 24)
    # the zero denoiser ignores the condition, so the grid survives untouched
    assert decode_svo((d / "e.svo").read_bytes()) == grid
    assert _run(*args[:-4], "--layout-new", d / "ori.bvl", "--steps", 20, "--out-latent", d / "z2.ltnt",
                "--out-grid", d / "e2.svo") == 0
    assert decode_svo((d / "e2.svo").read_bytes()) == grid


def test_metrics_report(scene, capsys):
    d, _ = scene
    assert _run("metrics", "--pred", d / "g.svo", "--gt", d / "g.svo") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    keys = [l.split("=")[0] for l in lines]
    assert keys == sorted(keys)
    kv = dict(l.split("=") for l in lines)
    assert float(kv["miou"]) == 1.0 and float(kv["iou"]) == 1.0
    _run("raycast-oracle", "--grid", d / "g.svo", "--rig", d / "rig.cfg", "--out", d / "a.ply")
    assert _run("metrics", "--set-a", d / "a.ply", "--set-b", d / "a.ply", "--json",
                "--out", d / "m.json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["mmd"] == pytest.approx(0.0, abs=1e-9) and doc["jsd"] == pytest.approx(0.0, abs=1e-12)
    assert json.loads((d / "m.json").read_text()) == doc
    assert (d / "m.json.manifest.json").exists()


def test_exit_codes(scene, capsys):
    d, _ = scene
    assert _run("lidar", "--bogus") == 1
    assert _run("frobnicate") == 1
    assert _run("metrics") == 1
    assert _run("lidar", "--grid", d / "g.svo", "--rig", d / "rig.cfg", "--threads", 0, "--out", d / "x") == 1
    (d / "bad.svo").write_bytes(b"NOPE" + bytes(40))
    assert _run("lidar", "--grid", d / "bad.svo", "--rig", d / "rig.cfg", "--out", d / "x.ply") == 2
    assert _run("lidar", "--grid", d / "missing.svo", "--rig", d / "rig.cfg", "--out", d / "x.ply") == 2
    (d / "bad.cfg").write_text("beams = lots\n")
    assert _run("lidar", "--grid", d / "g.svo", "--rig", d / "bad.cfg", "--out", d / "x.ply") == 2
    err = capsys.readouterr().err
    assert "bad.svo" in err and "bad.cfg" in err
    assert not (d / "x.ply").exists()


def test_console_script_version():
    r = subprocess.run([sys.executable, "-m", "occscene.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "0.1.0"
