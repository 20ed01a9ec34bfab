import json

import numpy as np
import pytest

from bevgather.bench import validate_report
from bevgather.cli import main
from bevgather.indexgraph import load_index_graph
from bevgather.opgraph import interpret, parse_graph
from bevgather.synthio import (RigSpec, StackSpec, load_tensor, make_rig, make_stacks, save_calibration,
                               save_tensor)
from conftest import RING_BINNING

GRID_ARGS = ["--grid", "4x50x50", "--origin=-40,-40,-2", "--voxel", "1.6,1.6,1", "--depth", "1,61,60"]


@pytest.fixture()
def workdir(tmp_path):
    rig = make_rig(RigSpec())
    save_calibration(tmp_path / "rig.json", rig)
    feats, depth = make_stacks(StackSpec(channels=4, seed=3), rig, RING_BINNING)
    _, ones = make_stacks(StackSpec(channels=4, depth="ones"), rig, RING_BINNING)
    save_tensor(tmp_path / "feats.fbtn", feats)
    save_tensor(tmp_path / "depth.fbtn", depth)
    save_tensor(tmp_path / "ones.fbtn", ones)
    assert main(["build-lut", "--calib", str(tmp_path / "rig.json"), *GRID_ARGS,
                 "--out", str(tmp_path / "ring.fblt")]) == 0
    return tmp_path


@pytest.mark.parametrize("command", [[], ["build-lut"], ["transform"], ["verify"], ["bench"], ["export-graph"]])
def test_help(command, capsys):
    assert main([*command, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["build-lut", "--calib", "x.json", "--grid", "4x50", "--origin=0,0,0", "--voxel", "1,1,1",
                 "--depth", "1,2,3", "--out", "o"]) == 2
    assert main(["frobnicate"]) == 2


def test_build_lut_reports_coverage(tmp_path, ring_graph, capsys):
    save_calibration(tmp_path / "rig.json", make_rig(RigSpec()))
    assert main(["build-lut", "--calib", str(tmp_path / "rig.json"), *GRID_ARGS, "--threads", "2",
                 "--out", str(tmp_path / "ring.fblt")]) == 0
    assert "10000 voxels" in capsys.readouterr().out
    assert load_index_graph(tmp_path / "ring.fblt") == ring_graph


def test_transform_depth_modes(workdir):
    d = str(workdir)
    base = ["transform", "--lut", f"{d}/ring.fblt", "--features", f"{d}/feats.fbtn"]
    assert main([*base, "--out", f"{d}/plain.fbtn"]) == 0
    assert main([*base, "--depth", f"{d}/ones.fbtn", "--out", f"{d}/ones_out.fbtn"]) == 0
    assert main([*base, "--depth", f"{d}/depth.fbtn", "--threads", "3", "--out", f"{d}/soft.fbtn"]) == 0
    assert (workdir / "plain.fbtn").read_bytes() == (workdir / "ones_out.fbtn").read_bytes()
    vol = load_tensor(workdir / "soft.fbtn")
    assert vol.shape == (4, 50, 50, 4)
    assert not np.array_equal(vol, load_tensor(workdir / "plain.fbtn"))


def test_bad_files_exit_2(workdir, capsys):
    d = str(workdir)
    (workdir / "junk.fblt").write_bytes(b"JUNKJUNKJUNK")
    assert main(["transform", "--lut", f"{d}/junk.fblt", "--features", f"{d}/feats.fbtn",
                 "--out", f"{d}/x.fbtn"]) == 2
    assert main(["transform", "--lut", f"{d}/ring.fblt", "--features", f"{d}/missing.fbtn",
                 "--out", f"{d}/x.fbtn"]) == 2
    # features with the wrong camera count
    save_tensor(workdir / "few.fbtn", np.zeros((5, 64, 96, 4), dtype=np.float32))
    assert main(["transform", "--lut", f"{d}/ring.fblt", "--features", f"{d}/few.fbtn",
                 "--out", f"{d}/x.fbtn"]) == 2
    (workdir / "bad.json").write_text(json.dumps({"cameras": [{"cam_id": 0}]}))
    assert main(["build-lut", "--calib", f"{d}/bad.json", *GRID_ARGS, "--out", f"{d}/y.fblt"]) == 2
    assert "error:" in capsys.readouterr().err


def test_verify(capsys):
    assert main(["verify", "--cases", "3", "--seed", "4"]) == 0
    assert "3/3 cases bit-exact" in capsys.readouterr().out


def test_verify_with_calibration(workdir, capsys):
    assert main(["verify", "--calib", str(workdir / "rig.json"), "--cases", "2", "-q"]) == 0
    assert capsys.readouterr().out.strip() == "2/2 cases bit-exact"


def test_export_graph_parses_against_written_lut(workdir):
    out = workdir / "graphs" / "g.json"
    out.parent.mkdir()
    assert main(["export-graph", "--lut", str(workdir / "ring.fblt"), "--depth", "--out", str(out)]) == 0
    graph = parse_graph(out.read_text(), base_dir=str(out.parent))
    assert len(graph.nodes) == 9
    feats = load_tensor(workdir / "feats.fbtn")
    assert main(["transform", "--lut", str(workdir / "ring.fblt"), "--features", str(workdir / "feats.fbtn"),
                 "--depth", str(workdir / "depth.fbtn"), "--out", str(workdir / "v.fbtn")]) == 0
    from bevgather.aggregation import DepthStack, FeatureStack

    got = interpret(graph, {"features": FeatureStack(feats),
                            "depth": DepthStack(load_tensor(workdir / "depth.fbtn"))})
    assert got.tobytes() == load_tensor(workdir / "v.fbtn").tobytes()
    assert main(["export-graph", "--lut", str(workdir / "ring.fblt"), "--out", str(workdir / "p.json")]) == 0
    assert '"MUL"' not in (workdir / "p.json").read_text()


def test_bench_command(tmp_path):
    out = tmp_path / "bench.json"
    assert main(["bench", "--grids", "1x8x8", "--channels", "4", "--runs", "2", "--warmup", "0",
                 "--threads", "2", "--depth-bins", "8", "--out", str(out)]) == 0
    validate_report(json.loads(out.read_text()))
    assert (tmp_path / "bench.csv").exists()
