import json
import os

import numpy as np
import pytest

from stdgs.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, dispatch


# ---------------------------------------------------------------------------
# shared builders (also used by the acceptance suite)

def write_script(path, w=48, h=48, dur=300_000, size=14,
                 start=(12.0, 14.0), vel=(50.0, 20.0), seed=0):
    end = (start[0] + vel[0] * dur / 1e6, start[1] + vel[1] * dur / 1e6)
    script = {
        "width": w, "height": h, "duration_us": dur,
        "background": {"kind": "solid", "color": [0.45, 0.45, 0.45]},
        "sprites": [{
            "texture": {"kind": "solid", "color": [0.95, 0.95, 0.95]},
            "size": size,
            "trajectory": [[0, start[0], start[1]], [dur, end[0], end[1]]],
        }],
        "seed": seed,
    }
    with open(path, "w") as fh:
        json.dump(script, fh)
    return path


TRAIN_CONFIG = {
    "phase1_iters": 12, "phase2_iters": 6,
    "densify_every": 0, "log_every": 3, "holdout_every": 4,
    "lambda2": 0.1, "lambda3": 0.01,
    "scene": {"bg_stride": 8, "object_count": 8},
    "disentangle": {"superpixels": 40, "steps": 20, "clusters": 2},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full six-stage CLI run on a small synthetic scene."""
    root = tmp_path_factory.mktemp("pipeline")
    script = write_script(root / "script.json")
    data = str(root / "data")
    assert dispatch(["simulate", "--script", str(script), "--out", data,
                     "--contrast", "0.15", "--blur-window", "4",
                     "--fps", "20", "--subfps", "200"]) == EXIT_OK
    decomp = str(root / "decomp")
    assert dispatch(["disentangle", "--data", data, "--out", decomp,
                     "--superpixels", "60", "--steps", "30",
                     "--clusters", "2"]) == EXIT_OK
    tracks = str(root / "tracks")
    assert dispatch(["track", "--data", data, "--decomp", decomp,
                     "--out", tracks]) == EXIT_OK
    cfg_path = root / "train.json"
    cfg_path.write_text(json.dumps(TRAIN_CONFIG))
    run = str(root / "run")
    assert dispatch(["train", "--data", data, "--decomp", decomp,
                     "--tracks", tracks, "--config", str(cfg_path),
                     "--out", run]) == EXIT_OK
    render_out = str(root / "render" / "view.png")
    layers = str(root / "render" / "layers")
    assert dispatch(["render", "--scene", os.path.join(run, "scene.json"),
                     "--time-us", "150000", "--out", render_out,
                     "--dump-layers", layers]) == EXIT_OK
    eval_out = str(root / "metrics.json")
    assert dispatch(["eval", "--data", data,
                     "--scene", os.path.join(run, "scene.json"),
                     "--out", eval_out, "--holdout-every", "4"]) == EXIT_OK
    return {"root": root, "data": data, "decomp": decomp, "tracks": tracks,
            "run": run, "render": render_out, "layers": layers,
            "eval": eval_out, "script": str(script), "config": str(cfg_path)}


def _manifest(d):
    with open(os.path.join(d, "run_manifest.json")) as fh:
        return json.load(fh)


def test_simulate_outputs(pipeline):
    data = pipeline["data"]
    assert os.path.exists(os.path.join(data, "manifest.json"))
    assert os.path.exists(os.path.join(data, "events.txt"))
    assert os.path.exists(os.path.join(data, "frames", "00000.png"))
    assert os.path.exists(os.path.join(data, "blurred", "00000.png"))
    m = _manifest(data)
    assert m["stage"] == "simulate"
    assert m["schema_version"] == 1
    assert m["seed"] == 0
    assert m["config"]["contrast"] == 0.15
    assert m["inputs"] == [pipeline["script"]]
    assert m["wall_clock_s"] >= 0


def test_disentangle_outputs(pipeline):
    d = pipeline["decomp"]
    assert os.path.exists(os.path.join(d, "decomposition.json"))
    with open(os.path.join(d, "decomposition.json")) as fh:
        summary = json.load(fh)
    assert summary["num_objects"] >= 1
    assert _manifest(d)["stage"] == "disentangle"


def test_track_recovers_velocity(pipeline):
    from stdgs.track import load_trajectory
    traj = load_trajectory(os.path.join(pipeline["tracks"], "trajectory_1.json"))
    pts = traj.positions()
    ts = traj.times()
    assert len(ts) >= 20
    v = (pts[-1] - pts[5]) / ((ts[-1] - ts[5]) / 1e6)
    assert abs(v[0] - 50.0) < 6.0
    assert abs(v[1] - 20.0) < 6.0


def test_train_outputs(pipeline):
    run = pipeline["run"]
    assert os.path.exists(os.path.join(run, "scene.json"))
    lines = open(os.path.join(run, "report.jsonl")).read().strip().splitlines()
    recs = [json.loads(l) for l in lines]
    assert any(r.get("phase") == 2 for r in recs)
    m = _manifest(run)
    assert m["stage"] == "train"
    assert m["config"]["phase1_iters"] == 12


def test_render_outputs(pipeline):
    from stdgs.dataio import read_image
    img = read_image(pipeline["render"])
    assert img.shape == (48, 48, 3)
    for name in ("color_background", "color_objects", "density_background",
                 "density_objects", "rho"):
        assert os.path.exists(os.path.join(pipeline["layers"], f"{name}.png")), name


def test_eval_metrics(pipeline):
    with open(pipeline["eval"]) as fh:
        m = json.load(fh)
    assert set(m) == {"psnr", "ssim", "views"}
    assert m["psnr"] > 10.0
    assert 0.0 < m["ssim"] <= 1.0


# ---------------------------------------------------------------------------
# exit codes

def test_usage_errors_exit_2(capsys):
    assert dispatch(["simulate"]) == EXIT_USAGE  # missing required args
    assert dispatch(["frobnicate"]) == EXIT_USAGE
    assert dispatch([]) == EXIT_USAGE
    capsys.readouterr()


def test_validation_errors_exit_3(tmp_path, capsys):
    assert dispatch(["disentangle", "--data", str(tmp_path / "nope")]) == EXIT_DATA
    # malformed training config key
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_option": 1}))
    (tmp_path / "d").mkdir()
    code = dispatch(["train", "--data", str(tmp_path / "d"),
                     "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA
    err = capsys.readouterr().err
    assert "error:" in err


def test_numerical_abort_exit_4(pipeline, monkeypatch, tmp_path, capsys):
    import stdgs.train as train_mod
    from stdgs.train import NumericalAbort

    def explode(*a, **kw):
        raise NumericalAbort("loss went to nan")

    monkeypatch.setattr(train_mod, "train", explode)
    code = dispatch(["train", "--data", pipeline["data"],
                     "--out", str(tmp_path / "o")])
    assert code == EXIT_NUMERIC
    assert "numerical abort" in capsys.readouterr().err


def test_bad_contrast_exits_3(pipeline, tmp_path, capsys):
    code = dispatch(["simulate", "--script", pipeline["script"],
                     "--out", str(tmp_path / "o"), "--contrast", "-1"])
    assert code == EXIT_DATA
    capsys.readouterr()


# ---------------------------------------------------------------------------
# determinism

def test_seed_override_recorded(tmp_path, pipeline):
    out = str(tmp_path / "sim")
    assert dispatch(["--seed", "11", "simulate", "--script", pipeline["script"],
                     "--out", out, "--blur-window", "1"]) == EXIT_OK
    assert _manifest(out)["seed"] == 11


def test_simulate_rerun_byte_identical(tmp_path, pipeline):
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert dispatch(["simulate", "--script", pipeline["script"],
                         "--out", out, "--blur-window", "1"]) == EXIT_OK
        outs.append(out)
    for rel in ("events.txt", "manifest.json", os.path.join("frames", "00003.png")):
        a = open(os.path.join(outs[0], rel), "rb").read()
        b = open(os.path.join(outs[1], rel), "rb").read()
        assert a == b, rel


def test_train_rerun_and_threads_byte_identical(tmp_path, pipeline):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"phase1_iters": 6, "phase2_iters": 0,
                               "densify_every": 0, "log_every": 0,
                               "mode": "unified",
                               "scene": {"bg_stride": 8}}))
    scenes = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "8")):
        out = str(tmp_path / name)
        assert dispatch(["--threads", threads, "train",
                         "--data", pipeline["data"], "--config", str(cfg),
                         "--out", out]) == EXIT_OK
        scenes.append(open(os.path.join(out, "scene.json"), "rb").read())
    assert scenes[0] == scenes[1]  # rerun
    assert scenes[0] == scenes[2]  # thread-count invariance
