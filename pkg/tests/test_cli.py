import json
import subprocess
import sys

import numpy as np
import pytest

from physrelight import cli, dataset, report, synth
from physrelight.imageio import load_pfm, save_pfm
from physrelight.learner.io import load_model
from physrelight.lighting import DirectionalLight, LightSet, save_lights, standard_rig

from conftest import sphere_scene

SMALL = {"epochs": 1, "batch_size": 2, "crop": 16, "base_channels": 8, "pairs_per_epoch": 4,
         "val_pairs": 2}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rig = standard_rig()
    save_lights(LightSet(list(rig)[::4], list(rig.ids)[::4]), root / "lights.txt")
    (root / "small.json").write_text(json.dumps(SMALL))
    return root


@pytest.fixture(scope="module")
def data(work):
    assert cli.main(["synth-gen", "--scenes", "2", "--out", str(work / "data"), "--lights",
                     str(work / "lights.txt"), "--resolution", "32", "--deterministic"]) == 0
    return work / "data" / "manifest.json"


@pytest.fixture(scope="module")
def model_path(work, data):
    out = work / "m.rlm"
    assert cli.main(["train", "--manifest", str(data), "--config", str(work / "small.json"),
                     "--out", str(out), "--val-scenes", "1", "--deterministic"]) == 0
    return out


def test_eval_identical_prints_zero(tmp_path, capsys, rng):
    a = tmp_path / "a.pfm"
    save_pfm(rng.uniform(size=(16, 16, 3)).astype(np.float32), a)
    code, out, _ = run(capsys, "eval", "--metric", "dssim", a, a)
    assert code == 0 and out == "0.000000\n"


def test_eval_constant_images(tmp_path, capsys):
    a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
    save_pfm(np.full((16, 16, 3), 0.75, np.float32), a)
    save_pfm(np.full((16, 16, 3), 0.25, np.float32), b)
    assert run(capsys, "eval", "--metric", "l1", a, b)[1] == "0.500000\n"


def test_usage_errors(capsys):
    code, out, err = run(capsys, "frobnicate")
    assert code == 1 and err.count("\n") == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "eval", "--metric", "lpips", "a", "b")[0] == 1


def test_data_errors(tmp_path, capsys):
    code, _, err = run(capsys, "eval", tmp_path / "missing.pfm", tmp_path / "missing.pfm")
    assert code == 2 and err.startswith("physrelight: data error") and err.count("\n") == 1
    bad = tmp_path / "bad.pfm"
    bad.write_bytes(b"P6\n1 1\n255\n")
    assert run(capsys, "eval", bad, bad)[0] == 2
    assert run(capsys, "relight", "--model", tmp_path / "none.rlm", "--input", bad,
               "--dst-light", "0,0,1", "--out", tmp_path / "o.pfm")[0] == 2


def test_threads_env(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("RELIGHT_THREADS", "many")
    a = tmp_path / "a.pfm"
    save_pfm(np.zeros((16, 16, 3), np.float32), a)
    assert run(capsys, "eval", a, a)[0] == 1
    monkeypatch.setenv("RELIGHT_THREADS", "2")
    assert run(capsys, "eval", a, a)[0] == 0


def test_synth_gen_manifest(data):
    man = dataset.read_manifest(data)
    assert len(man["scenes"]) == 2 and all(len(s["frames"]) == 8 for s in man["scenes"])


def test_pms_solve(work, data, capsys):
    code, out, _ = run(capsys, "pms", "solve", "--manifest", data, "--out", work / "pms")
    assert code == 0
    store = dataset.FrameStore.from_manifest(work / "pms" / "manifest.json")
    man = dataset.read_manifest(work / "pms" / "manifest.json")
    assert man["kind"] == "pms"
    oracle = dataset.FrameStore.from_manifest(data)
    np.testing.assert_array_equal(store.scenes[0].images, oracle.scenes[0].images)
    assert "valid pixels" in out


def test_train_outputs(model_path):
    m, extra = load_model(model_path, return_extra=True)
    assert m.config.base_channels == 8
    assert len(extra["history"]["train"]) == 1
    header, rows = report.read_tsv(str(model_path).replace(".rlm", "_history.tsv"))
    assert header == ["epoch", "train", "val"] and len(rows) == 1
    assert model_path.with_name("m_history.png").exists()


def test_train_is_reproducible(work, data, model_path):
    out = work / "again.rlm"
    assert cli.main(["train", "--manifest", str(data), "--config", str(work / "small.json"),
                     "--out", str(out), "--val-scenes", "1", "--deterministic"]) == 0
    a, b = load_model(model_path), load_model(out)
    for k in a.tensors:
        assert a.tensors[k].data.tobytes() == b.tensors[k].data.tobytes()


def test_train_bad_config(work, data, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"unknown_key": 1}')
    assert run(capsys, "train", "--manifest", data, "--config", cfg, "--out", tmp_path / "x.rlm")[0] == 2


def test_relight(work, data, model_path, capsys):
    img = dataset.FrameStore.from_manifest(data).scenes[0].images[0]
    inp = work / "in.pfm"
    save_pfm(img, inp)
    out = work / "out.pfm"
    code, _, _ = run(capsys, "relight", "--model", model_path, "--input", inp,
                     "--src-light", "0 0 1", "--dst-light", "0.3,0.2,0.9", "--out", out, "--png")
    assert code == 0
    res = load_pfm(out)
    assert res.shape == img.shape and res.min() >= 0 and res.max() <= 1
    assert out.with_suffix(".png").exists()
    assert run(capsys, "relight", "--model", model_path, "--input", inp,
               "--dst-light", "0,0,1", "--out", out)[0] == 1


def test_relight_env(work, model_path, capsys, rng):
    env = work / "env.pfm"
    save_pfm(rng.uniform(0, 0.2, size=(16, 32, 3)).astype(np.float32), env)
    inp = work / "in_env.pfm"
    save_pfm(rng.uniform(0.1, 0.9, size=(64, 80, 3)).astype(np.float32), inp)
    out = work / "env_out.pfm"
    code, _, err = run(capsys, "relight-env", "--model", model_path, "--input", inp, "--src-light",
                       "0 0 1", "--envmap", env, "--topk", "6", "--target-mean", "0.3,0.3,0.3",
                       "--out", out)
    assert code == 0, err
    assert load_pfm(out).shape == (64, 80, 3)
    black = work / "black.pfm"
    save_pfm(np.zeros((16, 32, 3), np.float32), black)
    assert run(capsys, "relight-env", "--model", model_path, "--input", inp, "--src-light",
               "0 0 1", "--envmap", black, "--out", out)[0] == 2


def test_calibrate(work, capsys):
    elev, az = np.radians(30), np.radians(-20)
    true = np.array([np.cos(elev) * np.sin(az), np.sin(elev), np.cos(elev) * np.cos(az)])
    scene = sphere_scene(resolution=256, radius=0.9, k_s=1.0, alpha=5000.0, color=(0, 0, 0))
    sph = work / "sphere.pfm"
    save_pfm(synth.render_olat(scene, DirectionalLight(true)).image, sph)
    code, out, _ = run(capsys, "calibrate", "--sphere", sph, "--center", "128,128",
                       "--radius", 0.9 * 128, "--id", 5)
    assert code == 0
    vals = out.split()
    assert vals[0] == "5"
    d = np.array([float(v) for v in vals[1:4]])
    assert np.degrees(np.arccos(np.clip(d @ true, -1, 1))) < 1.0
    assert run(capsys, "calibrate", "--sphere", sph, "--center", "10,10", "--radius", 100)[0] == 2


def test_augment(work, data, capsys):
    code, _, _ = run(capsys, "augment", "--manifest", data, "--out", work / "aug", "--scale", "--seed", 3)
    assert code == 0
    man = dataset.read_manifest(work / "aug" / "manifest.json")
    assert man["kind"] == "augmented"
    assert len(man["scenes"]) == 8
    assert {s["variant"] for s in man["scenes"]} == {"id", "h", "v", "hv"}
    store = dataset.FrameStore.from_manifest(work / "aug" / "manifest.json")
    for sc in store.scenes:
        for k, l in enumerate(sc.lights):
            assert 0.6 <= l.intensity[0] < 1.1


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--size", 16, "--samples", 20)
    assert code == 0 and "PASS" in out
    code, out, err = run(capsys, "gradcheck", "--size", 16, "--samples", 20, "--tolerance", 1e-30)
    assert code == 3 and "FAIL" in out and err.startswith("physrelight: numerical failure")


def test_study_grid(work, capsys):
    out = work / "study"
    code, stdout, err = run(capsys, "study", "--scenes", 1, "--val-scenes", 1, "--lights", 4,
                            "--resolution", 32, "--config", work / "small.json", "--pairs", 2,
                            "--out", out, "--deterministic")
    assert code == 0, err
    grid, rows, cols = report.read_grid(out / "study.tsv")
    assert grid.shape == (4, 4)
    assert rows == ["l1", "l2", "dssim", "msdssim"] and cols == rows
    header, _ = report.read_tsv(out / "study.tsv")
    assert header[0] == "train_loss"
    assert (out / "study.png").exists() and (out / "study_history.png").exists()
    assert run(capsys, "study", "--losses", "l1,lpips", "--out", out)[0] == 1


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "physrelight.cli", "nope"], capture_output=True, text=True)
    assert r.returncode == 1 and r.stderr.count("\n") == 1
