import contextlib
import io
import json
import os

import numpy as np
import pytest

from castream import formats
from castream.checkpoint import load_model
from castream.cli import main
from castream.dataset import load_dataset


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def ok(*argv):
    code, out, err = run(*argv)
    assert code == 0, err
    return out, err


def tree_bytes(root):
    files = {}
    for base, _, names in os.walk(root):
        for n in names:
            p = os.path.join(base, n)
            files[os.path.relpath(p, root)] = open(p, "rb").read()
    return files


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, bb, st = root / "data", root / "bb", root / "st"
    ok("gen-data", "--n", 40, "--seed", 1, "--out", data)
    ok("train-backbone", "--data", data, "--epochs", 2, "--batch-size", 16, "--out", bb)
    ok("train-stream", "--backbone", bb / "backbone.cast", "--data", data, "--epochs", 1, "--batch-size", 16,
       "--variant", "projected", "--start-stage", 1, "--out", st)
    img = root / "img.ppm"
    val = load_dataset(data / "val")
    formats.write_ppm(img, formats.image_to_hwc(val.images[0]))
    return root, data, bb, st, img


# ----------------------------------------------------------------------------- end to end


def test_pipeline_outputs(pipeline):
    root, data, bb, st, img = pipeline
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest == {"n_train": 32, "n_val": 8, "seed": 1, "classes": 4}
    assert (bb / "history.csv").read_text().count("\n") == 3
    backbone, stream, _ = load_model(st / "model.cast")
    assert stream.config.variant == "projected" and stream.config.start_stage == 1
    summary = json.loads((st / "summary.json").read_text())
    assert summary["backbone_digest"] == backbone.param_digest()


def test_explain_and_eval(pipeline):
    root, data, bb, st, img = pipeline
    out = root / "ex"
    ok("explain", "--model", st / "model.cast", "--image", img, "--method", "gradcampp", "--pooling", "ca",
       "--out", out)
    grey = formats.read_pgm(out / "saliency.pgm")
    assert grey.shape == (32, 32) and grey.max() == 255 and grey.min() == 0
    assert formats.read_ppm(out / "overlay.ppm").shape == (32, 32, 3)
    meta = json.loads((out / "explain.json").read_text())
    assert meta["stage"] == 3 and meta["map_shape"] == [4, 4]

    ev = root / "ev"
    ok("eval", "--model", st / "model.cast", "--data", data, "--methods", "gradcam,rawattention",
       "--poolings", "gap,ca", "--limit", 3, "--step-fraction", 0.25, "--out", ev)
    rows = (ev / "metrics.csv").read_text().splitlines()
    assert len(rows) == 4  # header + gradcam x2 + rawattention under ca only
    reports = json.loads((ev / "metrics.json").read_text())
    assert all(r["N"] == 3 for r in reports)
    assert "Grad-CAM" in (ev / "table.md").read_text()


def test_ablate_command(pipeline):
    root, data, bb, st, img = pipeline
    spec = {"variants": ["vanilla", "mlp"], "start_stages": [2, 3], "class_modes": ["agnostic"], "eval_limit": 2}
    out = root / "ab"
    ok("ablate", "--grid-spec", json.dumps(spec), "--backbone", bb / "backbone.cast", "--data", data,
       "--epochs", 1, "--batch-size", 16, "--out", out)
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 5
    assert all(line.split(",")[3] in ("0", "4") for line in lines[1:])


def test_first_line_is_resolved_config(pipeline, tmp_path):
    _, data, _, _, _ = pipeline
    out, _ = ok("gen-data", "--n", 20, "--out", tmp_path)
    first = json.loads(out.splitlines()[0])
    assert first["command"] == "gen-data" and first["n"] == 20 and first["seed"] == 0
    assert first["val_fraction"] == 0.2 and first["classes"] == 4


def test_inputs_are_not_mutated(pipeline, tmp_path):
    root, data, bb, st, img = pipeline
    before = tree_bytes(data), tree_bytes(bb)
    ok("train-stream", "--backbone", bb / "backbone.cast", "--data", data, "--epochs", 1, "--out", tmp_path)
    assert (tree_bytes(data), tree_bytes(bb)) == before


# ----------------------------------------------------------------------------- determinism


def test_commands_are_byte_reproducible(pipeline, tmp_path):
    root, data, bb, st, img = pipeline
    runs = [
        ("gen-data", "--n", 20, "--seed", 4),
        ("train-backbone", "--data", data, "--epochs", 1, "--batch-size", 16),
        ("train-stream", "--backbone", bb / "backbone.cast", "--data", data, "--epochs", 1,
         "--class-mode", "specific"),
        ("explain", "--model", st / "model.cast", "--image", img, "--method", "scorecam"),
        ("eval", "--model", st / "model.cast", "--data", data, "--methods", "gradcam", "--limit", 2,
         "--step-fraction", 0.25),
    ]
    for k, argv in enumerate(runs):
        a, b = tmp_path / f"{k}a", tmp_path / f"{k}b"
        ok(*argv, "--out", a)
        ok(*argv, "--out", b)
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert ta and ta == tb, argv[0]


# ----------------------------------------------------------------------------- errors


def test_usage_errors(pipeline, tmp_path):
    root, data, bb, st, img = pipeline
    cases = [
        (),
        ("gen-data", "--bogus", 1, "--out", tmp_path),
        ("explain", "--model", st / "model.cast", "--out", tmp_path),
        ("explain", "--model", st / "model.cast", "--image", img, "--method", "cam", "--pooling", "ca",
         "--stage", 2, "--out", tmp_path),
        ("explain", "--model", st / "model.cast", "--image", img, "--method", "rawattention",
         "--pooling", "gap", "--out", tmp_path),
        ("train-stream", "--backbone", bb / "backbone.cast", "--data", data, "--start-stage", 7,
         "--out", tmp_path),
        ("eval", "--model", bb / "backbone.cast", "--data", data, "--poolings", "ca", "--out", tmp_path),
        ("gen-data", "--n", 10, "--out", tmp_path, "--config", '{"nope": 1}'),
    ]
    for argv in cases:
        code, _, err = run(*argv)
        assert code == 2, argv
        assert len(err.strip().splitlines()) == 1 and err.startswith("error: usage: ")


def test_io_errors(tmp_path):
    code, _, err = run("train-stream", "--backbone", tmp_path / "none.cast", "--data", tmp_path,
                       "--out", tmp_path / "o")
    assert code == 3 and err.startswith("error: io: ")
    (tmp_path / "junk.cast").write_bytes(b"not a checkpoint")
    code, _, err = run("explain", "--model", tmp_path / "junk.cast", "--image", tmp_path / "junk.cast",
                       "--out", tmp_path / "o")
    assert code == 3


def test_corrupted_checkpoint_is_an_invariant_violation(pipeline, tmp_path):
    root, data, bb, st, img = pipeline
    raw = bytearray((st / "model.cast").read_bytes())
    raw[-2] ^= 0x10
    bad = tmp_path / "bad.cast"
    bad.write_bytes(bytes(raw))
    code, _, err = run("explain", "--model", bad, "--image", img, "--out", tmp_path / "o")
    assert code == 5 and err.startswith("error: invariant-violation: ")


def test_rawattention_ignores_class_and_warns(pipeline, tmp_path):
    root, data, bb, st, img = pipeline
    _, err = ok("explain", "--model", st / "model.cast", "--image", img, "--method", "rawattention",
                "--pooling", "ca", "--class", 2, "--out", tmp_path / "a")
    assert "warning" in err and "--class" in err
    ok("explain", "--model", st / "model.cast", "--image", img, "--method", "rawattention", "--pooling", "ca",
       "--out", tmp_path / "b")
    assert (tmp_path / "a" / "saliency.pgm").read_bytes() == (tmp_path / "b" / "saliency.pgm").read_bytes()


# ----------------------------------------------------------------------------- --config


def test_config_file_mirrors_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 9, "seed": 3, "val-fraction": 0.0}))
    out, _ = ok("gen-data", "--config", cfg, "--out", tmp_path / "a")
    resolved = json.loads(out.splitlines()[0])
    assert resolved["n"] == 9 and resolved["seed"] == 3 and resolved["val_fraction"] == 0.0
    assert not (tmp_path / "a" / "val").exists()
    # explicit flags win over the config file
    out, _ = ok("gen-data", "--config", cfg, "--n", 6, "--out", tmp_path / "b")
    assert json.loads(out.splitlines()[0])["n"] == 6
    ok("gen-data", "--n", 9, "--seed", 3, "--val-fraction", 0.0, "--out", tmp_path / "c")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "c")


def test_eval_thread_count_does_not_change_output(pipeline, tmp_path, monkeypatch):
    root, data, bb, st, img = pipeline
    argv = ("eval", "--model", st / "model.cast", "--data", data, "--methods", "gradcam,scorecam", "--limit", 4,
            "--step-fraction", 0.25)
    ok(*argv, "--out", tmp_path / "one")
    monkeypatch.setenv("CASTREAM_THREADS", "3")
    ok(*argv, "--out", tmp_path / "three")
    assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "three")
