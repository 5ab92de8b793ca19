import json
import os

import numpy as np
import pytest

from attnheat import cli
from attnheat.train import METRICS_HEADER, load_checkpoint, read_metrics_csv
from attnheat.viz import read_ppm


def config(tmp_path, cifar_dir, **sections):
    cfg = {"data": {"root": str(cifar_dir), "test_subset": 40},
           "train": {"epochs": 1, "subset_size": 120, "batch_size": 40},
           "viz": {"images": [0, 1], "upscale": 2}}
    for k, v in sections.items():
        cfg.setdefault(k, {}).update(v) if isinstance(v, dict) else cfg.__setitem__(k, v)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def trained(tmp_path, cifar_dir, capsys):
    cfg = config(tmp_path, cifar_dir)
    out = str(tmp_path / "run")
    code, stdout, _ = run(["train", "--config", cfg, "--out", out], capsys)
    assert code == 0
    return cfg, out


# config ------------------------------------------------------------------------

def test_defaults_resolve():
    cfg = cli.resolve_config({})
    assert cfg["train"]["epochs"] == 5 and cfg["train"]["subset_size"] == 2000
    assert cfg["data"]["test_subset"] == 1000


def test_unknown_keys_rejected(tmp_path, capsys):
    for bad in ({"extra": 1}, {"train": {"lrate": 1}}, {"model": {"depth": 3}}):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(bad))
        code, _, err = run(["train", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
        assert code == 2 and "unknown keys" in err
        assert not (tmp_path / "o").exists()


def test_invalid_json_and_values(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert run(["train", "--config", str(path)], capsys)[0] == 2
    path.write_text(json.dumps({"train": {"momentum": 1.5}}))
    assert run(["train", "--config", str(path)], capsys)[0] == 2
    path.write_text(json.dumps({"train": {"stage": "top"}}))
    assert run(["train", "--config", str(path)], capsys)[0] == 2


def test_resolved_config_echo_and_seed_override(trained, tmp_path, cifar_dir, capsys):
    cfg, out = trained
    resolved = json.loads((tmp_path / "run" / "config.resolved.json").read_text())
    assert resolved["out"] == out and resolved["train"]["batch_size"] == 40
    assert resolved["viz"]["alpha"] == 0.5
    code, _, _ = run(["train", "--config", cfg, "--out", out + "2", "--seed", "17"], capsys)
    assert code == 0
    again = json.loads(open(os.path.join(out + "2", "config.resolved.json")).read())
    assert again["train"]["seed"] == 17
    # the echoed config alone reproduces the run
    code, _, _ = run(["train", "--config", os.path.join(out, "config.resolved.json"),
                      "--out", out + "3"], capsys)
    assert code == 0
    assert (open(os.path.join(out, "metrics.csv"), "rb").read()
            == open(os.path.join(out + "3", "metrics.csv"), "rb").read())


def test_common_flags_either_side_of_command(tmp_path, cifar_dir):
    cfg = config(tmp_path, cifar_dir)
    parser = cli.build_parser()
    before = parser.parse_args(["--config", cfg, "--out", "o", "--seed", "3", "-v", "train"])
    after = parser.parse_args(["train", "--config", cfg, "--out", "o", "--seed", "3", "-v"])
    for a in (before, after):
        assert (a.config, a.out, a.seed, a.verbose) == (cfg, "o", 3, True)
    plain = parser.parse_args(["train"])
    assert (plain.config, plain.out, plain.seed, plain.verbose) == (None, None, None, False)
    assert parser.parse_args(["--out", "a", "train", "--out", "b"]).out == "b"


# train -------------------------------------------------------------------------

def test_missing_data_exit_3(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"data": {"train_files": [str(tmp_path / "nope.bin")],
                                         "test_files": [str(tmp_path / "nope.bin")]}}))
    code, _, err = run(["train", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == 3 and "nope.bin" in err
    path.write_text(json.dumps({"data": {"root": str(tmp_path / "empty")}}))
    assert run(["train", "--config", str(path), "--out", str(tmp_path / "o")], capsys)[0] == 3


def test_malformed_data_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(3072))
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"data": {"train_files": [str(bad)], "test_files": [str(bad)]}}))
    code, _, err = run(["train", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == 3 and "offset" in err


def test_zero_epochs_header_only(tmp_path, cifar_dir, capsys):
    cfg = config(tmp_path, cifar_dir, train={"epochs": 0})
    code, _, _ = run(["train", "--config", cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    assert (tmp_path / "o" / "metrics.csv").read_text() == METRICS_HEADER + "\n"


def test_train_outputs(trained):
    _, out = trained
    rows = read_metrics_csv(os.path.join(out, "metrics.csv"))
    assert len(rows) == 1 and rows[0].wall_seconds == 0.0
    timings = open(os.path.join(out, "timings.csv")).read().splitlines()
    assert timings[0] == "epoch,wall_seconds" and len(timings) == 2
    assert "stem.w" in load_checkpoint(os.path.join(out, "checkpoint.bin"))


def test_nan_abort_exit_4(tmp_path, cifar_dir, capsys):
    cfg = config(tmp_path, cifar_dir, train={"lr": 1e12, "epochs": 2})
    code, _, err = run(["train", "--config", cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 4 and "epoch" in err and "batch" in err


# eval --------------------------------------------------------------------------

def test_eval_matches_final_row(trained, capsys):
    cfg, out = trained
    code, stdout, _ = run(["eval", "--config", cfg, "--out", out], capsys)
    assert code == 0
    got = dict(kv.split("=") for kv in stdout.split())
    final = read_metrics_csv(os.path.join(out, "metrics.csv"))[-1]
    assert abs(float(got["test_acc"]) - final.test_acc) <= 1e-6
    assert abs(float(got["test_loss"]) - final.test_loss) <= 1e-6
    assert stdout == run(["eval", "--config", cfg, "--out", out], capsys)[1]


def test_eval_bad_magic_exit_2(trained, tmp_path, capsys):
    cfg, out = trained
    ckpt = tmp_path / "bad.bin"
    raw = bytearray(open(os.path.join(out, "checkpoint.bin"), "rb").read())
    raw[:4] = b"XXXX"
    ckpt.write_bytes(bytes(raw))
    code, _, err = run(["eval", "--config", cfg, "--out", out, "--checkpoint", str(ckpt)], capsys)
    assert code == 2 and "magic" in err


def test_eval_shape_mismatch_exit_2(trained, tmp_path, cifar_dir, capsys):
    _, out = trained
    cfg = config(tmp_path, cifar_dir, train={"stage": "early"})
    code, _, err = run(["eval", "--config", cfg, "--out", out], capsys)
    assert code == 2 and "attn.body.down.w" in err


# heatmap -----------------------------------------------------------------------

def test_heatmap_counting_and_validity(trained, capsys):
    cfg, out = trained
    code, _, _ = run(["heatmap", "--config", cfg, "--out", out, "--image", "1"], capsys)
    assert code == 0
    files = sorted(os.listdir(os.path.join(out, "heatmaps")))
    ppms = [f for f in files if f.endswith(".ppm")]
    assert len(ppms) == 9 and [f for f in files if f.endswith(".json")] == ["img1_metrics.json"]
    for f in ppms:
        img = read_ppm(os.path.join(out, "heatmaps", f))
        assert img.shape == (64, 64, 3)
    doc = json.load(open(os.path.join(out, "heatmaps", "img1_metrics.json")))
    assert set(doc["taps"]) == {"early", "middle", "later"}


def test_heatmap_deterministic(trained, capsys):
    cfg, out = trained
    snapshots = []
    for _ in range(2):
        assert run(["heatmap", "--config", cfg, "--out", out, "--image", "0"], capsys)[0] == 0
        d = os.path.join(out, "heatmaps")
        snapshots.append({f: open(os.path.join(d, f), "rb").read() for f in os.listdir(d)})
    assert snapshots[0] == snapshots[1]


def test_heatmap_bad_tap_exit_2(trained, capsys):
    cfg, out = trained
    code, _, err = run(["heatmap", "--config", cfg, "--out", out, "--taps", "early", "fc"], capsys)
    assert code == 2 and "fc" in err


def test_heatmap_from_file_with_attention(tmp_path, cifar_dir, capsys):
    from attnheat.viz import write_ppm
    cfg = config(tmp_path, cifar_dir, train={"stage": "middle", "epochs": 0})
    out = str(tmp_path / "att")
    assert run(["train", "--config", cfg, "--out", out], capsys)[0] == 0
    img = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    write_ppm(img, tmp_path / "pic.ppm")
    code, _, _ = run(["heatmap", "--config", cfg, "--out", out, "--image-file",
                      str(tmp_path / "pic.ppm"), "--taps", "early"], capsys)
    assert code == 0
    files = os.listdir(os.path.join(out, "heatmaps"))
    assert "pic_middle_mask_color.ppm" in files and "pic_middle_attended_overlay.ppm" in files
    assert len([f for f in files if f.endswith(".ppm")]) == 9


# stages ------------------------------------------------------------------------

def test_stages_report(tmp_path, cifar_dir, capsys):
    cfg = config(tmp_path, cifar_dir)
    out = tmp_path / "st"
    code, stdout, _ = run(["stages", "--config", cfg, "--out", str(out), "--reference-row"], capsys)
    assert code == 0
    rows = (out / "stage_report.csv").read_text().splitlines()
    assert len(rows) == 4 and [r.split(",")[0] for r in rows[1:]] == ["early", "middle", "later"]
    ref = [l for l in stdout.splitlines() if "not measured" in l][0]
    assert "94.71%" in ref and "94.55%" in ref and "94.23%" in ref
    index = json.loads((out / "strips" / "index.json").read_text())
    assert index["columns"] == ["original", "early", "middle", "later"]
    for entry in index["strips"]:
        strip = read_ppm(out / "strips" / entry["file"])
        assert strip.shape == (64, 2 * (4 * 32 + 3 * 2), 3)


def test_stages_share_initial_parameters(tmp_path, cifar_dir, capsys):
    cfg = config(tmp_path, cifar_dir, train={"epochs": 0})
    out = tmp_path / "st0"
    assert run(["stages", "--config", cfg, "--out", str(out)], capsys)[0] == 0
    states = [load_checkpoint(out / f"stage_{s}" / "checkpoint.bin") for s in ("early", "middle", "later")]
    shared = set.intersection(*(set(k for k in s if not k.startswith("attn.")) for s in states))
    assert "stem.w" in shared and "head.w" in shared
    for name in shared:
        assert states[0][name].tobytes() == states[1][name].tobytes() == states[2][name].tobytes()
    assert states[0]["attn.body.down.w"].shape[1] == 24
    assert states[2]["attn.body.down.w"].shape[1] == 48
