"""Command-line entry point: train, eval, heatmap, stages, gradcheck.

Exit codes: 0 ok, 1 gradient check failure, 2 configuration / usage /
checkpoint error, 3 data error, 4 training diverged (non-finite loss).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time

import numpy as np

from . import data as D
from . import viz
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged, UsageError
from .gradcheck import CASES, TOLERANCE, check_op
from .net import TAPS, AttentionModuleSpec, MaskMode, NetworkSpec, build_network, place_attention
from .train import (TrainConfig, apply_checkpoint, evaluate, load_checkpoint,
                    train, write_metrics_csv)
from .tensor import no_grad

log = logging.getLogger("attnheat")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

DEFAULT_CONFIG = {
    "data": {
        "root": "cifar-10-batches-bin",
        "train_files": None,
        "test_files": None,
        "test_subset": 1000,
        "synthetic": False,
        "mean": list(D.CIFAR10_MEAN),
        "std": list(D.CIFAR10_STD),
    },
    "model": NetworkSpec().to_dict(),
    "train": {
        "seed": 0,
        "epochs": 5,
        "batch_size": 64,
        "lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "augment": {"flip": True, "pad_crop": 4},
        "subset_size": 2000,
        "stage": None,
        "mask_mode": "multiply",
        "eval_batch_size": 250,
    },
    "viz": {
        "taps": list(TAPS),
        "aggregation": "mean_abs",
        "alpha": 0.5,
        "images": [0, 1, 2, 3],
        "upscale": 4,
    },
    "out": "runs/default",
}

# synthetic stand-in sizes when no subset is configured
SYNTHETIC_TRAIN, SYNTHETIC_TEST = 2000, 1000


class DataError(Exception):
    pass


# config ------------------------------------------------------------------------

def _merge(defaults: dict, given: dict, where: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{where}: expected an object, got {type(given).__name__}")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(defaults[k], dict) and v is not None and k != "model":
            out[k] = _merge(defaults[k], v, k if where == "config" else f"{where}.{k}")
        else:
            out[k] = v
    return out


def resolve_config(raw: dict | None = None, out: str | None = None,
                   seed: int | None = None) -> dict:
    """Fill defaults, reject unknown keys and apply command-line overrides."""
    cfg = _merge(DEFAULT_CONFIG, raw or {}, "config")
    if out is not None:
        cfg["out"] = out
    if seed is not None:
        cfg["train"]["seed"] = int(seed)
    # parse once so errors surface before any work happens
    model_spec(cfg)
    train_config(cfg)
    if not isinstance(cfg["out"], str) or not cfg["out"]:
        raise ConfigError("out must be a non-empty directory path")
    return cfg


def load_config(path: str | None, out=None, seed=None) -> dict:
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve_config(raw, out, seed)


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    aug = t["augment"]
    tc = TrainConfig(seed=int(t["seed"]), epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                     lr=float(t["lr"]), momentum=float(t["momentum"]),
                     weight_decay=float(t["weight_decay"]), flip=bool(aug["flip"]),
                     pad_crop=int(aug["pad_crop"]), subset_size=t["subset_size"],
                     stage=t["stage"], mask_mode=t["mask_mode"],
                     eval_batch_size=int(t["eval_batch_size"]))
    tc.validate(allow_zero_lr=True)
    if tc.stage is not None and tc.stage not in TAPS:
        raise ConfigError(f"train.stage must be one of {list(TAPS)} or null, got {tc.stage!r}")
    if tc.mask_mode not in [m.value for m in MaskMode]:
        raise ConfigError(f"train.mask_mode must be multiply or residual, got {tc.mask_mode!r}")
    return tc


def model_spec(cfg: dict, stage: str | None = None) -> NetworkSpec:
    """Network from ``model``; ``train.stage`` (or ``stage``) places attention.

    An attention block already described under ``model`` serves as the
    template when a stage is requested; otherwise a default module with
    ``train.mask_mode`` is used.
    """
    spec = NetworkSpec.from_dict(cfg["model"])
    stage = stage or cfg["train"]["stage"]
    if stage is None:
        return spec
    if spec.attention is not None:
        if spec.stage.value == stage:
            return spec
        template = spec.attention
        spec = NetworkSpec(spec.in_channels, spec.num_classes, spec.stem, spec.blocks)
    else:
        template = AttentionModuleSpec(mode=MaskMode(cfg["train"]["mask_mode"]))
    return place_attention(spec, stage, template)


def write_resolved(cfg: dict) -> None:
    viz.ensure_dir(cfg["out"])
    with open(os.path.join(cfg["out"], "config.resolved.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


# data --------------------------------------------------------------------------

def load_data(cfg: dict) -> tuple:
    """(train, test) datasets with the configured test subset applied."""
    d = cfg["data"]
    if d["synthetic"]:
        n_train = cfg["train"]["subset_size"] or SYNTHETIC_TRAIN
        n_test = d["test_subset"] or SYNTHETIC_TEST
        log.warning("using the synthetic stand-in dataset, not CIFAR-10")
        return D.synthetic_cifar10(n_train, seed=1), D.synthetic_cifar10(n_test, seed=2)
    train_files, test_files = d["train_files"], d["test_files"]
    if train_files is None or test_files is None:
        found = D.find_cifar10(d["root"])
        if found is None:
            raise DataError(f"CIFAR-10 binary batches not found under {d['root']!r}")
        train_files = train_files or found[0]
        test_files = test_files or found[1]
    try:
        tr = D.load_cifar10(train_files, "train")
        te = D.load_cifar10(test_files, "test")
    except OSError as exc:
        raise DataError(f"{exc.filename}: {exc.strerror}") from None
    except FormatError as exc:
        raise DataError(str(exc)) from None
    return tr, te.subset(d["test_subset"])


def _stats(cfg):
    return tuple(cfg["data"]["mean"]), tuple(cfg["data"]["std"])


def _write_timings(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,wall_seconds\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.wall_seconds:.3f}\n")


def run_training(cfg: dict, out_dir: str, stage: str | None = None, datasets=None) -> tuple:
    """Train one network into ``out_dir``; returns (net, rows, test_set)."""
    spec = model_spec(cfg, stage)
    tc = train_config(cfg)
    tr, te = datasets or load_data(cfg)
    net = build_network(spec, tc.seed)
    viz.ensure_dir(out_dir)
    mean, std = _stats(cfg)
    rows = train(net, tr, te, tc, mean, std, os.path.join(out_dir, "checkpoint.bin"))
    # wall time stays out of metrics.csv so reruns are byte-identical
    write_metrics_csv(rows, os.path.join(out_dir, "metrics.csv"), with_time=False)
    _write_timings(rows, os.path.join(out_dir, "timings.csv"))
    return net, rows, te


# heatmaps ----------------------------------------------------------------------

def _heat_images(hm: viz.Heatmap, image_rgb: np.ndarray, alpha: float, upscale: int) -> dict:
    h, w = image_rgb.shape[:2]
    full = viz.resize_heatmap(hm, h, w)
    color = viz.colormap(full)
    return {
        "raw": viz.upscale(viz.grayscale(full), upscale),
        "color": viz.upscale(color, upscale),
        "overlay": viz.upscale(viz.overlay(image_rgb, color, alpha), upscale),
    }


def _metrics_dict(m: viz.NoiseMetrics) -> dict:
    return {"entropy": m.entropy, "top_decile_energy": m.top_decile_energy,
            "mask_mean": m.mask_mean, "undefined": m.undefined}


def render_heatmaps(net, image: np.ndarray, taps, cfg: dict, out_dir: str, tag: str) -> tuple:
    """Write raw/color/overlay PPMs per tap (plus mask and attended maps
    when the network has attention).

    Returns (metrics document, activation record).
    """
    v = cfg["viz"]
    mean, std = _stats(cfg)
    with no_grad():
        _, rec = net.forward(D.preprocess(image[None], mean, std), taps=TAPS)
    rgb = viz.chw_to_rgb(image)
    doc = {"image": tag, "aggregation": v["aggregation"], "taps": {}}
    viz.ensure_dir(out_dir)

    def emit(name, activation, mask=None):
        hm = viz.extract_heatmap(activation, v["aggregation"], source=name)
        for kind, img in _heat_images(hm, rgb, v["alpha"], v["upscale"]).items():
            viz.write_ppm(img, os.path.join(out_dir, f"{tag}_{name}_{kind}.ppm"))
        return _metrics_dict(viz.noise_metrics(hm, mask))

    for tap in taps:
        doc["taps"][tap] = emit(tap, rec.features[tap])
    if rec.mask is not None:
        doc["mask"] = emit(f"{rec.stage}_mask", rec.mask, rec.mask)
        doc["attended"] = emit(f"{rec.stage}_attended", rec.attended, rec.mask)
    with open(os.path.join(out_dir, f"{tag}_metrics.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc, rec


def _check_taps(taps) -> list:
    bad = [t for t in taps if t not in TAPS]
    if bad:
        raise UsageError(f"unknown tap ids {bad}; valid: {list(TAPS)}")
    return list(taps)


def _load_net(cfg: dict, checkpoint: str):
    net = build_network(model_spec(cfg), train_config(cfg).seed)
    try:
        state = load_checkpoint(checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {checkpoint}: {exc.strerror}") from None
    apply_checkpoint(net, state)
    return net


# commands ----------------------------------------------------------------------

def cmd_train(cfg: dict, args=None) -> int:
    write_resolved(cfg)
    _, rows, _ = run_training(cfg, cfg["out"])
    if rows:
        r = rows[-1]
        print(f"epochs={len(rows)} train_loss={r.train_loss:.4f} test_acc={r.test_acc:.4f}")
    else:
        print("epochs=0")
    return EXIT_OK


def cmd_eval(cfg: dict, args=None) -> int:
    ckpt = getattr(args, "checkpoint", None) or os.path.join(cfg["out"], "checkpoint.bin")
    net = _load_net(cfg, ckpt)
    _, te = load_data(cfg)
    mean, std = _stats(cfg)
    loss, acc = evaluate(net, te, cfg["train"]["eval_batch_size"], mean, std)
    print(f"test_loss={loss:.9f} test_acc={acc:.9f}")
    return EXIT_OK


def cmd_heatmap(cfg: dict, args=None) -> int:
    taps = _check_taps(getattr(args, "taps", None) or cfg["viz"]["taps"])
    ckpt = getattr(args, "checkpoint", None) or os.path.join(cfg["out"], "checkpoint.bin")
    net = _load_net(cfg, ckpt)
    image_file = getattr(args, "image_file", None)
    if image_file:
        try:
            rgb = viz.read_ppm(image_file)
        except (OSError, ValueError) as exc:
            raise DataError(f"{image_file}: {exc}") from None
        if rgb.shape != (32, 32, 3):
            raise DataError(f"{image_file}: expected a 32 x 32 image, got {rgb.shape[:2]}")
        image, tag = np.transpose(rgb, (2, 0, 1)).copy(), os.path.splitext(os.path.basename(image_file))[0]
    else:
        idx = getattr(args, "image", None)
        idx = cfg["viz"]["images"][0] if idx is None else idx
        _, te = load_data(cfg)
        if not 0 <= idx < len(te):
            raise UsageError(f"image index {idx} out of range for {len(te)} test images")
        image, tag = te.images[idx], f"img{idx}"
    out_dir = os.path.join(cfg["out"], "heatmaps")
    write_resolved(cfg)
    render_heatmaps(net, image, taps, cfg, out_dir, tag)
    print(f"wrote heatmaps for {tag} to {out_dir}")
    return EXIT_OK


def cmd_stages(cfg: dict, args=None) -> int:
    write_resolved(cfg)
    datasets = load_data(cfg)
    te = datasets[1]
    images = [i for i in cfg["viz"]["images"] if 0 <= i < len(te)]
    runs, overlays = [], {}
    for stage in TAPS:
        out_dir = os.path.join(cfg["out"], f"stage_{stage}")
        log.info("stage %s: training", stage)
        net, rows, _ = run_training(cfg, out_dir, stage, datasets)
        heatmaps, masks, paths = [], [], []
        for i in images:
            doc_dir = os.path.join(out_dir, "heatmaps")
            _, rec = render_heatmaps(net, te.images[i], [], cfg, doc_dir, f"img{i}")
            hm = viz.extract_heatmap(rec.attended, cfg["viz"]["aggregation"], source=f"{stage}_attended")
            # compare stages at input resolution, not their native 32/16/8 grids
            heatmaps.append(viz.resize_heatmap(hm, *te.images.shape[2:]))
            masks.append(rec.mask)
            overlays.setdefault(i, {})[stage] = _heat_images(
                hm, viz.chw_to_rgb(te.images[i]), cfg["viz"]["alpha"], 1)["overlay"]
            paths.append(os.path.join(doc_dir, f"img{i}_{stage}_attended_overlay.ppm"))
        runs.append(viz.StageRun(stage, rows, heatmaps, masks, paths))

    report = viz.stage_report(runs)
    with open(os.path.join(cfg["out"], "stage_report.csv"), "w") as fh:
        fh.write(viz.render_stage_csv(report))
    table = viz.render_stage_table(report, getattr(args, "reference_row", False))
    with open(os.path.join(cfg["out"], "stage_table.md"), "w") as fh:
        fh.write(table)

    # one strip per image: original | early | middle | later
    strip_dir = viz.ensure_dir(os.path.join(cfg["out"], "strips"))
    index = {"columns": ["original", *TAPS], "strips": []}
    for i in images:
        parts = [viz.chw_to_rgb(te.images[i])] + [overlays[i][s] for s in TAPS]
        strip = viz.upscale(viz.hstack(parts), cfg["viz"]["upscale"])
        name = f"strip_img{i}.ppm"
        viz.write_ppm(strip, os.path.join(strip_dir, name))
        index["strips"].append({"image": i, "label": int(te.labels[i]), "file": name})
    with open(os.path.join(strip_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gradcheck(cfg=None, args=None) -> int:
    trials = getattr(args, "trials", None) or 100
    t0 = time.perf_counter()
    offenders = []
    for name in CASES:
        r = check_op(name, trials)
        ok = r["max_rel_error"] <= TOLERANCE
        print(f"{name:<26} max_rel_error={r['max_rel_error']:.3e} eps={r['eps']:.0e} "
              f"{'ok' if ok else 'FAIL'}", flush=True)
        if not ok:
            offenders.append(name)
    print(f"{len(CASES)} ops, {trials} trials each, {time.perf_counter() - t0:.1f}s")
    if offenders:
        print("gradient check failed: " + ", ".join(offenders), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "heatmap": cmd_heatmap,
            "stages": cmd_stages, "gradcheck": cmd_gradcheck}


def _common_flags(default) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=default)
    common.add_argument("--config", help="JSON run config (defaults fill missing keys)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="seed (overrides train.seed)")
    common.add_argument("-v", "--verbose", action="store_true", help="per-epoch progress")
    return common


def build_parser() -> argparse.ArgumentParser:
    # subcommand copies must not reset flags given before the command name
    common = _common_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="attnheat", parents=[_common_flags(None)],
                                description="Mini attention CNN: train, inspect, compare stages.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write metrics.csv + checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="print test accuracy of a checkpoint")
    ev.add_argument("--checkpoint")
    hm = sub.add_parser("heatmap", parents=[common], help="render activation heatmaps")
    hm.add_argument("--checkpoint")
    src = hm.add_mutually_exclusive_group()
    src.add_argument("--image", type=int, help="test-set image index")
    src.add_argument("--image-file", help="32x32 P6 PPM")
    hm.add_argument("--taps", nargs="+", help=f"subset of {list(TAPS)}")
    st = sub.add_parser("stages", parents=[common], help="early/middle/later attention sweep")
    st.add_argument("--reference-row", action="store_true",
                    help="append the published accuracies as a separate labelled row")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--trials", type=int, default=100)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(None, args)
        cfg = load_config(args.config, args.out, args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, ShapeError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
