"""Activation heatmaps, colour mapping, PPM output and stage reports."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import UsageError
from .ops import bilinear_matrix

STAGES = ("early", "middle", "later")
# Published CIFAR-10 accuracies (%) for attention at each stage, shown only as
# a labelled reference next to measured numbers.
REFERENCE_STAGE_ACCURACY = {"early": 94.71, "middle": 94.55, "later": 94.23}
STAGE_REPORT_HEADER = "stage,test_acc,entropy,top_decile_energy,mask_mean"


@dataclass
class Heatmap:
    values: np.ndarray  # H x W float32 in [0, 1]
    source: str = ""
    aggregation: str = "mean_abs"

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class NoiseMetrics:
    entropy: float
    top_decile_energy: float
    mask_mean: Optional[float] = None
    undefined: bool = False


def _min_max(h: np.ndarray) -> np.ndarray:
    lo, hi = h.min(), h.max()
    if hi == lo:
        return np.zeros(h.shape, dtype=np.float32)
    return ((h - lo) / (hi - lo)).astype(np.float32)


def aggregate(activation, aggregation="mean_abs") -> np.ndarray:
    """Collapse a 1 x C x H x W activation to an H x W float64 map."""
    a = np.asarray(getattr(activation, "data", activation))
    if a.ndim != 4 or a.shape[0] != 1:
        raise UsageError(f"expected a single-image 1 x C x H x W activation, got {a.shape}")
    a = a[0].astype(np.float64)
    if aggregation == "mean_abs":
        return np.abs(a).mean(axis=0)
    if aggregation == "max_abs":
        return np.abs(a).max(axis=0)
    ch = aggregation
    if isinstance(ch, str) and ch.startswith("channel:"):
        ch = ch.split(":", 1)[1]
    try:
        ch = int(ch)
    except (TypeError, ValueError):
        raise UsageError(f"unknown aggregation {aggregation!r}") from None
    if not 0 <= ch < a.shape[0]:
        raise UsageError(f"channel {ch} out of range for {a.shape[0]} channels")
    return a[ch]


def extract_heatmap(activation, aggregation="mean_abs", source: str = "") -> Heatmap:
    """Aggregate over channels, then min-max normalize to [0, 1].

    The map is computed in float64 and rounded once to float32, so scaling
    the activation by a positive factor gives the same heatmap: bit for bit
    for powers of two, and for other factors unless the min subtraction
    cancels nearly all digits. A constant map normalizes to all zeros.
    """
    h = aggregate(activation, aggregation)
    tag = aggregation if isinstance(aggregation, str) else f"channel:{aggregation}"
    return Heatmap(_min_max(h), source, tag)


def resize_heatmap(h: Heatmap, height: int, width: int) -> Heatmap:
    if height < 1 or width < 1:
        raise UsageError(f"target size must be positive, got {height}x{width}")
    ah = bilinear_matrix(h.shape[0], height)
    aw = bilinear_matrix(h.shape[1], width)
    out = np.clip(ah @ h.values.astype(np.float64) @ aw.T, 0.0, 1.0)
    return Heatmap(out.astype(np.float32), h.source, h.aggregation)


def _to_byte(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def jet(t) -> np.ndarray:
    """Closed-form jet palette: t in [0, 1] -> (r, g, b) floats in [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def colormap(h: Heatmap) -> np.ndarray:
    return _to_byte(jet(h.values))


def grayscale(h: Heatmap) -> np.ndarray:
    g = _to_byte(h.values)
    return np.repeat(g[:, :, None], 3, axis=2)


def overlay(image: np.ndarray, hm: np.ndarray, alpha: float) -> np.ndarray:
    if image.shape != hm.shape:
        raise UsageError(f"overlay needs equal sizes, got {image.shape} and {hm.shape}")
    if not 0 <= alpha <= 1:
        raise UsageError(f"alpha must lie in [0, 1], got {alpha}")
    mixed = (1 - alpha) * image.astype(np.float64) + alpha * hm.astype(np.float64)
    return np.floor(mixed + 0.5).astype(np.uint8)


def chw_to_rgb(image: np.ndarray) -> np.ndarray:
    """3 x H x W uint8 (dataset layout) -> H x W x 3."""
    return np.ascontiguousarray(np.transpose(image, (1, 2, 0)))


def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def hstack(images: Sequence[np.ndarray], gap: int = 2) -> np.ndarray:
    h = images[0].shape[0]
    spacer = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for i, im in enumerate(images):
        if i:
            parts.append(spacer)
        parts.append(im)
    return np.concatenate(parts, axis=1)


# noise metrics ---------------------------------------------------------------

def noise_metrics(h: Heatmap, mask=None) -> NoiseMetrics:
    """Entropy of the heatmap as a distribution and top-10% energy share.

    An all-zero map has no distribution; entropy is then that of the uniform
    distribution and ``top_decile_energy`` is reported as 0 with
    ``undefined`` set.
    """
    v = h.values.astype(np.float64).reshape(-1)
    n = v.size
    k = -(-n // 10)
    total = v.sum()
    mask_mean = None
    if mask is not None:
        mask_mean = float(np.mean(getattr(mask, "data", mask)))
    if total <= 0:
        return NoiseMetrics(math.log(n), 0.0, mask_mean, undefined=True)
    p = v / total
    nz = p[p > 0]
    entropy = max(float(-(nz * np.log(nz)).sum()), 0.0)
    top = np.sort(v)[::-1][:k].sum() / total
    return NoiseMetrics(entropy, float(min(top, 1.0)), mask_mean)


# PPM -------------------------------------------------------------------------

def ppm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise UsageError(f"expected an H x W x 3 uint8 image, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise UsageError("cannot write a zero-sized image")
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_ppm(img: np.ndarray, path) -> None:
    data = ppm_bytes(img)
    with open(path, "wb") as fh:
        fh.write(data)


def read_ppm(path) -> np.ndarray:
    """Minimal binary P6 reader (maxval 255, whitespace-separated header)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path}: not a P6/255 PPM")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1:]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


# stage comparison ------------------------------------------------------------

@dataclass
class StageRun:
    stage: str
    metrics: list  # MetricsRow per epoch
    heatmaps: list  # Heatmap of the attended feature map, one per viz image
    masks: list = field(default_factory=list)
    image_paths: list = field(default_factory=list)


@dataclass
class StageRow:
    stage: str
    test_acc: float
    noise: NoiseMetrics
    image_paths: list


@dataclass
class StageReport:
    rows: list

    @property
    def stages(self) -> list:
        return [r.stage for r in self.rows]


def stage_report(runs: Sequence[StageRun]) -> StageReport:
    """One row per stage, in early/middle/later order.

    Noise metrics are averaged over the run's heatmaps.
    """
    if not runs:
        raise UsageError("stage_report needs at least one run")
    seen = set()
    for r in runs:
        if r.stage not in STAGES:
            raise UsageError(f"unknown stage {r.stage!r}")
        if r.stage in seen:
            raise UsageError(f"duplicate stage {r.stage!r}")
        seen.add(r.stage)
    rows = []
    for run in sorted(runs, key=lambda r: STAGES.index(r.stage)):
        per = [noise_metrics(h, m) for h, m in
               zip(run.heatmaps, run.masks or [None] * len(run.heatmaps))]
        if per:
            means = [m.mask_mean for m in per if m.mask_mean is not None]
            noise = NoiseMetrics(
                float(np.mean([m.entropy for m in per])),
                float(np.mean([m.top_decile_energy for m in per])),
                float(np.mean(means)) if means else None,
                any(m.undefined for m in per),
            )
        else:
            noise = NoiseMetrics(float("nan"), float("nan"), None, True)
        acc = run.metrics[-1].test_acc if run.metrics else float("nan")
        rows.append(StageRow(run.stage, acc, noise, list(run.image_paths)))
    return StageReport(rows)


def render_stage_csv(report: StageReport) -> str:
    lines = [STAGE_REPORT_HEADER]
    for r in report.rows:
        mm = "" if r.noise.mask_mean is None else f"{r.noise.mask_mean:.6f}"
        lines.append(f"{r.stage},{r.test_acc:.6f},{r.noise.entropy:.6f},"
                     f"{r.noise.top_decile_energy:.6f},{mm}")
    return "\n".join(lines) + "\n"


def render_stage_table(report: StageReport, reference_row: bool = False) -> str:
    """Stage comparison as a markdown table, measured numbers first.

    With ``reference_row`` a separate, clearly labelled row carries the
    published full-scale accuracies.
    """
    cols = [s for s in STAGES if s in report.stages]
    by = {r.stage: r for r in report.rows}
    head = "| | " + " | ".join(f"{s.capitalize()} Stage" for s in cols) + " |"
    lines = [head, "|---" * (len(cols) + 1) + "|"]
    lines.append("| measured test accuracy | "
                 + " | ".join(f"{100 * by[s].test_acc:.2f}%" for s in cols) + " |")
    lines.append("| heatmap entropy (nats) | "
                 + " | ".join(f"{by[s].noise.entropy:.4f}" for s in cols) + " |")
    lines.append("| top-decile energy | "
                 + " | ".join(f"{by[s].noise.top_decile_energy:.4f}" for s in cols) + " |")
    lines.append("| mask mean | " + " | ".join(
        "-" if by[s].noise.mask_mean is None else f"{by[s].noise.mask_mean:.4f}" for s in cols) + " |")
    if reference_row:
        lines.append("| full-scale reference (not measured) | "
                     + " | ".join(f"{REFERENCE_STAGE_ACCURACY[s]:.2f}%" for s in cols) + " |")
    return "\n".join(lines) + "\n"


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
