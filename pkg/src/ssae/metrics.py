"""Pixel-level segmentation metrics and reconstruction-fidelity statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedMetricError


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    auprc: float


def _flat(scores, labels):
    s = np.concatenate([np.ravel(a) for a in scores]) if isinstance(scores, (list, tuple)) else np.ravel(scores)
    y = np.concatenate([np.ravel(a) for a in labels]) if isinstance(labels, (list, tuple)) else np.ravel(labels)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    return s.astype(np.float64), y.astype(bool)


def pr_curve(scores, labels) -> PRCurve:
    """Precision/recall at each distinct score cut, AUPRC = sum (R_i - R_{i-1}) P_i."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("precision-recall is undefined without positive labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each block of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    predicted = ends + 1
    precision = tp / predicted
    recall = tp / n_pos
    auprc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRCurve(recall, precision, s[ends], auprc)


def auprc(scores, labels) -> float:
    return pr_curve(scores, labels).auprc


def dice(mask, gt) -> float:
    a = np.asarray(getattr(mask, "mask", mask)) > 0
    b = np.asarray(gt) > 0
    if a.shape != b.shape:
        raise ShapeError(f"mask {a.shape} and ground truth {b.shape} differ")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def ceiling_dice(scores, gts) -> tuple[float, float]:
    """Best dataset-wide DICE over thresholds ``t`` with prediction ``score > t``.

    Candidates are every distinct score, +inf, and the float just below the
    minimum (which selects every pixel). Ties go to the lowest threshold.
    """
    s, y = _flat([getattr(m, "scores", m) for m in scores] if isinstance(scores, (list, tuple)) else getattr(scores, "scores", scores), gts)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("ceiling DICE is undefined without positive pixels")
    order = np.argsort(s, kind="mergesort")
    s, y = s[order], y[order]
    uniq_ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    # threshold = s[end]: predicted = pixels strictly above it
    pos_le = np.cumsum(y)[uniq_ends]
    predicted = len(s) - (uniq_ends + 1)
    tp = n_pos - pos_le
    thresholds = np.r_[np.nextafter(s[0], -np.inf), s[uniq_ends], np.inf]
    predicted = np.r_[len(s), predicted, 0]
    tp = np.r_[n_pos, tp, 0]
    scores_d = 2.0 * tp / (predicted + n_pos)
    best = int(np.argmax(scores_d))  # first maximum = lowest threshold
    return float(scores_d[best]), float(thresholds[best])


def recon_error_stats(inputs, reconstructions) -> dict:
    """Per-image mean absolute error and corpus box statistics."""
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    reconstructions = [np.asarray(a, dtype=np.float64) for a in reconstructions]
    if not inputs:
        raise UndefinedMetricError("no images to compare")
    if len(inputs) != len(reconstructions):
        raise ShapeError(f"{len(inputs)} inputs but {len(reconstructions)} reconstructions")
    per_image = []
    for a, b in zip(inputs, reconstructions):
        if a.shape != b.shape:
            raise ShapeError(f"input {a.shape} and reconstruction {b.shape} differ")
        per_image.append(float(np.abs(a - b).mean()))
    arr = np.array(per_image)
    q1, median, q3 = np.percentile(arr, [25, 50, 75])
    return {
        "n_images": len(arr),
        "pixels": int(sum(a.size for a in inputs)),
        "mean": float(arr.mean()),
        "median": float(median),
        "q1": float(q1),
        "q3": float(q3),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "per_image": per_image,
    }


@dataclass
class EvalReport:
    model: str
    variant: str
    resolution: str
    auprc: float
    ceiling_dice: float
    best_threshold: float
    pixels: int
    positives: int
    recon_error_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


CSV_FIELDS = ["model", "variant", "resolution", "auprc", "ceiling_dice", "best_threshold", "pixels", "positives"]


def evaluate(scores, gts, model="", variant="", resolution="") -> EvalReport:
    _, y = _flat(list(scores), list(gts))
    best, t = ceiling_dice(list(scores), list(gts))
    return EvalReport(
        model=model,
        variant=variant,
        resolution=resolution,
        auprc=auprc(list(scores), list(gts)),
        ceiling_dice=best,
        best_threshold=t,
        pixels=int(y.size),
        positives=int(y.sum()),
    )


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow({k: getattr(r, k) for k in CSV_FIELDS})
    return buf.getvalue()


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


def pr_curve_svg(curves: dict[str, PRCurve], width: int = 320, height: int = 320) -> str:
    """Standalone SVG with one recall/precision polyline per curve."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    pad = 30
    w, h = width - 2 * pad, height - 2 * pad
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="{pad}" y="{pad}" width="{w}" height="{h}" fill="none" stroke="#444"/>',
        f'<text x="{width / 2}" y="{height - 6}" text-anchor="middle" font-size="11">recall</text>',
        f'<text x="10" y="{height / 2}" text-anchor="middle" font-size="11" transform="rotate(-90 10 {height / 2})">precision</text>',
    ]
    for i, (name, c) in enumerate(curves.items()):
        r = np.r_[0.0, c.recall]
        p = np.r_[c.precision[0], c.precision]
        pts = " ".join(f"{pad + x * w:.2f},{pad + (1 - y) * h:.2f}" for x, y in zip(r, p))
        color = colors[i % len(colors)]
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        lines.append(f'<text x="{pad + 6}" y="{pad + 14 + 13 * i}" font-size="10" fill="{color}">{name} AUPRC={c.auprc:.3f}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
