"""Localization metrics: consensus maps, cIoU, threshold curves, report files.

Conventions (all recorded in emitted reports via the config hash):
  * predictions are bilinearly upsampled to the ground-truth raster with
    corner-aligned sampling before binarization,
  * the default binarization threshold is the median of the upsampled map,
  * success at a threshold uses >= (ties count), including at 0.5.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import fileio
from .numerics import ConfigError, DataError, DimensionError, as_matrix, coerce

Box = tuple[float, float, float, float]

ANNOTATIONS_FORMAT = "marginnce-annotations"
PREDICTIONS_FORMAT = "marginnce-predictions"
FILE_VERSION = 1


@dataclass(frozen=True)
class ConsensusMap:
    """Per-pixel annotator agreement in [0, 1]."""

    weights: np.ndarray


@dataclass(frozen=True)
class PredictionMap:
    """Raw localization scores plus the raster they are judged at."""

    scores: np.ndarray
    target_shape: tuple[int, int]


@dataclass(frozen=True)
class EvalCurve:
    thresholds: np.ndarray
    success_rates: np.ndarray
    auc: float


@dataclass(frozen=True)
class EvalConfig:
    """How predicted maps are binarized and how the success curve is sampled."""

    threshold_rule: str = "median"  # "median" or "absolute"
    absolute_threshold: float | None = None
    auc_step: float = 0.05
    upsample: int = 1

    def validate(self, prefix: str = "eval") -> None:
        if self.threshold_rule not in ("median", "absolute"):
            raise ConfigError(
                f"{prefix}.threshold_rule must be 'median' or 'absolute', got {self.threshold_rule!r}")
        if self.threshold_rule == "absolute" and self.absolute_threshold is None:
            raise ConfigError(f"{prefix}.absolute_threshold is required when threshold_rule='absolute'")
        _grid_points(self.auc_step)
        if self.upsample < 1:
            raise ConfigError(f"{prefix}.upsample must be >= 1, got {self.upsample}")

    def to_dict(self) -> dict:
        return {"threshold_rule": self.threshold_rule,
                "absolute_threshold": self.absolute_threshold,
                "auc_step": self.auc_step, "upsample": self.upsample}

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "eval") -> "EvalConfig":
        d = dict(d)
        unknown = set(d) - {"threshold_rule", "absolute_threshold", "auc_step", "upsample"}
        if unknown:
            raise ConfigError(f"{prefix}: unknown field(s) {sorted(unknown)}")
        absolute = d.get("absolute_threshold", cls.absolute_threshold)
        if absolute is not None:
            absolute = coerce(prefix, "absolute_threshold", absolute, float)
        cfg = cls(
            threshold_rule=coerce(prefix, "threshold_rule",
                                  d.get("threshold_rule", cls.threshold_rule), str),
            absolute_threshold=absolute,
            auc_step=coerce(prefix, "auc_step", d.get("auc_step", cls.auc_step), float),
            upsample=coerce(prefix, "upsample", d.get("upsample", cls.upsample), int),
        )
        cfg.validate(prefix)
        return cfg


def validate_box(box) -> Box:
    try:
        x0, y0, x1, y1 = (float(v) for v in box)
    except (TypeError, ValueError):
        raise DataError(f"box must be 4 numbers (x0, y0, x1, y1), got {box!r}")
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise DataError(
            f"degenerate or out-of-range box: ({x0}, {y0}, {x1}, {y1})")
    return (x0, y0, x1, y1)


def consensus_from_boxes(boxes, shape) -> ConsensusMap:
    """Rasterize annotator boxes into per-pixel agreement weights.

    A pixel counts as covered when its center falls inside the half-open box
    [x0, x1) x [y0, y1); the weight is covering boxes over total boxes.
    """
    height, width = int(shape[0]), int(shape[1])
    if height < 1 or width < 1:
        raise DimensionError(f"raster shape must be positive, got {shape!r}")
    boxes = list(boxes)
    if not boxes:
        raise DataError("consensus_from_boxes: empty box list")
    cx = (np.arange(width) + 0.5) / width
    cy = (np.arange(height) + 0.5) / height
    counts = np.zeros((height, width), dtype=np.float64)
    for box in boxes:
        x0, y0, x1, y1 = validate_box(box)
        counts += np.outer((cy >= y0) & (cy < y1), (cx >= x0) & (cx < x1))
    weights = counts / len(boxes)
    if weights.max() <= 0.0:
        raise DataError("no pixel center is covered by any box; raster too coarse")
    return ConsensusMap(weights=weights)


def bilinear_upsample(scores, out_shape):
    """Corner-aligned bilinear resampling (endpoints map onto endpoints)."""
    src = as_matrix(scores, "scores")
    height, width = int(out_shape[0]), int(out_shape[1])
    if height < 1 or width < 1:
        raise DimensionError(f"target shape must be positive, got {out_shape!r}")
    h, w = src.shape
    if (height, width) == (h, w):
        return src.copy()

    def coords(n_src, n_out):
        if n_src == 1 or n_out == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * ((n_src - 1) / (n_out - 1))

    yc = coords(h, height)
    xc = coords(w, width)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (yc - y0)[:, None]
    fx = (xc - x0)[None, :]
    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def binarization_threshold(scores, cfg: EvalConfig = EvalConfig()) -> float:
    """Threshold used to binarize an (already upsampled) score map."""
    cfg.validate()
    if cfg.threshold_rule == "absolute":
        return float(cfg.absolute_threshold)
    return float(np.median(scores))


def _ciou_mask(active, weights) -> float:
    matched = float(weights[active].sum())
    false_pos = int(np.count_nonzero(active & (weights == 0.0)))
    return matched / (float(weights.sum()) + false_pos)


def ciou(pred: PredictionMap, gt: ConsensusMap, pred_threshold: float) -> float:
    """Consensus IoU: matched GT mass over GT mass plus unmatched predicted pixels."""
    up = bilinear_upsample(pred.scores, pred.target_shape)
    weights = gt.weights
    if up.shape != weights.shape:
        raise DimensionError(
            f"prediction evaluated at {up.shape} but ground truth is {weights.shape}")
    return _ciou_mask(up >= pred_threshold, weights)


def evaluate_prediction(scores, boxes, shape, cfg: EvalConfig = EvalConfig()) -> float:
    """Upsample, resolve the binarization threshold per cfg, and score one sample."""
    gt = consensus_from_boxes(boxes, shape)
    up = bilinear_upsample(np.asarray(scores, dtype=np.float64), shape)
    thr = binarization_threshold(up, cfg)
    return _ciou_mask(up >= thr, gt.weights)


def _grid_points(step: float) -> int:
    if not np.isfinite(step) or step <= 0 or step > 1:
        raise ConfigError(f"threshold step must lie in (0, 1], got {step}")
    k = round(1.0 / step)
    if k < 1 or abs(k * step - 1.0) > 1e-9:
        raise ConfigError(f"threshold step must divide 1 evenly, got {step}")
    return k


def eval_curve(cious, step: float = 0.05) -> EvalCurve:
    """Success-rate-vs-threshold curve over {0, step, ..., 1} plus its trapezoid area."""
    vals = np.asarray(list(cious), dtype=np.float64)
    if vals.size == 0:
        raise DataError("eval_curve: empty sample list")
    if np.any(vals < 0.0) or np.any(vals > 1.0):
        raise DataError("cIoU values must lie in [0, 1]")
    k = _grid_points(step)
    thresholds = np.arange(k + 1) / k
    success = (vals[None, :] >= thresholds[:, None]).mean(axis=1)
    auc = float(np.trapezoid(success, thresholds))
    return EvalCurve(thresholds=thresholds, success_rates=success, auc=auc)


def ciou_at_half(cious) -> float:
    """Percent of samples with cIoU >= 0.5."""
    vals = np.asarray(list(cious), dtype=np.float64)
    if vals.size == 0:
        raise DataError("ciou_at_half: empty sample list")
    return float(100.0 * (vals >= 0.5).mean())


# ---------------------------------------------------------------------------
# file formats


def save_annotations(path, shape, boxes_by_id) -> None:
    samples = []
    for sid in sorted(boxes_by_id):
        boxes = [list(validate_box(b)) for b in boxes_by_id[sid]]
        if not boxes:
            raise DataError(f"sample {sid!r} has no boxes")
        samples.append({"id": str(sid), "boxes": boxes})
    doc = {"format": ANNOTATIONS_FORMAT, "version": FILE_VERSION,
           "height": int(shape[0]), "width": int(shape[1]), "samples": samples}
    fileio.atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_annotations(path):
    """Returns ((height, width), {sample_id: [boxes]})."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})")
    if doc.get("format") != ANNOTATIONS_FORMAT:
        raise DataError(f"{path}: not an annotations file")
    shape = (int(doc["height"]), int(doc["width"]))
    boxes_by_id = {}
    for rec in doc.get("samples", []):
        sid = str(rec["id"])
        if sid in boxes_by_id:
            raise DataError(f"{path}: duplicate sample id {sid!r}")
        boxes_by_id[sid] = [validate_box(b) for b in rec["boxes"]]
    if not boxes_by_id:
        raise DataError(f"{path}: no samples")
    return shape, boxes_by_id


def save_predictions(path, preds) -> None:
    samples = []
    for sid in sorted(preds):
        arr = as_matrix(preds[sid], f"prediction {sid!r}")
        samples.append({"id": str(sid), "h": arr.shape[0], "w": arr.shape[1],
                        "scores": [float(v) for v in arr.ravel()]})
    doc = {"format": PREDICTIONS_FORMAT, "version": FILE_VERSION, "samples": samples}
    fileio.atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_predictions(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})")
    if doc.get("format") != PREDICTIONS_FORMAT:
        raise DataError(f"{path}: not a predictions file")
    preds = {}
    for rec in doc.get("samples", []):
        sid = str(rec["id"])
        if sid in preds:
            raise DataError(f"{path}: duplicate sample id {sid!r}")
        h, w = int(rec["h"]), int(rec["w"])
        flat = np.asarray(rec["scores"], dtype=np.float64)
        if flat.size != h * w:
            raise DataError(f"{path}: sample {sid!r} declares {h}x{w} but has {flat.size} scores")
        preds[sid] = flat.reshape(h, w)
    if not preds:
        raise DataError(f"{path}: no samples")
    return preds


def evaluate_batch(preds, boxes_by_id, shape, cfg: EvalConfig = EvalConfig()):
    """Score every sample by id; returns (sorted per-sample rows, summary dict)."""
    missing_pred = sorted(set(boxes_by_id) - set(preds))
    missing_anno = sorted(set(preds) - set(boxes_by_id))
    if missing_pred or missing_anno:
        raise DataError(
            "sample id mismatch: "
            f"missing predictions for {missing_pred}, missing annotations for {missing_anno}")
    rows = [(sid, evaluate_prediction(preds[sid], boxes_by_id[sid], shape, cfg))
            for sid in sorted(preds)]
    cious = [c for _, c in rows]
    summary = {
        "ciou_at_0.5_percent": ciou_at_half(cious),
        "auc_percent": 100.0 * eval_curve(cious, cfg.auc_step).auc,
    }
    return rows, summary


def write_metrics_report(path, rows, summary, config_hash: str) -> None:
    buf = io.StringIO()
    buf.write("# marginnce metrics report\n")
    buf.write(f"# config_sha256: {config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "ciou"])
    for sid, value in rows:
        writer.writerow([sid, repr(float(value))])
    buf.write("# summary\n")
    writer.writerow(["ciou_at_0.5_percent", "auc_percent"])
    writer.writerow([repr(float(summary["ciou_at_0.5_percent"])),
                     repr(float(summary["auc_percent"]))])
    fileio.atomic_write_text(path, buf.getvalue())


def read_metrics_report(path):
    """Parse write_metrics_report output back into (rows, summary)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if len(body) < 3 or body[0] != "sample_id,ciou":
        raise DataError(f"{path}: not a metrics report")
    rows = []
    for ln in body[1:-2]:
        sid, value = next(csv.reader([ln]))
        rows.append((sid, float(value)))
    keys = body[-2].split(",")
    vals = [float(v) for v in next(csv.reader([body[-1]]))]
    return rows, dict(zip(keys, vals))
