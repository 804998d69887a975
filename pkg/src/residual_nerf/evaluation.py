"""Cropped depth metrics, per-epoch curves and method comparison tables."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fields import FieldBundle, load_bundle
from .renderer import CameraFrame, DepthMap, render_frame


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class CropRect:
    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, width: int, height: int) -> None:
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise EvaluationError(f"invalid crop {self} for a {width}x{height} image")

    def mask(self, width: int, height: int) -> np.ndarray:
        self.validate(width, height)
        m = np.zeros((height, width), dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m


def as_crop(crop, width: int, height: int) -> CropRect:
    if crop is None:
        return CropRect(0, 0, width, height)
    return crop if isinstance(crop, CropRect) else CropRect(*(int(v) for v in crop))


# methods and how each one turns a bundle into depth
METHODS = {
    "nerf": ("single", "expected"),
    "dexnerf": ("single", "threshold"),
    "residual": ("residual", "threshold"),
    "naive": ("naive", "threshold"),
}
METHOD_LABELS = {
    "nerf": "NeRF (expected depth)",
    "dexnerf": "Dex-NeRF (threshold depth)",
    "residual": "Residual-NeRF",
    "naive": "Residual-NeRF-S (naive sum)",
}


@dataclass
class FrameMetrics:
    name: str
    mae: float
    rmse: float
    n: int
    holes: int


@dataclass
class MetricReport:
    method: str
    mae: float
    rmse: float
    n: int
    hole_fraction: float = 0.0
    excluded_gt: int = 0
    rejected_frames: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    epoch: int | None = None
    wall_seconds: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _pairs(pred, gt, crops):
    """Yield (name, pred values, gt values, invalid-pred mask, excluded count) per frame."""
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt):
        raise EvaluationError(f"{len(pred)} predictions for {len(gt)} ground-truth maps")
    crops = [None] * len(gt) if crops is None else list(crops)
    for i, (p, g, c) in enumerate(zip(pred, gt, crops)):
        valid = None
        if isinstance(p, DepthMap):
            valid = p.valid
            p = p.depth
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise EvaluationError(f"frame {i}: prediction {p.shape} vs ground truth {g.shape}")
        if p.ndim == 1:
            p, g = p[None], g[None]
            valid = None if valid is None else np.asarray(valid)[None]
        h, w = g.shape
        m = as_crop(c, w, h).mask(w, h)
        finite = np.isfinite(g)
        use = m & finite
        holes = np.zeros_like(use) if valid is None else ~np.asarray(valid, dtype=bool)
        yield i, p[use], g[use], holes[use], int((m & ~finite).sum())


def evaluate_depth(pred, gt, crops=None, method: str = "") -> MetricReport:
    """Pool absolute and squared errors over all cropped pixels of all frames.

    Pixels with non-finite ground truth are excluded and counted. Frames whose
    crop holds no usable pixel are rejected rather than averaged in.
    """
    abs_sum = sq_sum = 0.0
    n = holes = excluded = 0
    frames, rejected = [], []
    for i, p, g, hole, excl in _pairs(pred, gt, crops):
        excluded += excl
        if p.size == 0:
            rejected.append(i)
            continue
        err = p - g
        frames.append(FrameMetrics(str(i), float(np.abs(err).mean()),
                                   float(np.sqrt((err ** 2).mean())), int(p.size), int(hole.sum())))
        abs_sum += float(np.abs(err).sum())
        sq_sum += float((err ** 2).sum())
        n += p.size
        holes += int(hole.sum())
    if n == 0:
        raise EvaluationError("no pixels to evaluate: every crop is empty")
    return MetricReport(method, abs_sum / n, float(np.sqrt(sq_sum / n)), n, holes / n, excluded,
                        rejected, frames)


def depth_mae(pred, gt, crops=None) -> float:
    return evaluate_depth(pred, gt, crops).mae


def depth_rmse(pred, gt, crops=None) -> float:
    return evaluate_depth(pred, gt, crops).rmse


def render_method_depth(bundle: FieldBundle, frame: CameraFrame, box, method: str,
                        m: float = 3.0, n_samples: int = 128,
                        white_background: bool = True) -> DepthMap:
    """Depth for the crop of ``frame`` using one of :data:`METHODS`."""
    mode, kind = METHODS[method]
    crop = as_crop(frame.crop, frame.width, frame.height)
    out = render_frame(bundle, frame, box, mode, n_samples, m, white_background,
                       pixel_mask=crop.mask(frame.width, frame.height))
    if kind == "expected":
        return DepthMap(out.expected, np.ones_like(out.threshold.valid), frame.crop)
    return out.threshold


def evaluate_bundle(bundle: FieldBundle, frames, box, method: str, m: float = 3.0,
                    n_samples: int = 128, white_background: bool = True) -> MetricReport:
    """Render and score every frame that has ground truth and an object crop."""
    usable = [f for f in frames if f.gt_depth is not None and f.crop is not None]
    if not usable:
        raise EvaluationError("no frames with ground-truth depth and a crop")
    preds = [render_method_depth(bundle, f, box, method, m, n_samples, white_background)
             for f in usable]
    report = evaluate_depth(preds, [f.gt_depth for f in usable], [f.crop for f in usable], method)
    for fm in report.frames:
        fm.name = usable[int(fm.name)].name
    return report


def epoch_curve(series, frames, box, method: str, m: float = 3.0, n_samples: int = 128,
                white_background: bool = True, out_csv=None) -> list[dict]:
    """Metrics per checkpoint. ``series`` is ``[(epoch, bundle or path), ...]``
    in strictly ascending epoch order."""
    epochs = [e for e, _ in series]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise EvaluationError(f"checkpoint epochs must be strictly ascending, got {epochs}")
    rows = []
    for epoch, bundle in series:
        if not isinstance(bundle, FieldBundle):
            bundle = load_bundle(bundle)
        rep = evaluate_bundle(bundle, frames, box, method, m, n_samples, white_background)
        rows.append({"epoch": epoch, "rmse": rep.rmse, "mae": rep.mae})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "rmse", "mae"])
            w.writeheader()
            w.writerows(rows)
    return rows


def first_epoch_within(rows: list[dict], factor: float = 1.5, key: str = "rmse") -> int:
    """First epoch whose metric is within ``factor`` of the final epoch's."""
    target = factor * rows[-1][key]
    return next(r["epoch"] for r in rows if r[key] <= target)


def relative_delta(value: float, reference: float) -> float:
    """Percent change of ``value`` against ``reference``."""
    if reference == 0:
        return 0.0 if value == 0 else float("inf")
    return 100.0 * (value - reference) / reference


def compare_methods(reports: dict, reference: str = "dexnerf") -> dict:
    """Table of metrics per scene and method with percent deltas vs ``reference``.

    ``reports`` maps scene -> method -> MetricReport. Every method of a scene
    must have been scored on the same frames.
    """
    table = {}
    for scene, by_method in reports.items():
        frame_sets = {tuple(f.name for f in r.frames) for r in by_method.values()}
        if len(frame_sets) > 1:
            raise EvaluationError(f"scene {scene}: methods were evaluated on different frames")
        ref = by_method.get(reference)
        rows = {}
        for method, rep in by_method.items():
            row = {"label": METHOD_LABELS.get(method, method), "rmse": rep.rmse, "mae": rep.mae,
                   "n": rep.n, "hole_fraction": rep.hole_fraction}
            if ref is not None:
                row["rmse_delta_pct"] = relative_delta(rep.rmse, ref.rmse)
                row["mae_delta_pct"] = relative_delta(rep.mae, ref.mae)
            rows[method] = row
        table[scene] = rows
    return table


def format_table(table: dict) -> str:
    lines = [f"{'scene':<6} {'method':<30} {'RMSE':>9} {'MAE':>9} {'dRMSE%':>8} {'holes':>6}"]
    for scene, rows in table.items():
        for method, r in rows.items():
            delta = r.get("rmse_delta_pct")
            d = f"{delta:8.1f}" if delta is not None else " " * 8
            lines.append(f"{scene:<6} {r['label']:<30} {r['rmse']:9.4f} {r['mae']:9.4f} {d} "
                         f"{r['hole_fraction']:6.3f}")
    return "\n".join(lines)


def write_report(path, table: dict) -> None:
    path = Path(path)
    path.write_text(json.dumps(table, indent=2, sort_keys=True))
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "method", "rmse", "mae", "n", "hole_fraction", "rmse_delta_pct",
                    "mae_delta_pct"])
        for scene, rows in table.items():
            for method, r in rows.items():
                w.writerow([scene, method, r["rmse"], r["mae"], r["n"], r["hole_fraction"],
                            r.get("rmse_delta_pct", ""), r.get("mae_delta_pct", "")])


def write_error_heatmap(path, pred: np.ndarray, gt: np.ndarray, vmax: float | None = None) -> None:
    """PNG of |pred - gt| (black = 0, white = vmax); non-finite GT is red."""
    from .imaging import write_png_rgb

    err = np.abs(np.asarray(pred, dtype=np.float64) - gt)
    bad = ~np.isfinite(err)
    vmax = vmax or (float(np.nanmax(np.where(bad, np.nan, err))) if (~bad).any() else 1.0) or 1.0
    g = np.clip(np.where(bad, 0, err) / vmax, 0, 1)
    rgb = np.repeat(g[..., None], 3, axis=2)
    rgb[bad] = (1.0, 0.0, 0.0)
    write_png_rgb(path, rgb)
