"""Evaluation harness: IQR fencing, regression and confusion metrics, grouped reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

QUALITY_ORDER = {"all": 0, "optimal": 1, "sub-optimal": 2}


@dataclass(frozen=True)
class ReadingRecord:
    image_id: str
    observed_cm: float
    predicted_cm: float | None
    model_tag: str
    stage: int
    quality: str
    waterline_pred_row: float | None = None
    waterline_true_row: float | None = None
    confidence: float | None = None

    @classmethod
    def from_dict(cls, d: dict) -> ReadingRecord:
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class IqrResult:
    kept: list[int]
    removed: list[int]
    q1: float | None
    q3: float | None
    filtered: bool  # False when there were too few values to fence

    @property
    def removed_pct(self) -> float:
        n = len(self.kept) + len(self.removed)
        return 100.0 * len(self.removed) / n if n else 0.0


@dataclass(frozen=True)
class MetricsSummary:
    n_used: int
    n_outliers_removed: int
    outlier_pct: float
    bias_cm: float | None
    mae_cm: float | None
    rmse_cm: float | None
    r2: float | None


def quartiles(values) -> tuple[float, float]:
    """Q1 and Q3 by linear interpolation between order statistics."""
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("quartiles of an empty sequence")

    def q(p: float) -> float:
        pos = p * (len(xs) - 1)
        lo = math.floor(pos)
        hi = min(lo + 1, len(xs) - 1)
        return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)

    return q(0.25), q(0.75)


def iqr_filter(residuals, k: float = 1.5) -> IqrResult:
    res = [float(r) for r in residuals]
    if len(res) < 4:
        return IqrResult(list(range(len(res))), [], None, None, False)
    q1, q3 = quartiles(res)
    spread = q3 - q1
    lo, hi = q1 - k * spread, q3 + k * spread
    kept = [i for i, r in enumerate(res) if lo <= r <= hi]
    removed = [i for i, r in enumerate(res) if not lo <= r <= hi]
    return IqrResult(kept, removed, q1, q3, True)


def regression_metrics(observed, predicted, n_outliers_removed: int = 0) -> MetricsSummary:
    obs = np.asarray(observed, dtype=np.float64)
    pred = np.asarray(predicted, dtype=np.float64)
    if obs.shape != pred.shape:
        raise ValueError("observed and predicted lengths differ")
    if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(pred))):
        raise ValueError("metrics need finite values")
    n = len(obs)
    total = n + n_outliers_removed
    pct = 100.0 * n_outliers_removed / total if total else 0.0
    if n == 0:
        return MetricsSummary(0, n_outliers_removed, pct, None, None, None, None)
    err = pred - obs
    bias = float(np.mean(err))
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err * err)))
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err * err)) / ss_tot if ss_tot > 0 else None
    return MetricsSummary(n, n_outliers_removed, pct, bias, mae, rmse, r2)


@dataclass(frozen=True)
class ConfusionSummary:
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None
    f1: float | None


def _ratio(a: int, b: int) -> float | None:
    return a / b if b else None


def confusion_metrics(records, zone_px: float = 5, threshold: float = 0.20) -> ConfusionSummary:
    """Counts waterline detections; a record may also be a plain dict.

    Each record is one detection (pred row, confidence) against one annotated
    row. An annotated image with no accepted detection is a false negative.
    """
    rows = [asdict(r) if isinstance(r, ReadingRecord) else dict(r) for r in records]
    tp = fp = 0
    images: dict[str, bool] = {}
    for i, r in enumerate(rows):
        img = r.get("image_id", i)
        true_row = r.get("waterline_true_row")
        pred_row = r.get("waterline_pred_row")
        conf = r.get("confidence")
        accepted = pred_row is not None and conf is not None and conf >= threshold
        hit = accepted and true_row is not None and abs(pred_row - true_row) <= zone_px
        if accepted:
            if hit:
                tp += 1
            else:
                fp += 1
        if true_row is not None:
            images[img] = images.get(img, False) or accepted
    fn = sum(1 for found in images.values() if not found)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = (2 * precision * recall / (precision + recall)
          if precision is not None and recall is not None and precision + recall > 0 else None)
    return ConfusionSummary(tp, fp, fn, precision, recall, f1)


# -- grouped tables ------------------------------------------------------------

COLUMNS = ("model_tag", "stage", "quality", "n_total", "n_rejected", "rejection_rate_pct", "n_used",
           "n_outliers_removed", "outlier_pct", "bias_cm", "mae_cm", "rmse_cm", "r2", "avg_error_cm")
HEATMAP_METRICS = ("bias_cm", "mae_cm", "rmse_cm", "r2", "avg_error_cm", "outlier_pct", "rejection_rate_pct")


def _group_row(model: str, stage: int, quality: str, recs: list[ReadingRecord], k: float) -> dict:
    parsed = [r for r in recs if r.predicted_cm is not None]
    n_total = len(recs)
    n_rej = n_total - len(parsed)
    obs = [r.observed_cm for r in parsed]
    pred = [r.predicted_cm for r in parsed]
    fence = iqr_filter([p - o for o, p in zip(obs, pred)], k)
    m = regression_metrics([obs[i] for i in fence.kept], [pred[i] for i in fence.kept], len(fence.removed))
    avg = float(np.mean([abs(p - o) for o, p in zip(obs, pred)])) if parsed else None
    return {
        "model_tag": model, "stage": stage, "quality": quality,
        "n_total": n_total, "n_rejected": n_rej,
        "rejection_rate_pct": 100.0 * n_rej / n_total if n_total else 0.0,
        "n_used": m.n_used, "n_outliers_removed": m.n_outliers_removed, "outlier_pct": m.outlier_pct,
        "bias_cm": m.bias_cm, "mae_cm": m.mae_cm, "rmse_cm": m.rmse_cm, "r2": m.r2, "avg_error_cm": avg,
    }


def quality_breakdown(records, k: float = 1.5, qualities=("optimal", "sub-optimal")) -> list[dict]:
    """One row per (model, stage, quality) plus an ``all`` row per (model, stage).

    Outliers are fenced per group on residuals; rejected predictions only
    count towards the rejection rate. ``avg_error_cm`` is the mean absolute
    error over every parsed prediction before fencing.
    """
    recs = sorted(records, key=lambda r: r.image_id)
    pairs = sorted({(r.model_tag, int(r.stage)) for r in recs})
    rows = []
    for model, stage in pairs:
        group = [r for r in recs if r.model_tag == model and int(r.stage) == stage]
        rows.append(_group_row(model, stage, "all", group, k))
        names = sorted(set(qualities) | {r.quality for r in group}, key=lambda q: (QUALITY_ORDER.get(q, 9), q))
        for q in names:
            rows.append(_group_row(model, stage, q, [r for r in group if r.quality == q], k))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in COLUMNS])
    return buf.getvalue()


def heatmap_csv(rows: list[dict]) -> str:
    """Groups x metrics matrix for plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("group",) + HEATMAP_METRICS)
    for r in rows:
        w.writerow([f"{r['model_tag']}/stage{r['stage']}/{r['quality']}"] + [_fmt(r[m]) for m in HEATMAP_METRICS])
    return buf.getvalue()


def report_json(rows: list[dict], confusion: ConfusionSummary | None = None) -> str:
    payload = {"groups": rows}
    if confusion is not None:
        payload["confusion"] = asdict(confusion)
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def load_report_json(text: str) -> tuple[list[dict], ConfusionSummary | None]:
    data = json.loads(text)
    conf = data.get("confusion")
    return data["groups"], (ConfusionSummary(**conf) if conf is not None else None)


def emit_report(rows: list[dict], out_dir: str | Path, confusion: ConfusionSummary | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "csv": (out / "report.csv", report_csv(rows)),
        "json": (out / "report.json", report_json(rows, confusion)),
        "heatmap": (out / "heatmap.csv", heatmap_csv(rows)),
    }
    for path, text in files.values():
        path.write_text(text)
    return {name: path for name, (path, _) in files.items()}


def summary_table(rows: list[dict]) -> str:
    """Fixed-width text rendering for the terminal."""
    head = f"{'model':<12}{'stage':>6}  {'quality':<12}{'n':>5}{'rej%':>8}{'out%':>8}" \
           f"{'bias':>9}{'MAE':>9}{'RMSE':>9}{'R2':>8}{'avg|e|':>9}"
    lines = [head]

    def num(v, width, digits=2):
        return f"{'-':>{width}}" if v is None else f"{v:>{width}.{digits}f}"

    for r in rows:
        lines.append(f"{r['model_tag']:<12}{r['stage']:>6}  {r['quality']:<12}{r['n_total']:>5}"
                     f"{num(r['rejection_rate_pct'], 8)}{num(r['outlier_pct'], 8)}{num(r['bias_cm'], 9)}"
                     f"{num(r['mae_cm'], 9)}{num(r['rmse_cm'], 9)}{num(r['r2'], 8, 3)}{num(r['avg_error_cm'], 9)}")
    return "\n".join(lines)
