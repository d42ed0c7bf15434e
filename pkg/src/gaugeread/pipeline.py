"""Batch orchestration: preprocess, deskew, waterline, calibrate, optional model stages, evaluate."""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from gaugeread.calib import (CalibrationError, ClassicalDetector, DetectionError, FileDetector,
                             KeypointDetector, OracleDetector, calibrate_row, scale_geometry)
from gaugeread.deskew import DeskewConfig, HoughParams, deskew, rotate_image
from gaugeread.evalkit import (ReadingRecord, confusion_metrics, emit_report, quality_breakdown,
                               summary_table)
from gaugeread.llm import (Backend, HttpBackend, MockBackend, ReadingError, ReadingRequest, ResponseCache,
                           StageMetadata, TokenBucket, UnparseableReading, extract_reading)
from gaugeread.overlay import segments_overlay, waterline_overlay
from gaugeread.raster import Raster, as_gray, encode_png, gaussian_blur, median_filter, read_image, write_image
from gaugeread.synth import GroundTruth
from gaugeread.waterline import detect_waterline

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")
STAGE_CHOICES = {"none": (), "1": (1,), "2": (2,), "both": (1, 2)}
GEOMETRIC_TAG = "geometric"
RECORDS_FILE = "records.jsonl"
TIMINGS_FILE = "timings.jsonl"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    input_dir: str
    output_dir: str
    detector: str = "oracle"  # oracle | classical | file
    truth_dir: str | None = None
    detections_path: str | None = None
    waterline_threshold: float = 0.20
    blur_sigma: float = 1.0
    deskew: DeskewConfig = field(default_factory=DeskewConfig)
    llm_stages: str = "none"
    llm_backend: str = "mock"  # mock | http
    llm_adapter: str = "generic"
    model_tag: str = "mock"
    cache_dir: str = ".cache/llm"
    max_in_flight: int = 4
    rate_per_s: float | None = None
    workers: int = 1
    seed: int = 0
    resume: bool = False
    debug: bool = False

    def validate(self) -> None:
        if not Path(self.input_dir).is_dir():
            raise ConfigError(f"input directory {self.input_dir} does not exist")
        if not 0 <= self.waterline_threshold <= 1:
            raise ConfigError(f"waterline threshold must be in [0, 1], got {self.waterline_threshold}")
        if self.detector not in ("oracle", "classical", "file"):
            raise ConfigError(f"unknown detector {self.detector!r}")
        if self.detector == "file" and not (self.detections_path and Path(self.detections_path).is_file()):
            raise ConfigError("file detector needs an existing detections_path")
        if self.detector == "oracle" and not Path(self.resolved_truth_dir).is_dir():
            raise ConfigError(f"oracle detector needs ground truth in {self.resolved_truth_dir}")
        if self.llm_stages not in STAGE_CHOICES:
            raise ConfigError(f"llm_stages must be one of {sorted(STAGE_CHOICES)}")
        if self.llm_backend not in ("mock", "http"):
            raise ConfigError(f"unknown llm backend {self.llm_backend!r}")
        if self.workers < 1 or self.max_in_flight < 1:
            raise ConfigError("workers and max_in_flight must be at least 1")

    @property
    def resolved_truth_dir(self) -> str:
        return self.truth_dir or str(Path(self.input_dir) / "truth")

    @property
    def stages(self) -> tuple[int, ...]:
        return STAGE_CHOICES[self.llm_stages]

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        dk = dict(d.pop("deskew", None) or {})
        hough = HoughParams(**dk.pop("hough", {}))
        try:
            d["deskew"] = DeskewConfig(hough=hough, **dk)
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path, overrides: dict | None = None) -> PipelineConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(raw)


def list_images(input_dir: str | Path) -> list[Path]:
    root = Path(input_dir)
    if (root / "images").is_dir():
        root = root / "images"
    return sorted((p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=lambda p: p.stem)


def load_truths(truth_dir: str | Path) -> dict[str, GroundTruth]:
    return {p.stem: GroundTruth.from_dict(json.loads(p.read_text()))
            for p in sorted(Path(truth_dir).glob("*.json"))}


def make_detector(cfg: PipelineConfig) -> KeypointDetector:
    if cfg.detector == "oracle":
        return OracleDetector(load_truths(cfg.resolved_truth_dir))
    if cfg.detector == "file":
        return FileDetector.load(cfg.detections_path)
    return ClassicalDetector()


def make_backend(cfg: PipelineConfig) -> Backend | None:
    if not cfg.stages:
        return None
    if cfg.llm_backend == "mock":
        return MockBackend(load_truths(cfg.resolved_truth_dir))
    return HttpBackend.from_env(cfg.llm_adapter)


def preprocess(img: Raster, blur_sigma: float = 1.0) -> Raster:
    """Grayscale, Gaussian smoothing, 3x3 median."""
    return median_filter(gaussian_blur(as_gray(img), blur_sigma))


@dataclass
class _Context:
    cfg: PipelineConfig
    detector: KeypointDetector
    backend: Backend | None
    cache: ResponseCache | None
    limiter: TokenBucket | None
    llm_gate: threading.BoundedSemaphore
    debug_dir: Path | None


def _llm_stage(ctx: _Context, image_id: str, crop_png: bytes, stage: int, meta: StageMetadata | None) -> tuple[dict, dict]:
    req = ReadingRequest(image_id, crop_png, stage, meta if stage == 2 else None, ctx.cfg.model_tag)
    with ctx.llm_gate:
        try:
            resp = extract_reading(req, ctx.backend, ctx.cache, limiter=ctx.limiter)
        except (ReadingError, UnparseableReading) as e:
            attempts = getattr(e, "attempts", None)
            return ({"model_tag": ctx.cfg.model_tag, "reading_cm": None, "raw_text": None, "error": str(e)},
                    {"attempts": attempts})
    return ({"model_tag": ctx.cfg.model_tag, "reading_cm": resp.reading_cm, "raw_text": resp.raw_text,
             "error": None},
            {"latency_ms": round(resp.latency_ms, 3), "attempts": resp.attempts, "cached": resp.cached})


def process_image(ctx: _Context, image_id: str, path: Path) -> tuple[dict, dict]:
    """One run record plus its timing sidecar entry; failures land in ``error``."""
    cfg = ctx.cfg
    rec: dict = {"image_id": image_id, "error": None, "skew_deg": None, "n_segments": None,
                 "waterline": None, "calibration": None, "llm": {}}
    timings: dict = {"image_id": image_id, "ms": {}, "llm": {}}
    phase = "read"
    clock = time.perf_counter()

    def tick(name: str) -> None:
        nonlocal clock
        now = time.perf_counter()
        timings["ms"][name] = round((now - clock) * 1000.0, 3)
        clock = now

    try:
        img = read_image(path)
        tick("read")
        phase = "preprocess"
        gray = preprocess(img, cfg.blur_sigma)
        tick("preprocess")
        phase = "deskew"
        est, segments = deskew(gray, cfg.deskew)
        upright = rotate_image(gray, est.rotation_deg)
        rec["skew_deg"] = est.rotation_deg
        rec["n_segments"] = est.qualifying_segments
        tick("deskew")
        phase = "detect"
        det = ctx.detector.detect(image_id, upright)
        tick("detect")
        phase = "waterline"
        wl = detect_waterline(upright, det.plate_cols, cfg.waterline_threshold)
        rec["waterline"] = {"row": wl.row, "coarse_row": wl.coarse_row,
                            "confidence": round(wl.confidence, 6), "accepted": wl.accepted}
        tick("waterline")
        if ctx.debug_dir is not None:
            write_image(segments_overlay(gray, segments, cfg.deskew.min_len), ctx.debug_dir / f"{image_id}_segments.png")
            write_image(waterline_overlay(upright, wl), ctx.debug_dir / f"{image_id}_waterline.png")
        if not wl.accepted:
            return rec, timings

        phase = "calibrate"
        geo = scale_geometry(det, wl.row)
        cal = {"d_m": geo.d_m, "d_n": geo.d_n, "ratio": geo.ratio, "plate_height_px": geo.plate_height_px,
               "major_reading_cm": None, "reading_cm": None}
        if any(k.value_cm is not None for k in det.keypoints):
            full = calibrate_row(det, wl.row)
            cal["major_reading_cm"] = full.major_reading_cm
            cal["reading_cm"] = full.reading_cm
        rec["calibration"] = cal
        tick("calibrate")

        if cfg.stages:
            phase = "llm"
            crop = encode_png(upright.crop(0, wl.row + 1))
            meta = StageMetadata(geo.ratio, geo.d_m, geo.d_n, geo.plate_height_px)
            for stage in cfg.stages:
                entry, t = _llm_stage(ctx, image_id, crop, stage, meta)
                rec["llm"][str(stage)] = entry
                timings["llm"][str(stage)] = t
            tick("llm")
    except (CalibrationError, DetectionError, ValueError, OSError) as e:
        rec["error"] = f"{phase}: {e}"
    return rec, timings


def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True)


def read_jsonl(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


@dataclass(frozen=True)
class RunSummary:
    n_images: int
    n_processed: int
    n_skipped: int
    n_failed: int
    records_path: Path

    @property
    def all_failed(self) -> bool:
        return self.n_images == 0 or self.n_failed == self.n_images


def run_pipeline(cfg: PipelineConfig) -> RunSummary:
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records_path, timings_path = out / RECORDS_FILE, out / TIMINGS_FILE
    images = list_images(cfg.input_dir)

    previous = {r["image_id"]: r for r in read_jsonl(records_path)} if cfg.resume else {}
    prev_timings = {t["image_id"]: t for t in read_jsonl(timings_path)} if cfg.resume else {}
    todo = [p for p in images if p.stem not in previous]
    if not cfg.resume:
        records_path.write_text("")
        timings_path.write_text("")

    debug_dir = None
    if cfg.debug:
        debug_dir = out / "debug"
        debug_dir.mkdir(exist_ok=True)
    backend = make_backend(cfg)
    ctx = _Context(
        cfg=cfg, detector=make_detector(cfg), backend=backend,
        cache=ResponseCache(cfg.cache_dir) if backend is not None else None,
        limiter=TokenBucket(cfg.rate_per_s, cfg.max_in_flight) if cfg.rate_per_s else None,
        llm_gate=threading.BoundedSemaphore(cfg.max_in_flight), debug_dir=debug_dir,
    )

    lock = threading.Lock()
    new_records: dict[str, dict] = {}
    new_timings: dict[str, dict] = {}

    def work(path: Path) -> None:
        rec, tim = process_image(ctx, path.stem, path)
        with lock:  # single appender keeps partial runs resumable
            with records_path.open("a") as fh:
                fh.write(_dump(rec) + "\n")
            with timings_path.open("a") as fh:
                fh.write(_dump(tim) + "\n")
            new_records[rec["image_id"]] = rec
            new_timings[rec["image_id"]] = tim

    if cfg.workers == 1:
        for p in todo:
            work(p)
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(work, todo))

    wanted = {p.stem for p in images}
    merged = {k: v for k, v in previous.items() if k in wanted} | new_records
    merged_t = {k: v for k, v in prev_timings.items() if k in wanted} | new_timings
    records_path.write_text("".join(_dump(merged[k]) + "\n" for k in sorted(merged)))
    timings_path.write_text("".join(_dump(merged_t[k]) + "\n" for k in sorted(merged_t)))
    failed = sum(1 for r in merged.values() if r["error"] is not None)
    for r in new_records.values():
        if r["error"]:
            log.warning("%s failed: %s", r["image_id"], r["error"])
    return RunSummary(len(images), len(todo), len(images) - len(todo), failed, records_path)


# -- evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class TruthRow:
    image_id: str
    quality: str
    reading_cm: float
    waterline_row: float | None = None


def load_manifest(path: str | Path) -> dict[str, TruthRow]:
    rows = {}
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            wl = r.get("waterline_row")
            rows[r["id"]] = TruthRow(r["id"], r["quality"], float(r["reading_cm"]),
                                     float(wl) if wl not in (None, "") else None)
    return rows


def reading_records(run_records: list[dict], manifest: dict[str, TruthRow]) -> tuple[list[ReadingRecord], list[str]]:
    """Geometric readings become stage 0 of the ``geometric`` model; model stages keep their tag."""
    out: list[ReadingRecord] = []
    missing: list[str] = []
    stages_seen: dict[tuple[str, int], None] = {}
    for rec in run_records:
        for stage, entry in rec.get("llm", {}).items():
            stages_seen[(entry["model_tag"], int(stage))] = None
    for rec in sorted(run_records, key=lambda r: r["image_id"]):
        truth = manifest.get(rec["image_id"])
        if truth is None:
            missing.append(rec["image_id"])
            continue
        wl = rec.get("waterline") or {}
        cal = rec.get("calibration") or {}
        base = dict(image_id=rec["image_id"], observed_cm=truth.reading_cm, quality=truth.quality,
                    waterline_pred_row=wl.get("row"), waterline_true_row=truth.waterline_row,
                    confidence=wl.get("confidence"))
        out.append(ReadingRecord(predicted_cm=cal.get("reading_cm"), model_tag=GEOMETRIC_TAG, stage=0, **base))
        llm = rec.get("llm", {})
        for model, stage in stages_seen:
            entry = llm.get(str(stage))
            pred = entry["reading_cm"] if entry and entry["model_tag"] == model else None
            out.append(ReadingRecord(predicted_cm=pred, model_tag=model, stage=stage, **base))
    return out, missing


def run_eval(records_path: str | Path, manifest_path: str | Path | None, out_dir: str | Path,
             zone_px: float = 5, threshold: float = 0.20, iqr_k: float = 1.5) -> tuple[list[dict], str]:
    """Join run records with ground truth, write the report files, return (rows, summary text).

    A JSONL of ReadingRecord (rows carrying ``observed_cm``) is accepted as-is
    and needs no manifest.
    """
    if not Path(records_path).is_file():
        raise FileNotFoundError(f"records file {records_path} does not exist")
    raw = read_jsonl(records_path)
    if not raw or "observed_cm" in raw[0]:
        recs = [ReadingRecord.from_dict(r) for r in raw]
        missing: list[str] = []
    else:
        if manifest_path is None:
            raise ConfigError("run records need a truth manifest")
        recs, missing = reading_records(raw, load_manifest(manifest_path))
    for image_id in missing:
        log.warning("skipping %s: not in the truth manifest", image_id)
    rows = quality_breakdown(recs, k=iqr_k)
    geo = [r for r in recs if r.model_tag == GEOMETRIC_TAG] or recs
    confusion = confusion_metrics([asdict(r) for r in geo], zone_px, threshold) if recs else None
    emit_report(rows, out_dir, confusion)
    text = summary_table(rows)
    if confusion is not None:
        pct = lambda v: "-" if v is None else f"{100 * v:.2f}%"  # noqa: E731
        text += (f"\nwaterline: TP={confusion.tp} FP={confusion.fp} FN={confusion.fn} "
                 f"precision={pct(confusion.precision)} recall={pct(confusion.recall)} F1={pct(confusion.f1)}")
    if missing:
        text += f"\nskipped {len(missing)} record(s) without ground truth: {', '.join(missing)}"
    return rows, text


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
