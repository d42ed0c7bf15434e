"""Command line: ``gaugeread gen|run|eval`` and the ``synthgauge gen`` alias.

Exit codes: 0 success, 1 usage, 2 I/O, 3 every image failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from gaugeread.calib import detection_from_truth, save_detections
from gaugeread.pipeline import ConfigError, PipelineConfig, run_eval, run_pipeline, with_overrides
from gaugeread.raster import write_image
from gaugeread.synth import export_annotations, make_corpus, render_degraded, split_dataset

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_ALL_FAILED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse defaults to exit code 2, which we reserve for I/O
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def generate(count: int, seed: int, out: str | Path, degraded_frac: float = 0.0, tilt_max: float = 0.0,
             train_frac: float = 0.8) -> list[str]:
    """Render a corpus: images/, truth/, labels/, manifest.csv, detections.json, split.json."""
    out = Path(out)
    for sub in ("images", "truth", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    items = make_corpus(count, seed=seed, degraded_frac=degraded_frac, tilt_max=tilt_max)
    detections = {}
    rows = []
    for it in items:
        img, gt = render_degraded(it.spec, it.degradation)
        write_image(img, out / "images" / f"{it.image_id}.png")
        (out / "truth" / f"{it.image_id}.json").write_text(json.dumps(gt.to_dict(), sort_keys=True, indent=1) + "\n")
        (out / "labels" / f"{it.image_id}.txt").write_text(export_annotations(gt, (img.width, img.height)))
        detections[it.image_id] = detection_from_truth(gt)
        rows.append((it.image_id, gt.quality, f"{gt.reading_cm:.1f}", gt.waterline_row))
    with (out / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "quality", "reading_cm", "waterline_row"))
        w.writerows(rows)
    save_detections(detections, out / "detections.json")
    ids = [it.image_id for it in items]
    if ids:
        train, test = split_dataset(ids, train_frac, seed)
        (out / "split.json").write_text(json.dumps({"train": sorted(train), "test": sorted(test)}, indent=1) + "\n")
    return ids


def _add_gen(sub) -> None:
    p = sub.add_parser("gen", help="render a synthetic gauge corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--degraded-frac", type=float, default=0.0, help="share of sub-optimal images")
    p.add_argument("--tilt-max", type=float, default=0.0, help="max absolute plate tilt in degrees")
    p.add_argument("--train-frac", type=float, default=0.8)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gaugeread", description="Staff-gauge water level reading pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_gen(sub)

    run = sub.add_parser("run", help="run the reading pipeline over a directory of images")
    run.add_argument("--config", help="JSON config; flags override it")
    run.add_argument("--input")
    run.add_argument("--out")
    run.add_argument("--detector", choices=("oracle", "classical", "file"))
    run.add_argument("--truth-dir")
    run.add_argument("--detections")
    run.add_argument("--waterline-threshold", type=float)
    run.add_argument("--min-len", type=float, help="deskew segment length filter (px)")
    run.add_argument("--gate-deg", type=float, help="deskew gate on mean absolute deviation")
    run.add_argument("--stages", choices=("none", "1", "2", "both"))
    run.add_argument("--llm-backend", choices=("mock", "http"))
    run.add_argument("--llm-adapter", choices=("generic", "openai", "gemini"))
    run.add_argument("--model-tag")
    run.add_argument("--cache-dir")
    run.add_argument("--max-in-flight", type=int)
    run.add_argument("--rate", type=float, help="token-bucket requests per second")
    run.add_argument("--workers", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--resume", action="store_true", default=None)
    run.add_argument("--debug", action="store_true", default=None, help="write overlay PNGs")

    ev = sub.add_parser("eval", help="score run records against ground truth")
    ev.add_argument("--records", required=True)
    ev.add_argument("--manifest")
    ev.add_argument("--out", required=True)
    ev.add_argument("--zone-px", type=float, default=5)
    ev.add_argument("--conf-threshold", type=float, default=0.20)
    ev.add_argument("--iqr-k", type=float, default=1.5)
    return parser


def _run_config(args) -> PipelineConfig:
    flags = {
        "input_dir": args.input, "output_dir": args.out, "detector": args.detector, "truth_dir": args.truth_dir,
        "detections_path": args.detections, "waterline_threshold": args.waterline_threshold,
        "llm_stages": args.stages, "llm_backend": args.llm_backend, "llm_adapter": args.llm_adapter,
        "model_tag": args.model_tag, "cache_dir": args.cache_dir, "max_in_flight": args.max_in_flight,
        "rate_per_s": args.rate, "workers": args.workers, "seed": args.seed, "resume": args.resume,
        "debug": args.debug,
    }
    deskew = {k: v for k, v in (("min_len", args.min_len), ("gate_deg", args.gate_deg)) if v is not None}
    if args.config:
        cfg = PipelineConfig.load(args.config, flags)
    else:
        if not args.input or not args.out:
            raise ConfigError("--input and --out are required without --config")
        cfg = PipelineConfig.from_dict({k: v for k, v in flags.items() if v is not None})
    if deskew:
        from dataclasses import replace
        cfg = with_overrides(cfg, deskew=replace(cfg.deskew, **deskew))
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "gen":
        if args.count < 0 or not 0 < args.train_frac < 1:
            print("error: --count must be >= 0 and --train-frac in (0, 1)", file=sys.stderr)
            return EXIT_USAGE
        try:
            ids = generate(args.count, args.seed, args.out, args.degraded_frac, args.tilt_max, args.train_frac)
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO
        print(f"wrote {len(ids)} images to {args.out}")
        return EXIT_OK

    if args.command == "run":
        try:
            cfg = _run_config(args)
            cfg.validate()
        except ConfigError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO if "does not exist" in str(e) or "cannot read" in str(e) else EXIT_USAGE
        try:
            summary = run_pipeline(cfg)
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO
        print(f"{summary.n_images} images, {summary.n_processed} processed, {summary.n_skipped} resumed, "
              f"{summary.n_failed} failed -> {summary.records_path}")
        return EXIT_ALL_FAILED if summary.all_failed else EXIT_OK

    try:
        _, text = run_eval(args.records, args.manifest, args.out, args.zone_px, args.conf_threshold, args.iqr_k)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    print(text)
    return EXIT_OK


def synthgauge_main(argv: list[str] | None = None) -> int:
    parser = _Parser(prog="synthgauge", description="Synthetic staff-gauge renderer.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_gen(sub)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    return main(["gen", "--count", str(args.count), "--seed", str(args.seed), "--out", args.out,
                 "--degraded-frac", str(args.degraded_frac), "--tilt-max", str(args.tilt_max),
                 "--train-frac", str(args.train_frac)])


if __name__ == "__main__":
    raise SystemExit(main())
