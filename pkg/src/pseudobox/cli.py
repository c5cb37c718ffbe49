"""Command-line entry point: ``pseudobox {generate,evolve,eval,synth}``.

Exit codes: 0 success, 1 internal error, 2 input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import PipelineConfig, load_config
from .errors import ConfigurationError, DetectorError, InputError
from .evaluation import IOU_MODES, EvalReport
from .synth import SceneSpec, cmd_synth

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2

log = logging.getLogger("pseudobox")


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudobox", description="3D pseudo-box generation and refinement")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, frames_required=True):
        p.add_argument("--config", type=Path, help="pipeline configuration JSON")
        p.add_argument("--frames", type=Path, required=False,
                       help="directory of frame directories" + ("" if frames_required else " (optional)"))
        p.add_argument("--workers", type=int, help="override the configured worker count")

    g = sub.add_parser("generate", help="initial pseudo-boxes from fused frames")
    common(g)
    g.add_argument("--out", type=Path, required=True, help="output directory for box files and manifest")

    e = sub.add_parser("evolve", help="refine boxes with the file-backed detector")
    common(e)
    e.add_argument("--boxes", type=Path, required=True, help="directory of <frame_id>.txt box files")
    e.add_argument("--detector", type=Path, required=True, help="directory with loss.csv and phase_<p>/")
    e.add_argument("--out", type=Path, required=True, help="output directory")
    e.add_argument("--max-epochs", type=int, help="epochs to replay (default: whole loss trace)")

    v = sub.add_parser("eval", help="average precision against per-frame truth.txt")
    common(v)
    v.add_argument("--boxes", type=Path, required=True, help="directory of predicted <frame_id>.txt files")
    v.add_argument("--iou", choices=IOU_MODES, help="overlap measure (default from config)")
    v.add_argument("--iou-thresh", type=float, help="match threshold (default from config)")
    v.add_argument("--out", type=Path, help="write the JSON report here")

    s = sub.add_parser("synth", help="write synthetic frames with ground truth")
    s.add_argument("--seed", type=_seed, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--scene", type=Path, help="scene JSON (fields of the scene spec)")
    s.add_argument("--n-frames", type=int, help="override the scene frame count")
    s.add_argument("--first-index", type=int, default=0)
    return parser


def _config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if args.workers is not None:
        config = config.with_overrides(workers=args.workers)
    return config


def _frames(args, config: PipelineConfig) -> Path:
    frames = args.frames or (Path(config.dataset_root) if config.dataset_root else None)
    if frames is None:
        raise ConfigurationError("no frames: pass --frames or set dataset_root in the config")
    return frames


def format_report(report: EvalReport) -> str:
    labels = report.labels
    lines = [f"AP ({report.mode.upper()}, IoU {report.iou_thresh:g})",
             "class".ljust(8) + "".join(lab.rjust(10) for lab in labels)]

    def cell(x):
        return ("-" if x is None else f"{x:.4f}").rjust(10)

    for c in report.classes:
        lines.append(str(c).ljust(8) + "".join(cell(report.ap(c, lab)) for lab in labels))
    lines.append("mAP".ljust(8) + "".join(cell(report.mean_ap(lab)) for lab in labels))
    return "\n".join(lines)


def run(args) -> int:
    # imported here so `pseudobox synth --help` stays light
    from .pipeline import cmd_eval, cmd_evolve, cmd_generate

    if args.command == "synth":
        doc = json.loads(args.scene.read_text()) if args.scene else {}
        if args.n_frames is not None:
            doc["n_frames"] = args.n_frames
        written = cmd_synth(args.seed, SceneSpec.from_dict(doc), args.out, args.first_index)
        print(f"wrote {len(written)} frame(s) to {args.out}")
        return EXIT_OK
    config = _config(args)
    frames = _frames(args, config)
    if args.command == "generate":
        manifest = cmd_generate(config, frames, args.out)
        print(f"wrote boxes for {len(manifest['frames'])} frame(s) to {args.out}")
    elif args.command == "evolve":
        result = cmd_evolve(config, frames, args.boxes, args.detector, args.out, args.max_epochs)
        for rec in result.records:
            print(rec.line())
        print(f"final phase {result.phase}; wrote {len(result.boxes)} frame(s) to {args.out}")
    elif args.command == "eval":
        if args.iou_thresh is not None:
            config = config.with_overrides(eval_iou=args.iou_thresh)
        report = cmd_eval(config, args.boxes, frames, args.iou)
        print(format_report(report))
        if args.out:
            args.out.write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (InputError, DetectorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:       # noqa: BLE001 - last-resort mapping to the internal-error code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
