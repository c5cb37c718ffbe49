"""Drivers that wire the modules into on-disk commands: generate, evolve, eval."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

from .boxfit import generate_initial_boxes
from .config import PipelineConfig
from .errors import FrameError, InputError
from .evaluation import EvalReport, evaluate_ap
from .evolution import EvolutionResult, FramePoints, PhaseLogWriter, StubDetector, run_evolution
from .frame_io import Frame, FramePaths, list_frame_dirs, load_frame, read_boxes, write_boxes
from .fusion import fuse_frame
from .geometry import Box3D

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PHASE_LOG = "phase_log.txt"


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    """Ordered map over a bounded thread pool; the first failure in input order propagates."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def frame_dirs(frames_dir) -> list[Path]:
    root = Path(frames_dir)
    if not root.is_dir():
        raise InputError(f"frames directory not found: {root}")
    return list_frame_dirs(root)


def load_frame_checked(root: Path, config: PipelineConfig) -> Frame:
    try:
        return load_frame(root, config.class_table)
    except (InputError, OSError) as exc:
        path = getattr(exc, "filename", None) if isinstance(exc, OSError) else None
        raise FrameError(root.name, exc, path) from exc


def frame_id_of(root: Path) -> str:
    """Frame id from ``meta.json`` when present, else the directory name."""
    meta = FramePaths(root).meta
    if meta.exists():
        try:
            return str(json.loads(meta.read_text()).get("frame_id", root.name))
        except json.JSONDecodeError as exc:
            raise FrameError(root.name, InputError(f"invalid JSON: {exc}"), meta) from None
    return root.name


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _box_file(out: Path, frame_id: str) -> Path:
    if not frame_id or "/" in frame_id or frame_id in (".", "..") or frame_id == Path(MANIFEST).stem:
        raise InputError(f"unusable frame id {frame_id!r}")
    return out / f"{frame_id}.txt"


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameOutput:
    frame_id: str
    boxes: list
    counts: dict


def generate_frame(frame: Frame, config: PipelineConfig, priors) -> FrameOutput:
    """fusion -> filters -> fit -> size prior -> lift for one loaded frame."""
    fused = fuse_frame(frame, config.max_per_instance, config.align_depth)
    stats: list = []
    boxes = generate_initial_boxes(fused.clouds, config.filter_params(), priors, config.boxfit_options(),
                                   frame.frame_id, stats)
    counts = {
        "lidar_points": len(frame.points),
        "real_foreground": len(fused.real),
        "background": fused.background_count,
        "pseudo_points": len(fused.pseudo),
        "instances": len(fused.clouds),
        "after_local_filter": sum(s.n_local for s in stats),
        "after_global_filter": sum(s.n_global for s in stats),
        "boxes": len(boxes),
        "fallback_boxes": sum(1 for s in stats if s.fallback),
    }
    return FrameOutput(frame.frame_id, boxes, counts)


def cmd_generate(config: PipelineConfig, frames_dir, out_dir) -> dict:
    """Write ``<frame_id>.txt`` per frame plus ``manifest.json``; returns the manifest."""
    dirs = frame_dirs(frames_dir)
    priors = config.size_priors()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def work(root: Path) -> FrameOutput:
        frame = load_frame_checked(root, config)
        try:
            return generate_frame(frame, config, priors)
        except InputError as exc:
            raise FrameError(frame.frame_id, exc, root) from exc

    results = _map(work, dirs, config.workers)
    ids = [r.frame_id for r in results]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate frame ids in " + str(frames_dir))
    entries = []
    totals: dict = {}
    for res in results:                 # single writer, frame order
        path = _box_file(out, res.frame_id)
        write_boxes(path, res.boxes)
        entries.append({"frame_id": res.frame_id, "boxes_file": path.name, "counts": res.counts})
        for k, v in res.counts.items():
            totals[k] = totals.get(k, 0) + v
        log.info("frame %s: %d boxes", res.frame_id, len(res.boxes))
    manifest = {"config_sha256": config.sha256(), "frames": entries, "totals": totals}
    _write_json(out / MANIFEST, manifest)
    return manifest


# --------------------------------------------------------------------------
# evolve
# --------------------------------------------------------------------------

def frame_points(frame: Frame, config: PipelineConfig) -> FramePoints:
    """Real LiDAR points and the full unfiltered pseudo-point pool of a frame."""
    fused = fuse_frame(frame, config.max_per_instance, config.align_depth)
    return FramePoints(frame.xyz.copy(), fused.pseudo.positions)


def read_frame_boxes(boxes_dir: Path, frame_id: str) -> list[Box3D]:
    path = _box_file(boxes_dir, frame_id)
    if not path.exists():
        raise FrameError(frame_id, InputError("no box file"), path)
    try:
        boxes = read_boxes(path)
    except InputError as exc:
        raise FrameError(frame_id, exc, path) from exc
    return [b if b.frame_id else b.replace(frame_id=frame_id) for b in boxes]


def cmd_evolve(config: PipelineConfig, frames_dir, boxes_dir, detector_dir, out_dir,
               max_epochs: Optional[int] = None) -> EvolutionResult:
    """Refine boxes with the stub detector; writes boxes and ``phase_log.txt`` under ``out_dir``."""
    dirs = frame_dirs(frames_dir)
    boxes_dir = Path(boxes_dir)
    detector = StubDetector(detector_dir)
    epochs = max_epochs or config.max_epochs or detector.last_epoch

    def work(root: Path):
        frame = load_frame_checked(root, config)
        return frame.frame_id, frame_points(frame, config)

    frames = dict(_map(work, dirs, config.workers))
    initial = {fid: read_frame_boxes(boxes_dir, fid) for fid in frames}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    writer = PhaseLogWriter(out / PHASE_LOG)
    result = run_evolution(frames, initial, detector, config.evolution_state(), epochs,
                           config.workers, on_record=writer)
    for fid in sorted(result.boxes):
        write_boxes(_box_file(out, fid), result.boxes[fid])
    return result


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def cmd_eval(config: PipelineConfig, pred_dir, frames_dir, mode: Optional[str] = None) -> EvalReport:
    """AP of ``<pred_dir>/<frame_id>.txt`` against each frame's ``truth.txt``."""
    preds: list[Box3D] = []
    truths: list[Box3D] = []
    for root in frame_dirs(frames_dir):
        truth_path = FramePaths(root).truth
        if not truth_path.exists():
            raise FrameError(root.name, InputError("no ground-truth file"), truth_path)
        fid = frame_id_of(root)
        truths += [b.replace(frame_id=fid) for b in read_boxes(truth_path)]
        preds += [b.replace(frame_id=fid) for b in read_frame_boxes(Path(pred_dir), fid)]
    return evaluate_ap(preds, truths, config.eval_iou, config.range_bins, mode or config.eval_mode,
                       config.interpolation, classes=sorted(config.class_table))
