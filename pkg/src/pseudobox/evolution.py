"""Self-evolution controller: loss-plateau detection, densification, box merging.

Each epoch the controller ingests one loss value. Once the variance of recent
loss differences stops changing by more than a phase-dependent threshold, it
densifies every frame with the pseudo points inside the current boxes, asks the
detector for new boxes, and merges them with the current set.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, DetectorError, InputError, MissingPhaseError
from .frame_io import LossTrace, load_loss_trace, read_boxes
from .geometry import Box3D, iou3d, points_in_box_mask

log = logging.getLogger(__name__)

DEFAULT_PSI = 0.1
DEFAULT_IOU_THRESHOLD = 0.2
DEFAULT_WINDOW = 5
DEFAULT_MAX_PHASES = 1

MERGE_MODES = ("algorithm", "prose")
DECAY_BASES = ("euler", "epoch")


# --------------------------------------------------------------------------
# Convergence test
# --------------------------------------------------------------------------

def loss_statistic(trace, epoch: int, window: int = DEFAULT_WINDOW) -> Optional[float]:
    """Population variance of the ``window`` loss differences ending at ``epoch``.

    ``trace`` is a LossTrace or an epoch -> loss mapping. Returns None while the
    history is too short (any of epochs ``epoch - window .. epoch`` missing).
    """
    losses = trace.as_dict() if isinstance(trace, LossTrace) else trace
    span = range(epoch - window, epoch + 1)
    if any(e not in losses for e in span):
        return None
    vals = np.array([losses[e] for e in span], dtype=np.float64)
    return float(np.var(np.diff(vals)))


def decay_threshold(psi: float, phase: int, base: str = "euler", epoch: Optional[int] = None) -> float:
    """``psi * p * b**(-p)``; ``b`` is Euler's number, or the epoch index when base='epoch'."""
    if base == "euler":
        return psi * phase * math.exp(-phase)
    if base == "epoch":
        if epoch is None or epoch < 1:
            raise ValueError("epoch-based decay needs a positive epoch")
        return psi * phase * float(epoch) ** (-phase)
    raise ConfigurationError(f"unknown decay base {base!r}")


@dataclass
class EvolutionState:
    phase: int = 1
    psi: float = DEFAULT_PSI
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    window: int = DEFAULT_WINDOW
    max_phases: int = DEFAULT_MAX_PHASES
    decay_base: str = "euler"
    merge_mode: str = "algorithm"
    history: list = field(default_factory=list)    # (epoch, t_e) pairs

    def __post_init__(self):
        if int(self.phase) != self.phase or self.phase < 1:
            raise ConfigurationError(f"phase must be an integer >= 1, got {self.phase}")
        if not self.psi > 0:
            raise ConfigurationError(f"psi must be > 0, got {self.psi}")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ConfigurationError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold}")
        if int(self.window) != self.window or self.window < 3:
            raise ConfigurationError(f"window must be an integer >= 3, got {self.window}")
        if int(self.max_phases) != self.max_phases or self.max_phases < 0:
            raise ConfigurationError(f"max_phases must be an integer >= 0, got {self.max_phases}")
        if self.decay_base not in DECAY_BASES:
            raise ConfigurationError(f"decay_base must be one of {DECAY_BASES}")
        if self.merge_mode not in MERGE_MODES:
            raise ConfigurationError(f"merge_mode must be one of {MERGE_MODES}")

    def threshold(self, epoch: Optional[int] = None) -> float:
        return decay_threshold(self.psi, self.phase, self.decay_base, epoch)

    @property
    def exhausted(self) -> bool:
        return self.phase > self.max_phases


def convergence_check(state: EvolutionState, t_e: Optional[float], t_prev: Optional[float],
                      epoch: Optional[int] = None) -> bool:
    if t_e is None or t_prev is None:
        return False
    return abs(t_e - t_prev) <= state.threshold(epoch)


def trigger_epochs(trace, state: EvolutionState, max_epochs: Optional[int] = None) -> list[int]:
    """Epochs at which the controller would fire, advancing the phase after each."""
    losses = trace.as_dict() if isinstance(trace, LossTrace) else dict(trace)
    last = max(losses) if max_epochs is None else max_epochs
    probe = EvolutionState(state.phase, state.psi, state.iou_threshold, state.window,
                           state.max_phases, state.decay_base, state.merge_mode)
    fired, prev = [], None
    for e in range(1, last + 1):
        t_e = loss_statistic(losses, e, probe.window)
        if not probe.exhausted and convergence_check(probe, t_e, prev, e):
            fired.append(e)
            probe.phase += 1
        prev = t_e
    return fired


# --------------------------------------------------------------------------
# Densify / merge
# --------------------------------------------------------------------------

def crop_mask(pool, boxes: Sequence[Box3D]) -> np.ndarray:
    pool = np.asarray(pool, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(pool), dtype=bool)
    for box in boxes:
        inside |= points_in_box_mask(pool, box)
    return inside


def densify(real, pseudo_pool, boxes: Sequence[Box3D]) -> np.ndarray:
    """Real points followed by every pool point lying in at least one box."""
    real = np.asarray(real, dtype=np.float64).reshape(-1, 3)
    pool = np.asarray(pseudo_pool, dtype=np.float64).reshape(-1, 3)
    return np.vstack([real, pool[crop_mask(pool, boxes)]])


def same_class_iou(a: Box3D, b: Box3D) -> float:
    return iou3d(a, b) if a.class_id == b.class_id else 0.0


def iou_matrix(new: Sequence[Box3D], old: Sequence[Box3D]) -> np.ndarray:
    """``M[i, j]`` = same-class 3D IoU of new box i and old box j."""
    m = np.zeros((len(new), len(old)))
    for i, b in enumerate(new):
        for j, a in enumerate(old):
            if a.class_id == b.class_id:
                m[i, j] = iou3d(a, b)
    return m


@dataclass(frozen=True)
class MergeResult:
    boxes: list
    added: tuple          # indices into new
    reserved: tuple       # indices into old
    dropped: tuple        # indices into old

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.added), len(self.reserved), len(self.dropped)


def merge_boxes(old: Sequence[Box3D], new: Sequence[Box3D], threshold: float = DEFAULT_IOU_THRESHOLD,
                mode: str = "algorithm") -> MergeResult:
    """Merge new detections into the current pseudo-box set.

    algorithm: new boxes whose best same-class IoU is below ``threshold`` are
    added; the best-matching old box of every other new box is reserved; old
    boxes nobody matched are dropped. Result is added (new order) then reserved
    (old order).

    prose: every new box is kept and old boxes overlapping any new box at
    ``threshold`` or more are discarded; the rest are carried forward.
    """
    if mode not in MERGE_MODES:
        raise ConfigurationError(f"merge mode must be one of {MERGE_MODES}")
    old, new = list(old), list(new)
    m = iou_matrix(new, old)
    if mode == "prose":
        overlapped = (m >= threshold).any(axis=0) if len(new) else np.zeros(len(old), bool)
        kept = tuple(int(j) for j in np.flatnonzero(~overlapped))
        dropped = tuple(int(j) for j in np.flatnonzero(overlapped))
        added = tuple(range(len(new)))
        return MergeResult([new[i] for i in added] + [old[j] for j in kept], added, kept, dropped)

    if len(old) and len(new):
        best = m.max(axis=1)
        idx = m.argmax(axis=1)    # first maximum, so ties go to the lowest old index
    else:
        # nothing to match against: every new box is unmatched
        best, idx = np.full(len(new), -np.inf), np.zeros(len(new), np.int64)
    added = tuple(i for i in range(len(new)) if best[i] < threshold)
    reserved = tuple(sorted({int(idx[i]) for i in range(len(new)) if best[i] >= threshold}))
    dropped = tuple(j for j in range(len(old)) if j not in set(reserved))
    return MergeResult([new[i] for i in added] + [old[j] for j in reserved], added, reserved, dropped)


# --------------------------------------------------------------------------
# Detector contract and file-backed stub
# --------------------------------------------------------------------------

class Detector(Protocol):
    def test(self, frame_id: str, dense_points: np.ndarray, phase: int) -> list[Box3D]: ...

    def loss(self, epoch: int) -> float: ...


class StubDetector:
    """Replays ``phase_<p>/<frame_id>.txt`` detections and a loss-trace CSV."""

    def __init__(self, root, trace: Optional[LossTrace] = None):
        self.root = Path(root)
        if trace is None:
            path = self.root / "loss.csv"
            if not path.exists():
                raise InputError(f"detector directory has no loss trace: {path}")
            trace = load_loss_trace(path)
        self.trace = trace
        self._losses = trace.as_dict()

    @property
    def last_epoch(self) -> int:
        return max(self._losses) if self._losses else 0

    def loss(self, epoch: int) -> float:
        try:
            return self._losses[epoch]
        except KeyError:
            raise DetectorError(f"loss trace has no epoch {epoch}") from None

    def test(self, frame_id: str, dense_points: np.ndarray, phase: int) -> list[Box3D]:
        phase_dir = self.root / f"phase_{phase}"
        if not phase_dir.is_dir():
            raise MissingPhaseError(f"missing detection directory {phase_dir}")
        path = phase_dir / f"{frame_id}.txt"
        if not path.exists():
            raise MissingPhaseError(f"no phase {phase} detections for frame {frame_id}: {path}")
        return [b.replace(frame_id=frame_id) if not b.frame_id else b for b in read_boxes(path)]


# --------------------------------------------------------------------------
# Controller
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FramePoints:
    real: np.ndarray
    pool: np.ndarray


@dataclass(frozen=True)
class PhaseRecord:
    epoch: int
    phase: int
    added: int
    reserved: int
    dropped: int
    before: int
    after: int

    def line(self) -> str:
        return (f"epoch={self.epoch} phase={self.phase} added={self.added} "
                f"reserved={self.reserved} dropped={self.dropped}")


@dataclass
class EvolutionResult:
    boxes: dict
    records: list
    phase: int


def _evolve_frame(frame_id, points: FramePoints, boxes, detector: Detector, phase, threshold, mode):
    dense = densify(points.real, points.pool, boxes)
    detections = detector.test(frame_id, dense, phase)
    return merge_boxes(boxes, detections, threshold, mode)


def run_evolution(frames: Mapping[str, FramePoints], initial_boxes: Mapping[str, Sequence[Box3D]],
                  detector: Detector, state: EvolutionState, max_epochs: int, workers: int = 1,
                  on_record: Optional[Callable[[PhaseRecord], None]] = None) -> EvolutionResult:
    """Drive the epoch loop; ``on_record`` sees each phase record as soon as it exists."""
    frame_ids = sorted(frames)
    missing = [f for f in frame_ids if f not in initial_boxes]
    if missing:
        raise InputError(f"no initial boxes for frame(s) {', '.join(missing)}")
    boxes = {f: list(initial_boxes[f]) for f in frame_ids}
    records: list[PhaseRecord] = []
    losses: dict[int, float] = {}
    prev = None
    for e in range(1, max_epochs + 1):
        losses[e] = float(detector.loss(e))
        t_e = loss_statistic(losses, e, state.window)
        state.history.append((e, t_e))
        fire = not state.exhausted and convergence_check(state, t_e, prev, e)
        prev = t_e
        if not fire:
            continue
        log.info("epoch %d: convergence reached at phase %d", e, state.phase)
        args = [(f, frames[f], boxes[f], detector, state.phase, state.iou_threshold, state.merge_mode)
                for f in frame_ids]
        if workers > 1 and len(args) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                merged = list(pool.map(lambda a: _evolve_frame(*a), args))
        else:
            merged = [_evolve_frame(*a) for a in args]
        before = sum(len(boxes[f]) for f in frame_ids)
        for f, res in zip(frame_ids, merged):
            boxes[f] = res.boxes
        a, r, d = (sum(res.counts[k] for res in merged) for k in range(3))
        rec = PhaseRecord(e, state.phase, a, r, d, before, sum(len(boxes[f]) for f in frame_ids))
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        state.phase += 1
    return EvolutionResult(boxes, records, state.phase)


class PhaseLogWriter:
    """Appends phase-log lines and flushes each one, so a crash leaves a complete log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.write_text("")

    def __call__(self, record: PhaseRecord) -> None:
        with self.path.open("a") as fh:
            fh.write(record.line() + "\n")
            fh.flush()
