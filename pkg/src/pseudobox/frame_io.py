"""Readers and writers for every on-disk format the pipeline touches.

Formats
-------
PCBF point cloud
    ``b"PCBF"``, u32 little-endian record count, then ``count`` records of
    four little-endian f32: x, y, z, intensity.
Instance mask
    16-bit binary PGM (``P5``, maxval 65535, big-endian samples) plus a class
    table with one ``<instance_id> <class_id>`` pair per line.
Depth map
    single-channel PFM (``Pf``); a negative scale means little-endian; rows are
    stored bottom-up on disk and top-down in memory. Values > 0 are valid.
Boxes
    one box per line: ``frame_id class_id cx cy cz length width height yaw score instance_id``
    (``-`` for a missing instance id).
Calibration
    JSON array of ``{name, width, height, intrinsics[9], ego_from_camera[16]}``.
Loss trace
    CSV with header ``epoch,loss``.

A frame directory holds ``points.pcbf``, ``calibration.json``, an optional
``frame.json`` (``{"frame_id", "timestamp"}``) and, per camera ``<name>``:
``<name>.mask.pgm``, ``<name>.classes.txt``, ``<name>.depth.pfm``.
"""
from __future__ import annotations

import csv
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    BoxFormatError,
    CalibrationError,
    CountMismatchError,
    DuplicateInstanceError,
    FormatError,
    InputError,
    MaxvalError,
    MissingClassError,
    TruncatedError,
)
from .geometry import Box3D, CameraModel

PCBF_MAGIC = b"PCBF"
PCBF_RECORD = np.dtype("<f4")
BOX_FIELDS = 11

DEFAULT_CLASS_NAMES = {1: "vehicle", 2: "pedestrian", 3: "cyclist"}


# --------------------------------------------------------------------------
# Domain containers
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InstanceMask:
    values: np.ndarray                 # (H, W) uint16, 0 = background
    class_table: Mapping[int, int]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.uint16)
        if vals.ndim != 2:
            raise InputError("instance mask must be 2-D")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "class_table", dict(self.class_table))
        missing = sorted(set(np.unique(vals).tolist()) - {0} - set(self.class_table))
        if missing:
            raise MissingClassError(f"instance ids {missing} have no class table entry")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def instances(self) -> dict[int, int]:
        """Map of instance id to pixel count, background excluded."""
        ids, counts = np.unique(self.values, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts) if i != 0}


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray                 # (H, W) float32 meters, top row first

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise InputError("depth map must be 2-D")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.values) & (self.values > 0)


@dataclass(frozen=True)
class CameraView:
    camera: CameraModel
    mask: InstanceMask
    depth: DepthMap

    def __post_init__(self):
        cam = self.camera
        for what, arr in (("mask", self.mask), ("depth", self.depth)):
            if (arr.width, arr.height) != (cam.width, cam.height):
                raise InputError(
                    f"camera {cam.name!r}: {what} is {arr.width}x{arr.height}, "
                    f"calibration says {cam.width}x{cam.height}")


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: str
    points: np.ndarray                 # (N, 4) x, y, z, intensity
    cameras: tuple[CameraView, ...] = ()
    timestamp: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "cameras", tuple(self.cameras))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(frozen=True)
class LossTrace:
    epochs: tuple[int, ...]
    losses: tuple[float, ...]

    def __post_init__(self):
        if len(self.epochs) != len(self.losses):
            raise InputError("loss trace epochs and losses differ in length")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise InputError("loss trace epochs must be strictly increasing")
        if any(not (math.isfinite(v) and v >= 0) for v in self.losses):
            raise InputError("losses must be finite and non-negative")

    @classmethod
    def from_losses(cls, losses: Sequence[float], start: int = 1) -> "LossTrace":
        return cls(tuple(range(start, start + len(losses))), tuple(float(v) for v in losses))

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.epochs, self.losses))


# --------------------------------------------------------------------------
# PCBF
# --------------------------------------------------------------------------

def encode_point_cloud(points) -> bytes:
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 4)
    return PCBF_MAGIC + struct.pack("<I", len(pts)) + pts.astype(PCBF_RECORD).tobytes()


def decode_point_cloud(data: bytes, path=None) -> np.ndarray:
    if len(data) < 4 or data[:4] != PCBF_MAGIC:
        raise BadMagicError("bad PCBF magic", path, 0)
    if len(data) < 8:
        raise TruncatedError("truncated PCBF header", path, len(data))
    (count,) = struct.unpack_from("<I", data, 4)
    need = 8 + 16 * count
    if len(data) < need:
        raise TruncatedError(
            f"PCBF payload truncated: {count} records need {need} bytes, file has {len(data)}",
            path, len(data))
    if len(data) > need:
        raise CountMismatchError(
            f"PCBF header declares {count} records but {len(data) - need} extra bytes follow",
            path, need)
    return np.frombuffer(data, dtype=PCBF_RECORD, offset=8, count=4 * count).reshape(count, 4).copy()


def load_point_cloud(path) -> np.ndarray:
    """Load an (N, 4) float32 array of x, y, z, intensity."""
    path = Path(path)
    return decode_point_cloud(path.read_bytes(), path)


def write_point_cloud(path, points) -> None:
    Path(path).write_bytes(encode_point_cloud(points))


# --------------------------------------------------------------------------
# PGM / class table
# --------------------------------------------------------------------------

def _pnm_header(data: bytes, ntokens: int, path) -> tuple[list[bytes], int]:
    """Read whitespace-separated header tokens, skipping ``#`` comments."""
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < ntokens:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedError("truncated PGM header", path, pos)
        tokens.append(data[start:pos])
    if pos >= n or not data[pos:pos + 1].isspace():
        raise TruncatedError("PGM header must end with a single whitespace byte", path, pos)
    return tokens, pos + 1


def decode_pgm16(data: bytes, path=None) -> np.ndarray:
    if data[:2] != b"P5":
        raise BadMagicError("not a binary PGM (expected P5)", path, 0)
    tokens, offset = _pnm_header(data, 4, path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PGM header field", path, 2) from None
    if maxval != 65535:
        raise MaxvalError(f"16-bit PGM requires maxval 65535, got {maxval}", path, offset)
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM size {width}x{height}", path, 2)
    need = offset + 2 * width * height
    if len(data) < need:
        raise TruncatedError(f"PGM raster truncated ({len(data)} of {need} bytes)", path, len(data))
    if len(data) > need:
        raise CountMismatchError("trailing bytes after PGM raster", path, need)
    return np.frombuffer(data, dtype=">u2", offset=offset, count=width * height).reshape(height, width).astype(np.uint16)


def encode_pgm16(values) -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError("PGM raster must be 2-D")
    h, w = arr.shape
    return b"P5\n%d %d\n65535\n" % (w, h) + arr.astype(">u2").tobytes()


def parse_class_table(text: str, path=None, class_names: Optional[Mapping[int, str]] = None) -> dict[int, int]:
    """Parse ``<instance_id> <class_id>`` lines; class may also be given by name."""
    names = {v: k for k, v in (class_names or DEFAULT_CLASS_NAMES).items()}
    table: dict[int, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError("class table lines need two fields", path, lineno)
        try:
            iid = int(parts[0])
        except ValueError:
            raise FormatError(f"bad instance id {parts[0]!r}", path, lineno) from None
        if not 0 < iid <= 65535:
            raise FormatError(f"instance id {iid} outside 1..65535", path, lineno)
        if parts[1] in names:
            cid = names[parts[1]]
        else:
            try:
                cid = int(parts[1])
            except ValueError:
                raise FormatError(f"unknown class {parts[1]!r}", path, lineno) from None
        if iid in table:
            raise DuplicateInstanceError(f"duplicate instance id {iid} ({path}, line {lineno})")
        table[iid] = cid
    return table


def load_mask(mask_path, table_path, class_names=None) -> InstanceMask:
    mask_path, table_path = Path(mask_path), Path(table_path)
    values = decode_pgm16(mask_path.read_bytes(), mask_path)
    table = parse_class_table(table_path.read_text(), table_path, class_names)
    try:
        return InstanceMask(values, table)
    except MissingClassError as exc:
        raise MissingClassError(f"{exc} ({mask_path})") from None


def write_mask(mask_path, table_path, mask: InstanceMask) -> None:
    Path(mask_path).write_bytes(encode_pgm16(mask.values))
    Path(table_path).write_text("".join(f"{i} {c}\n" for i, c in sorted(mask.class_table.items())))


# --------------------------------------------------------------------------
# PFM
# --------------------------------------------------------------------------

_PFM_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def decode_pfm(data: bytes, path=None) -> np.ndarray:
    lines = data.split(b"\n", 3)
    if len(lines) < 4:
        raise TruncatedError("truncated PFM header", path, len(data))
    if lines[0].strip() != b"Pf":
        raise BadMagicError("expected single-channel PFM ('Pf')", path, 0)
    m = _PFM_DIMS.match(lines[1])
    if not m:
        raise FormatError("malformed PFM dimensions", path, len(lines[0]) + 1)
    width, height = int(m.group(1)), int(m.group(2))
    try:
        scale = float(lines[2])
    except ValueError:
        raise FormatError("malformed PFM scale", path, len(lines[0]) + len(lines[1]) + 2) from None
    if scale == 0 or not math.isfinite(scale):
        raise FormatError("PFM scale must be finite and non-zero", path, len(lines[0]) + len(lines[1]) + 2)
    offset = len(data) - len(lines[3])
    need = 4 * width * height
    if len(lines[3]) != need:
        raise (TruncatedError if len(lines[3]) < need else CountMismatchError)(
            f"PFM payload has {len(lines[3])} bytes, {width}x{height} needs {need}", path, offset)
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(lines[3], dtype=dtype).reshape(height, width)
    return np.flipud(arr).astype(np.float32)


def encode_pfm(values) -> bytes:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM raster must be 2-D")
    h, w = arr.shape
    return b"Pf\n%d %d\n-1.0\n" % (w, h) + np.flipud(arr).astype("<f4").tobytes()


def load_depth(path) -> DepthMap:
    path = Path(path)
    return DepthMap(decode_pfm(path.read_bytes(), path))


def write_depth(path, depth) -> None:
    values = depth.values if isinstance(depth, DepthMap) else depth
    Path(path).write_bytes(encode_pfm(values))


# --------------------------------------------------------------------------
# Boxes
# --------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def format_box(box: Box3D) -> str:
    fid = box.frame_id or "-"
    iid = box.instance_id if box.instance_id else "-"
    if any(c.isspace() for c in fid + iid):
        raise ValueError("frame and instance ids may not contain whitespace")
    nums = " ".join(_fmt(v) for v in (*box.center, box.length, box.width, box.height, box.yaw, box.score))
    return f"{fid} {int(box.class_id)} {nums} {iid}"


def parse_boxes(text: str, path=None) -> list[Box3D]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != BOX_FIELDS:
            raise BoxFormatError(f"expected {BOX_FIELDS} fields, got {len(parts)}", path, lineno)
        try:
            class_id = int(parts[1])
            nums = [float(p) for p in parts[2:10]]
        except ValueError:
            raise BoxFormatError("non-numeric box field", path, lineno) from None
        if not all(math.isfinite(v) for v in nums):
            raise BoxFormatError("non-finite box field", path, lineno)
        cx, cy, cz, length, width, height, yaw, score = nums
        try:
            boxes.append(Box3D(
                (cx, cy, cz), length, width, height, yaw, class_id, score,
                instance_id=None if parts[10] == "-" else parts[10],
                frame_id="" if parts[0] == "-" else parts[0],
            ))
        except ValueError as exc:
            raise BoxFormatError(str(exc), path, lineno) from None
    return boxes


def read_boxes(path) -> list[Box3D]:
    path = Path(path)
    return parse_boxes(path.read_text(), path)


def write_boxes(path, boxes: Iterable[Box3D]) -> None:
    Path(path).write_text("".join(format_box(b) + "\n" for b in boxes))


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------

def parse_calibration(doc, path=None) -> list[CameraModel]:
    if not isinstance(doc, list):
        raise CalibrationError(f"calibration must be a JSON array ({path})")
    cams = []
    names = set()
    for i, entry in enumerate(doc):
        try:
            name = str(entry["name"])
            K = np.asarray(entry["intrinsics"], dtype=np.float64)
            T = np.asarray(entry["ego_from_camera"], dtype=np.float64)
            width, height = entry["width"], entry["height"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CalibrationError(f"calibration entry {i}: {exc!r} ({path})") from None
        if K.size != 9 or T.size != 16:
            raise CalibrationError(f"calibration entry {i}: intrinsics need 9 and ego_from_camera 16 numbers")
        if int(width) != width or int(height) != height:
            raise CalibrationError(f"calibration entry {i}: non-integer image size")
        if name in names:
            raise CalibrationError(f"duplicate camera name {name!r}")
        names.add(name)
        cams.append(CameraModel(name, K.reshape(3, 3), T.reshape(4, 4), int(width), int(height)))
    return cams


def load_calibration(path) -> list[CameraModel]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CalibrationError(f"invalid JSON in {path}: {exc}") from None
    return parse_calibration(doc, path)


def calibration_document(cameras: Sequence[CameraModel]) -> list[dict]:
    return [
        {
            "name": c.name,
            "width": c.width,
            "height": c.height,
            "intrinsics": c.intrinsics.reshape(-1).tolist(),
            "ego_from_camera": c.ego_from_camera.reshape(-1).tolist(),
        }
        for c in cameras
    ]


def write_calibration(path, cameras: Sequence[CameraModel]) -> None:
    Path(path).write_text(json.dumps(calibration_document(cameras), indent=1) + "\n")


# --------------------------------------------------------------------------
# Loss trace
# --------------------------------------------------------------------------

def load_loss_trace(path) -> LossTrace:
    path = Path(path)
    epochs, losses = [], []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and row[0].strip().lower() == "epoch":
                continue
            if len(row) != 2:
                raise FormatError("loss trace rows need 'epoch,loss'", path, lineno)
            try:
                epochs.append(int(row[0]))
                losses.append(float(row[1]))
            except ValueError:
                raise FormatError("non-numeric loss trace row", path, lineno) from None
    try:
        return LossTrace(tuple(epochs), tuple(losses))
    except InputError as exc:
        raise FormatError(str(exc), path) from None


def write_loss_trace(path, trace: LossTrace) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for e, v in zip(trace.epochs, trace.losses):
            w.writerow([e, repr(float(v))])


# --------------------------------------------------------------------------
# Frame directories
# --------------------------------------------------------------------------

@dataclass
class FramePaths:
    root: Path
    camera_names: list[str] = field(default_factory=list)

    @property
    def points(self) -> Path:
        return self.root / "points.pcbf"

    @property
    def calibration(self) -> Path:
        return self.root / "calibration.json"

    @property
    def meta(self) -> Path:
        return self.root / "frame.json"

    @property
    def truth(self) -> Path:
        return self.root / "truth.txt"

    def mask(self, name) -> Path:
        return self.root / f"{name}.mask.pgm"

    def classes(self, name) -> Path:
        return self.root / f"{name}.classes.txt"

    def depth(self, name) -> Path:
        return self.root / f"{name}.depth.pfm"


def load_frame(root, class_names=None) -> Frame:
    paths = FramePaths(Path(root))
    frame_id = paths.root.name
    timestamp = 0
    if paths.meta.exists():
        meta = json.loads(paths.meta.read_text())
        frame_id = str(meta.get("frame_id", frame_id))
        timestamp = int(meta.get("timestamp", 0))
    points = load_point_cloud(paths.points)
    views = []
    for cam in load_calibration(paths.calibration):
        mask = load_mask(paths.mask(cam.name), paths.classes(cam.name), class_names)
        depth = load_depth(paths.depth(cam.name))
        views.append(CameraView(cam, mask, depth))
    return Frame(frame_id, points, tuple(views), timestamp)


def write_frame(root, frame: Frame) -> Path:
    paths = FramePaths(Path(root))
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.meta.write_text(json.dumps({"frame_id": frame.frame_id, "timestamp": frame.timestamp}) + "\n")
    write_point_cloud(paths.points, frame.points)
    write_calibration(paths.calibration, [v.camera for v in frame.cameras])
    for v in frame.cameras:
        write_mask(paths.mask(v.camera.name), paths.classes(v.camera.name), v.mask)
        write_depth(paths.depth(v.camera.name), v.depth)
    return paths.root


def list_frame_dirs(root) -> list[Path]:
    """Frame directories under ``root`` (those holding ``points.pcbf``), sorted by name."""
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "points.pcbf").exists())
