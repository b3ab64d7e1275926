"""Head-point annotations: parsing, validation, and flow decomposition.

A clip is an ordered list of frames, each holding head points that may carry
track identities (full supervision) or enter/exit flags (weak supervision).
Flow decomposition of a frame pair splits both point sets into shared,
outflow (gone by the later frame) and inflow (new in the later frame); with
identity labels this is exact and doubles as the counting oracle.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import AnnotationParseError, SupervisionError, ValidationError

INFLOW = "in"
OUTFLOW = "out"
_VALID_FLAGS = frozenset({INFLOW, OUTFLOW})


class Supervision(str, Enum):
    FULL = "full"
    WEAK = "weak"


class ClampWarning(UserWarning):
    """An annotated head fell outside the frame and was clamped."""


class WeakLabelWarning(UserWarning):
    """Weak enter/exit labels are mutually inconsistent for a pair."""


@dataclass(frozen=True)
class HeadPoint:
    """One head, as a point in pixel coordinates (x right, y down)."""

    x: float
    y: float
    track_id: int | None = None
    flags: frozenset = frozenset()

    def has_flag(self, flag: str) -> bool:
        return flag in self.flags


@dataclass(frozen=True)
class FrameAnnotation:
    frame_index: int
    points: tuple = ()
    width: int = 0
    height: int = 0

    def __post_init__(self):
        ids = [p.track_id for p in self.points if p.track_id is not None]
        if len(ids) != len(set(ids)):
            raise ValidationError(
                f"frame {self.frame_index}: duplicate track ids {sorted(ids)}"
            )

    @property
    def track_ids(self):
        return {p.track_id for p in self.points if p.track_id is not None}


@dataclass(frozen=True)
class ClipAnnotation:
    clip_id: str
    frames: tuple
    fps: float
    supervision: Supervision

    def __post_init__(self):
        indices = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValidationError("frame_index must be strictly increasing")

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class FlowDecomposition:
    """Point supports of the shared/outflow/inflow maps for one frame pair."""

    shared_a: tuple
    shared_b: tuple
    outflow: tuple
    inflow: tuple


def _clamp(value: float, upper: int) -> float:
    # Keep points strictly inside [0, upper); upper edge maps just below it.
    return min(max(value, 0.0), float(np.nextafter(float(upper), 0.0)))


def _parse_flags(text: str, line_number: int) -> frozenset:
    if not text:
        return frozenset()
    parts = [p.strip() for p in text.split("|") if p.strip()]
    bad = [p for p in parts if p not in _VALID_FLAGS]
    if bad:
        raise AnnotationParseError(f"unknown flag value {bad[0]!r}", line_number)
    return frozenset(parts)


def parse_annotation_file(
    path,
    width: int,
    height: int,
    fps: float,
    clip_id: str | None = None,
    n_frames: int | None = None,
) -> ClipAnnotation:
    """Parse a per-clip CSV of head boxes into a ClipAnnotation.

    Each line is ``frame,id,x,y,w,h`` with an optional 7th ``flags`` column
    ("in", "out", "in|out" or empty); id -1 means unlabeled. The head point
    is the box center; centers outside the frame are clamped to the boundary
    (one ClampWarning per point). Supervision is FULL iff every id is >= 0.

    Frames are materialized contiguously from index 0 up to the largest
    annotated index (or ``n_frames``), so unannotated frames exist as empty.
    """
    path = Path(path)
    if width <= 0 or height <= 0:
        raise ValidationError(f"frame size {width}x{height} must be positive")

    per_frame: dict[int, list[HeadPoint]] = {}
    seen_ids: set[tuple[int, int]] = set()
    any_unlabeled = False

    for line_number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        cols = [c.strip() for c in line.split(",")]
        if len(cols) not in (6, 7):
            raise AnnotationParseError(
                f"expected 6 or 7 comma-separated fields, got {len(cols)}",
                line_number,
            )
        try:
            frame_idx = int(cols[0])
            track_id = int(cols[1])
            x, y, w, h = (float(c) for c in cols[2:6])
        except ValueError as exc:
            raise AnnotationParseError(str(exc), line_number) from None
        if frame_idx < 0:
            raise AnnotationParseError(f"negative frame index {frame_idx}", line_number)
        flags = _parse_flags(cols[6], line_number) if len(cols) == 7 else frozenset()

        if track_id < 0:
            any_unlabeled = True
            tid = None
        else:
            tid = track_id
            if (frame_idx, tid) in seen_ids:
                raise ValidationError(
                    f"line {line_number}: duplicate (frame, id) = ({frame_idx}, {tid})"
                )
            seen_ids.add((frame_idx, tid))

        cx, cy = x + w / 2.0, y + h / 2.0
        cx2, cy2 = _clamp(cx, width), _clamp(cy, height)
        if (cx2, cy2) != (cx, cy):
            warnings.warn(
                f"line {line_number}: head ({cx:.1f}, {cy:.1f}) outside "
                f"{width}x{height} frame, clamped",
                ClampWarning,
                stacklevel=2,
            )
        per_frame.setdefault(frame_idx, []).append(
            HeadPoint(x=cx2, y=cy2, track_id=tid, flags=flags)
        )

    if not per_frame:
        raise ValidationError(f"{path}: no annotations (a clip needs frames)")

    last = max(per_frame)
    if n_frames is not None:
        if n_frames <= last:
            raise ValidationError(
                f"n_frames={n_frames} but annotations reach frame {last}"
            )
        last = n_frames - 1

    frames = tuple(
        FrameAnnotation(
            frame_index=i,
            points=tuple(per_frame.get(i, ())),
            width=width,
            height=height,
        )
        for i in range(last + 1)
    )
    supervision = Supervision.WEAK if any_unlabeled else Supervision.FULL
    return ClipAnnotation(
        clip_id=clip_id or path.stem,
        frames=frames,
        fps=fps,
        supervision=supervision,
    )


def write_annotation_csv(clip: ClipAnnotation, path) -> None:
    """Serialize a clip back to the CSV format parse_annotation_file reads.

    Points are written as zero-size boxes at the head center so that
    parse(write(parse(f))) reproduces coordinates exactly.
    """
    lines = []
    for frame in clip.frames:
        for p in frame.points:
            tid = -1 if p.track_id is None else p.track_id
            flags = "|".join(sorted(p.flags))
            row = f"{frame.frame_index},{tid},{p.x!r},{p.y!r},0,0"
            if flags:
                row += f",{flags}"
            lines.append(row)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_manifest(path, clip: ClipAnnotation, frames_dir, annotation_csv) -> None:
    """Write the JSON clip manifest next to its frames and CSV."""
    frame = clip.frames[0]
    manifest = {
        "clip_id": clip.clip_id,
        "fps": clip.fps,
        "width": frame.width,
        "height": frame.height,
        "frames_dir": str(frames_dir),
        "annotation_csv": str(annotation_csv),
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")


def load_manifest(path) -> tuple[ClipAnnotation, list]:
    """Load a clip manifest; returns (annotation, sorted frame image paths)."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: {exc}") from None
    for key in ("clip_id", "fps", "width", "height", "frames_dir", "annotation_csv"):
        if key not in manifest:
            raise ValidationError(f"{path}: manifest missing key {key!r}")
    frames_dir = path.parent / manifest["frames_dir"]
    frame_paths = sorted(frames_dir.glob("*.png"))
    clip = parse_annotation_file(
        path.parent / manifest["annotation_csv"],
        width=int(manifest["width"]),
        height=int(manifest["height"]),
        fps=float(manifest["fps"]),
        clip_id=manifest["clip_id"],
        n_frames=len(frame_paths) or None,
    )
    return clip, frame_paths


def derive_flow(frame_a: FrameAnnotation, frame_b: FrameAnnotation) -> FlowDecomposition:
    """Exact flow decomposition of a frame pair from track identities.

    shared_a/shared_b are ordered consistently by track_id; outflow/inflow
    keep their frame order.
    """
    for frame in (frame_a, frame_b):
        if any(p.track_id is None for p in frame.points):
            raise SupervisionError(
                "derive_flow needs track ids on every point; "
                "use derive_flow_weak for flag-labeled clips"
            )
    ids_a = frame_a.track_ids
    ids_b = frame_b.track_ids
    common = ids_a & ids_b
    shared_a = tuple(sorted((p for p in frame_a.points if p.track_id in common),
                            key=lambda p: p.track_id))
    shared_b = tuple(sorted((p for p in frame_b.points if p.track_id in common),
                            key=lambda p: p.track_id))
    outflow = tuple(p for p in frame_a.points if p.track_id not in common)
    inflow = tuple(p for p in frame_b.points if p.track_id not in common)
    return FlowDecomposition(shared_a, shared_b, outflow, inflow)


def derive_flow_weak(
    frame_a: FrameAnnotation, frame_b: FrameAnnotation
) -> FlowDecomposition:
    """Flow decomposition from enter/exit flags, no identities needed.

    Exit-flagged points of the earlier frame are outflow, enter-flagged
    points of the later frame are inflow, everything else is shared. A
    shared-count mismatch only warns: weak labels may be noisy.
    """
    outflow = tuple(p for p in frame_a.points if p.has_flag(OUTFLOW))
    shared_a = tuple(p for p in frame_a.points if not p.has_flag(OUTFLOW))
    inflow = tuple(p for p in frame_b.points if p.has_flag(INFLOW))
    shared_b = tuple(p for p in frame_b.points if not p.has_flag(INFLOW))
    if len(shared_a) != len(shared_b):
        warnings.warn(
            f"weak labels disagree: {len(shared_a)} shared in frame "
            f"{frame_a.frame_index} vs {len(shared_b)} in frame {frame_b.frame_index}",
            WeakLabelWarning,
            stacklevel=2,
        )
    return FlowDecomposition(shared_a, shared_b, outflow, inflow)


def pair_indices(n_frames: int, stride: int) -> list[tuple[int, int]]:
    """Frame-index pairs ((k-1)*stride, k*stride) for all complete strides."""
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    return [(k * stride, (k + 1) * stride) for k in range((n_frames - 1) // stride)]


def count_unique(clip: ClipAnnotation, stride: int = 1) -> int:
    """Exact unique-individual count: first-frame heads plus all pair inflows.

    This is the identity-label oracle for the video count; an id that leaves
    the sampled view and returns is counted again (it reappears as inflow).
    """
    if clip.supervision is not Supervision.FULL:
        raise SupervisionError("count_unique needs a fully labeled clip")
    total = len(clip.frames[0].points)
    for a, b in pair_indices(clip.n_frames, stride):
        total += len(derive_flow(clip.frames[a], clip.frames[b]).inflow)
    return total
