"""Synthetic moving-camera crowd clips with exact identities.

People perform seeded random walks in a textured world; a camera window
pans (and optionally zooms) across it. Every rendered frame comes with
exact head coordinates and ids, so the whole pipeline has ground truth at
desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .annotations import (
    INFLOW,
    OUTFLOW,
    ClipAnnotation,
    FrameAnnotation,
    HeadPoint,
    Supervision,
    derive_flow,
    pair_indices,
    write_annotation_csv,
    write_manifest,
)
from .errors import ConfigError

RENDER_MODES = ("gaussian_blobs", "dots")


@dataclass
class SynthConfig:
    world_size: tuple = (320, 240)       # (width, height) in pixels
    n_persons: int = 40
    person_speed: tuple = (0.5, 2.0)     # px/frame, sampled per person
    camera_path: list | None = None      # per-frame (x, y, zoom); None = auto pan
    viewport: tuple = (160, 120)         # (width, height)
    n_frames: int = 16
    render: str = "gaussian_blobs"
    seed: int = 0
    fps: float = 5.0
    clip_id: str = "synth"

    def __post_init__(self):
        if self.n_persons < 0 or self.n_frames < 1:
            raise ConfigError("n_persons must be >= 0 and n_frames >= 1")
        if self.render not in RENDER_MODES:
            raise ConfigError(f"render must be one of {RENDER_MODES}")
        vw, vh = self.viewport
        ww, wh = self.world_size
        if vw > ww or vh > wh:
            raise ConfigError(
                f"viewport {vw}x{vh} does not fit inside world {ww}x{wh}"
            )
        if self.camera_path is not None:
            _validate_camera_path(self)


def _auto_camera_path(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth random pan keeping the window inside the world; zoom stays 1."""
    vw, vh = config.viewport
    ww, wh = config.world_size
    max_x, max_y = ww - vw, wh - vh
    x = rng.uniform(0, max_x) if max_x > 0 else 0.0
    y = rng.uniform(0, max_y) if max_y > 0 else 0.0
    angle = rng.uniform(0, 2 * np.pi)
    speed = 0.04 * (vw + vh)  # brisk pan: noticeable in/outflow per pair
    path = np.zeros((config.n_frames, 3))
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    for t in range(config.n_frames):
        path[t] = (x, y, 1.0)
        x += vx
        y += vy
        if x < 0 or x > max_x:
            vx = -vx
            x = min(max(x, 0.0), float(max_x))
        if y < 0 or y > max_y:
            vy = -vy
            y = min(max(y, 0.0), float(max_y))
    return path


def _validate_camera_path(config: SynthConfig) -> np.ndarray:
    path = np.asarray(config.camera_path, dtype=np.float64)
    if path.shape != (config.n_frames, 3):
        raise ConfigError(
            f"camera_path must have shape ({config.n_frames}, 3), got {path.shape}"
        )
    vw, vh = config.viewport
    ww, wh = config.world_size
    for t, (x, y, zoom) in enumerate(path):
        if zoom <= 0:
            raise ConfigError(f"frame {t}: zoom must be > 0")
        if x < 0 or y < 0 or x + vw / zoom > ww or y + vh / zoom > wh:
            raise ConfigError(
                f"frame {t}: viewport window at ({x}, {y}) zoom {zoom} "
                f"exceeds the {ww}x{wh} world"
            )
    return path


def _camera_path(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    if config.camera_path is None:
        return _auto_camera_path(config, rng)
    return _validate_camera_path(config)


def simulate_world(config: SynthConfig):
    """Person trajectories and the camera path, before any rendering.

    Returns (positions, camera): positions has shape (n_frames, n_persons, 2)
    in world (x, y); camera has shape (n_frames, 3) rows (x, y, zoom).
    Deterministic per seed and independent of render settings.
    """
    sim_rng, cam_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    ]
    camera = _camera_path(config, cam_rng)

    ww, wh = config.world_size
    n, t = config.n_persons, config.n_frames
    pos = np.empty((t, n, 2))
    cur = np.column_stack([sim_rng.uniform(0, ww, n), sim_rng.uniform(0, wh, n)])
    speed = sim_rng.uniform(config.person_speed[0], config.person_speed[1], n)
    heading = sim_rng.uniform(0, 2 * np.pi, n)
    for step in range(t):
        pos[step] = cur
        heading = heading + sim_rng.normal(0, 0.3, n)
        cur = cur + np.column_stack(
            [speed * np.cos(heading), speed * np.sin(heading)]
        )
        # reflect off the world boundary
        for axis, bound in ((0, ww), (1, wh)):
            low = cur[:, axis] < 0
            high = cur[:, axis] > bound
            cur[low, axis] = -cur[low, axis]
            cur[high, axis] = 2 * bound - cur[high, axis]
            cur[:, axis] = np.clip(cur[:, axis], 0, np.nextafter(bound, 0))
    return pos, camera


def _background(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    ww, wh = config.world_size
    noise = rng.uniform(40, 150, size=(wh, ww, 3)).astype(np.float32)
    return cv2.blur(noise, (7, 7))


def _stamp_blob(canvas, x, y, color, radius=4, sigma=1.6):
    h, w = canvas.shape[:2]
    x0, x1 = max(int(np.ceil(x - radius)), 0), min(int(np.floor(x + radius)), w - 1)
    y0, y1 = max(int(np.ceil(y - radius)), 0), min(int(np.floor(y + radius)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1) - x
    ys = np.arange(y0, y1 + 1) - y
    blob = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2 * sigma**2))
    patch = canvas[y0 : y1 + 1, x0 : x1 + 1]
    patch += blob[:, :, None] * (color[None, None, :] - patch)


def _stamp_dot(canvas, x, y, color):
    h, w = canvas.shape[:2]
    cx, cy = int(round(x)), int(round(y))
    x0, x1 = max(cx - 1, 0), min(cx + 1, w - 1)
    y0, y1 = max(cy - 1, 0), min(cy + 1, h - 1)
    canvas[y0 : y1 + 1, x0 : x1 + 1] = color


def generate(config: SynthConfig):
    """Render a synthetic clip; returns (frames, annotation).

    Frames are uint8 H x W x 3; the annotation is fully supervised with the
    exact viewport coordinates of every visible person.
    """
    positions, camera = simulate_world(config)
    render_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, 0xC0FFEE]).generate_state(1)[0]
    )
    background = _background(config, render_rng)
    colors = render_rng.uniform(170, 255, size=(config.n_persons, 3)).astype(np.float32)

    vw, vh = config.viewport
    frames, annotations = [], []
    for t in range(config.n_frames):
        cam_x, cam_y, zoom = camera[t]
        win_w, win_h = vw / zoom, vh / zoom

        ix0, iy0 = int(np.floor(cam_x)), int(np.floor(cam_y))
        ix1 = min(int(np.ceil(cam_x + win_w)), background.shape[1])
        iy1 = min(int(np.ceil(cam_y + win_h)), background.shape[0])
        window = background[iy0:iy1, ix0:ix1]
        canvas = cv2.resize(window, (vw, vh), interpolation=cv2.INTER_LINEAR).copy()

        points = []
        for pid in range(config.n_persons):
            wx, wy = positions[t, pid]
            x = (wx - cam_x) * zoom
            y = (wy - cam_y) * zoom
            if not (0 <= x < vw and 0 <= y < vh):
                continue
            points.append(HeadPoint(x=float(x), y=float(y), track_id=pid))
            if config.render == "dots":
                _stamp_dot(canvas, x, y, colors[pid])
            else:
                _stamp_blob(canvas, x, y, colors[pid])
        frames.append(np.clip(canvas, 0, 255).astype(np.uint8))
        annotations.append(
            FrameAnnotation(frame_index=t, points=tuple(points), width=vw, height=vh)
        )

    clip = ClipAnnotation(
        clip_id=config.clip_id,
        frames=tuple(annotations),
        fps=config.fps,
        supervision=Supervision.FULL,
    )
    return frames, clip


def weak_labels_from_ids(clip: ClipAnnotation, stride: int = 1) -> ClipAnnotation:
    """Weak-supervision copy of a full clip: ids erased, enter/exit flags set
    from the exact flow decomposition at the given stride."""
    flags: dict[tuple[int, int], set] = {}
    for a, b in pair_indices(clip.n_frames, stride):
        flow = derive_flow(clip.frames[a], clip.frames[b])
        for p in flow.outflow:
            flags.setdefault((a, p.track_id), set()).add(OUTFLOW)
        for p in flow.inflow:
            flags.setdefault((b, p.track_id), set()).add(INFLOW)

    frames = []
    for i, frame in enumerate(clip.frames):
        points = tuple(
            HeadPoint(
                x=p.x, y=p.y, track_id=None,
                flags=frozenset(flags.get((i, p.track_id), ())),
            )
            for p in frame.points
        )
        frames.append(
            FrameAnnotation(frame_index=frame.frame_index, points=points,
                            width=frame.width, height=frame.height)
        )
    return ClipAnnotation(
        clip_id=clip.clip_id, frames=tuple(frames), fps=clip.fps,
        supervision=Supervision.WEAK,
    )


def save_dataset(frames, clip: ClipAnnotation, out_dir) -> Path:
    """Write PNG frames, the annotation CSV, and the clip manifest.

    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        Image.fromarray(frame).save(frames_dir / f"{i:04d}.png")
    csv_path = out_dir / "annotations.csv"
    write_annotation_csv(clip, csv_path)
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, clip, "frames", "annotations.csv")
    return manifest_path
