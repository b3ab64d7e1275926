"""Density-map rasterization and the per-pair ground-truth map bundle.

Every head deposits a truncated Gaussian that is renormalized to unit mass
after boundary clipping, so a map's mass equals its head count and the sum
of an inflow map is literally a number of people.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .annotations import FlowDecomposition, FrameAnnotation
from .errors import ConfigError, DataError

DEFAULT_SIGMA = 4.0
DEFAULT_TRUNCATION = 12.0

_MAGIC = b"VICD"


class MapRole(Enum):
    GLOBAL = 0
    SHARED = 1
    OUTFLOW = 2
    INFLOW = 3


@dataclass(frozen=True)
class KernelSpec:
    """Isotropic Gaussian kernel: std in pixels, square support half-width."""

    sigma: float = DEFAULT_SIGMA
    truncation_radius: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.truncation_radius < 2 * self.sigma:
            raise ConfigError(
                f"truncation_radius {self.truncation_radius} < 2*sigma "
                f"({2 * self.sigma})"
            )


@dataclass
class DensityMap:
    grid: np.ndarray  # float32, height x width, at `stride` px per cell
    role: MapRole
    stride: int = 1

    @property
    def shape(self):
        return self.grid.shape


def mass(density: DensityMap | np.ndarray) -> float:
    """Total map mass (its person count), accumulated in float64."""
    grid = density.grid if isinstance(density, DensityMap) else density
    return float(np.sum(grid, dtype=np.float64))


def rasterize(
    points,
    width: int,
    height: int,
    kernel: KernelSpec = KernelSpec(),
    stride: int = 1,
    role: MapRole = MapRole.GLOBAL,
) -> DensityMap:
    """Rasterize head points into a density map of ceil(size/stride) cells.

    Each point contributes a Gaussian sampled at cell centers over a square
    window of half-width truncation_radius, renormalized to unit mass over
    the in-bounds cells; total mass therefore equals len(points) regardless
    of boundary clipping. Accumulation runs in float64, storage is float32.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    out_h = -(-height // stride)
    out_w = -(-width // stride)
    grid = np.zeros((out_h, out_w), dtype=np.float64)

    sigma = kernel.sigma / stride
    radius = kernel.truncation_radius / stride
    inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma)

    for p in points:
        cx = p.x / stride
        cy = p.y / stride
        if not (0 <= cx < out_w and 0 <= cy < out_h):
            raise DataError(f"point ({p.x}, {p.y}) outside {width}x{height} frame")
        x0 = max(int(np.ceil(cx - radius)), 0)
        x1 = min(int(np.floor(cx + radius)), out_w - 1)
        y0 = max(int(np.ceil(cy - radius)), 0)
        y1 = min(int(np.floor(cy + radius)), out_h - 1)
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        wx = np.exp(-((xs - cx) ** 2) * inv_two_sigma2)
        wy = np.exp(-((ys - cy) ** 2) * inv_two_sigma2)
        patch = np.outer(wy, wx)
        total = patch.sum()
        if total <= 0:  # cannot happen for in-bounds points, guard anyway
            raise DataError(f"empty kernel support at ({p.x}, {p.y})")
        grid[y0 : y1 + 1, x0 : x1 + 1] += patch / total

    return DensityMap(grid=grid.astype(np.float32), role=role, stride=stride)


class GtBundle(NamedTuple):
    """The six ground-truth maps of one training pair."""

    global_a: DensityMap
    global_b: DensityMap
    shared_a: DensityMap
    shared_b: DensityMap
    outflow_a: DensityMap
    inflow_b: DensityMap


def gt_bundle(
    pair: FlowDecomposition,
    frame_a: FrameAnnotation,
    frame_b: FrameAnnotation,
    kernel: KernelSpec = KernelSpec(),
    stride: int = 1,
) -> GtBundle:
    """Rasterize a flow decomposition into the six supervision maps.

    By linearity over disjoint point sets, global = shared + outflow for the
    earlier frame and global = shared + inflow for the later one.
    """
    def raster(points, frame, role):
        return rasterize(points, frame.width, frame.height, kernel, stride, role)

    return GtBundle(
        global_a=raster(frame_a.points, frame_a, MapRole.GLOBAL),
        global_b=raster(frame_b.points, frame_b, MapRole.GLOBAL),
        shared_a=raster(pair.shared_a, frame_a, MapRole.SHARED),
        shared_b=raster(pair.shared_b, frame_b, MapRole.SHARED),
        outflow_a=raster(pair.outflow, frame_a, MapRole.OUTFLOW),
        inflow_b=raster(pair.inflow, frame_b, MapRole.INFLOW),
    )


def save_density(density: DensityMap, path) -> None:
    """Write the binary container: magic, u32 h/w/stride, u8 role, f32 LE."""
    grid = np.ascontiguousarray(density.grid, dtype="<f4")
    h, w = grid.shape
    header = _MAGIC + struct.pack("<IIIB", h, w, density.stride, density.role.value)
    Path(path).write_bytes(header + grid.tobytes())


def load_density(path) -> DensityMap:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    h, w, stride, role = struct.unpack("<IIIB", blob[4:17])
    expected = 17 + 4 * h * w
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, got {len(blob)}")
    grid = np.frombuffer(blob[17:], dtype="<f4").reshape(h, w).copy()
    return DensityMap(grid=grid, role=MapRole(role), stride=stride)
