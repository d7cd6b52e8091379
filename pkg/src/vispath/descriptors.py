"""Dense descriptor extractors: DSIFT, SF_GABOR, LW_COLOR, ST_GABOR, ST_GAUSS."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import DataError
from .imgproc import (
    TemporalWindow,
    build_gabor_bank_2d,
    build_pooling_masks,
    convolve2d,
    convolve_separable,
    convolve_time,
    dense_grid,
    gaussian_1d,
    gaussian_kernels,
    pool_at_grid,
    temporal_window_stream,
)

DIMS = {"DSIFT": 128, "SF_GABOR": 136, "LW_COLOR": 144, "ST_GABOR": 221, "ST_GAUSS": 136}
WINDOW_LENGTH = {"DSIFT": 1, "SF_GABOR": 1, "LW_COLOR": 11, "ST_GABOR": 9, "ST_GAUSS": 11}
SUPPORT = {"DSIFT": 15, "SF_GABOR": 11, "LW_COLOR": 0, "ST_GABOR": 17, "ST_GAUSS": 11}

SIFT_BIN_SIZE = 3
SIFT_SIGMA = 1.0
SIFT_CLIP = 0.2
NORM_GUARD = 1e-12


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    method: str
    frame_index: int
    grid: np.ndarray  # (N, 2) patch centers (x, y)
    vectors: np.ndarray  # (N, D)
    support: int

    def __post_init__(self):
        if len(self.grid) != len(self.vectors):
            raise ValueError(f"{len(self.grid)} grid points for {len(self.vectors)} vectors")
        dim = DIMS.get(self.method)
        if dim is not None and self.vectors.ndim == 2 and self.vectors.shape[1] != dim:
            raise ValueError(f"{self.method} vectors must have dimension {dim}, got {self.vectors.shape[1]}")

    def __len__(self):
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    return np.where(norm < NORM_GUARD, 0.0, v / np.where(norm < NORM_GUARD, 1.0, norm))


def _sift_normalize(v: np.ndarray) -> np.ndarray:
    v = _l2_normalize(v)
    v = np.minimum(v, SIFT_CLIP)
    return _l2_normalize(v)


def _require_grid(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return dense_grid(h, w)


# ---------------------------------------------------------------------------
# shared weights


@lru_cache(maxsize=None)
def _sift_cell_weights() -> np.ndarray:
    """Bilinear 4x4 cell weights over a 15x15 support; (16, 15, 15), row-major cells."""
    p = SUPPORT["DSIFT"]
    offs = np.arange(p) - p // 2
    centers = (np.arange(4) - 1.5) * SIFT_BIN_SIZE
    w1 = np.maximum(0.0, 1.0 - np.abs(offs[None, :] - centers[:, None]) / SIFT_BIN_SIZE)  # (4, P)
    w = w1[:, None, :, None] * w1[None, :, None, :]  # (cy, cx, P, P)
    return w.reshape(16, p, p)


@lru_cache(maxsize=None)
def _flipped_masks(support: int) -> np.ndarray:
    # pooling is a convolution: out(c) = sum_q plane(c + q) * mask(-q)
    return np.ascontiguousarray(build_pooling_masks(support).masks[:, ::-1, ::-1])


@lru_cache(maxsize=None)
def _gabor_bank() -> np.ndarray:
    return build_gabor_bank_2d().kernels


@lru_cache(maxsize=None)
def _kernels():
    return gaussian_kernels()


# ---------------------------------------------------------------------------
# single-frame extractors


def dsift_frame(frame, normalize: bool = True) -> DescriptorSet:
    """Dense SIFT: 4x4 cells x 8 orientations on a stride-3 grid, sigma = 1 smoothing."""
    plane = frame.gray()
    grid = _require_grid(plane)
    g = gaussian_1d(5, SIFT_SIGMA)
    smooth = convolve_separable(plane, g, g)
    diff = np.array([0.5, 0.0, -0.5])  # central difference under convolution
    gx = convolve2d(smooth, diff[None, :])
    gy = convolve2d(smooth, diff[:, None])
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi) / (2 * np.pi / 8)
    b0 = np.floor(ang).astype(int) % 8
    frac = ang - np.floor(ang)
    votes = np.zeros((8,) + plane.shape)
    rows, cols = np.indices(plane.shape)
    np.add.at(votes, (b0, rows, cols), mag * (1 - frac))
    np.add.at(votes, ((b0 + 1) % 8, rows, cols), mag * frac)
    pooled = pool_at_grid(votes, _sift_cell_weights(), grid)  # (G, 16, 8)
    vec = pooled.reshape(len(grid), 128)
    if normalize:
        vec = _sift_normalize(vec)
    return DescriptorSet("DSIFT", frame.index, grid, vec, 4 * SIFT_BIN_SIZE)


def _gabor_planes(plane: np.ndarray) -> np.ndarray:
    return np.stack([np.abs(convolve2d(plane, k)) for k in _gabor_bank()])


def sf_gabor_frame(frame, normalize: bool = True) -> DescriptorSet:
    """Rectified 8-orientation Gabor planes pooled by 17 lobes: 136-dim."""
    plane = frame.gray()
    grid = _require_grid(plane)
    support = SUPPORT["SF_GABOR"]
    pooled = pool_at_grid(_gabor_planes(plane), _flipped_masks(support), grid)  # (G, 17, 8)
    vec = pooled.reshape(len(grid), 136)
    if normalize:
        vec = _l2_normalize(vec)
    return DescriptorSet("SF_GABOR", frame.index, grid, vec, support)


# ---------------------------------------------------------------------------
# space-time extractors


def _check_window(window: TemporalWindow, length: int, name: str) -> None:
    if window.length != length or len(window.frames) != length:
        raise DataError(f"{name} needs a full {length}-frame window, got {len(window.frames)} frames")


def _lw_regions(h: int, w: int) -> list[tuple[slice, slice]]:
    ys = np.array_split(np.arange(h), 4)
    xs = np.array_split(np.arange(w), 4)
    return [(slice(r[0], r[-1] + 1), slice(c[0], c[-1] + 1)) for r in ys for c in xs]


def lw_color_gradients(window: TemporalWindow) -> np.ndarray:
    """Temporally smoothed per-pixel 3x3 matrix (channel x {d/dx, d/dy, d/dt}): (3, 3, H, W)."""
    _check_window(window, 11, "LW_COLOR")
    stack = np.stack([f.planes for f in window.frames]).astype(np.float64)  # (T, 3, H, W)
    if stack.shape[1] != 3:
        raise DataError("LW_COLOR needs RGB frames")
    k = _kernels()
    wt = k.temporal_gauss
    gx = np.stack([[convolve2d(f[c], k.dx) for c in range(3)] for f in stack])
    gy = np.stack([[convolve2d(f[c], k.dy) for c in range(3)] for f in stack])
    gt = np.gradient(stack, axis=0)
    out = np.empty((3, 3) + stack.shape[2:])
    for a, comp in enumerate((gx, gy, gt)):
        out[:, a] = np.tensordot(wt, comp, axes=(0, 0))
    return out


def lw_color_window(window: TemporalWindow, normalize: bool = False) -> np.ndarray:
    """Frame-level colour space-time descriptor: 9 gradient components x 16 regions = 144."""
    mats = np.abs(lw_color_gradients(window))
    h, w = mats.shape[2:]
    regions = _lw_regions(h, w)
    vec = np.array([[mats[c, a][r].mean() for r in regions] for c in range(3) for a in range(3)]).ravel()
    if normalize:
        vec = _l2_normalize(vec[None])[0]
    return vec


def _lw_color_set(window: TemporalWindow, normalize: bool = False) -> DescriptorSet:
    f = window.center_frame
    vec = lw_color_window(window, normalize=normalize)
    grid = np.array([[f.width // 2, f.height // 2]])
    return DescriptorSet("LW_COLOR", f.index, grid, vec[None], 0)


# 13 orientation cells on the sphere: polar caps, two mid bands of 2, equator band of 7
_ELEV_POLAR = np.deg2rad(60.0)
_ELEV_EQUATOR = np.deg2rad(20.0)


def sphere_bins(vx: np.ndarray, vy: np.ndarray, vt: np.ndarray) -> np.ndarray:
    """Azimuth/elevation bin index in 0..12 for each 3-vector (x, y, t)."""
    az = np.mod(np.arctan2(vy, vx), 2 * np.pi)
    el = np.arctan2(vt, np.hypot(vx, vy))
    b = np.empty(az.shape, dtype=np.int64)
    north = el > _ELEV_POLAR
    south = el < -_ELEV_POLAR
    upper = (el > _ELEV_EQUATOR) & ~north
    lower = (el < -_ELEV_EQUATOR) & ~south
    equator = ~(north | south | upper | lower)
    b[north] = 0
    b[south] = 1
    b[upper] = 2 + np.minimum((az[upper] / np.pi).astype(np.int64), 1)
    b[lower] = 4 + np.minimum((az[lower] / np.pi).astype(np.int64), 1)
    b[equator] = 6 + np.minimum((az[equator] / (2 * np.pi / 7)).astype(np.int64), 6)
    return b


def _votes(bins: np.ndarray, weight: np.ndarray, n_bins: int) -> np.ndarray:
    votes = np.zeros((n_bins,) + weight.shape)
    rows, cols = np.indices(weight.shape)
    votes[bins, rows, cols] = weight
    return votes


def st_gabor_field(window: TemporalWindow) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """1-D antisymmetric Gabor responses along x, y (central frame) and t (9 frames)."""
    _check_window(window, 9, "ST_GABOR")
    k = _kernels()
    center = window.center_frame.gray()
    vx = convolve2d(center, k.gabor_x[None, :])
    vy = convolve2d(center, k.gabor_y[:, None])
    stack = np.stack([f.gray() for f in window.frames])
    vt = convolve_time(stack, k.gabor_t)
    return vx, vy, vt


def st_gabor_window(window: TemporalWindow, normalize: bool = True) -> DescriptorSet:
    """Length-weighted azimuth/elevation votes (13 bins) pooled by 17 lobes: 221-dim."""
    vx, vy, vt = st_gabor_field(window)
    grid = _require_grid(vx)
    mag = np.sqrt(vx**2 + vy**2 + vt**2)
    votes = _votes(sphere_bins(vx, vy, vt), mag, 13)
    support = SUPPORT["ST_GABOR"]
    pooled = pool_at_grid(votes, _flipped_masks(support), grid)  # (G, 17, 13)
    vec = pooled.reshape(len(grid), 221)
    if normalize:
        vec = _l2_normalize(vec)
    return DescriptorSet("ST_GABOR", window.center_frame.index, grid, vec, support)


def st_gauss_field(window: TemporalWindow) -> tuple[np.ndarray, np.ndarray]:
    """Spatial derivative-of-Gaussian gradients smoothed over 11 frames (sigma_t = 2)."""
    _check_window(window, 11, "ST_GAUSS")
    k = _kernels()
    gray = [f.gray() for f in window.frames]
    gx = np.stack([convolve2d(g, k.dx) for g in gray])
    gy = np.stack([convolve2d(g, k.dy) for g in gray])
    return convolve_time(gx, k.temporal_gauss), convolve_time(gy, k.temporal_gauss)


def orientation_bins(gx: np.ndarray, gy: np.ndarray, n: int = 8) -> np.ndarray:
    """Nearest of ``n`` directions j*2pi/n for each gradient."""
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    return np.rint(ang / (2 * np.pi / n)).astype(np.int64) % n


def st_gauss_window(window: TemporalWindow, normalize: bool = True) -> DescriptorSet:
    """Magnitude-weighted 8-direction votes pooled by 17 lobes: 136-dim."""
    gx, gy = st_gauss_field(window)
    grid = _require_grid(gx)
    votes = _votes(orientation_bins(gx, gy), np.hypot(gx, gy), 8)
    support = SUPPORT["ST_GAUSS"]
    pooled = pool_at_grid(votes, _flipped_masks(support), grid)  # (G, 17, 8)
    vec = pooled.reshape(len(grid), 136)
    if normalize:
        vec = _l2_normalize(vec)
    return DescriptorSet("ST_GAUSS", window.center_frame.index, grid, vec, support)


# ---------------------------------------------------------------------------
# journey-level extraction

_FRAME_EXTRACTORS: dict[str, Callable] = {"DSIFT": dsift_frame, "SF_GABOR": sf_gabor_frame}
_WINDOW_EXTRACTORS: dict[str, Callable] = {
    "LW_COLOR": _lw_color_set,
    "ST_GABOR": st_gabor_window,
    "ST_GAUSS": st_gauss_window,
}


def check_method(method: str) -> str:
    if method not in DIMS:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(DIMS)}")
    return method


def _work_items(journey, method: str) -> list:
    if method in _FRAME_EXTRACTORS:
        return list(journey.frames)
    return list(temporal_window_stream(journey, WINDOW_LENGTH[method]))


def extract_journey(journey, method: str, jobs: int = 1, dtype=np.float32) -> list[DescriptorSet]:
    """Extract descriptors for every eligible frame, in frame order.

    Space-time methods skip frames too close to either end of the journey.
    """
    check_method(method)
    fn = _FRAME_EXTRACTORS.get(method) or _WINDOW_EXTRACTORS[method]
    items = _work_items(journey, method)

    def run(item):
        ds = fn(item)
        return DescriptorSet(ds.method, ds.frame_index, ds.grid, ds.vectors.astype(dtype), ds.support)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, items))
    return [run(it) for it in items]


# ---------------------------------------------------------------------------
# descriptor dump files

_DUMP_MAGIC = b"VPDS"
_DUMP_HEADER = struct.Struct("<4s16sIIII")  # magic, method, dim, count, frame index, support


def write_descriptor_dump(path: str | Path, sets: Sequence[DescriptorSet]) -> None:
    """One record per frame: header, int32 grid (count x 2), float32 vectors (count x dim)."""
    with open(path, "wb") as fh:
        for ds in sets:
            count, dim = ds.vectors.shape
            fh.write(_DUMP_HEADER.pack(_DUMP_MAGIC, ds.method.encode(), dim, count, ds.frame_index, ds.support))
            fh.write(np.ascontiguousarray(ds.grid, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(ds.vectors, dtype="<f4").tobytes())


def read_descriptor_dump(path: str | Path, mmap: bool = True) -> list[DescriptorSet]:
    """Read a dump; with ``mmap`` the vectors stay on disk until touched."""
    path = Path(path)
    size = path.stat().st_size
    raw = np.memmap(path, dtype=np.uint8, mode="r") if mmap and size else np.fromfile(path, dtype=np.uint8)
    out = []
    off = 0
    while off < size:
        magic, method, dim, count, index, support = _DUMP_HEADER.unpack_from(raw, off)
        if magic != _DUMP_MAGIC:
            raise DataError(f"{path}: bad descriptor record at byte {off}")
        off += _DUMP_HEADER.size
        grid = np.frombuffer(raw, dtype="<i4", count=2 * count, offset=off).reshape(count, 2)
        off += 8 * count
        vec = np.frombuffer(raw, dtype="<f4", count=dim * count, offset=off).reshape(count, dim)
        off += 4 * dim * count
        out.append(DescriptorSet(method.rstrip(b"\0").decode(), index, grid, vec, support))
    return out

