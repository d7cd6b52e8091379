"""Filtering primitives: convolution, Gabor and Gaussian kernels, pooling masks, windows."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import DataError

GRID_STRIDE = 3
GRID_MARGIN = 8


def convolve2d(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2-D convolution with symmetric (mirror) border padding.

    ``out[i, j] = sum_ab kernel[a, b] * plane[i + ca - a, j + cb - b]`` with the
    kernel anchored at ``(ca, cb) = (kh // 2, kw // 2)``.
    """
    plane = np.asarray(plane, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if plane.ndim != 2 or kernel.ndim != 2:
        raise ValueError("convolve2d expects 2-D plane and kernel")
    kh, kw = kernel.shape
    if kh > plane.shape[0] or kw > plane.shape[1]:
        raise ValueError(f"kernel {kernel.shape} larger than plane {plane.shape}")
    ca, cb = kh // 2, kw // 2
    # pad so that padded[i + pt, j + pl] == plane[i, j]
    pt, pb = kh - 1 - ca, ca
    pl, pr = kw - 1 - cb, cb
    padded = np.pad(plane, ((pt, pb), (pl, pr)), mode="symmetric")
    h, w = plane.shape
    out = np.zeros_like(plane)
    for a in range(kh):
        for b in range(kw):
            k = kernel[a, b]
            if k != 0.0:
                # plane[i + ca - a] lives at padded[i + ca - a + pt] = padded[i + kh - 1 - a]
                r0, c0 = kh - 1 - a, kw - 1 - b
                out += k * padded[r0:r0 + h, c0:c0 + w]
    return out


def convolve_separable(plane: np.ndarray, col: np.ndarray, row: np.ndarray) -> np.ndarray:
    """Convolve with the outer product ``col[:, None] * row[None, :]``."""
    tmp = convolve2d(plane, np.asarray(col, dtype=np.float64)[:, None])
    return convolve2d(tmp, np.asarray(row, dtype=np.float64)[None, :])


def convolve_time(stack: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve a (T, H, W) stack along time, evaluated at the central frame only.

    The window length must equal the kernel length.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if stack.shape[0] != kernel.size:
        raise ValueError(f"window of {stack.shape[0]} frames for a {kernel.size}-tap kernel")
    # true convolution: kernel tap a pairs with frame (center + c - a), c = T // 2
    return np.tensordot(kernel[::-1], stack, axes=(0, 0))


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class GaborBank2D:
    kernels: np.ndarray  # (8, 9, 9)
    orientations: np.ndarray
    sigma: float
    wavelength: float

    def __len__(self):
        return len(self.kernels)


def build_gabor_bank_2d(size: int = 9, sigma: float = 2.0, n_orient: int = 8) -> GaborBank2D:
    """Odd-symmetric Gabor kernels at orientations j*pi/n_orient.

    The carrier completes one cycle across the kernel support.
    """
    half = size // 2
    u = np.arange(-half, half + 1, dtype=np.float64)
    y, x = np.meshgrid(u, u, indexing="ij")
    wavelength = float(size)
    thetas = np.arange(n_orient) * np.pi / n_orient
    env = np.exp(-(x**2 + y**2) / (2 * sigma**2))
    kernels = []
    for th in thetas:
        k = env * np.sin(2 * np.pi * (x * np.cos(th) + y * np.sin(th)) / wavelength)
        k -= k.mean()
        k /= np.abs(k).sum()
        kernels.append(k)
    return GaborBank2D(np.stack(kernels), thetas, sigma, wavelength)


def gaussian_1d(length: int, sigma: float) -> np.ndarray:
    u = np.arange(length, dtype=np.float64) - (length - 1) / 2
    g = np.exp(-(u**2) / (2 * sigma**2))
    return g / g.sum()


def derivative_of_gaussian_2d(size: int = 5, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """x and y derivative-of-Gaussian masks, scaled to respond 1 to a unit ramp."""
    half = size // 2
    u = np.arange(-half, half + 1, dtype=np.float64)
    y, x = np.meshgrid(u, u, indexing="ij")
    g = np.exp(-(x**2 + y**2) / (2 * sigma**2))
    # convolving with f = x gives -sum(K * x); choose K = -x g / sum(x^2 g)
    kx = -x * g / np.sum(x**2 * g)
    ky = -y * g / np.sum(y**2 * g)
    return kx, ky


def odd_gabor_1d(length: int, sigma: float) -> np.ndarray:
    """Antisymmetric 1-D Gabor with one carrier cycle over ``length`` samples.

    Sign chosen so that convolution with an increasing ramp is positive.
    """
    half = length // 2
    u = np.arange(-half, half + 1, dtype=np.float64)
    g = -np.exp(-(u**2) / (2 * sigma**2)) * np.sin(2 * np.pi * u / length)
    g = 0.5 * (g - g[::-1])
    return g / np.abs(g).sum()


@dataclass(frozen=True)
class FilterKernels:
    dx: np.ndarray  # (5, 5)
    dy: np.ndarray  # (5, 5)
    temporal_gauss: np.ndarray  # (11,)
    gabor_x: np.ndarray  # (5,)
    gabor_y: np.ndarray  # (5,)
    gabor_t: np.ndarray  # (9,)


def gaussian_kernels() -> FilterKernels:
    dx, dy = derivative_of_gaussian_2d(5, 1.0)
    gs = odd_gabor_1d(5, 1.25)
    return FilterKernels(
        dx=dx,
        dy=dy,
        temporal_gauss=gaussian_1d(11, 2.0),
        gabor_x=gs,
        gabor_y=gs.copy(),
        gabor_t=odd_gabor_1d(9, 2.25),
    )


# ---------------------------------------------------------------------------
# pooling geometry

POOL_ALPHA = 4.0
POOL_BETA = 0.4
POOL_RADII = (0.45, 0.6)
POOL_ANGLES = tuple(m * np.pi / 4 for m in range(8))
CENTRAL_RADIUS = 0.3


def _wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def pooling_function(x, y, m: int, n: int):
    """Peripheral pooling lobe at angle m*pi/4 and radius index n (1 or 2).

    ``exp(-alpha * log(r^2 / d_n^2)^2 - beta * |theta - theta_m|)`` on
    coordinates normalized to [-1, 1]; defined as 0 at the origin.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r2 = x**2 + y**2
    d = POOL_RADII[n - 1]
    theta = np.arctan2(y, x)
    dtheta = np.abs(_wrap_angle(theta - POOL_ANGLES[m]))
    with np.errstate(divide="ignore"):
        logr = np.log(r2 / d**2)
    val = np.exp(-POOL_ALPHA * logr**2 - POOL_BETA * dtheta)
    return np.where(r2 > 0, val, 0.0)


def central_pooling_function(x, y):
    """Rotationally symmetric central lobe with log-radial decay, 1 at the origin."""
    r2 = np.asarray(x, dtype=np.float64) ** 2 + np.asarray(y, dtype=np.float64) ** 2
    return np.exp(-POOL_ALPHA * np.log1p(r2 / CENTRAL_RADIUS**2) ** 2)


@dataclass(frozen=True)
class PoolingGeometry:
    support: int
    masks: np.ndarray  # (17, support, support); index 0 is the central lobe

    @property
    def mask_count(self) -> int:
        return len(self.masks)


def build_pooling_masks(support: int) -> PoolingGeometry:
    """Sample the 17 pooling lobes on a support x support pixel grid.

    Mask 0 is central; mask 1 + 8*(n-1) + m is the lobe at (theta_m, d_n).
    """
    if support < 5:
        raise ValueError(f"pooling support must be at least 5 pixels, got {support}")
    half = (support - 1) / 2
    u = (np.arange(support) - half) / half
    y, x = np.meshgrid(u, u, indexing="ij")
    masks = [central_pooling_function(x, y)]
    for n in (1, 2):
        for m in range(8):
            masks.append(pooling_function(x, y, m, n))
    return PoolingGeometry(support, np.stack(masks))


# ---------------------------------------------------------------------------
# dense grid sampling


def dense_grid(height: int, width: int, stride: int = GRID_STRIDE, margin: int = GRID_MARGIN) -> np.ndarray:
    """Patch centers (x, y) on a regular grid, row-major; shared by all dense extractors."""
    ys = np.arange(margin, height - margin, stride)
    xs = np.arange(margin, width - margin, stride)
    if ys.size == 0 or xs.size == 0:
        raise DataError(f"frame {width}x{height} too small for a dense grid with margin {margin}")
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def pool_at_grid(planes: np.ndarray, weights: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Weighted patch sums of each plane around each grid center.

    planes: (C, H, W); weights: (R, P, P) with P odd, indexed by offset
    ``(dy, dx) + P // 2``; grid: (G, 2) (x, y). Returns (G, R, C) with
    ``out[g, r, c] = sum_p weights[r, p] * planes[c, center_g + p]``. Pixels
    beyond the frame are mirrored.
    """
    planes = np.asarray(planes, dtype=np.float64)
    r_count, ph, pw = weights.shape
    if ph != pw or ph % 2 == 0:
        raise ValueError("pooling weights must be square with odd size")
    half = ph // 2
    padded = np.pad(planes, ((0, 0), (half, half), (half, half)), mode="symmetric")
    windows = sliding_window_view(padded, (ph, pw), axis=(1, 2))  # (C, H, W, P, P)
    patches = windows[:, grid[:, 1], grid[:, 0]]  # (C, G, P, P)
    c, g = patches.shape[:2]
    flat = patches.reshape(c * g, ph * pw)
    out = flat @ weights.reshape(r_count, ph * pw).T.astype(np.float64)  # (C*G, R)
    return out.reshape(c, g, r_count).transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# temporal windows


@dataclass(frozen=True)
class TemporalWindow:
    length: int
    center: int  # frame index (ordinal) of the central frame within the journey
    frames: tuple

    @property
    def center_frame(self):
        return self.frames[self.length // 2]


def temporal_window_stream(journey, length: int) -> Iterator[TemporalWindow]:
    """Centered windows of ``length`` consecutive frames; edge frames get no window."""
    if length < 1 or length % 2 == 0:
        raise ValueError(f"window length must be odd, got {length}")
    frames = journey.frames
    if len(frames) < length:
        raise DataError(f"{journey.journey_id}: {len(frames)} frames is shorter than a {length}-frame window")
    half = length // 2
    for c in range(half, len(frames) - half):
        yield TemporalWindow(length, c, tuple(frames[c - half:c + half + 1]))
