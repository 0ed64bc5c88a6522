"""Ground-truth saliency maps from binary fixation maps (Gaussian filtering)."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateMapWarning, EmptyGroundTruthWarning, ShapeError


@dataclass(frozen=True)
class FixationMap:
    """Binary H x W gaze map plus the equivalent (x, y) list.

    ``x`` indexes columns and ``y`` rows; duplicates collapse in the grid.
    """
    height: int
    width: int
    fixations: tuple[tuple[int, int], ...]
    grid: np.ndarray = field(repr=False)

    @classmethod
    def from_points(cls, points, height: int, width: int) -> "FixationMap":
        pts = []
        grid = np.zeros((height, width), dtype=np.uint8)
        for x, y in points:
            x, y = int(x), int(y)
            if not (0 <= x < width and 0 <= y < height):
                raise ValueError(f"fixation ({x}, {y}) outside {width}x{height} grid")
            pts.append((x, y))
            grid[y, x] = 1
        grid.setflags(write=False)
        return cls(height, width, tuple(pts), grid)

    @classmethod
    def from_grid(cls, grid) -> "FixationMap":
        grid = np.asarray(grid)
        ys, xs = np.nonzero(grid)
        return cls.from_points(zip(xs.tolist(), ys.tolist()), *grid.shape)

    def unique_points(self) -> list[tuple[int, int]]:
        return sorted(set(self.fixations), key=lambda p: (p[1], p[0]))

    def __len__(self):
        return len(self.fixations)


@dataclass(frozen=True)
class SaliencyMap:
    grid: np.ndarray
    normalized: bool = False

    @property
    def shape(self):
        return self.grid.shape


@dataclass(frozen=True)
class GaussianKernel:
    sigma_x: float
    sigma_y: float
    radius: int
    weights: np.ndarray = field(repr=False)


def gaussian_kernel(sigma_x: float, sigma_y: float | None = None, radius: int | None = None) -> GaussianKernel:
    """Bivariate Gaussian density sampled on the integer lattice [-r, r]^2.

    Weights are the raw density values (not renormalised), so the truncated
    mass is slightly below one.
    """
    if sigma_y is None:
        sigma_y = sigma_x
    if not (sigma_x > 0 and sigma_y > 0):
        raise ConfigError(f"Gaussian sigmas must be positive, got ({sigma_x}, {sigma_y})")
    if radius is None:
        radius = default_radius(max(sigma_x, sigma_y))
    radius = int(radius)
    if radius < 1:
        raise ConfigError(f"kernel radius must be >= 1, got {radius}")
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    xx = d[None, :]
    yy = d[:, None]
    w = np.exp(-0.5 * (xx**2 / sigma_x**2 + yy**2 / sigma_y**2)) / (2 * math.pi * sigma_x * sigma_y)
    w.setflags(write=False)
    return GaussianKernel(float(sigma_x), float(sigma_y), radius, w)


def default_radius(sigma: float) -> int:
    return max(1, int(math.ceil(3.0 * sigma)))


def default_sigma(height: int) -> float:
    return height / 24.0


def minmax_normalize(grid: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]. Flat maps (including all-zero) come back as zeros."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        if hi != 0:
            warnings.warn("flat saliency map normalised to all-zero", DegenerateMapWarning, stacklevel=2)
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def blur_fixations(fix: FixationMap, kernel: GaussianKernel) -> np.ndarray:
    """Un-normalised sum of kernels stamped at each fixation (zero padding)."""
    H, W = fix.height, fix.width
    r = kernel.radius

    def stamp(canvas, x, y):
        y0, y1 = max(0, y - r), min(H, y + r + 1)
        x0, x1 = max(0, x - r), min(W, x + r + 1)
        canvas[y0:y1, x0:x1] += kernel.weights[y0 - y + r:y1 - y + r, x0 - x + r:x1 - x + r]

    # Accumulate in an order that is invariant under horizontal mirroring:
    # groups keyed by (row, distance from the vertical axis) hold at most a
    # mirror pair, summed on its own first (two-term sums commute exactly).
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for x, y in fix.unique_points():
        groups.setdefault((y, abs(2 * x - (W - 1))), []).append((x, y))
    out = np.zeros((H, W), dtype=np.float64)
    for key in sorted(groups):
        pts = groups[key]
        if len(pts) == 1:
            stamp(out, *pts[0])
        else:
            pair = np.zeros_like(out)
            for x, y in pts:
                stamp(pair, x, y)
            out += pair
    return out


def make_gt(fix: FixationMap, sigma: float | None = None, radius: int | None = None,
            sigma_y: float | None = None) -> SaliencyMap:
    """Gaussian-filtered, min-max normalised saliency map.

    An empty fixation list yields an all-zero map and an
    ``EmptyGroundTruthWarning``; callers may skip such samples.
    """
    if sigma is None:
        sigma = default_sigma(fix.height)
    kernel = gaussian_kernel(sigma, sigma_y, radius)
    if len(fix) == 0:
        warnings.warn("no fixations: empty ground truth", EmptyGroundTruthWarning, stacklevel=2)
        return SaliencyMap(np.zeros((fix.height, fix.width)), normalized=True)
    return SaliencyMap(minmax_normalize(blur_fixations(fix, kernel)), normalized=True)


def downsample_gt(s_map: SaliencyMap | np.ndarray, factor: int) -> SaliencyMap:
    grid = s_map.grid if isinstance(s_map, SaliencyMap) else np.asarray(s_map, dtype=np.float64)
    factor = int(factor)
    if factor < 1 or factor & (factor - 1):
        raise ConfigError(f"downsample factor must be a power of two, got {factor}")
    H, W = grid.shape
    if H % factor or W % factor:
        raise ShapeError(f"map {H}x{W} not divisible by factor {factor}")
    if factor == 1:
        return SaliencyMap(grid.copy(), normalized=isinstance(s_map, SaliencyMap) and s_map.normalized)
    pooled = grid.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3))
    return SaliencyMap(minmax_normalize(pooled), normalized=True)


def multiscale_targets(s_map: SaliencyMap, n_scales: int = 4) -> list[SaliencyMap]:
    """Targets for scales s = 0..n-1 at (H/2^s, W/2^s)."""
    return [downsample_gt(s_map, 2**s) for s in range(n_scales)]
