"""Sector geometry: partitioning, halo expansion, extraction and stitching.

Fields are arrays whose last two axes are ``(nx, ny)``; any leading axes
(channels, batch) are carried through untouched.

Halo placement per axis: a core touching the low domain edge keeps the
expanded window flush with that edge, likewise for the high edge, and an
interior core gets ``halo // 2`` cells on each side. Axes are handled
independently, which yields the corner, edge and interior cases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CoverageError


@dataclass(frozen=True)
class GridDims:
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigError(f"grid extents must be >= 1, got {self.nx}x{self.ny}")

    @property
    def n(self):
        return self.nx * self.ny

    @property
    def shape(self):
        return (self.nx, self.ny)


@dataclass(frozen=True)
class SectorSpec:
    ox: int
    oy: int
    sx: int
    sy: int
    clamped: bool = False  # moved flush to the far boundary by the non-divisible fallback

    def contains(self, i, j):
        return self.ox <= i < self.ox + self.sx and self.oy <= j < self.oy + self.sy

    def check(self, grid: GridDims):
        if not (0 <= self.ox and self.ox + self.sx <= grid.nx and 0 <= self.oy and self.oy + self.sy <= grid.ny):
            raise ConfigError(f"sector {self} exceeds grid {grid.nx}x{grid.ny}")


@dataclass(frozen=True)
class ExpandedSectorSpec:
    ex: int
    ey: int
    wx: int
    wy: int
    core: SectorSpec
    # (x_low, x_high, y_low, y_high): True where the window is flush with a domain edge
    edges: tuple = (False, False, False, False)

    @property
    def core_offset(self):
        return self.core.ox - self.ex, self.core.oy - self.ey

    def contains(self, i, j):
        return self.ex <= i < self.ex + self.wx and self.ey <= j < self.ey + self.wy


def _axis_origins(n, s, allow_clamp):
    if s < 1 or s > n:
        raise ConfigError(f"sector extent {s} does not fit axis of {n} cells")
    origins = list(range(0, n - s + 1, s))
    clamped = [False] * len(origins)
    if n % s:
        if not allow_clamp:
            raise ConfigError(f"sector extent {s} does not divide axis of {n} cells (enable clamping)")
        origins.append(n - s)
        clamped.append(True)
    return list(zip(origins, clamped))


def partition(grid: GridDims, core, allow_clamp=False):
    """Disjoint cover of ``grid`` by ``core``-sized sectors, x-major order.

    With ``allow_clamp`` the last sector of a non-divisible axis is moved
    flush to the boundary and flagged ``clamped``; it overlaps its neighbour.
    """
    sx, sy = core
    xs = _axis_origins(grid.nx, sx, allow_clamp)
    ys = _axis_origins(grid.ny, sy, allow_clamp)
    return [SectorSpec(ox, oy, sx, sy, cx or cy) for ox, cx in xs for oy, cy in ys]


def _expand_axis(o, s, n, halo):
    w = s + halo
    if w > n:
        raise ConfigError(f"halo {halo} around extent {s} does not fit axis of {n} cells")
    low, high = o == 0, o + s == n
    if low:
        e = 0
    elif high:
        e = n - w
    else:
        e = o - halo // 2
        if e < 0 or e + w > n:
            raise ConfigError(f"interior core at {o} (extent {s}) leaves no room for halo {halo} on axis of {n}")
    return e, w, low, high


def expand_with_halo(core: SectorSpec, halo, grid: GridDims):
    """Window of extent ``core + halo`` per axis placed by the edge rules."""
    if halo < 0 or halo % 2:
        raise ConfigError(f"halo must be a non-negative even number, got {halo}")
    core.check(grid)
    ex, wx, xl, xh = _expand_axis(core.ox, core.sx, grid.nx, halo)
    ey, wy, yl, yh = _expand_axis(core.oy, core.sy, grid.ny, halo)
    return ExpandedSectorSpec(ex, ey, wx, wy, core, (xl, xh, yl, yh))


def full_grid_spec(grid: GridDims):
    return expand_with_halo(SectorSpec(0, 0, grid.nx, grid.ny), 0, grid)


def extract(field, spec: ExpandedSectorSpec):
    field = np.asarray(field)
    if spec.ex < 0 or spec.ey < 0 or spec.ex + spec.wx > field.shape[-2] or spec.ey + spec.wy > field.shape[-1]:
        raise ConfigError(f"spec window {spec.ex, spec.ey, spec.wx, spec.wy} outside field {field.shape[-2:]}")
    return field[..., spec.ex:spec.ex + spec.wx, spec.ey:spec.ey + spec.wy].copy()


def crop_core(sector_pred, spec: ExpandedSectorSpec):
    dx, dy = spec.core_offset
    c = spec.core
    return sector_pred[..., dx:dx + c.sx, dy:dy + c.sy]


def stitch(pairs, grid: GridDims):
    """Assemble core predictions into a full-grid field.

    Every cell takes the value of its owning core. Overlaps are only legal
    when one of the sectors is ``clamped``; the sector with the larger
    origin is written last and wins.
    """
    if not pairs:
        raise CoverageError(f"no sectors given; all {grid.n} cells uncovered",
                            [(i, j) for i in range(grid.nx) for j in range(grid.ny)])
    lead = np.asarray(pairs[0][1]).shape[:-2]
    out = np.zeros(lead + grid.shape, dtype=np.asarray(pairs[0][1]).dtype)
    owner = np.full(grid.shape, -1, dtype=np.int64)
    clamped = []
    order = sorted(range(len(pairs)), key=lambda k: (pairs[k][0].ox, pairs[k][0].oy))
    for k in order:
        spec, core = pairs[k]
        spec.check(grid)
        core = np.asarray(core)
        if core.shape[-2:] != (spec.sx, spec.sy) or core.shape[:-2] != lead:
            raise CoverageError(f"core of shape {core.shape} does not match sector {spec}")
        win = (slice(spec.ox, spec.ox + spec.sx), slice(spec.oy, spec.oy + spec.sy))
        prev = owner[win]
        clash = prev >= 0
        if clash.any():
            ok = spec.clamped | np.array([False] + clamped)[prev + 1]
            bad = clash & ~ok
            if bad.any():
                cells = [(int(i) + spec.ox, int(j) + spec.oy) for i, j in zip(*np.nonzero(bad))]
                raise CoverageError(f"{len(cells)} cells written by two unclamped sectors", cells)
        owner[win] = len(clamped)
        clamped.append(spec.clamped)
        out[(Ellipsis,) + win] = core
    missing = np.argwhere(owner < 0)
    if len(missing):
        raise CoverageError(f"{len(missing)} cells not covered by any sector",
                            [tuple(int(v) for v in c) for c in missing])
    return out


def valid_origins(n, s, halo):
    """Core origins on one axis for which the halo rule keeps the window in the grid."""
    if s + halo > n:
        return np.array([], dtype=np.int64)
    interior = np.arange(halo // 2, n - s - halo // 2 + 1)
    return np.unique(np.concatenate([[0, n - s], interior])).astype(np.int64)


def sample_sectors(grid: GridDims, core, halo, count, seed=None, rng=None):
    """``count`` expanded specs with core origins drawn uniformly over valid positions."""
    if count < 1:
        raise ConfigError(f"sector count must be >= 1, got {count}")
    sx, sy = core
    xs, ys = valid_origins(grid.nx, sx, halo), valid_origins(grid.ny, sy, halo)
    if len(xs) == 0 or len(ys) == 0:
        raise ConfigError(f"no valid positions for {sx}x{sy} cores with halo {halo} on {grid.nx}x{grid.ny}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    ix = rng.integers(0, len(xs), size=count)
    iy = rng.integers(0, len(ys), size=count)
    return [expand_with_halo(SectorSpec(int(xs[a]), int(ys[b]), sx, sy), halo, grid) for a, b in zip(ix, iy)]


def inference_specs(grid: GridDims, core, halo, allow_clamp=False):
    """Expanded specs for the partition used to reconstruct a full state."""
    return [expand_with_halo(c, halo, grid) for c in partition(grid, core, allow_clamp)]
