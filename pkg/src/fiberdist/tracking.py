"""Deterministic multi-direction streamline tracking (generalized FACT).

Tracks move in straight lines through voxels.  On entering a voxel the
candidate axis closest to the incoming direction is followed if it lies
within the angle gate; otherwise the tract continues straight through up to
``max_skip`` voxels looking for a viable direction, and stops at the last
viable voxel if none is found.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .geometry import Axis, as_array

__all__ = [
    "VoxelGrid",
    "TrackerConfig",
    "Tract",
    "ray_voxel_exit",
    "pick_direction",
    "track_from_seed",
    "track_all",
    "tract_rgb",
    "longest",
    "OUT_OF_VOLUME",
    "GATE_FAIL",
    "ISOTROPIC",
    "STEP_CAP",
]

OUT_OF_VOLUME = "out_of_volume"
GATE_FAIL = "gate_fail"
ISOTROPIC = "isotropic"
STEP_CAP = "step_cap"


@dataclass(frozen=True)
class VoxelGrid:
    """Regular grid; ``origin`` is the mm position of the center of voxel (0, 0, 0)."""

    dims: tuple
    voxel_size: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        size = tuple(float(s) for s in self.voxel_size)
        if len(dims) != 3 or min(dims) < 1 or len(size) != 3 or min(size) <= 0:
            raise InputError("grid needs 3 positive dims and voxel sizes")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    def center(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, float) * np.asarray(self.voxel_size)

    def index_of(self, point) -> tuple:
        c = (np.asarray(point, float) - self.origin) / self.voxel_size + 0.5
        return tuple(int(i) for i in np.floor(c))

    def contains(self, index) -> bool:
        return all(0 <= i < d for i, d in zip(index, self.dims))

    def contains_point(self, point, tol=1e-9) -> bool:
        c = (np.asarray(point, float) - self.origin) / self.voxel_size + 0.5
        return bool(np.all(c >= -tol) and np.all(c <= np.asarray(self.dims) + tol))

    def all_indices(self):
        nx, ny, nz = self.dims
        return [(i, j, k) for k in range(nz) for j in range(ny) for i in range(nx)]

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.voxel_size))


@dataclass(frozen=True)
class TrackerConfig:
    angle_gate: float = np.pi / 6
    max_skip: int = 1
    min_tract_len: float = 10.0
    seeding: str = "brute_force"
    roi: frozenset | None = None
    step_cap: int = 10_000

    def __post_init__(self):
        if not 0 < self.angle_gate < np.pi / 2:
            raise InputError("angle_gate must lie in (0, pi/2)")
        if self.max_skip < 0:
            raise InputError("max_skip must be >= 0")
        if self.seeding not in ("brute_force", "roi"):
            raise InputError("seeding must be 'brute_force' or 'roi'")
        if self.seeding == "roi" and self.roi is None:
            raise InputError("roi seeding needs a set of seed voxels")
        if self.roi is not None:
            object.__setattr__(self, "roi", frozenset(tuple(int(i) for i in ix)
                                                     for ix in self.roi))


@dataclass(frozen=True)
class Tract:
    points: np.ndarray       # (n, 3) mm
    directions: np.ndarray   # (n - 1, 3) signed unit segment directions
    seed: tuple
    termination: tuple       # (reason at first point, reason at last point)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    @property
    def axes(self) -> list:
        return [Axis(d) for d in self.directions]

    def reversed(self) -> "Tract":
        return Tract(self.points[::-1].copy(), -self.directions[::-1],
                     self.seed, self.termination[::-1])


def ray_voxel_exit(point, direction, grid: VoxelGrid, voxel=None):
    """Where a ray leaves its current voxel.

    Returns ``(exit_point, next_index)``; ``next_index`` may lie outside the
    grid.  When the exit passes through an edge or corner every tied axis
    advances.
    """
    p = np.asarray(point, dtype=float)
    d = np.asarray(direction, dtype=float)
    size = np.asarray(grid.voxel_size)
    origin = np.asarray(grid.origin)
    voxel = grid.index_of(p) if voxel is None else tuple(voxel)
    lo = origin + (np.asarray(voxel) - 0.5) * size
    hi = lo + size
    t = np.full(3, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d > 0, (hi - p) / d, t)
        t = np.where(d < 0, (lo - p) / d, t)
    t = np.maximum(t, 0.0)
    t_min = float(t.min())
    if not np.isfinite(t_min):
        raise InputError("direction must be nonzero")
    tied = np.abs(t - t_min) <= 1e-9 * max(1.0, t_min)
    exit_p = p + t_min * d
    step = np.where(tied, np.sign(d), 0).astype(int)
    exit_p = np.where(tied & (d > 0), hi, exit_p)
    exit_p = np.where(tied & (d < 0), lo, exit_p)
    nxt = tuple(int(v) for v in np.asarray(voxel) + step)
    return exit_p, nxt


def pick_direction(candidates, incoming, gate: float):
    """Candidate closest to ``incoming`` (sign-aligned), or None beyond ``gate``."""
    if candidates is None or len(candidates) == 0:
        return None
    C = as_array(candidates)
    inc = np.asarray(incoming, dtype=float)
    dots = C @ inc
    ang = np.arctan2(np.linalg.norm(np.cross(C, inc), axis=1), np.abs(dots))
    k = int(np.argmin(ang))
    if ang[k] > gate:
        return None
    return C[k] if dots[k] >= 0 else -C[k]


def _lookup(field):
    if isinstance(field, dict):
        return field
    return {ix: field.axes[pos] for ix, pos in field.voxels().items()}


def _propagate(start, seed, direction, lookup, grid, config):
    p = np.asarray(start, float)
    d = np.asarray(direction, float)
    vox = tuple(seed)
    committed_pts, committed_dirs = [], []
    pending_pts, pending_dirs = [], []
    skip_run, fail_reason = 0, None
    steps = 0
    while True:
        if steps >= config.step_cap:
            return committed_pts, committed_dirs, STEP_CAP
        steps += 1
        exit_p, nxt = ray_voxel_exit(p, d, grid, vox)
        if skip_run:
            pending_pts.append(exit_p)
            pending_dirs.append(d)
        else:
            committed_pts.append(exit_p)
            committed_dirs.append(d)
        if not grid.contains(nxt):
            return committed_pts, committed_dirs, OUT_OF_VOLUME
        cand = lookup.get(nxt)
        chosen = pick_direction(cand, d, config.angle_gate)
        if chosen is not None:
            committed_pts += pending_pts
            committed_dirs += pending_dirs
            pending_pts, pending_dirs = [], []
            skip_run = 0
            d = chosen
        else:
            if skip_run == 0:
                fail_reason = ISOTROPIC if cand is None or len(cand) == 0 else GATE_FAIL
            skip_run += 1
            if skip_run > config.max_skip:
                return committed_pts, committed_dirs, fail_reason
        vox, p = nxt, exit_p


def track_from_seed(seed, field, grid: VoxelGrid, config: TrackerConfig = TrackerConfig(),
                    direction=None) -> Tract | None:
    """Bidirectional tract from the center of ``seed`` along one of its axes.

    ``direction`` defaults to the first axis stored at the seed.  Returns
    None when the seed voxel has no direction.
    """
    lookup = _lookup(field)
    seed = tuple(int(i) for i in seed)
    cand = lookup.get(seed)
    if direction is None:
        if cand is None or len(cand) == 0:
            return None
        direction = cand[0]
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    c = grid.center(seed)
    fw_pts, fw_dirs, fw_reason = _propagate(c, seed, d, lookup, grid, config)
    bw_pts, bw_dirs, bw_reason = _propagate(c, seed, -d, lookup, grid, config)
    points = np.array(bw_pts[::-1] + [c] + fw_pts)
    dirs = np.array([-v for v in bw_dirs[::-1]] + fw_dirs).reshape(-1, 3)
    return Tract(points, dirs, seed, (bw_reason, fw_reason))


def track_all(field, grid: VoxelGrid, config: TrackerConfig = TrackerConfig()) -> list[Tract]:
    """Track from every seed voxel and direction; longest tracts first."""
    lookup = _lookup(field)
    seeds = sorted(ix for ix, axes in lookup.items() if len(axes))
    if config.seeding == "roi":
        seeds = [s for s in seeds if s in config.roi]
    tracts = []
    for s in seeds:
        for d in lookup[s]:
            t = track_from_seed(s, lookup, grid, config, d)
            if t is not None and t.length >= config.min_tract_len:
                tracts.append(t)
    order = sorted(range(len(tracts)), key=lambda i: -tracts[i].length)
    return [tracts[i] for i in order]


def longest(tracts, n: int) -> list[Tract]:
    return sorted(tracts, key=lambda t: -t.length)[:n]


def tract_rgb(tract: Tract) -> np.ndarray:
    """Per-segment orientation colour: red left-right, green front-back, blue up-down."""
    if len(tract.directions) == 0:
        raise InputError("tract has no segments")
    return np.abs(tract.directions)
