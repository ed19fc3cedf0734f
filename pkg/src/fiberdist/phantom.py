"""Synthetic phantoms with known fiber geometry, and evaluation metrics.

The canonical suite:

P1  uniform single-fiber slab
P2  quarter-circle curved bundle in an isotropic background
P3  two orthogonal crossing sheets
P4  two sheets crossing at 60 degrees
P5  three sheets 60 degrees apart
P6  isotropic volume
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .geometry import Axis, as_array, distance_matrix, karcher_mean_array
from .signal import (GenerativeTensor, GradientScheme, VoxelSignal, fibonacci_scheme,
                     generative_signal, rician_sample)
from .tracking import VoxelGrid

__all__ = [
    "PhantomSpec",
    "Dataset",
    "EvalReport",
    "MatchResult",
    "WM_EIGENVALUES",
    "ISO_LAMBDA",
    "make_phantom",
    "generate",
    "angular_error",
    "count_confusion",
    "evaluate",
    "crossing_pass_fraction",
    "direction_curve_experiment",
]

WM_EIGENVALUES = (1.7e-3, 0.3e-3)
ISO_LAMBDA = 0.7e-3
DEFAULT_S0 = 1860.0
DEFAULT_SIGMA = 57.0


@dataclass(frozen=True)
class PhantomSpec:
    """Ground-truth description of a synthetic volume.

    ``fibers`` maps a voxel index to its fiber axes (equal weights); voxels
    not listed hold a single isotropic tensor.
    """

    name: str
    grid: VoxelGrid
    fibers: dict
    scheme: GradientScheme = field(default_factory=fibonacci_scheme)
    s0: float = DEFAULT_S0
    sigma: float = DEFAULT_SIGMA
    seed: int = 0
    eigenvalues: tuple = WM_EIGENVALUES
    iso_lambda: float = ISO_LAMBDA
    meta: dict = field(default_factory=dict)

    def tensors_at(self, index) -> list[GenerativeTensor]:
        axes = self.fibers.get(tuple(index), ())
        if not axes:
            return [GenerativeTensor(self.iso_lambda, self.iso_lambda, (1.0, 0.0, 0.0))]
        w = 1.0 / len(axes)
        l1, l2 = self.eigenvalues
        return [GenerativeTensor(l1, l2, a, w) for a in axes]

    def truth(self) -> dict:
        """Voxel index -> list of true axes (empty for isotropic voxels)."""
        return {ix: [Axis(a) for a in self.fibers.get(ix, ())] for ix in self.grid.all_indices()}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dims": list(self.grid.dims),
            "voxel_size": list(self.grid.voxel_size),
            "origin": list(self.grid.origin),
            "b_value": self.scheme.b_value,
            "n_b0": self.scheme.n_b0,
            "gradients": self.scheme.directions.tolist(),
            "s0": self.s0,
            "sigma": self.sigma,
            "seed": self.seed,
            "eigenvalues": list(self.eigenvalues),
            "iso_lambda": self.iso_lambda,
            "fibers": [[list(ix), [list(Axis(a).v) for a in axes]]
                       for ix, axes in sorted(self.fibers.items())],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d) -> "PhantomSpec":
        grid = VoxelGrid(tuple(d["dims"]), tuple(d["voxel_size"]), tuple(d["origin"]))
        scheme = GradientScheme(np.array(d["gradients"]), d["b_value"], d["n_b0"])
        fibers = {tuple(ix): tuple(tuple(a) for a in axes) for ix, axes in d["fibers"]}
        return cls(d["name"], grid, fibers, scheme, d["s0"], d["sigma"], d["seed"],
                   tuple(d["eigenvalues"]), d["iso_lambda"], d.get("meta", {}))


def _sheets(grid: VoxelGrid, sheets) -> dict:
    """Voxels within a band around planes through the volume center.

    ``sheets`` is a list of ``(fiber_direction, plane_normal, half_width_mm)``.
    """
    center = grid.center((np.asarray(grid.dims) - 1) / 2.0)
    fibers: dict = {}
    for ix in grid.all_indices():
        c = grid.center(ix) - center
        axes = [tuple(d) for d, n, hw in sheets if abs(c @ np.asarray(n, float)) <= hw + 1e-9]
        if axes:
            fibers[ix] = tuple(axes)
    return fibers


def make_phantom(name: str, seed: int = 0, sigma: float = DEFAULT_SIGMA,
                 s0: float = DEFAULT_S0, scheme: GradientScheme | None = None,
                 **geometry) -> PhantomSpec:
    """Build one of the canonical phantoms P1..P6."""
    scheme = fibonacci_scheme() if scheme is None else scheme
    vs = geometry.get("voxel_size", 2.0)
    size = (vs, vs, vs)
    key = name.upper()
    meta: dict = {}
    if key == "P1":
        dims = geometry.get("dims", (10, 4, 4))
        grid = VoxelGrid(dims, size)
        axis = tuple(np.asarray(geometry.get("axis", (1.0, 0.0, 0.0)), float))
        fibers = {ix: (axis,) for ix in grid.all_indices()}
    elif key == "P2":
        n = geometry.get("n", 16)
        nz = geometry.get("nz", 2)
        r_in, r_out = geometry.get("radii", (5.0, 11.0))
        grid = VoxelGrid((n, n, nz), size)
        fibers = {}
        for ix in grid.all_indices():
            x, y = ix[0] + 0.5, ix[1] + 0.5
            r = np.hypot(x, y)
            if r_in <= r <= r_out:
                fibers[ix] = ((-y / r, x / r, 0.0),)
        meta = {"radii": [r_in, r_out]}
    elif key in ("P3", "P4", "P5"):
        dims = geometry.get("dims", (15, 3, 15))
        thick = geometry.get("thickness", 5)
        grid = VoxelGrid(dims, size)
        hw = thick * vs / 2.0
        if key == "P3":
            angles = (0.0, 90.0)
        elif key == "P4":
            angles = (0.0, 60.0)
        else:
            angles = (0.0, 60.0, 120.0)
        sheets = []
        for a in np.deg2rad(angles):
            d = (np.cos(a), 0.0, np.sin(a))
            nrm = (-np.sin(a), 0.0, np.cos(a))
            sheets.append((d, nrm, hw))
        fibers = _sheets(grid, sheets)
        meta = {"angles_deg": list(angles), "thickness": thick}
    elif key == "P6":
        dims = geometry.get("dims", (6, 6, 3))
        grid = VoxelGrid(dims, size)
        fibers = {}
    else:
        raise InputError(f"unknown phantom {name!r}")
    return PhantomSpec(key, grid, fibers, scheme, s0, sigma, seed, meta=meta)


@dataclass
class Dataset:
    grid: VoxelGrid
    scheme: GradientScheme
    dwi: np.ndarray   # (nx, ny, nz, m)
    b0: np.ndarray    # (nx, ny, nz, n_b0)
    truth: dict | None = None

    def voxel_signals(self, s0, sigma, indices=None) -> list[VoxelSignal]:
        """VoxelSignal per voxel using an S0 map (array) and a pooled sigma."""
        s0 = np.broadcast_to(np.asarray(s0, float), self.grid.dims)
        idx = self.grid.all_indices() if indices is None else indices
        return [VoxelSignal(self.dwi[ix], float(s0[ix]), float(sigma), ix,
                            tuple(self.grid.center(ix))) for ix in idx]


def _voxel_rng(seed: int, linear: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(linear)]))


def generate(spec: PhantomSpec) -> Dataset:
    """Rician-corrupted DWI and b0 volumes for a phantom.

    Each voxel draws from its own random stream derived from
    ``(seed, linear voxel index)``, so the result is independent of the
    order voxels are generated in.
    """
    nx, ny, nz = spec.grid.dims
    m, nb0 = spec.scheme.m, spec.scheme.n_b0
    dwi = np.empty((nx, ny, nz, m))
    b0 = np.empty((nx, ny, nz, nb0))
    for ix in spec.grid.all_indices():
        linear = ix[0] + nx * (ix[1] + ny * ix[2])
        rng = _voxel_rng(spec.seed, linear)
        b0[ix] = rician_sample(np.full(nb0, spec.s0), spec.sigma, rng)
        nu = generative_signal(spec.tensors_at(ix), spec.s0, spec.scheme)
        dwi[ix] = rician_sample(nu, spec.sigma, rng)
    return Dataset(spec.grid, spec.scheme, dwi, b0, spec.truth())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchResult:
    errors_deg: np.ndarray   # matched pair errors
    pairs: tuple             # (estimate index, truth index)
    misses: int              # truths without an estimate
    extras: int              # estimates without a truth


def angular_error(estimated, truth) -> MatchResult:
    """Optimal one-to-one matching of estimated and true axes (<= 4 each)."""
    E = as_array(estimated) if len(estimated) else np.zeros((0, 3))
    T = as_array(truth) if len(truth) else np.zeros((0, 3))
    if len(E) > 4 or len(T) > 4:
        raise InputError("angular_error supports at most 4 axes per side")
    if len(E) == 0 or len(T) == 0:
        return MatchResult(np.zeros(0), (), len(T), len(E))
    D = distance_matrix(E, T)
    n = min(len(E), len(T))
    best, best_pairs = np.inf, None
    for e_idx in itertools.permutations(range(len(E)), n):
        for t_idx in itertools.combinations(range(len(T)), n):
            cost = D[list(e_idx), list(t_idx)].sum()
            if cost < best - 1e-15:
                best, best_pairs = cost, tuple(zip(e_idx, t_idx))
    errs = np.degrees([D[i, j] for i, j in best_pairs])
    return MatchResult(np.array(errs), best_pairs, len(T) - n, len(E) - n)


def count_confusion(estimated: dict, truth: dict, size: int = 5) -> np.ndarray:
    """Tally of (true J, estimated J) over voxels.

    Both arguments map voxel index -> number of directions (or a list of axes).
    """
    if set(estimated) != set(truth):
        raise InputError("estimate and truth grids do not match")
    M = np.zeros((size, size), dtype=int)
    for ix, t in truth.items():
        tj = t if isinstance(t, (int, np.integer)) else len(t)
        ej = estimated[ix]
        ej = ej if isinstance(ej, (int, np.integer)) else len(ej)
        M[tj, ej] += 1
    return M


@dataclass
class EvalReport:
    voxel_errors: dict            # index -> list of matched errors (deg)
    confusion: np.ndarray
    tract_scores: dict = field(default_factory=dict)

    @property
    def all_errors(self) -> np.ndarray:
        vals = [e for errs in self.voxel_errors.values() for e in errs]
        return np.array(vals)

    def summary(self) -> dict:
        errs = self.all_errors
        total = self.confusion.sum(axis=1)
        rates = {str(j): (float(self.confusion[j, j] / total[j]) if total[j] else None)
                 for j in range(len(total))}
        return {
            "n_voxels": int(self.confusion.sum()),
            "mean_error_deg": float(errs.mean()) if errs.size else None,
            "median_error_deg": float(np.median(errs)) if errs.size else None,
            "correct_count_rate": rates,
            "confusion": self.confusion.tolist(),
            "tracts": self.tract_scores,
        }


def evaluate(estimated: dict, truth: dict) -> EvalReport:
    """Angular errors and direction-count confusion for a field.

    ``estimated`` and ``truth`` map voxel index -> list of axes.
    """
    errors = {}
    for ix, t in truth.items():
        e = estimated.get(ix, [])
        if len(e) and len(t):
            errors[ix] = angular_error(e, t).errors_deg.tolist()
    est_full = {ix: estimated.get(ix, []) for ix in truth}
    return EvalReport(errors, count_confusion(est_full, truth))


def crossing_pass_fraction(tracts, spec: PhantomSpec, gate=np.pi / 6):
    """Share of sheet-A tracts that make it across the crossing region.

    Considers tracts seeded in sheet-A voxels before the crossing along x
    whose seed direction is within ``gate`` of the sheet-A fiber axis, and
    counts those with a point beyond the far side of the crossing.
    """
    thick = spec.meta["thickness"]
    nx = spec.grid.dims[0]
    lo = (nx - thick) // 2
    hi = lo + thick
    a_axis = np.array([1.0, 0.0, 0.0])
    size = spec.grid.voxel_size[0]
    far = spec.grid.center((hi, 0, 0))[0] - 0.5 * size
    counted = passed = 0
    for t in tracts:
        ax = spec.fibers.get(t.seed, ())
        if t.seed[0] >= lo or not any(abs(np.dot(a, a_axis)) > 0.999 for a in ax):
            continue
        seed_dir = _seed_direction(t, spec.grid)
        if abs(seed_dir @ a_axis) < np.cos(gate):
            continue
        counted += 1
        if t.points[:, 0].max() >= far + 1e-9:
            passed += 1
    return (passed / counted if counted else float("nan")), counted


def _seed_direction(tract, grid) -> np.ndarray:
    # the segment leaving the seed center carries the seed axis
    c = grid.center(tract.seed)
    k = int(np.argmin(np.linalg.norm(tract.points - c, axis=1)))
    dirs = np.asarray(tract.directions)
    return dirs[min(k, len(dirs) - 1)] if len(dirs) else np.zeros(3)


def direction_curve_experiment(ns=(100, 400, 1600), c=0.3, noise_deg=15.0, reps=300,
                               s0=0.5, seed=0):
    """RMS error of the kernel direction estimate on a 1-D curve.

    Axes ``v(s) = (cos t(s), sin t(s), 0)`` with ``t(s) = (pi/3) s^2`` are
    observed on the regular design ``s_i = (i + 1/2) / n`` with isotropic
    Gaussian tangent noise, and estimated at ``s0`` with bandwidth
    ``h = c * n^(-1/5)``.  Returns ``(rms_errors, fitted log-log slope)``.
    """
    rng = np.random.default_rng(seed)
    target_t = np.pi / 3 * s0**2
    target = np.array([np.cos(target_t), np.sin(target_t), 0.0])
    noise = np.deg2rad(noise_deg)
    rms = []
    for n in ns:
        s = (np.arange(n) + 0.5) / n
        t = np.pi / 3 * s**2
        base = np.column_stack([np.cos(t), np.sin(t), np.zeros(n)])
        h = c * n ** (-0.2)
        w = np.exp(-0.5 * ((s - s0) / h) ** 2) / h
        errs = np.empty(reps)
        # tangent frame of each base point: in-plane and out-of-plane unit vectors
        e1 = np.column_stack([-np.sin(t), np.cos(t), np.zeros(n)])
        e2 = np.tile([0.0, 0.0, 1.0], (n, 1))
        for r in range(reps):
            z = rng.standard_normal((n, 2)) * noise
            u = z[:, :1] * e1 + z[:, 1:] * e2
            r_norm = np.linalg.norm(u, axis=1, keepdims=True)
            obs = np.cos(r_norm) * base + np.sinc(r_norm / np.pi) * u
            obs *= np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
            est, _, _ = karcher_mean_array(obs, w)
            errs[r] = np.arctan2(np.linalg.norm(np.cross(est, target)), abs(est @ target))
        rms.append(float(np.sqrt(np.mean(errs**2))))
    slope = float(np.polyfit(np.log(ns), np.log(rms), 1)[0])
    return np.array(rms), slope
