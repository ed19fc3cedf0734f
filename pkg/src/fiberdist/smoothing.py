"""Kernel smoothing of direction fields on the projective sphere.

At each voxel the estimated axes of nearby voxels are weighted by a Gaussian
spatial kernel, weak neighbors are dropped, the remaining axes are clustered
(PAM, number of clusters by average silhouette) and each cluster is replaced
by its weighted Karcher mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError
from .geometry import (Axis, KarcherConvergenceError, as_array, distance_matrix,
                       karcher_mean_array, pam_from_dissimilarity,
                       silhouette_from_dissimilarity)

__all__ = [
    "DirectionEntry",
    "DirectionField",
    "SmoothingConfig",
    "neighbor_weights",
    "select_neighbors",
    "choose_cluster_count",
    "smooth_voxel",
    "cv_scores",
    "cv_bandwidth",
    "default_h_grid",
    "smooth_field",
]

_MAX_SCORE = (np.pi / 2) ** 2


class DirectionEntry(NamedTuple):
    location: tuple
    index: tuple
    axis: Axis
    source: str


class DirectionField:
    """Immutable collection of (location, voxel index, axis) entries.

    Several entries may share a voxel.  Voxels without entries are treated as
    isotropic.
    """

    def __init__(self, locations, indices, axes, sources="voxelwise"):
        L = np.array(locations, dtype=float).reshape(-1, 3)
        idx = np.array(indices, dtype=np.int64).reshape(-1, 3)
        A = as_array(axes) if len(L) else np.zeros((0, 3))
        if not (len(L) == len(idx) == len(A)):
            raise InputError("locations, indices and axes must have equal length")
        if isinstance(sources, str):
            sources = [sources] * len(L)
        for arr in (L, idx, A):
            arr.flags.writeable = False
        self.locations, self.indices, self.axes = L, idx, A
        self.sources = tuple(sources)
        self._voxels = None

    def __len__(self):
        return len(self.locations)

    @property
    def entries(self) -> list[DirectionEntry]:
        return [DirectionEntry(tuple(l), tuple(int(i) for i in ix), Axis(a), s)
                for l, ix, a, s in zip(self.locations, self.indices, self.axes, self.sources)]

    def voxels(self) -> dict:
        """Map voxel index -> array of entry positions, in index order."""
        if self._voxels is None:
            groups: dict = {}
            for k, ix in enumerate(map(tuple, self.indices.tolist())):
                groups.setdefault(ix, []).append(k)
            self._voxels = {ix: np.array(groups[ix]) for ix in sorted(groups)}
        return self._voxels

    def axes_at(self, index) -> np.ndarray:
        pos = self.voxels().get(tuple(index))
        return self.axes[pos] if pos is not None else np.zeros((0, 3))

    def center_of(self, index) -> np.ndarray:
        return self.locations[self.voxels()[tuple(index)][0]]

    @classmethod
    def from_estimates(cls, estimates) -> "DirectionField":
        L, I, A = [], [], []
        for est in estimates:
            for ax in est.axes:
                L.append(est.center)
                I.append(est.index)
                A.append(ax.v)
        return cls(L, I, A, "voxelwise")

    def __eq__(self, other):
        return (isinstance(other, DirectionField)
                and np.array_equal(self.locations, other.locations)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.axes, other.axes)
                and self.sources == other.sources)


@dataclass(frozen=True)
class SmoothingConfig:
    h: float | None = None
    h_grid: tuple | None = None
    weight_threshold: float = 0.05
    k_max: int = 4
    silhouette_floor: float = 0.5
    cv: str = "mcv"
    radius_factor: float = 4.0
    min_separation_deg: float = 30.0

    def __post_init__(self):
        if self.h is not None and not self.h > 0:
            raise InputError("bandwidth h must be positive")
        if not 1 <= self.k_max <= 4:
            raise InputError("k_max must lie in 1..4")
        if not 0 <= self.min_separation_deg <= 90:
            raise InputError("min_separation_deg must lie in [0, 90]")
        if self.cv not in ("none", "ocv", "mcv", "tcv"):
            raise InputError(f"unknown CV mode {self.cv!r}")


def neighbor_weights(s0, locations, h: float) -> np.ndarray:
    """Isotropic Gaussian kernel ``K_H(s_i - s0)`` with ``H = h I``."""
    if not h > 0:
        raise InputError("bandwidth must be positive")
    d2 = np.sum((np.asarray(locations, float) - np.asarray(s0, float)) ** 2, axis=-1)
    return (2 * np.pi) ** -1.5 * h**-3 * np.exp(-0.5 * d2 / (h * h))


def select_neighbors(weights, threshold: float, own=None) -> np.ndarray:
    """Indices with weight at least ``threshold * max(weights)``.

    Entries flagged in the boolean ``own`` mask are always kept.
    """
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        return np.array([], dtype=int)
    keep = w >= threshold * w.max()
    if own is not None:
        keep |= np.asarray(own, dtype=bool)
    return np.flatnonzero(keep)


def choose_cluster_count(axes, k_max: int = 4, silhouette_floor: float = 0.5,
                         min_separation: float = np.pi / 6):
    """Number of clusters maximizing the average silhouette.

    Returns ``(k, assignment)``.  A partition with k >= 2 only qualifies when
    all its medoids are at least ``min_separation`` apart.  A single cluster
    is used when fewer than 3 axes are given or when no qualifying k reaches
    ``silhouette_floor``.
    """
    V = as_array(axes)
    n = len(V)
    if n == 0:
        raise InputError("cannot cluster an empty set of axes")
    single = (1, np.zeros(n, dtype=int))
    if n < 3 or k_max < 2:
        return single
    D = distance_matrix(V)
    best_k, best_s, best_assign = 1, -np.inf, None
    for k in range(2, min(k_max, n - 1) + 1):
        medoids, assignment, _ = pam_from_dissimilarity(D, k)
        sep = D[np.ix_(medoids, medoids)][np.triu_indices(k, 1)].min()
        if sep < min_separation:
            continue
        s = silhouette_from_dissimilarity(D, assignment)
        if s > best_s + 1e-12:
            best_k, best_s, best_assign = k, s, assignment
    if best_s < silhouette_floor:
        return single
    return best_k, best_assign


def _cluster_means(V, w, assignment, k):
    out = []
    for c in range(k):
        sel = assignment == c
        try:
            mean, _, _ = karcher_mean_array(V[sel], w[sel])
        except KarcherConvergenceError as err:
            mean = err.last
        out.append(mean)
    return np.array(out)


def _smooth_at(s0, L, V, own, config: SmoothingConfig, h: float, n_own: int) -> np.ndarray:
    """Smoothed axes at location ``s0`` from candidate entries ``(L, V)``.

    ``n_own`` is the number of directions estimated at ``s0`` itself.  A
    single-direction voxel gets one output (the mean of the heaviest
    cluster); multi-direction voxels get one output per cluster.
    """
    if len(V) == 0:
        return np.zeros((0, 3))
    w = neighbor_weights(s0, L, h)
    keep = select_neighbors(w, config.weight_threshold, own)
    if keep.size == 0 or not np.any(w[keep] > 0):
        return np.zeros((0, 3))
    if own is not None and np.all(own[keep]):
        # nothing to borrow from neighbors
        return V[keep].copy()
    Vk, wk = V[keep], w[keep]
    k, assignment = choose_cluster_count(Vk, config.k_max, config.silhouette_floor,
                                         np.deg2rad(config.min_separation_deg))
    if n_own == 1 and k > 1:
        mass = np.bincount(assignment, weights=wk, minlength=k)
        sel = assignment == int(np.argmax(mass))
        Vk, wk, assignment, k = Vk[sel], wk[sel], np.zeros(int(sel.sum()), dtype=int), 1
    return _cluster_means(Vk, wk, assignment, k)


class _Index:
    """Spatial lookup over a field's entry locations."""

    def __init__(self, fld: DirectionField):
        self.field = fld
        self.tree = cKDTree(fld.locations) if len(fld) else None

    def candidates(self, s0, radius):
        if self.tree is None:
            return np.array([], dtype=int)
        return np.array(sorted(self.tree.query_ball_point(s0, radius)), dtype=int)


def smooth_voxel(index, fld: DirectionField, config: SmoothingConfig, h=None,
                 _lookup=None) -> list[Axis]:
    """Smoothed axes (one per cluster) at voxel ``index``.

    Voxels without entries are isotropic and return an empty list.
    """
    h = config.h if h is None else h
    if h is None:
        raise InputError("smooth_voxel needs a bandwidth")
    pos = fld.voxels().get(tuple(index))
    if pos is None:
        return []
    s0 = fld.locations[pos[0]]
    lookup = _lookup or _Index(fld)
    cand = lookup.candidates(s0, config.radius_factor * h)
    own = np.isin(cand, pos)
    out = _smooth_at(s0, fld.locations[cand], fld.axes[cand], own, config, h, len(pos))
    return [Axis(v) for v in out]


def default_h_grid(voxel_size=1.0, n=8) -> tuple:
    """Log-spaced bandwidths from 0.5 to 4 voxel widths (mm)."""
    width = float(np.mean(voxel_size))
    return tuple(np.geomspace(0.5 * width, 4.0 * width, n))


def _heldout_scores(fld: DirectionField, config: SmoothingConfig, h: float, lookup):
    scores = []
    for ix, pos in fld.voxels().items():
        s0 = fld.locations[pos[0]]
        cand = lookup.candidates(s0, config.radius_factor * h)
        cand = cand[~np.isin(cand, pos)]
        pred = _smooth_at(s0, fld.locations[cand], fld.axes[cand], None, config, h, len(pos))
        if len(pred) == 0:
            scores.extend([_MAX_SCORE] * len(pos))
            continue
        d = distance_matrix(fld.axes[pos], pred).min(axis=1)
        scores.extend((d**2).tolist())
    return np.array(scores)


def _aggregate(scores, mode):
    if mode == "ocv":
        return float(np.mean(scores))
    if mode == "mcv":
        return float(np.median(scores))
    if mode == "tcv":
        s = np.sort(scores)
        cut = int(np.floor(0.1 * len(s)))
        return float(np.mean(s[cut:len(s) - cut] if len(s) > 2 * cut else s))
    raise InputError(f"unknown CV mode {mode!r}")


def cv_scores(fld: DirectionField, h_grid, mode="mcv", config=SmoothingConfig()):
    """Leave-one-voxel-out CV score for every bandwidth in ``h_grid``."""
    if len(fld.voxels()) < 2:
        raise InputError("cross-validation needs at least two voxels with directions")
    lookup = _Index(fld)
    return np.array([_aggregate(_heldout_scores(fld, config, h, lookup), mode)
                     for h in h_grid])


def cv_bandwidth(fld: DirectionField, h_grid=None, mode="mcv", config=SmoothingConfig()):
    """Bandwidth minimizing the CV score; ties go to the smaller bandwidth.

    ``mode`` is ``"ocv"`` (mean of held-out squared angles), ``"mcv"``
    (median) or ``"tcv"`` (10% trimmed mean).
    """
    if h_grid is None:
        h_grid = config.h_grid or default_h_grid(_guess_spacing(fld))
    h_grid = np.sort(np.asarray(h_grid, dtype=float))
    if h_grid.size == 0:
        raise InputError("h_grid must be nonempty")
    scores = cv_scores(fld, h_grid, mode, config)
    best = scores.min()
    choice = int(np.flatnonzero(scores <= best + 1e-12 * max(abs(best), 1e-300))[0])
    return float(h_grid[choice]), scores


def _guess_spacing(fld: DirectionField) -> float:
    centers = np.array([fld.center_of(ix) for ix in fld.voxels()])
    if len(centers) < 2:
        return 1.0
    d, _ = cKDTree(centers).query(centers, k=2)
    return float(np.median(d[:, 1]))


def smooth_field(fld: DirectionField, config: SmoothingConfig = SmoothingConfig()):
    """Smooth every voxel of ``fld`` from the original (unsmoothed) entries.

    Returns ``(smoothed_field, h)``; ``h`` is chosen by CV when the config
    leaves it unset.
    """
    h = config.h
    if h is None:
        if config.cv == "none":
            raise InputError("no bandwidth given and CV disabled")
        h, _ = cv_bandwidth(fld, config.h_grid, config.cv, config)
    lookup = _Index(fld)
    L, I, A = [], [], []
    for ix, pos in fld.voxels().items():
        s0 = fld.locations[pos[0]]
        cand = lookup.candidates(s0, config.radius_factor * h)
        own = np.isin(cand, pos)
        for v in _smooth_at(s0, fld.locations[cand], fld.axes[cand], own, config, h,
                             len(pos)):
            L.append(s0)
            I.append(ix)
            A.append(v)
    return DirectionField(L, I, A, "smoothed"), h
