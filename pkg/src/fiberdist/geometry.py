"""Geometry of the unit sphere and of the projective sphere of axes.

Axes are unit 3-vectors identified up to sign.  Most heavy lifting is done on
plain ``(n, 3)`` float arrays; :class:`Axis` is the immutable public value type.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

__all__ = [
    "Axis",
    "ClusterResult",
    "KarcherConvergenceError",
    "as_array",
    "canonicalize",
    "geodesic_distance",
    "distance_matrix",
    "align",
    "exp_map",
    "log_map",
    "tangent_basis",
    "weighted_karcher_mean",
    "karcher_mean_array",
    "icosphere_axes",
    "icosphere_vertices",
    "pam_cluster",
    "pam_from_dissimilarity",
    "average_silhouette",
    "silhouette_from_dissimilarity",
]


class KarcherConvergenceError(RuntimeError):
    """Raised when the Karcher fixed-point iteration does not settle.

    The last iterate is kept on ``last`` so callers can still use it.
    """

    def __init__(self, message, last, residual):
        super().__init__(message)
        self.last = last
        self.residual = residual


def canonicalize(v):
    """Return the sign representative whose first nonzero coordinate is >= 0.

    Works on a single vector or on the rows of an ``(n, 3)`` array.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        nz = np.flatnonzero(v)
        if nz.size and v[nz[0]] < 0:
            return -v
        return v.copy()
    out = v.copy()
    nonzero = out != 0
    first = np.argmax(nonzero, axis=1)
    lead = out[np.arange(len(out)), first]
    out[lead < 0] *= -1
    return out


@dataclass(frozen=True)
class Axis:
    """A direction with no sign: ``Axis(v) == Axis(-v)``."""

    _coords: tuple = field(repr=False)

    def __init__(self, v):
        arr = np.asarray(v, dtype=float).reshape(3)
        norm = np.linalg.norm(arr)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError(f"cannot build an axis from {arr!r}")
        arr = canonicalize(_unit_rows(arr[None, :], np.array([[norm]]))[0])
        object.__setattr__(self, "_coords", tuple(float(x) for x in arr))

    @property
    def v(self) -> np.ndarray:
        return np.array(self._coords)

    def __repr__(self):
        x, y, z = self._coords
        return f"Axis({x:.6g}, {y:.6g}, {z:.6g})"

    def __iter__(self):
        return iter(self._coords)


def as_array(axes) -> np.ndarray:
    """Stack Axis objects or vectors into an ``(n, 3)`` unit-row array."""
    if isinstance(axes, np.ndarray) and axes.ndim == 2:
        arr = axes.astype(float, copy=True)
    else:
        rows = [a.v if isinstance(a, Axis) else np.asarray(a, dtype=float) for a in axes]
        arr = np.array(rows, dtype=float).reshape(-1, 3)
    return _unit_rows(arr, np.linalg.norm(arr, axis=1, keepdims=True))


def _unit_rows(arr, norms):
    # rows already unit to rounding are kept, so normalizing is idempotent
    keep = (np.abs(norms - 1.0) <= 4 * np.finfo(float).eps) | (norms == 0)
    return np.where(keep, arr, arr / np.where(norms == 0, 1.0, norms))


def _vec(a) -> np.ndarray:
    return a.v if isinstance(a, Axis) else np.asarray(a, dtype=float)


def geodesic_distance(a, b) -> float:
    """Acute angle between two axes, in ``[0, pi/2]``."""
    a, b = _vec(a), _vec(b)
    # atan2 form keeps full precision for nearly parallel axes
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(a @ b)))


def distance_matrix(A, B=None) -> np.ndarray:
    """Pairwise axis distances between the rows of ``A`` and ``B``."""
    A = as_array(A)
    B = A if B is None else as_array(B)
    c = np.abs(A @ B.T)
    np.clip(c, 0.0, 1.0, out=c)
    s = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    d = np.arctan2(s, c)
    if B is A:
        np.fill_diagonal(d, 0.0)
    return d


def align(v, ref) -> np.ndarray:
    """Flip ``v`` so that it points into the hemisphere of ``ref``.

    When ``v`` is orthogonal to ``ref`` it is returned unchanged.
    """
    v, ref = _vec(v), _vec(ref)
    dot = ref @ v
    if dot < 0:
        return -v
    return v.copy()


def exp_map(p, u) -> np.ndarray:
    """Exponential map of the unit sphere at ``p``."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    r = np.linalg.norm(u)
    if r == 0.0:
        return p.copy()
    if r < 1e-8:
        sinc = 1.0 - r * r / 6.0
        out = np.cos(r) * p + sinc * u
    else:
        out = np.cos(r) * p + (np.sin(r) / r) * u
    return out / np.linalg.norm(out)


def log_map(p, v) -> np.ndarray:
    """Logarithm map of the unit sphere at ``p``.

    Returns the tangent vector at ``p`` pointing to ``v`` whose length is the
    great-circle distance.  ``v = -p`` is outside the domain.
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    c = float(v @ p)
    if c <= -1.0 + 1e-12:
        raise ValueError("log_map is undefined at the antipode of the base point")
    w = v - c * p
    s = np.linalg.norm(w)
    if s == 0.0:
        return np.zeros(3)
    return (np.arctan2(s, c) / s) * w


def tangent_basis(p) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal vectors spanning the tangent plane at ``p``."""
    p = np.asarray(p, dtype=float)
    helper = np.eye(3)[np.argmin(np.abs(p))]
    t1 = np.cross(p, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(p, t1)
    return t1, t2


def _principal_axis(V: np.ndarray, w: np.ndarray) -> np.ndarray:
    scatter = (V * w[:, None]).T @ V
    _, vecs = np.linalg.eigh(scatter)
    return vecs[:, -1]


def karcher_mean_array(V, w=None, tol=1e-8, max_iter=200, init=None):
    """Weighted Karcher mean of axes given as rows of ``V``.

    Returns ``(mean, residual, n_iter)``; raises
    :class:`KarcherConvergenceError` when ``max_iter`` is exhausted.
    """
    V = np.asarray(V, dtype=float)
    w = np.ones(len(V)) if w is None else np.asarray(w, dtype=float)
    if len(V) != len(w):
        raise ValueError("axes and weights differ in length")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative with at least one positive")
    keep = w > 0
    V, w = V[keep], w[keep] / w[keep].sum()
    v = _principal_axis(V, w) if init is None else np.asarray(init, dtype=float)
    v = v / np.linalg.norm(v)
    residual = np.inf
    for it in range(max_iter + 1):
        dots = V @ v
        aligned = np.where(dots[:, None] < 0, -V, V)
        c = np.abs(dots)
        W = aligned - c[:, None] * v
        s = np.linalg.norm(W, axis=1)
        theta = np.arctan2(s, c)
        scale = np.divide(theta, s, out=np.zeros_like(s), where=s > 0)
        step = (w * scale) @ W
        residual = float(np.linalg.norm(step))
        if residual <= tol:
            return canonicalize(v), residual, it
        if it == max_iter:
            break
        v = exp_map(v, step)
    raise KarcherConvergenceError(
        f"Karcher mean did not converge in {max_iter} iterations "
        f"(residual {residual:.3g})",
        last=canonicalize(v),
        residual=residual,
    )


def weighted_karcher_mean(axes, weights=None, tol=1e-8, max_iter=200) -> Axis:
    """Minimizer of the weighted sum of squared axis distances.

    Parameters
    ----------
    axes : sequence of Axis or array of shape (n, 3)
    weights : array-like of nonnegative reals, optional
        Defaults to equal weights.

    Returns
    -------
    Axis
        A local minimizer found by the Riemannian fixed-point iteration,
        started from the principal eigenvector of the weighted scatter.
    """
    mean, _, _ = karcher_mean_array(as_array(axes), weights, tol=tol, max_iter=max_iter)
    return Axis(mean)


_PHI = (1.0 + 5.0**0.5) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=float,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
)


def icosphere_vertices(subdivisions: int) -> np.ndarray:
    """Vertices of an icosahedron subdivided ``subdivisions`` times, on S^2."""
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts)


# grid level -> number of midpoint subdivisions; level 2 is the 321-axis grid
_LEVEL_SUBDIVISIONS = {0: 0, 1: 2, 2: 3, 3: 4}


def icosphere_axes(level: int = 2, rotation=None) -> list[Axis]:
    """Icosphere vertices deduplicated under sign, as a list of axes.

    Level 0 is the bare icosahedron (6 axes) and level 2 the 321-axis grid
    used for the approximate fit.  ``rotation`` is an optional 3x3 rotation
    applied to the grid.
    """
    if level not in _LEVEL_SUBDIVISIONS:
        raise ValueError("level must be in 0..3")
    verts = icosphere_vertices(_LEVEL_SUBDIVISIONS[level])
    if rotation is not None:
        verts = verts @ np.asarray(rotation, dtype=float).T
    canon = canonicalize(verts)
    # vertex sets are centrally symmetric; keep one of each antipodal pair
    G = np.abs(canon @ canon.T)
    keep = []
    taken = np.zeros(len(canon), dtype=bool)
    for i in range(len(canon)):
        if taken[i]:
            continue
        keep.append(i)
        taken |= G[i] > 1 - 1e-9
    return [Axis(canon[i]) for i in keep]


@dataclass(frozen=True)
class ClusterResult:
    k: int
    assignment: np.ndarray
    medoids: np.ndarray
    mean_axes: list
    cost: float = 0.0


def _pam_build(D: np.ndarray, k: int) -> list[int]:
    medoids = [int(np.argmin(D.sum(axis=1)))]
    nearest = D[medoids[0]].copy()
    while len(medoids) < k:
        gain = np.maximum(nearest[None, :] - D, 0.0).sum(axis=1)
        gain[medoids] = -np.inf
        best = int(np.argmax(gain))
        medoids.append(best)
        nearest = np.minimum(nearest, D[best])
    return medoids


def pam_from_dissimilarity(D, k: int, max_swaps: int = 1000, history=None):
    """PAM (BUILD then SWAP) on a precomputed dissimilarity matrix.

    Returns ``(medoids, assignment, cost)``.  Ties are resolved toward the
    lowest medoid slot and candidate index.  If ``history`` is a list, the
    total cost after BUILD and after every accepted swap is appended to it.
    """
    D = np.asarray(D, dtype=float)
    n = len(D)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in 1..{n}")
    if k == n:
        medoids = np.arange(n)
        if history is not None:
            history.append(0.0)
        return medoids, np.arange(n), 0.0
    medoids = _pam_build(D, k)
    tol = 1e-12 * max(1.0, float(D.max()))
    for _ in range(max_swaps):
        Dm = D[medoids]
        order = np.argsort(Dm, axis=0, kind="stable")
        nearest = Dm[order[0], np.arange(n)]
        second = Dm[order[1], np.arange(n)] if k > 1 else np.full(n, np.inf)
        cost = nearest.sum()
        if history is not None and not history:
            history.append(float(cost))
        is_med = np.zeros(n, dtype=bool)
        is_med[medoids] = True
        best_delta, best_pair = -tol, None
        for slot in range(k):
            others = np.where(order[0] == slot, second, nearest)
            new_cost = np.minimum(D, others[None, :]).sum(axis=1)
            new_cost[is_med] = np.inf
            cand = int(np.argmin(new_cost))
            delta = new_cost[cand] - cost
            if delta < best_delta:
                best_delta, best_pair = delta, (slot, cand)
        if best_pair is None:
            break
        medoids[best_pair[0]] = best_pair[1]
        if history is not None:
            history.append(float(D[medoids].min(axis=0).sum()))
    medoids = np.array(medoids)
    assignment = np.argmin(D[medoids], axis=0)
    # a medoid always belongs to its own cluster, even with duplicate points
    assignment[medoids] = np.arange(k)
    cost = float(D[medoids[assignment], np.arange(n)].sum())
    return medoids, assignment, cost


def pam_cluster(axes, k: int) -> ClusterResult:
    """k-medoids clustering of axes under the acute-angle dissimilarity."""
    V = as_array(axes)
    D = distance_matrix(V)
    medoids, assignment, cost = pam_from_dissimilarity(D, k)
    means = []
    for c in range(k):
        members = V[assignment == c]
        try:
            mean, _, _ = karcher_mean_array(members)
        except KarcherConvergenceError as err:
            mean = err.last
        means.append(Axis(mean))
    return ClusterResult(k=k, assignment=assignment, medoids=medoids,
                         mean_axes=means, cost=cost)


def silhouette_from_dissimilarity(D, assignment) -> float:
    """Average silhouette width for a labelled dissimilarity matrix.

    Items in singleton clusters score 0.
    """
    D = np.asarray(D, dtype=float)
    labels = np.asarray(assignment)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two clusters")
    onehot = (labels[:, None] == uniq[None, :]).astype(float)
    sizes = onehot.sum(axis=0)
    sums = D @ onehot
    own = np.searchsorted(uniq, labels)
    idx = np.arange(len(labels))
    own_size = sizes[own]
    a = np.divide(sums[idx, own], own_size - 1, out=np.zeros(len(labels)),
                  where=own_size > 1)
    means = sums / sizes[None, :]
    means[idx, own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(len(labels)), where=denom > 0)
    s[own_size == 1] = 0.0
    return float(s.mean())


def average_silhouette(axes, assignment) -> float:
    """Average silhouette of a clustering of axes (acute-angle dissimilarity)."""
    return silhouette_from_dissimilarity(distance_matrix(as_array(axes)), assignment)
