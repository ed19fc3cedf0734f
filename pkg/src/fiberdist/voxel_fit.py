"""Voxel-wise maximum likelihood estimation of fiber directions.

Pipeline per voxel: FA screen with the log-linear single tensor fit, a
non-negative regression on a fixed direction grid, PAM clustering of the
selected grid directions, L-BFGS-B refinement of the multi-tensor model for
I = 1..I_max components, an isotropic fit, and BIC selection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, special

from .errors import ConvergenceError, InputError
from .geometry import (Axis, KarcherConvergenceError, as_array, distance_matrix,
                       icosphere_axes, karcher_mean_array, pam_from_dissimilarity)
from .signal import (GradientScheme, TensorComponent, VoxelModel, VoxelSignal,
                     _data_constant, _loglik_terms, single_tensor_regression_fit)

log = logging.getLogger(__name__)

TAU_MIN, TAU_MAX = 1e-4, 1.0 - 1e-4
ALPHA_B_MAX = 20.0

__all__ = [
    "FitConfig",
    "GridFit",
    "RefineResult",
    "FitRecord",
    "FitTrace",
    "VoxelEstimate",
    "approx_grid_fit",
    "cluster_selected",
    "refine_ml",
    "fit_isotropic",
    "bic",
    "bic_isotropic",
    "estimate_voxel",
    "fit_volume",
    "estimate_s0_sigma",
    "pool_sigma",
]


@dataclass(frozen=True)
class FitConfig:
    grid_level: int = 2
    alpha_tilde: float | None = None   # defaults to 2 / b
    i_max: int = 4
    fa_threshold: float = 0.15
    merge_angle_deg: float = 5.0
    support_rel: float = 1e-3
    grad_tol: float = 1e-6
    max_iter: int = 500
    em_tol: float = 1e-10
    em_max_iter: int = 500
    seed: int = 0

    def alpha_grid(self, b_value: float) -> float:
        return 2.0 / b_value if self.alpha_tilde is None else self.alpha_tilde


@lru_cache(maxsize=8)
def _grid_array(level: int) -> np.ndarray:
    return as_array(icosphere_axes(level))


def _full_loglik(x, nu, sigma) -> float:
    ll, _ = _loglik_terms(x, nu, sigma)
    return float(ll.sum()) + _data_constant(x[x > 0], sigma)


# ---------------------------------------------------------------------------
# approximate fit on the direction grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridFit:
    grid: np.ndarray          # (K, 3) unit rows
    coefficients: np.ndarray  # (K,) nonnegative
    selected: np.ndarray      # indices with non-negligible coefficient
    loglik: float
    n_iter: int
    converged: bool = True
    history: tuple = ()

    @property
    def selected_axes(self) -> np.ndarray:
        return self.grid[self.selected]


def approx_grid_fit(voxel: VoxelSignal, scheme: GradientScheme, grid=None,
                    alpha_tilde=None, support_rel=1e-3, tol=1e-10,
                    max_iter=500) -> GridFit:
    """Non-negative Rician regression on fixed-decay grid profiles.

    The design column for grid axis ``m_k`` is
    ``S0 * exp(-b * alpha_tilde * (u . m_k)^2)``.  Coefficients start from
    NNLS on bias-corrected magnitudes and are refined by EM: the E-step
    replaces each magnitude by ``x * I1/I0(x nu / sigma^2)``, the M-step is an
    NNLS solve.  Each EM step cannot decrease the Rician likelihood.

    Raises
    ------
    ConvergenceError
        If EM has not settled after ``max_iter`` steps; the partial fit is
        attached as ``trace``.
    """
    G = _grid_array(2) if grid is None else as_array(grid)
    if len(G) == 0:
        raise InputError("grid must be nonempty")
    b = scheme.b_value
    at = 2.0 / b if alpha_tilde is None else alpha_tilde
    x = np.asarray(voxel.intensities, dtype=float)
    s2 = voxel.sigma**2
    X = voxel.s0 * np.exp(-b * at * (scheme.directions @ G.T) ** 2)

    beta, _ = optimize.nnls(X, np.sqrt(np.maximum(x * x - 2 * s2, 0.0)))
    nu = X @ beta
    ll = _full_loglik(x, nu, voxel.sigma)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = x * np.exp(np.log(special.i1e(x * nu / s2)) - np.log(special.i0e(x * nu / s2)))
        beta, _ = optimize.nnls(X, z)
        nu = X @ beta
        new_ll = _full_loglik(x, nu, voxel.sigma)
        history.append(new_ll)
        if abs(new_ll - ll) <= tol * max(1.0, abs(ll)):
            ll = new_ll
            converged = True
            break
        ll = new_ll
    top = beta.max() if beta.size else 0.0
    selected = np.flatnonzero(beta > support_rel * top) if top > 0 else np.array([], int)
    fit = GridFit(G, beta, selected, ll, it, converged, tuple(history))
    if not converged:
        raise ConvergenceError(f"grid EM did not converge in {max_iter} steps", trace=fit)
    return fit


def cluster_selected(gridfit: GridFit, I: int) -> np.ndarray:
    """Starting axes for an I-component fit: PAM cluster means of the support."""
    sel = gridfit.selected_axes
    if not 1 <= I <= len(sel):
        raise InputError(f"I must lie in 1..{len(sel)} (number of selected axes)")
    if I == len(sel):
        return sel.copy()
    D = distance_matrix(sel)
    _, assignment, _ = pam_from_dissimilarity(D, I)
    means = []
    for c in range(I):
        try:
            mean, _, _ = karcher_mean_array(sel[assignment == c])
        except KarcherConvergenceError as err:
            mean = err.last
        means.append(mean)
    return np.array(means)


# ---------------------------------------------------------------------------
# quasi-Newton refinement of the multi-tensor model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefineResult:
    model: VoxelModel
    loglik: float
    converged: bool
    grad_norm: float
    n_iter: int


def _charts(axes):
    bases = []
    for m in axes:
        helper = np.eye(3)[np.argmin(np.abs(m))]
        t1 = np.cross(m, helper)
        t1 /= np.linalg.norm(t1)
        bases.append(np.stack([t1, np.cross(m, t1)]))
    return np.array(bases)


def _unpack(p, centers, bases):
    P = p.reshape(-1, 4)
    tau, ab = P[:, 0], P[:, 1]
    w = centers + np.einsum("jk,jkd->jd", P[:, 2:], bases)
    norms = np.linalg.norm(w, axis=1)
    return tau, ab, w / norms[:, None], norms


def _objective(p, centers, bases, U, x, s0, sigma):
    tau, ab, M, norms = _unpack(p, centers, bases)
    proj = U @ M.T
    e = np.exp(-ab * proj**2)
    nu = s0 * e @ tau
    ll, score = _loglik_terms(x, nu, sigma)
    g = np.empty((len(tau), 4))
    g[:, 0] = s0 * score @ e
    g[:, 1] = -s0 * tau * (score @ (e * proj**2))
    # chain rule through m = w / |w| with w = center + basis^T theta
    dM = (-2 * s0 * tau[:, None] * ab[:, None]) * ((score[:, None] * e * proj).T @ U)
    radial = np.einsum("jd,jd->j", dM, M)
    dW = (dM - radial[:, None] * M) / norms[:, None]
    g[:, 2:] = np.einsum("jkd,jd->jk", bases, dW)
    return -float(ll.sum()), -g.ravel()


def _projected_grad_norm(p, g, lower, upper):
    pg = g.copy()
    at_lo = (p <= lower + 1e-12) & (g > 0)
    at_hi = (p >= upper - 1e-12) & (g < 0)
    pg[at_lo | at_hi] = 0.0
    return float(np.linalg.norm(pg))


def _newton_polish(tau, ab, centers, args, lower, upper, steps=5):
    """A few safeguarded Newton steps on the free coordinates."""
    for _ in range(steps):
        bases = _charts(centers)
        p = np.column_stack([tau, ab, np.zeros((len(tau), 2))]).ravel()
        f, g = _objective(p, centers, bases, *args)
        free = ~(((p <= lower + 1e-12) & (g > 0)) | ((p >= upper - 1e-12) & (g < 0)))
        if np.linalg.norm(g[free]) < 1e-12:
            break
        n = len(p)
        H = np.empty((n, n))
        for i in range(n):
            h = 1e-6 * max(1.0, abs(p[i]))
            dp = np.zeros(n)
            dp[i] = h
            H[:, i] = (_objective(p + dp, centers, bases, *args)[1]
                       - _objective(p - dp, centers, bases, *args)[1]) / (2 * h)
        Hf = 0.5 * (H + H.T)[np.ix_(free, free)]
        try:
            if np.linalg.eigvalsh(Hf).min() <= 0:
                break
            step = np.zeros(n)
            step[free] = -np.linalg.solve(Hf, g[free])
        except np.linalg.LinAlgError:
            break
        q = np.clip(p + step, lower, upper)
        f_new, _ = _objective(q, centers, bases, *args)
        if not f_new <= f + 1e-12 * abs(f):
            break
        tau, ab, centers, _ = _unpack(q, centers, bases)
    return tau, ab, centers


def refine_ml(init_axes, voxel: VoxelSignal, scheme: GradientScheme, I=None,
              init_tau=None, init_alpha=None, alpha_tilde=None, grad_tol=1e-6,
              max_iter=500, max_recenter=20) -> RefineResult:
    """Maximize the Rician likelihood of the I-component model.

    Axes are optimized in gnomonic charts centred on the current estimates;
    charts are re-centred until the in-chart displacement vanishes.  ``tau``
    is boxed to (1e-4, 1 - 1e-4) and ``alpha`` to [0, 20 / b].

    ``grad_tol`` applies to the projected gradient of the log-likelihood in
    the (tau, b * alpha, tangent) coordinates.  Non-convergence is reported
    through ``converged`` rather than raised.
    """
    axes = as_array(init_axes)
    I = len(axes) if I is None else I
    if I < 1 or len(axes) != I:
        raise InputError("need I >= 1 initial axes")
    b = scheme.b_value
    at = 2.0 / b if alpha_tilde is None else alpha_tilde
    tau = np.full(I, 1.0 / I) if init_tau is None else np.asarray(init_tau, float)
    ab = np.full(I, b * at) if init_alpha is None else b * np.asarray(init_alpha, float)
    tau = np.clip(tau, TAU_MIN, TAU_MAX)
    ab = np.clip(ab, 0.0, ALPHA_B_MAX)
    x = np.asarray(voxel.intensities, dtype=float)
    U = scheme.directions
    lower = np.tile([TAU_MIN, 0.0, -1.0, -1.0], I)
    upper = np.tile([TAU_MAX, ALPHA_B_MAX, 1.0, 1.0], I)

    centers = axes.copy()
    total_iter = 0
    gnorm = np.inf
    p = None
    for _ in range(max_recenter):
        bases = _charts(centers)
        p0 = np.column_stack([tau, ab, np.zeros((I, 2))]).ravel()
        res = optimize.minimize(
            _objective, p0, jac=True, method="L-BFGS-B",
            args=(centers, bases, U, x, voxel.s0, voxel.sigma),
            bounds=list(zip(lower, upper)),
            options={"maxiter": max(1, max_iter - total_iter), "ftol": 1e-15,
                     "gtol": grad_tol * 1e-3, "maxcor": 20},
        )
        total_iter += res.nit
        p = res.x
        tau, ab, M, _ = _unpack(p, centers, bases)
        shift = np.abs(p.reshape(-1, 4)[:, 2:]).max()
        centers = M
        if shift < 1e-9 or total_iter >= max_iter:
            break
    args = (U, x, voxel.s0, voxel.sigma)
    tau, ab, centers = _newton_polish(tau, ab, centers, args, lower, upper)
    bases = _charts(centers)
    p = np.column_stack([tau, ab, np.zeros((I, 2))]).ravel()
    f, g = _objective(p, centers, bases, *args)
    gnorm = _projected_grad_norm(p, g, lower, upper)
    loglik = -f + _data_constant(x[x > 0], voxel.sigma)
    model = VoxelModel(tuple(TensorComponent(float(t), float(a / b), Axis(m))
                             for t, a, m in zip(tau, ab, centers)))
    return RefineResult(model, loglik, gnorm < grad_tol, gnorm, total_iter)


def _merge_close(model: VoxelModel, merge_angle: float):
    """Merge components whose axes lie within ``merge_angle`` radians."""
    tau, alpha, axes = model.arrays()
    groups = [[j] for j in range(len(tau))]
    changed = True
    while changed and len(groups) > 1:
        changed = False
        reps = []
        for g in groups:
            w = tau[g]
            try:
                reps.append(karcher_mean_array(axes[g], w)[0])
            except KarcherConvergenceError as err:
                reps.append(err.last)
        D = distance_matrix(np.array(reps))
        np.fill_diagonal(D, np.inf)
        i, j = np.unravel_index(np.argmin(D), D.shape)
        if D[i, j] < merge_angle:
            groups[i] = groups[i] + groups[j]
            del groups[j]
            changed = True
    if len(groups) == len(tau):
        return None
    new_tau, new_alpha, new_axes = [], [], []
    for g in groups:
        w = tau[g]
        new_tau.append(min(w.sum(), TAU_MAX))
        new_alpha.append(float(w @ alpha[g] / w.sum()))
        try:
            new_axes.append(karcher_mean_array(axes[g], w)[0])
        except KarcherConvergenceError as err:
            new_axes.append(err.last)
    return np.array(new_tau), np.array(new_alpha), np.array(new_axes)


# ---------------------------------------------------------------------------
# isotropic model and BIC
# ---------------------------------------------------------------------------

def fit_isotropic(voxel: VoxelSignal, scheme: GradientScheme | None = None):
    """ML estimate of ``tau`` in the constant model ``S = S0 * tau``.

    Returns ``(tau_hat, loglik)`` with ``tau_hat`` clamped to (1e-4, 1 - 1e-4).
    """
    x = np.asarray(voxel.intensities, dtype=float)
    s0, sigma = voxel.s0, voxel.sigma
    if s0 <= 0:
        raise InputError("isotropic fit needs s0 > 0")
    s2 = sigma * sigma

    def negll(t):
        ll, _ = _loglik_terms(x, s0 * t, sigma)
        return -ll.sum()

    res = optimize.minimize_scalar(negll, bounds=(TAU_MIN, TAU_MAX), method="bounded",
                                   options={"xatol": 1e-12})
    t = float(res.x)
    # Newton polish on the score
    for _ in range(20):
        nu = s0 * t
        z = x * nu / s2
        r = special.i1e(z) / special.i0e(z)
        score = s0 * np.sum(-nu + x * r) / s2
        with np.errstate(divide="ignore", invalid="ignore"):
            dr = np.where(z > 1e-8, 1.0 - r / z - r * r, 0.5)
        hess = s0 * s0 * np.sum(-1.0 + (x * x / s2) * dr) / s2
        if hess >= 0:
            break
        step = -score / hess
        t_new = float(np.clip(t + step, TAU_MIN, TAU_MAX))
        if abs(t_new - t) < 1e-15:
            t = t_new
            break
        t = t_new
    return t, _full_loglik(x, np.full(len(x), s0 * t), sigma)


def bic(loglik: float, I: int, m: int) -> float:
    """BIC of an I-component model: four free parameters per component."""
    return -2.0 * loglik + 4 * I * np.log(m)


def bic_isotropic(loglik: float, m: int) -> float:
    return -2.0 * loglik + np.log(m)


# ---------------------------------------------------------------------------
# per-voxel driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitRecord:
    I: int
    model: VoxelModel
    loglik: float
    bic: float
    converged: bool = True
    merged_from: int | None = None


@dataclass(frozen=True)
class FitTrace:
    records: tuple = ()
    isotropic: FitRecord | None = None
    j_hat: int = 0
    screened: bool = False
    flags: tuple = ()

    @property
    def chosen(self) -> FitRecord:
        candidates = ([self.isotropic] if self.isotropic else []) + list(self.records)
        return min(candidates, key=lambda r: r.bic)


@dataclass(frozen=True)
class VoxelEstimate:
    index: tuple
    center: tuple
    model: VoxelModel
    trace: FitTrace
    fa_screen: float

    @property
    def J(self) -> int:
        return self.model.J

    @property
    def axes(self) -> list:
        return self.model.axes


def estimate_voxel(voxel: VoxelSignal, scheme: GradientScheme,
                   config: FitConfig = FitConfig(), grid=None) -> VoxelEstimate:
    """Fit one voxel and select the number of fiber directions by BIC."""
    m = scheme.m
    flags = []
    fa = single_tensor_regression_fit(voxel, scheme).fa
    tau0, ll0 = fit_isotropic(voxel, scheme)
    iso = FitRecord(0, VoxelModel((), isotropic_tau=tau0), ll0, bic_isotropic(ll0, m))
    if fa < config.fa_threshold:
        trace = FitTrace((), iso, 0, screened=True)
        return VoxelEstimate(voxel.index, voxel.center, iso.model, trace, fa)

    G = _grid_array(config.grid_level) if grid is None else as_array(grid)
    at = config.alpha_grid(scheme.b_value)
    try:
        gfit = approx_grid_fit(voxel, scheme, G, at, config.support_rel,
                               config.em_tol, config.em_max_iter)
    except ConvergenceError as err:
        gfit = err.trace
        flags.append("grid_em_not_converged")

    records = []
    merge = np.deg2rad(config.merge_angle_deg)
    for I in range(1, min(config.i_max, len(gfit.selected)) + 1):
        init = cluster_selected(gfit, I)
        res = refine_ml(init, voxel, scheme, I, alpha_tilde=at,
                        grad_tol=config.grad_tol, max_iter=config.max_iter)
        merged_from = None
        if I > 1:
            merged = _merge_close(res.model, merge)
            if merged is not None:
                t, a, ax = merged
                res = refine_ml(ax, voxel, scheme, len(t), init_tau=t, init_alpha=a,
                                grad_tol=config.grad_tol, max_iter=config.max_iter)
                merged_from = I
        if not res.converged:
            flags.append(f"refine_I{I}_not_converged")
        J = res.model.J
        records.append(FitRecord(J, res.model, res.loglik, bic(res.loglik, J, m),
                                 res.converged, merged_from))
    best = min([iso] + records, key=lambda r: r.bic)
    trace = FitTrace(tuple(records), iso, best.I, False, tuple(flags))
    return VoxelEstimate(voxel.index, voxel.center, best.model, trace, fa)


def _fit_one(args):
    voxel, scheme, config = args
    return estimate_voxel(voxel, scheme, config)


def fit_volume(voxels, scheme: GradientScheme, config: FitConfig = FitConfig(),
               workers: int = 1, progress=None) -> list[VoxelEstimate]:
    """Fit every voxel; results are ordered by voxel index."""
    voxels = list(voxels)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(_fit_one, [(v, scheme, config) for v in voxels],
                                chunksize=16))
    else:
        out = []
        for i, v in enumerate(voxels):
            out.append(estimate_voxel(v, scheme, config))
            if progress is not None:
                progress(i + 1, len(voxels))
    return sorted(out, key=lambda e: e.index)


# ---------------------------------------------------------------------------
# S0 and sigma from b0 replicates
# ---------------------------------------------------------------------------

def estimate_s0_sigma(b0, tol=1e-13, max_iter=20000):
    """Two-parameter Rician ML of (S0, sigma) from repeated b0 measurements.

    ``b0`` has replicates on its last axis; leading axes index voxels.  Solved
    by the EM fixed point ``nu = mean(x * I1/I0(x nu / s^2))``,
    ``s^2 = (mean(x^2) - nu^2) / 2``, run jointly over all voxels.
    """
    x = np.asarray(b0, dtype=float)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise InputError("sigma is not identifiable from fewer than 2 replicates")
    lead = x.shape[:-1]
    x = x.reshape(-1, x.shape[-1])
    mean_sq = np.mean(x * x, axis=1)
    var = np.var(x, axis=1)
    degenerate = var <= 1e-14 * np.maximum(mean_sq, 1e-300)
    s2 = np.where(degenerate, 1.0, np.maximum(var, 1e-12 * mean_sq))
    nu = np.sqrt(np.maximum(mean_sq - 2 * s2, 0.0))
    nu = np.where(nu > 0, nu, np.mean(x, axis=1) * 0.5)
    active = ~degenerate
    for _ in range(max_iter):
        if not np.any(active):
            break
        xa, nua, s2a = x[active], nu[active], s2[active]
        z = xa * nua[:, None] / s2a[:, None]
        r = special.i1e(z) / special.i0e(z)
        nu_new = np.mean(xa * r, axis=1)
        s2_new = np.maximum((mean_sq[active] - nu_new**2) / 2.0, 1e-300)
        change = np.maximum(np.abs(nu_new - nua) / np.maximum(nua, 1e-300),
                            np.abs(s2_new - s2a) / s2a)
        nu[active], s2[active] = nu_new, s2_new
        idx = np.flatnonzero(active)
        active[idx[change < tol]] = False
    if np.any(active):
        log.warning("Rician EM for S0/sigma unconverged in %d voxels", int(active.sum()))
    nu = np.where(degenerate, np.mean(x, axis=1), nu)
    sigma = np.where(degenerate, 0.0, np.sqrt(s2))
    return nu.reshape(lead), sigma.reshape(lead)


def pool_sigma(sigma_field, mask=None, n_replicates=None) -> float:
    """Median of per-voxel sigma estimates over ``mask``.

    With ``n_replicates`` given, the median is rescaled by
    ``sqrt(n / median(chi2_{n-1}))``, undoing the small-sample downward bias
    of the per-voxel ML estimate (exact in the high-SNR Gaussian limit).
    """
    s = np.asarray(sigma_field, dtype=float)
    if mask is not None:
        s = s[np.asarray(mask, dtype=bool)]
    s = s[np.isfinite(s) & (s > 0)]
    if s.size == 0:
        raise InputError("no positive sigma estimates inside the pooling region")
    med = float(np.median(s))
    if n_replicates is None:
        return med
    from scipy import stats
    n = int(n_replicates)
    return med * float(np.sqrt(n / stats.chi2.median(n - 1)))
