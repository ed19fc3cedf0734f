"""Forward signal models, Rician noise and the voxel log-likelihood.

The fitted model is the identifiable multi-tensor form

    S(u) = S0 * sum_j tau_j * exp(-b * alpha_j * (u . m_j)^2)

while phantoms are generated from axially symmetric tensors with explicit
weights and eigenvalues.  The two agree under ``tau = p * exp(-b * lambda2)``
and ``alpha = lambda1 - lambda2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special

from .errors import DesignError, GradientNormError, InputError
from .geometry import Axis, tangent_basis

__all__ = [
    "GradientScheme",
    "TensorComponent",
    "VoxelModel",
    "VoxelSignal",
    "GenerativeTensor",
    "TensorFit",
    "fibonacci_scheme",
    "noiseless_signal",
    "generative_signal",
    "to_identifiable",
    "log_bessel_i0",
    "bessel_ratio",
    "rician_logpdf",
    "rician_sample",
    "rician_mean",
    "log_likelihood",
    "log_likelihood_grad",
    "fractional_anisotropy",
    "single_tensor_regression_fit",
]


@dataclass(frozen=True)
class GradientScheme:
    directions: np.ndarray
    b_value: float
    n_b0: int = 0

    def __post_init__(self):
        d = np.array(self.directions, dtype=float).reshape(-1, 3)
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6 + 1e-12):
            raise GradientNormError("gradient directions must be unit vectors")
        if not self.b_value > 0:
            raise InputError("b_value must be positive")
        d = d / norms[:, None]
        d.flags.writeable = False
        object.__setattr__(self, "directions", d)

    @property
    def m(self) -> int:
        return len(self.directions)

    def permuted(self, perm) -> "GradientScheme":
        return GradientScheme(self.directions[np.asarray(perm)], self.b_value, self.n_b0)

    def rotated(self, R) -> "GradientScheme":
        return GradientScheme(self.directions @ np.asarray(R).T, self.b_value, self.n_b0)


def fibonacci_scheme(m: int = 41, b_value: float = 1000.0, n_b0: int = 5) -> GradientScheme:
    """Deterministic, near-uniform gradient set on the upper hemisphere."""
    k = np.arange(m) + 0.5
    z = 1.0 - k / m
    phi = np.pi * (1.0 + 5.0**0.5) * k
    r = np.sqrt(1.0 - z * z)
    dirs = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    return GradientScheme(dirs, b_value, n_b0)


@dataclass(frozen=True)
class TensorComponent:
    tau: float
    alpha: float
    axis: Axis

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise InputError(f"tau must lie in (0, 1), got {self.tau}")
        if self.alpha < 0:
            raise InputError(f"alpha must be nonnegative, got {self.alpha}")
        if not isinstance(self.axis, Axis):
            object.__setattr__(self, "axis", Axis(self.axis))


@dataclass(frozen=True)
class VoxelModel:
    """Fitted voxel model; ``components`` empty means the isotropic model."""

    components: tuple = ()
    isotropic_tau: float | None = None

    def __post_init__(self):
        comps = tuple(sorted(self.components, key=lambda c: -c.tau))
        if len(comps) > 4:
            raise InputError("at most 4 tensor components are supported")
        object.__setattr__(self, "components", comps)
        if not comps and self.isotropic_tau is None:
            raise InputError("isotropic model needs isotropic_tau")

    @property
    def J(self) -> int:
        return len(self.components)

    @property
    def axes(self) -> list:
        return [c.axis for c in self.components]

    @classmethod
    def from_arrays(cls, tau, alpha, axes):
        return cls(tuple(TensorComponent(float(t), float(a), Axis(m))
                         for t, a, m in zip(tau, alpha, axes)))

    def arrays(self):
        tau = np.array([c.tau for c in self.components])
        alpha = np.array([c.alpha for c in self.components])
        axes = np.array([c.axis.v for c in self.components]).reshape(-1, 3)
        return tau, alpha, axes


@dataclass(frozen=True)
class VoxelSignal:
    intensities: np.ndarray
    s0: float
    sigma: float
    index: tuple = (0, 0, 0)
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        x = np.array(self.intensities, dtype=float)
        if np.any(x < 0):
            raise InputError("intensities must be nonnegative")
        if not self.sigma > 0:
            raise InputError("sigma must be positive")
        if self.s0 < 0:
            raise InputError("s0 must be nonnegative")
        x.flags.writeable = False
        object.__setattr__(self, "intensities", x)
        object.__setattr__(self, "index", tuple(int(i) for i in self.index))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def replace(self, **changes) -> "VoxelSignal":
        fields = dict(intensities=self.intensities, s0=self.s0, sigma=self.sigma,
                      index=self.index, center=self.center)
        fields.update(changes)
        return VoxelSignal(**fields)


@dataclass(frozen=True)
class GenerativeTensor:
    """Axially symmetric tensor with eigenvalues (l1, l2, l2) and a weight."""

    l1: float
    l2: float
    axis: Axis
    weight: float = 1.0

    def __post_init__(self):
        if not (self.l1 >= self.l2 > 0):
            raise InputError("need l1 >= l2 > 0")
        if not 0 < self.weight <= 1:
            raise InputError("weight must lie in (0, 1]")
        if not isinstance(self.axis, Axis):
            object.__setattr__(self, "axis", Axis(self.axis))

    @property
    def eigenvalues(self):
        return (self.l1, self.l2, self.l2)

    def tensor(self) -> np.ndarray:
        m = self.axis.v
        return (self.l1 - self.l2) * np.outer(m, m) + self.l2 * np.eye(3)


def _select(values, u_index):
    return values if u_index is None else float(values[u_index])


def noiseless_signal(model: VoxelModel, s0: float, scheme: GradientScheme, u_index=None):
    """Noiseless intensity of the identifiable model.

    Returns the full vector over the gradient set, or one value when
    ``u_index`` is given.
    """
    if model.J == 0:
        values = np.full(scheme.m, s0 * model.isotropic_tau)
        return _select(values, u_index)
    tau, alpha, axes = model.arrays()
    proj = scheme.directions @ axes.T
    values = s0 * np.exp(-scheme.b_value * alpha * proj**2) @ tau
    return _select(values, u_index)


def generative_signal(tensors, s0: float, scheme: GradientScheme, u_index=None):
    """Noiseless intensity of a weighted mixture of axially symmetric tensors."""
    weights = np.array([t.weight for t in tensors])
    if abs(weights.sum() - 1.0) > 1e-9:
        raise InputError(f"tensor weights must sum to 1, got {weights.sum()}")
    U = scheme.directions
    total = np.zeros(scheme.m)
    for t in tensors:
        quad = np.einsum("ij,jk,ik->i", U, t.tensor(), U)
        total += t.weight * np.exp(-scheme.b_value * quad)
    return _select(s0 * total, u_index)


def to_identifiable(tensors, b_value: float) -> VoxelModel:
    """Map generative tensors to the identifiable (tau, alpha, axis) triples."""
    comps = [TensorComponent(t.weight * np.exp(-b_value * t.l2), t.l1 - t.l2, t.axis)
             for t in tensors]
    return VoxelModel(tuple(comps))


def log_bessel_i0(x):
    """log I0(x) for x >= 0, without overflow for large arguments."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InputError("log_bessel_i0 requires x >= 0")
    out = np.empty_like(x)
    small = x < 2.0
    if np.any(small):
        q = (x[small] / 2.0) ** 2
        term = np.ones_like(q)
        acc = np.zeros_like(q)
        for k in range(1, 25):
            term = term * q / (k * k)
            acc += term
        out[small] = np.log1p(acc)
    big = ~small
    if np.any(big):
        xb = x[big]
        out[big] = np.log(special.i0e(xb)) + xb
    return out if out.ndim else float(out)


def bessel_ratio(x):
    """I1(x) / I0(x), evaluated through the exponentially scaled functions."""
    x = np.asarray(x, dtype=float)
    out = special.i1e(x) / special.i0e(x)
    return out if out.ndim else float(out)


def rician_logpdf(x, nu, sigma):
    """Log density of Rician(nu, sigma) at x."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    s2 = sigma * sigma
    z = x * nu / s2
    with np.errstate(divide="ignore", invalid="ignore"):
        # -(x^2 + nu^2)/2s2 + log I0(z) rewritten around the scaled Bessel
        out = (np.log(x / s2) - (x - nu) ** 2 / (2 * s2)
               + np.log(special.i0e(np.abs(z))))
    out = np.where(x < 0, -np.inf, out)
    return out if out.ndim else float(out)


def rician_sample(nu, sigma, rng, size=None):
    """Magnitude of a complex Gaussian with mean ``nu`` and per-part sd ``sigma``."""
    nu = np.asarray(nu, dtype=float)
    shape = np.broadcast_shapes(nu.shape, () if size is None else tuple(np.atleast_1d(size)))
    z = rng.standard_normal((2,) + shape)
    out = np.hypot(nu + sigma * z[0], sigma * z[1])
    return out if out.ndim else float(out)


def rician_mean(nu, sigma):
    """Mean of Rician(nu, sigma) via the Laguerre function L_{1/2}."""
    t = nu * nu / (2 * sigma * sigma)
    # L_{1/2}(-t) = e^{-t/2} [(1 + t) I0(t/2) + t I1(t/2)], scaled form
    lag = (1 + t) * special.i0e(t / 2) + t * special.i1e(t / 2)
    return sigma * np.sqrt(np.pi / 2) * lag


def _loglik_terms(x, nu, sigma):
    """Parameter-dependent part of the Rician log-likelihood and its nu-score."""
    s2 = sigma * sigma
    z = x * nu / s2
    ll = -(x - nu) ** 2 / (2 * s2) + np.log(special.i0e(z))
    # d/dnu of [-(x^2 + nu^2)/2s2 + log I0(z)]
    score = (-nu + x * special.i1e(z) / special.i0e(z)) / s2
    return ll, score


def _data_constant(x, sigma):
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(x / sigma**2)))


def log_likelihood(model: VoxelModel, voxel: VoxelSignal, scheme: GradientScheme) -> float:
    """Rician log-likelihood of a voxel model summed over the gradient set."""
    nu = noiseless_signal(model, voxel.s0, scheme)
    return float(np.sum(rician_logpdf(voxel.intensities, nu, voxel.sigma)))


def log_likelihood_grad(model: VoxelModel, voxel: VoxelSignal, scheme: GradientScheme):
    """Gradient of :func:`log_likelihood` in per-component local coordinates.

    Returns
    -------
    grad : ndarray, shape (J, 4)
        Columns are d/dtau, d/dalpha and the two tangent-plane derivatives
        for the axis, in the basis given by :func:`geometry.tangent_basis`.
    """
    if model.J < 1:
        raise InputError("gradient needs at least one tensor component")
    tau, alpha, axes = model.arrays()
    U, b, s0 = scheme.directions, scheme.b_value, voxel.s0
    proj = U @ axes.T
    e = np.exp(-b * alpha * proj**2)
    nu = s0 * e @ tau
    _, score = _loglik_terms(voxel.intensities, nu, voxel.sigma)
    grad = np.empty((model.J, 4))
    grad[:, 0] = s0 * score @ e
    grad[:, 1] = -s0 * b * tau * (score @ (e * proj**2))
    for j in range(model.J):
        t1, t2 = tangent_basis(axes[j])
        dm = -2 * s0 * b * tau[j] * alpha[j] * (score * e[:, j] * proj[:, j]) @ U
        grad[j, 2] = dm @ t1
        grad[j, 3] = dm @ t2
    return grad


def fractional_anisotropy(eigs) -> float:
    """Fractional anisotropy of a tensor from its three eigenvalues."""
    l1, l2, l3 = (float(v) for v in eigs)
    denom = 2.0 * (l1 * l1 + l2 * l2 + l3 * l3)
    if denom == 0:
        raise InputError("fractional anisotropy is undefined for a zero tensor")
    return float(np.sqrt(((l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2) / denom))


class TensorFit(NamedTuple):
    tensor: np.ndarray
    eigenvalues: np.ndarray
    axis: Axis
    fa: float


def _tensor_design(U, b):
    x, y, z = U.T
    return -b * np.column_stack([x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z])


def single_tensor_regression_fit(voxel: VoxelSignal, scheme: GradientScheme) -> TensorFit:
    """Log-linear least-squares single tensor fit.

    Intensities are clamped at ``1e-6 * S0`` before taking logs.
    """
    A = _tensor_design(scheme.directions, scheme.b_value)
    if np.linalg.matrix_rank(A / scheme.b_value, tol=1e-10) < 6:
        raise DesignError("gradient set does not determine a 3x3 tensor")
    s0 = voxel.s0
    if s0 <= 0:
        raise InputError("single tensor fit needs s0 > 0")
    y = np.log(np.maximum(voxel.intensities, 1e-6 * s0) / s0)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    dxx, dyy, dzz, dxy, dxz, dyz = coef
    D = np.array([[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]])
    vals, vecs = np.linalg.eigh(D)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    clipped = np.clip(vals, 0.0, None)
    fa = fractional_anisotropy(clipped) if np.any(clipped > 0) else 0.0
    return TensorFit(D, vals, Axis(vecs[:, 0]), fa)
