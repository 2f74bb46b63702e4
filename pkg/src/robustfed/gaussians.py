"""Natural-parameter algebra for (possibly unnormalised) Gaussian factors.

A factor is  exp{-1/2 th' L th + e' th + c}  with symmetric L ("precision"),
vector e ("shift") and scalar c ("log_offset").  Products and quotients of
factors are additions and subtractions of (L, e, c), which makes this the
working currency for priors, posteriors, sites and cavities alike.

L is allowed to be indefinite: quotients of proper Gaussians routinely are.
Positive-definiteness is asserted only when a factor is actually used as a
probability distribution (normalising, sampling, log-density).  Mean-field
factors store L as a length-d vector instead of a d x d matrix.

Two factors are considered the same distribution iff (L, e) agree; the
offset c is carried through arithmetic but ignored by comparisons, since it
cancels in every normalised quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite

# Relative eigenvalue threshold below which a precision does not count as PD.
PD_RTOL = 1e-12

__all__ = [
    "NatGaussian",
    "MomentGaussian",
    "multiply",
    "divide",
    "log_partition",
    "to_moment",
    "from_moment",
    "log_pdf",
    "sample",
    "unit_factor",
    "standard_normal",
    "natural_distance",
]


def _as_matrix(precision: np.ndarray) -> np.ndarray:
    """Dense symmetric view of a (possibly diagonal) precision."""
    if precision.ndim == 1:
        return np.diag(precision)
    return precision


@dataclass(frozen=True)
class NatGaussian:
    """Gaussian factor exp{-1/2 th' L th + e' th + c} in natural parameters.

    ``precision`` is either a (d, d) symmetric matrix or, in diagonal
    (mean-field) storage, a length-d vector of diagonal entries.
    """

    precision: np.ndarray
    shift: np.ndarray
    log_offset: float = 0.0

    def __post_init__(self):
        prec = np.asarray(self.precision, dtype=np.float64)
        shift = np.asarray(self.shift, dtype=np.float64)
        if shift.ndim != 1:
            raise ValueError("shift must be a vector")
        d = shift.shape[0]
        if prec.ndim == 1:
            if prec.shape[0] != d:
                raise DimensionMismatch("diagonal precision length != shift length")
        elif prec.ndim == 2:
            if prec.shape != (d, d):
                raise DimensionMismatch("precision shape incompatible with shift")
            prec = 0.5 * (prec + prec.T)  # enforce exact symmetry
        else:
            raise ValueError("precision must be a vector or a square matrix")
        prec.flags.writeable = False
        shift.flags.writeable = False
        object.__setattr__(self, "precision", prec)
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "log_offset", float(self.log_offset))

    @property
    def dim(self) -> int:
        return self.shift.shape[0]

    @property
    def diagonal(self) -> bool:
        return self.precision.ndim == 1

    @property
    def precision_matrix(self) -> np.ndarray:
        return _as_matrix(self.precision)

    def is_proper(self, rtol: float = PD_RTOL) -> bool:
        """True iff the precision is strictly PD (smallest eig > rtol * largest)."""
        if self.diagonal:
            lo, hi = float(self.precision.min()), float(self.precision.max())
        else:
            eigs = np.linalg.eigvalsh(self.precision)
            lo, hi = float(eigs[0]), float(eigs[-1])
        return hi > 0.0 and lo > rtol * hi

    def require_proper(self, what: str = "operation") -> "NatGaussian":
        if not self.is_proper():
            raise NotPositiveDefinite(f"{what} requires a PD precision")
        return self

    def densified(self) -> "NatGaussian":
        if not self.diagonal:
            return self
        return NatGaussian(np.diag(self.precision), self.shift, self.log_offset)

    @property
    def mean(self) -> np.ndarray:
        return to_moment(self).mean

    def same_distribution(self, other: "NatGaussian", atol: float = 0.0) -> bool:
        """Equality of (L, e) up to atol; log_offset deliberately ignored."""
        if self.dim != other.dim:
            return False
        dp = _as_matrix(self.precision) - _as_matrix(other.precision)
        ds = self.shift - other.shift
        return bool(np.abs(dp).max() <= atol and np.abs(ds).max() <= atol)

    def __mul__(self, other: "NatGaussian") -> "NatGaussian":
        return multiply(self, other)

    def __truediv__(self, other: "NatGaussian") -> "NatGaussian":
        return divide(self, other)


@dataclass(frozen=True)
class MomentGaussian:
    """Gaussian in moment parameters: mean mu and covariance Sigma.

    Covariance is (d, d) PD, or a length-d vector of variances in diagonal
    storage.  Mutually inverse with NatGaussian via L = Sigma^-1, e = L mu.
    """

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.shape[0]
        if cov.ndim == 1:
            if cov.shape[0] != d:
                raise DimensionMismatch("diagonal covariance length != mean length")
        elif cov.ndim == 2:
            if cov.shape != (d, d):
                raise DimensionMismatch("covariance shape incompatible with mean")
            cov = 0.5 * (cov + cov.T)
        else:
            raise ValueError("covariance must be a vector or a square matrix")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def diagonal(self) -> bool:
        return self.covariance.ndim == 1

    @property
    def covariance_matrix(self) -> np.ndarray:
        return _as_matrix(self.covariance)

    @property
    def std(self) -> np.ndarray:
        if self.diagonal:
            return np.sqrt(self.covariance)
        return np.sqrt(np.diag(self.covariance))


def unit_factor(dim: int, diagonal: bool = False) -> NatGaussian:
    """The multiplicative identity: L = 0, e = 0, c = 0."""
    prec = np.zeros(dim) if diagonal else np.zeros((dim, dim))
    return NatGaussian(prec, np.zeros(dim))


def standard_normal(dim: int = 1, diagonal: bool = False) -> NatGaussian:
    prec = np.ones(dim) if diagonal else np.eye(dim)
    return NatGaussian(prec, np.zeros(dim))


def _check_dims(a: NatGaussian, b: NatGaussian):
    if a.dim != b.dim:
        raise DimensionMismatch(f"factor dims differ: {a.dim} vs {b.dim}")


def _combine(a: NatGaussian, b: NatGaussian, sign: float) -> NatGaussian:
    _check_dims(a, b)
    if a.diagonal == b.diagonal:
        prec = a.precision + sign * b.precision
    else:
        prec = _as_matrix(a.precision) + sign * _as_matrix(b.precision)
    return NatGaussian(prec, a.shift + sign * b.shift, a.log_offset + sign * b.log_offset)


def multiply(a: NatGaussian, b: NatGaussian) -> NatGaussian:
    """Pointwise product of factors: (La+Lb, ea+eb, ca+cb).  No PD required."""
    return _combine(a, b, 1.0)


def divide(num: NatGaussian, den: NatGaussian) -> NatGaussian:
    """Pointwise quotient; the result may be improper and that is fine."""
    return _combine(num, den, -1.0)


def log_partition(q: NatGaussian) -> float:
    """log of the integral of exp{-1/2 th' L th + e' th} over R^d.

    Equals 1/2 e' L^-1 e - 1/2 log det(L / 2 pi).  The offset c is not
    included.  Raises if L is not PD.
    """
    q.require_proper("log_partition")
    d = q.dim
    if q.diagonal:
        quad = float(np.sum(q.shift**2 / q.precision))
        logdet = float(np.sum(np.log(q.precision)))
    else:
        c, lower = cho_factor(q.precision, lower=True)
        half = solve_triangular(c, q.shift, lower=True)
        quad = float(half @ half)
        logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    return 0.5 * quad - 0.5 * logdet + 0.5 * d * np.log(2.0 * np.pi)


def to_moment(q: NatGaussian) -> MomentGaussian:
    """Moment parameters (mu, Sigma) = (L^-1 e, L^-1) of a proper factor."""
    q.require_proper("to_moment")
    if q.diagonal:
        var = 1.0 / q.precision
        return MomentGaussian(var * q.shift, var)
    c = cho_factor(q.precision, lower=True)
    mean = cho_solve(c, q.shift)
    cov = cho_solve(c, np.eye(q.dim))
    return MomentGaussian(mean, cov)


def from_moment(m: MomentGaussian) -> NatGaussian:
    """Natural parameters (Sigma^-1, Sigma^-1 mu) of a moment Gaussian."""
    if m.diagonal:
        if np.any(m.covariance <= 0):
            raise NotPositiveDefinite("covariance must be PD")
        prec = 1.0 / m.covariance
        return NatGaussian(prec, prec * m.mean)
    eigs = np.linalg.eigvalsh(m.covariance)
    if eigs[-1] <= 0 or eigs[0] <= PD_RTOL * eigs[-1]:
        raise NotPositiveDefinite("covariance must be PD")
    c = cho_factor(m.covariance, lower=True)
    prec = cho_solve(c, np.eye(m.dim))
    return NatGaussian(prec, cho_solve(c, m.mean))


def log_pdf(q: NatGaussian, theta: np.ndarray) -> np.ndarray | float:
    """Normalised log-density of the proper factor q at theta.

    theta may be a single point (d,) or a batch (n, d); scalars are accepted
    for d = 1.
    """
    logz = log_partition(q)
    th = np.asarray(theta, dtype=np.float64)
    scalar_in = th.ndim == 0
    if th.ndim <= 1 and q.dim == 1:
        th = th.reshape(-1, 1)
        squeeze = True
    elif th.ndim == 1:
        if th.shape[0] != q.dim:
            raise DimensionMismatch("point dimension mismatch")
        th = th.reshape(1, -1)
        squeeze = True
    else:
        if th.shape[1] != q.dim:
            raise DimensionMismatch("point dimension mismatch")
        squeeze = False
    if q.diagonal:
        quad = np.einsum("nd,d,nd->n", th, q.precision, th)
    else:
        quad = np.einsum("nd,de,ne->n", th, q.precision, th)
    out = -0.5 * quad + th @ q.shift - logz
    if scalar_in:
        return float(out[0])
    return out[0] if (squeeze and out.shape[0] == 1) else out


def sample(q: NatGaussian, rng_seed: int, n: int) -> np.ndarray:
    """n deterministic draws from the proper factor q, shape (n, d)."""
    q.require_proper("sample")
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((n, q.dim))
    m = to_moment(q)
    if q.diagonal:
        return m.mean + z * np.sqrt(1.0 / q.precision)
    c = np.linalg.cholesky(q.precision_matrix)
    # th = mu + C^-T z  has covariance (C C')^-1 = L^-1
    return m.mean + solve_triangular(c.T, z.T, lower=False).T


def natural_distance(a: NatGaussian, b: NatGaussian) -> float:
    """Sup-norm distance between (L, e) pairs; offset ignored."""
    _check_dims(a, b)
    dp = np.abs(_as_matrix(a.precision) - _as_matrix(b.precision)).max() if a.dim else 0.0
    ds = np.abs(a.shift - b.shift).max() if a.dim else 0.0
    return float(max(dp, ds))
