"""Closed-form divergences between Gaussian factors.

Available kinds and their definitions for densities q, p:

  kl            KL(q:p) = E_q[log q/p]
  weighted_kl   KL(q:p) / w,  w > 0
  reverse_kl    KL(p:q)
  alpha_renyi   (1/(a(a-1))) log E_p[(q/p)^a],  a not in {0, 1}
  fisher_rao    geodesic length under the information metric; univariate only

The alpha-Renyi closed form between Gaussians follows from
log E_p[(q/p)^a] = A(a Lq + (1-a) Lp, a eq + (1-a) ep) - a A(q) - (1-a) A(p)
with A the log-partition, evaluated here in an algebraically cancelled form
that stays accurate when the precisions differ by many orders of magnitude.
It is valid only when the blended precision a Lq + (1-a) Lp is PD, which
fails for sufficiently extreme a; that failure is reported as
AlphaBlendNotPD so callers can fall back to quadrature.

The limits a -> 1 and a -> 0 recover KL(q:p) and KL(p:q); they are offered
as the separate kinds ``kl`` and ``reverse_kl``.

The univariate Fisher-Rao distance is sqrt(2) log((1+D)/(1-D)) with

  D = sqrt( ((mu_p-mu_q)^2/2 + (sd_p-sd_q)^2)
          / ((mu_p-mu_q)^2/2 + (sd_p+sd_q)^2) ),

the hyperbolic-half-plane form of the geodesic length under the metric
diag(1/sd^2, 2/sd^2) in (mu, sd) coordinates.

``divergence_grad`` differentiates a divergence to the second argument's
variational coordinates (mu, log sd) for mean-field q; gradients are exact
and are cross-checked against central finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite, RobustFedError
from .gaussians import (
    MomentGaussian,
    NatGaussian,
    to_moment,
)

__all__ = [
    "DivergenceSpec",
    "AlphaBlendNotPD",
    "UnsupportedDivergence",
    "divergence",
    "fisher_rao_1d",
    "divergence_grad",
]

KINDS = ("kl", "weighted_kl", "reverse_kl", "alpha_renyi", "fisher_rao")


class AlphaBlendNotPD(RobustFedError, ValueError):
    """The alpha-blended precision a Lq + (1-a) Lp is not PD.

    Distinct from other failures so callers can fall back to quadrature.
    """


class UnsupportedDivergence(RobustFedError, ValueError):
    """Requested divergence has no implementation for these arguments."""


@dataclass(frozen=True)
class DivergenceSpec:
    """Closed description of a divergence family plus its hyperparameters."""

    kind: str
    w: float = 1.0
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown divergence kind {self.kind!r}")
        if self.kind == "weighted_kl" and not self.w > 0:
            raise ValueError("weighted_kl requires w > 0")
        if self.kind == "alpha_renyi":
            if self.alpha is None or self.alpha in (0.0, 1.0):
                raise ValueError("alpha_renyi requires alpha not in {0, 1}")

    @classmethod
    def kl(cls) -> "DivergenceSpec":
        return cls("kl")

    @classmethod
    def weighted_kl(cls, w: float) -> "DivergenceSpec":
        return cls("weighted_kl", w=w)

    @classmethod
    def reverse_kl(cls) -> "DivergenceSpec":
        return cls("reverse_kl")

    @classmethod
    def alpha_renyi(cls, alpha: float) -> "DivergenceSpec":
        return cls("alpha_renyi", alpha=alpha)

    @classmethod
    def fisher_rao(cls) -> "DivergenceSpec":
        return cls("fisher_rao")

    @property
    def kl_weight(self) -> float:
        """The w of the (weighted) KL family; 1 for plain KL."""
        if self.kind == "kl":
            return 1.0
        if self.kind == "weighted_kl":
            return self.w
        raise UnsupportedDivergence(f"{self.kind} is not a KL family member")


def _kl_gaussians(q: NatGaussian, p: NatGaussian) -> float:
    mq, mp = to_moment(q), to_moment(p)
    d = q.dim
    lp = p.precision if p.diagonal else p.precision_matrix
    delta = mq.mean - mp.mean
    if p.diagonal and q.diagonal:
        trace = float(np.sum(lp * mq.covariance))
        quad = float(np.sum(lp * delta**2))
        logdet_q = -float(np.sum(np.log(q.precision)))
        logdet_p = -float(np.sum(np.log(p.precision)))
    else:
        sq = mq.covariance_matrix
        lpm = p.precision_matrix
        trace = float(np.trace(lpm @ sq))
        quad = float(delta @ lpm @ delta)
        logdet_q = -float(np.linalg.slogdet(q.precision_matrix)[1])
        logdet_p = -float(np.linalg.slogdet(lpm)[1])
    return 0.5 * (trace + quad - d + logdet_p - logdet_q)


def _alpha_renyi(alpha: float, q: NatGaussian, p: NatGaussian) -> float:
    # log E_p[(q/p)^a] in the algebraically cancelled form
    #   -a(1-a)/2 u' Lq Lb^-1 Lp u - 1/2 [logdet Lb - a logdet Lq - (1-a) logdet Lp]
    # with u = mu_q - mu_p and Lb = a Lq + (1-a) Lp.  Evaluating the three
    # log-partitions separately instead cancels catastrophically whenever one
    # precision dwarfs another, which iterative fits do probe.
    if q.diagonal and p.diagonal:
        blend = alpha * q.precision + (1 - alpha) * p.precision
        if blend.min() <= 0 or blend.min() <= 1e-12 * blend.max():
            raise AlphaBlendNotPD(
                f"alpha-blended precision not PD for alpha={alpha}; fall back to quadrature"
            )
        u = q.shift / q.precision - p.shift / p.precision
        quad = float(np.sum(q.precision * p.precision / blend * u**2))
        logdet = float(
            np.sum(np.log(blend) - alpha * np.log(q.precision) - (1 - alpha) * np.log(p.precision))
        )
    else:
        lq, lp = q.precision_matrix, p.precision_matrix
        blend = alpha * lq + (1 - alpha) * lp
        eigs = np.linalg.eigvalsh(blend)
        if eigs[0] <= 0 or eigs[0] <= 1e-12 * eigs[-1]:
            raise AlphaBlendNotPD(
                f"alpha-blended precision not PD for alpha={alpha}; fall back to quadrature"
            )
        u = np.linalg.solve(lq, q.shift) - np.linalg.solve(lp, p.shift)
        quad = float(u @ lq @ np.linalg.solve(blend, lp @ u))
        logdet = float(
            np.linalg.slogdet(blend)[1]
            - alpha * np.linalg.slogdet(lq)[1]
            - (1 - alpha) * np.linalg.slogdet(lp)[1]
        )
    log_expect = -0.5 * alpha * (1 - alpha) * quad - 0.5 * logdet
    return log_expect / (alpha * (alpha - 1.0))


def divergence(spec: DivergenceSpec, q: NatGaussian, p: NatGaussian) -> float:
    """Evaluate spec's divergence D(q : p) between proper Gaussian factors."""
    if q.dim != p.dim:
        raise DimensionMismatch("divergence arguments must share a dimension")
    if not (q.is_proper() and p.is_proper()):
        raise NotPositiveDefinite("divergence requires proper factors")
    if spec.kind == "kl":
        return _kl_gaussians(q, p)
    if spec.kind == "weighted_kl":
        return _kl_gaussians(q, p) / spec.w
    if spec.kind == "reverse_kl":
        return _kl_gaussians(p, q)
    if spec.kind == "alpha_renyi":
        return _alpha_renyi(spec.alpha, q, p)
    if spec.kind == "fisher_rao":
        if q.dim != 1:
            raise UnsupportedDivergence("fisher_rao has closed form only for dim 1")
        return fisher_rao_1d(to_moment(q), to_moment(p))
    raise UnsupportedDivergence(spec.kind)


def fisher_rao_1d(q: MomentGaussian, p: MomentGaussian) -> float:
    """Fisher-Rao distance between univariate Gaussians (symmetric, >= 0)."""
    if q.dim != 1 or p.dim != 1:
        raise UnsupportedDivergence("fisher_rao_1d requires dim 1")
    mu_q, sd_q = float(q.mean[0]), float(q.std[0])
    mu_p, sd_p = float(p.mean[0]), float(p.std[0])
    num = 0.5 * (mu_p - mu_q) ** 2 + (sd_p - sd_q) ** 2
    den = 0.5 * (mu_p - mu_q) ** 2 + (sd_p + sd_q) ** 2
    if num == 0.0:
        return 0.0
    delta = np.sqrt(num / den)
    return float(np.sqrt(2.0) * np.log((1.0 + delta) / (1.0 - delta)))


# --- gradients in variational coordinates (mu, log sd), mean-field q ---


def _unpack_coords(mu, log_sd):
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    log_sd = np.asarray(log_sd, dtype=np.float64).reshape(-1)
    if mu.shape != log_sd.shape:
        raise DimensionMismatch("mu and log_sd must have the same length")
    sd = np.exp(log_sd)
    return mu, sd


def _kl_grad(mu, sd, p: NatGaussian):
    mp = to_moment(p)
    lp_diag = p.precision if p.diagonal else np.diag(p.precision_matrix)
    delta = mu - mp.mean
    if p.diagonal:
        g_mu = p.precision * delta
    else:
        g_mu = p.precision_matrix @ delta
    g_ls = lp_diag * sd**2 - 1.0
    return g_mu, g_ls


def _reverse_kl_grad(mu, sd, p: NatGaussian):
    # KL(p:q) as a function of diagonal q: the trace and quadratic terms
    # involve only q's diagonal precision.
    mp = to_moment(p)
    sp_diag = mp.covariance if p.diagonal else np.diag(mp.covariance_matrix)
    delta = mu - mp.mean
    g_mu = delta / sd**2
    g_ls = 1.0 - (sp_diag + delta**2) / sd**2
    return g_mu, g_ls


def _alpha_renyi_grad(alpha, mu, sd, p: NatGaussian):
    prec_q = 1.0 / sd**2
    eta_q = mu * prec_q
    if p.diagonal:
        blend_prec = np.diag(alpha * prec_q + (1 - alpha) * p.precision)
    else:
        blend_prec = np.diag(alpha * prec_q) + (1 - alpha) * p.precision_matrix
    blend = NatGaussian(blend_prec, alpha * eta_q + (1 - alpha) * p.shift)
    if not blend.is_proper():
        raise AlphaBlendNotPD("alpha-blended precision not PD")
    mb = to_moment(blend)
    m = mb.mean
    sb_diag = np.diag(mb.covariance_matrix)
    # dA(blend)/d(mu, log sd) through the blend's natural parameters:
    #   d eta_b / d mu_i = a / sd_i^2,       d L_b,ii / d mu_i = 0
    #   d eta_b,i / d log sd_i = -2 a mu_i / sd_i^2
    #   d L_b,ii  / d log sd_i = -2 a / sd_i^2
    # with dA/d eta = m and dA/d L_ii = -(m_i^2 + Sigma_b,ii)/2.
    gA_mu = alpha * m / sd**2
    gA_ls = (alpha / sd**2) * (m**2 + sb_diag - 2.0 * m * mu)
    # A(q) in the same coordinates: sum mu^2/(2 sd^2) + sum log sd + const.
    gq_mu = mu / sd**2
    gq_ls = 1.0 - mu**2 / sd**2
    scale = 1.0 / (alpha * (alpha - 1.0))
    return scale * (gA_mu - alpha * gq_mu), scale * (gA_ls - alpha * gq_ls)


def _fisher_rao_grad(mu, sd, p: NatGaussian):
    mp = to_moment(p)
    mu_p, sd_p = float(mp.mean[0]), float(mp.std[0])
    u = float(mu[0]) - mu_p
    num = 0.5 * u**2 + (sd[0] - sd_p) ** 2
    den = 0.5 * u**2 + (sd[0] + sd_p) ** 2
    if num == 0.0:
        return np.zeros(1), np.zeros(1)
    delta = np.sqrt(num / den)
    dfr_ddelta = 2.0 * np.sqrt(2.0) / (1.0 - delta**2)
    ddelta_dnum = 0.5 / (delta * den)
    ddelta_dden = -0.5 * num / (delta * den**2)
    d_num_dmu, d_den_dmu = u, u
    d_num_dsd, d_den_dsd = 2.0 * (sd[0] - sd_p), 2.0 * (sd[0] + sd_p)
    g_mu = dfr_ddelta * (ddelta_dnum * d_num_dmu + ddelta_dden * d_den_dmu)
    g_sd = dfr_ddelta * (ddelta_dnum * d_num_dsd + ddelta_dden * d_den_dsd)
    return np.array([g_mu]), np.array([g_sd * sd[0]])


def divergence_grad(spec: DivergenceSpec, mu, log_sd, p: NatGaussian) -> np.ndarray:
    """Gradient of D(q(mu, sd) : p) w.r.t. the stacked coords [mu, log sd].

    q is the mean-field Gaussian with the given mean and per-coordinate
    log standard deviations.  Returns a length-2d vector.
    """
    mu, sd = _unpack_coords(mu, log_sd)
    if mu.shape[0] != p.dim:
        raise DimensionMismatch("coordinate length must match p.dim")
    if not p.is_proper():
        raise NotPositiveDefinite("divergence_grad requires a proper p")
    if spec.kind in ("kl", "weighted_kl"):
        g_mu, g_ls = _kl_grad(mu, sd, p)
        if spec.kind == "weighted_kl":
            g_mu, g_ls = g_mu / spec.w, g_ls / spec.w
    elif spec.kind == "reverse_kl":
        g_mu, g_ls = _reverse_kl_grad(mu, sd, p)
    elif spec.kind == "alpha_renyi":
        g_mu, g_ls = _alpha_renyi_grad(spec.alpha, mu, sd, p)
    elif spec.kind == "fisher_rao":
        if p.dim != 1:
            raise UnsupportedDivergence("fisher_rao has closed form only for dim 1")
        g_mu, g_ls = _fisher_rao_grad(mu, sd, p)
    else:
        raise UnsupportedDivergence(spec.kind)
    return np.concatenate([g_mu, g_ls])
