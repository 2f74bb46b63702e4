"""Predictive probabilities for the logistic model without sampling.

For a Gaussian posterior q = N(mu, Sigma) over augmented weights, the
class-1 probability marginalised over q is approximated by

    sig( mu' xt / sqrt(1 + kappa xt' Sigma xt) )

with blend constant kappa.  kappa = pi follows the source derivation
verbatim; kappa = pi/8 is the conventional probit-matching choice and the
one that tracks Monte-Carlo predictives closely (both are offered).
"""

from __future__ import annotations

import math

import numpy as np

from .gaussians import NatGaussian, to_moment
from .losses import augment

__all__ = ["predict_logit", "KAPPA_VERBATIM", "KAPPA_PROBIT"]

KAPPA_VERBATIM = math.pi
KAPPA_PROBIT = math.pi / 8.0


def predict_logit(q_s: NatGaussian, x, kappa: float = KAPPA_VERBATIM) -> np.ndarray:
    """P(y=1 | x) under the posterior q_s for each row of x (unaugmented)."""
    xt = augment(x)
    m = to_moment(q_s)
    if xt.shape[1] != q_s.dim:
        raise ValueError(f"design has {xt.shape[1]} columns, posterior dim is {q_s.dim}")
    mean_act = xt @ m.mean
    if m.diagonal:
        var_act = np.sum(xt**2 * m.covariance[None, :], axis=1)
    else:
        var_act = np.einsum("np,pq,nq->n", xt, m.covariance_matrix, xt)
    return 0.5 * (1.0 + np.tanh(0.5 * mean_act / np.sqrt(1.0 + kappa * var_act)))
