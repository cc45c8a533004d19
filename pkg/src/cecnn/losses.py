"""Training objectives: empirical baselines and the three copula-likelihood losses.

All losses take head outputs as Tensors so gradients flow back into the
backbone.  Copula parameters enter as constants.  Every loss accepts a
``scale`` factor applied to the total (the trainer passes ``1 / batch_size``);
with the default ``scale=1`` the totals follow the summation conventions of
the likelihoods, except ``mse_loss`` which is a mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .copula import (
    PROB_EPS,
    RcCopulaParams,
    RrGaussianParams,
    SmoothedResidualCdf,
    _check_correlation,
)
from .errors import ParameterError
from .nn.tensor import Tensor, as_tensor, stack

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
PDF_FLOOR = 1e-300


@dataclass
class LossValue:
    total: Tensor
    per_sample: np.ndarray | None = None

    @property
    def value(self) -> float:
        return self.total.item()

    def backward(self) -> None:
        self.total.backward()


def _finish(per: Tensor, scale: float) -> LossValue:
    bad = np.flatnonzero(~np.isfinite(per.data))
    if bad.size:
        raise FloatingPointError(f"non-finite loss term at sample index {int(bad[0])}")
    return LossValue(per.sum() * scale, per.data * scale)


def _column(x) -> Tensor:
    t = as_tensor(x)
    return t.reshape(-1) if t.ndim != 1 else t


def mse_loss(preds, targets, scale: float = 1.0) -> LossValue:
    preds, targets = _column(preds), _column(targets)
    if preds.shape != targets.shape:
        raise ValueError(f"preds {preds.shape} and targets {targets.shape} differ")
    n = preds.shape[0]
    if n == 0:
        raise ValueError("mse_loss of an empty batch")
    r = preds - targets
    return _finish(r * r * (1.0 / n), scale)


def cross_entropy_loss(probs, labels, scale: float = 1.0) -> LossValue:
    """Summed binary cross entropy ``-sum[y log p + (1-y) log(1-p)]``."""
    probs, labels = _column(probs), _column(labels)
    if probs.shape != labels.shape:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} differ")
    if probs.shape[0] == 0:
        raise ValueError("cross_entropy_loss of an empty batch")
    if np.any((probs.data < PROB_EPS) | (probs.data > 1.0 - PROB_EPS)):
        log.warning("cross-entropy probabilities clamped to [%g, 1-%g]", PROB_EPS, PROB_EPS)
    p = probs.clip(PROB_EPS, 1.0 - PROB_EPS)
    y = labels.data
    per = -(p.log() * y + (1.0 - p).log() * (1.0 - y))
    return _finish(per, scale)


def copula_rc_loss(y1, y2, mu1, mu2, params: RcCopulaParams, scale: float = 1.0) -> LossValue:
    """Negative copula log-likelihood of a (continuous, binary) response pair.

    ``mu1`` is the regression head output and ``mu2`` the sigmoid
    classification probability.  Up to constants,

        sum (y1 - mu1)^2 / (2 sigma^2) - sum [y2 log C* + (1 - y2) log(1 - C*)]

    with ``C* = Phi((Phi^-1(mu2) + rho z1) / sqrt(1 - rho^2))`` and
    ``z1 = (y1 - mu1) / sigma``.
    """
    y1, y2 = _column(y1).data, _column(y2).data
    mu1, mu2 = _column(mu1), _column(mu2)
    rho, sigma = params.rho, params.sigma
    if not (y1.shape == y2.shape == mu1.shape == mu2.shape):
        raise ValueError("y1, y2, mu1 and mu2 must have equal length")
    r = Tensor(y1) - mu1
    quad = r * r * (1.0 / (2.0 * sigma * sigma))
    p = mu2.clip(PROB_EPS, 1.0 - PROB_EPS)
    if rho == 0.0:
        bern = p.log() * y2 + (1.0 - p).log() * (1.0 - y2)
    else:
        arg = (p.normal_quantile() + r * (rho / sigma)) * (1.0 / math.sqrt(1.0 - rho * rho))
        # log(1 - Phi(a)) = log Phi(-a)
        bern = arg.log_normal_cdf() * y2 + (-arg).log_normal_cdf() * (1.0 - y2)
    return _finish(quad - bern, scale)


def _residuals(Y, preds) -> Tensor:
    preds = as_tensor(preds)
    Yd = np.asarray(Y.data if isinstance(Y, Tensor) else Y, dtype=np.float64)
    if Yd.ndim == 1:
        Yd = Yd[:, None]
    if preds.ndim == 1:
        preds = preds.reshape(-1, 1)
    if Yd.shape != preds.shape:
        raise ValueError(f"targets {Yd.shape} and predictions {preds.shape} differ")
    return Tensor(Yd) - preds


def copula_rr_gaussian_loss(Y, preds, params: RrGaussianParams, scale: float = 1.0) -> LossValue:
    """``-sum_i log MVN_p(y_i - g(x_i); 0, Sigma)``."""
    r = _residuals(Y, preds)
    sig = params.sigma_mat
    p = sig.shape[0]
    if r.shape[1] != p:
        raise ValueError(f"{r.shape[1]} responses but Sigma is {sig.shape}")
    try:
        chol = np.linalg.cholesky(sig)
    except np.linalg.LinAlgError as exc:
        raise ParameterError("Sigma is not positive definite") from exc
    inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(p)))
    inv = 0.5 * (inv + inv.T)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    quad = ((r @ Tensor(inv)) * r).sum(axis=1)
    return _finish((quad + (logdet + p * LOG_2PI)) * 0.5, scale)


def _smoothed_cdf_op(r: Tensor, cdf: SmoothedResidualCdf) -> Tensor:
    return r.unary(cdf.cdf(r.data), cdf.pdf(r.data))


def _log_smoothed_pdf_op(r: Tensor, cdf: SmoothedResidualCdf) -> Tensor:
    f = cdf.pdf(r.data)
    low = f < PDF_FLOOR
    if np.any(low):
        log.warning("smoothed density underflow at %d points; clamped at %g", int(low.sum()), PDF_FLOOR)
    fc = np.maximum(f, PDF_FLOOR)
    grad = np.where(low, 0.0, cdf.pdf_derivative(r.data) / fc)
    return r.unary(np.log(fc), grad)


def copula_rr_nonparam_loss(Y, preds, gamma, cdfs: Sequence[SmoothedResidualCdf],
                            scale: float = 1.0) -> LossValue:
    """``-sum_i q_i'(I - Gamma^-1) q_i / 2 - sum_ij log f_j(y_ij - g_j(x_i))``.

    ``q_ij = Phi^-1(F_j(y_ij - g_j(x_i)))`` with the smoothed residual CDFs
    ``F_j`` held fixed.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    _check_correlation(gamma)
    r = _residuals(Y, preds)
    p = r.shape[1]
    if gamma.shape != (p, p) or len(cdfs) != p:
        raise ValueError(f"{p} responses need a {p}x{p} gamma and {p} CDFs")
    a = np.eye(p) - np.linalg.inv(gamma)
    a = 0.5 * (a + a.T)
    qs, logf = [], None
    for j, cdf in enumerate(cdfs):
        rj = r[:, j]
        qs.append(_smoothed_cdf_op(rj, cdf).clip(PROB_EPS, 1.0 - PROB_EPS).normal_quantile())
        lf = _log_smoothed_pdf_op(rj, cdf)
        logf = lf if logf is None else logf + lf
    if np.allclose(a, 0.0, atol=0.0):
        per = -logf
    else:
        q = stack(qs, axis=1)
        per = ((q @ Tensor(a)) * q).sum(axis=1) * (-0.5) - logf
    return _finish(per, scale)
