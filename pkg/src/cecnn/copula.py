"""Gaussian-copula mathematics.

Standard-normal special functions, the conditional probability of the binary
response given the standardized continuous residual, estimators of the copula
parameters for regression-classification and regression-regression tasks,
kernel-smoothed residual CDFs, and a Monte-Carlo check of the latent
Gaussian score construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal, special

from .errors import DegenerateDataError, DomainError, ParameterError

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
CORR_LIMIT = 1.0 - 1e-6
EIG_FLOOR = 1e-8
BINNED_ABOVE = 2e8


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------


def normal_cdf(x):
    """Standard normal CDF."""
    return special.ndtr(x)


def normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def normal_quantile(p):
    """Inverse standard normal CDF; ``p`` must lie strictly inside (0, 1)."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise DomainError("normal_quantile needs probabilities strictly inside (0, 1)")
    return special.ndtri(p)


def clamp_probability(p, eps: float = PROB_EPS, what: str = "probability"):
    arr = np.asarray(p, dtype=np.float64)
    if np.any((arr < eps) | (arr > 1.0 - eps)):
        log.warning("%s clamped to [%g, 1-%g]", what, eps, eps)
    return np.clip(arr, eps, 1.0 - eps)


def cstar(mu2, z1, rho: float):
    """P(y2 = 1 | standardized residual z1) under a Gaussian copula.

    ``Phi((Phi^-1(mu2) + rho * z1) / sqrt(1 - rho^2))``; collapses to ``mu2``
    exactly when ``rho == 0``.
    """
    if not abs(rho) < 1.0:
        raise ParameterError(f"|rho| must be < 1, got {rho}")
    mu2 = clamp_probability(mu2, what="mu2")
    if rho == 0.0:
        return mu2 + 0.0 * np.asarray(z1, dtype=np.float64)
    arg = (special.ndtri(mu2) + rho * np.asarray(z1, dtype=np.float64)) / math.sqrt(1.0 - rho * rho)
    return special.ndtr(arg)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RcCopulaParams:
    rho: float
    sigma: float

    def __post_init__(self):
        if not abs(self.rho) < 1.0:
            raise ParameterError(f"|rho| must be < 1, got {self.rho}")
        if not self.sigma > 0.0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")

    def to_kv(self) -> dict[str, str]:
        return {"task": "rc", "rho": repr(self.rho), "sigma": repr(self.sigma)}


@dataclass(frozen=True)
class RrGaussianParams:
    gamma: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        s = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "sigmas", s)
        _check_correlation(g)
        if g.shape[0] != s.shape[0]:
            raise ParameterError(f"gamma is {g.shape} but {s.shape[0]} sigmas given")
        if np.any(s <= 0):
            raise ParameterError(f"sigmas must be positive, got {s}")

    @property
    def sigma_mat(self) -> np.ndarray:
        return self.sigmas[:, None] * self.gamma * self.sigmas[None, :]

    def to_kv(self) -> dict[str, str]:
        return {"task": "rr-gaussian", "gamma": _fmt_matrix(self.gamma),
                "sigmas": _fmt_vector(self.sigmas)}


@dataclass
class SmoothedResidualCdf:
    """Gaussian-kernel smoothed CDF and density of centered residuals."""

    centered_residuals: np.ndarray
    bandwidth: float
    _chunk: int = field(default=2_000_000, repr=False)

    def __post_init__(self):
        self.centered_residuals = np.asarray(self.centered_residuals, dtype=np.float64).reshape(-1)
        if not self.bandwidth > 0:
            raise ParameterError(f"bandwidth must be positive, got {self.bandwidth}")

    @classmethod
    def from_residuals(cls, residuals, bandwidth: float | None = None) -> "SmoothedResidualCdf":
        r = np.asarray(residuals, dtype=np.float64).reshape(-1)
        centered = r - r.mean()
        if bandwidth is None:
            bandwidth = silverman_bandwidth(centered)
        return cls(centered, float(bandwidth))

    def _kernel_sums(self, t, fn) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        flat = t.reshape(-1)
        e = self.centered_residuals
        out = np.empty(flat.shape[0])
        step = max(1, self._chunk // max(1, e.size))
        for start in range(0, flat.size, step):
            u = (flat[start:start + step, None] - e[None, :]) / self.bandwidth
            out[start:start + step] = fn(u).sum(axis=1)
        return out.reshape(t.shape)

    def cdf(self, t):
        return self._kernel_sums(t, special.ndtr) / self.centered_residuals.size

    def cdf_binned(self, t, resolution: int = 100) -> np.ndarray:
        """Fast approximation of ``cdf`` for large samples.

        Residuals are linearly binned onto a grid with spacing
        ``bandwidth / resolution`` and the kernel CDF is applied by FFT
        convolution; values between grid nodes are interpolated linearly.
        Beyond 9 bandwidths the kernel CDF is exactly 0 or 1 in float64, so
        the truncated convolution plus a running sum of the bins to the left
        reproduces the full sum.
        """
        t = np.asarray(t, dtype=np.float64)
        e = self.centered_residuals
        h = self.bandwidth
        lo = min(e.min(), t.min()) - h
        hi = max(e.max(), t.max()) + h
        delta = h / resolution
        g = int(math.ceil((hi - lo) / delta)) + 2
        if g > 2**24:
            return self.cdf(t)
        pos = (e - lo) / delta
        i0 = np.floor(pos).astype(np.int64)
        frac = pos - i0
        w = np.bincount(i0, 1.0 - frac, minlength=g) + np.bincount(i0 + 1, frac, minlength=g)[:g]
        half = int(math.ceil(9.0 * resolution))
        kern = special.ndtr(np.arange(-half, half + 1) / resolution)
        conv = signal.fftconvolve(w, kern)[half:half + g]
        # bins more than `half` nodes to the left contribute exactly 1
        left = np.concatenate([np.zeros(half + 1), np.cumsum(w)[:max(0, g - half - 1)]])
        grid = lo + delta * np.arange(g)
        return np.interp(t, grid, conv + left) / e.size

    def pdf(self, t):
        return self._kernel_sums(t, normal_pdf) / (self.centered_residuals.size * self.bandwidth)

    def pdf_derivative(self, t):
        return -self._kernel_sums(t, lambda u: u * normal_pdf(u)) / (
            self.centered_residuals.size * self.bandwidth**2
        )

    def to_kv(self) -> dict[str, str]:
        return {"bandwidth": repr(self.bandwidth), "n": str(self.centered_residuals.size)}


def smooth_cdf_pdf(cdf: SmoothedResidualCdf, t):
    return cdf.cdf(t), cdf.pdf(t)


@dataclass
class RrNonparamParams:
    gamma: np.ndarray
    cdfs: list[SmoothedResidualCdf]

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        _check_correlation(self.gamma)
        if len(self.cdfs) != self.gamma.shape[0]:
            raise ParameterError("need one smoothed CDF per response")

    def to_kv(self) -> dict[str, str]:
        return {"task": "rr-nonparam", "gamma": _fmt_matrix(self.gamma),
                "bandwidth": _fmt_vector([c.bandwidth for c in self.cdfs])}


def _fmt_vector(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def _fmt_matrix(m) -> str:
    return "; ".join(_fmt_vector(row) for row in np.asarray(m))


def _parse_vector(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split()])


def params_from_kv(kv: dict[str, str]) -> RcCopulaParams | RrGaussianParams:
    """Inverse of ``to_kv`` for the parametric copulas.

    The nonparametric copula stores only gamma and bandwidths, not the
    residuals behind its smoothed CDFs, so it cannot be rebuilt from text.
    """
    task = kv.get("task")
    if task == "rc":
        return RcCopulaParams(float(kv["rho"]), float(kv["sigma"]))
    if task == "rr-gaussian":
        gamma = np.array([_parse_vector(row) for row in kv["gamma"].split(";")])
        return RrGaussianParams(gamma, _parse_vector(kv["sigmas"]))
    raise ValueError(f"cannot rebuild copula parameters for task {task!r}")


def _check_correlation(g: np.ndarray) -> None:
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ParameterError(f"correlation matrix must be square, got {g.shape}")
    if not np.allclose(g, g.T, atol=1e-12):
        raise ParameterError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(g), 1.0, atol=1e-12):
        raise ParameterError("correlation matrix must have unit diagonal")
    if np.linalg.eigvalsh(g).min() <= EIG_FLOOR:
        raise ParameterError("correlation matrix must be positive definite")


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std(ddof=1)
    if not sd > 0:
        raise DegenerateDataError("cannot pick a bandwidth for constant residuals")
    return 1.06 * sd * x.size ** (-0.2)


def pearson(a, b) -> float:
    """Pearson correlation (n-1 convention); raises on zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    va, vb = np.dot(da, da), np.dot(db, db)
    if not (va > 0 and vb > 0):
        raise DegenerateDataError("correlation undefined: an argument has zero variance")
    return float(np.dot(da, db) / math.sqrt(va * vb))


def _clamp_corr(r: float) -> float:
    return float(np.clip(r, -CORR_LIMIT, CORR_LIMIT))


def correlation_matrix(cols: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlations of the columns with clamped off-diagonals."""
    p = cols.shape[1]
    g = np.eye(p)
    for s in range(p):
        for j in range(s + 1, p):
            g[s, j] = g[j, s] = _clamp_corr(pearson(cols[:, s], cols[:, j]))
    return nearest_pd_correlation(g)


def nearest_pd_correlation(g: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Floor eigenvalues at ``floor`` and rescale back to unit diagonal."""
    g = 0.5 * (g + g.T)
    vals, vecs = np.linalg.eigh(g)
    if vals.min() > floor:
        return g
    log.warning("estimated correlation matrix not positive definite; projecting")
    level = floor
    while True:
        # rescaling to unit diagonal can push the floored eigenvalue back under the floor
        fixed = (vecs * np.maximum(vals, level)) @ vecs.T
        d = np.sqrt(np.diag(fixed))
        fixed = fixed / d[:, None] / d[None, :]
        np.fill_diagonal(fixed, 1.0)
        fixed = 0.5 * (fixed + fixed.T)
        if np.linalg.eigvalsh(fixed).min() > floor:
            return fixed
        level *= 2.0


def estimate_rc_params(y1, g1hat, g2hat_logit) -> RcCopulaParams:
    """Copula parameters of the regression-classification task.

    ``rho`` is the correlation of ``y1`` with the Gaussian score
    ``Phi^-1(sigmoid(logit))`` of the warm-up classification output, and
    ``sigma`` the sample standard deviation of the regression residuals.
    """
    y1 = np.asarray(y1, dtype=np.float64)
    g1hat = np.asarray(g1hat, dtype=np.float64)
    logit = np.asarray(g2hat_logit, dtype=np.float64)
    if not (y1.shape == g1hat.shape == logit.shape) or y1.ndim != 1:
        raise ValueError("y1, g1hat and g2hat_logit must be 1-D arrays of equal length")
    if y1.size < 3:
        raise ValueError("need at least 3 observations")
    scores = special.ndtri(clamp_probability(special.expit(logit), what="warm-up probability"))
    rho = _clamp_corr(pearson(y1, scores))
    sigma = float(np.std(y1 - g1hat, ddof=1))
    if not sigma > 0:
        raise DegenerateDataError("regression residuals have zero spread")
    return RcCopulaParams(rho, sigma)


def _as_residual_matrix(residual_matrix) -> np.ndarray:
    r = np.asarray(residual_matrix, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    if r.ndim != 2:
        raise ValueError(f"residual matrix must be n x p, got {r.shape}")
    if r.shape[0] < 3:
        raise ValueError("need at least 3 observations")
    if np.any(r.std(axis=0) == 0):
        raise DegenerateDataError("a residual column is constant")
    return r


def estimate_rr_gaussian_params(residual_matrix) -> RrGaussianParams:
    r = _as_residual_matrix(residual_matrix)
    return RrGaussianParams(correlation_matrix(r), r.std(axis=0, ddof=1))


def gaussian_scores(residual_matrix, cdfs: Sequence[SmoothedResidualCdf]) -> np.ndarray:
    """``Phi^-1(F_j(e_ij))`` column by column, with CDF values kept off {0, 1}.

    Above ``BINNED_ABOVE`` kernel evaluations per column the smoothed CDF is
    evaluated by ``SmoothedResidualCdf.cdf_binned``.
    """
    r = np.asarray(residual_matrix, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    q = np.empty_like(r)
    for j, cdf in enumerate(cdfs):
        exact = r.shape[0] * cdf.centered_residuals.size <= BINNED_ABOVE
        u = cdf.cdf(r[:, j]) if exact else cdf.cdf_binned(r[:, j])
        u = np.clip(u, PROB_EPS, 1.0 - PROB_EPS)
        q[:, j] = special.ndtri(u)
    return q


def fit_nonparam_copula(residual_matrix, bandwidth=None) -> RrNonparamParams:
    """Smoothed marginal CDFs of centered residuals plus the Gaussian-score correlation."""
    r = _as_residual_matrix(residual_matrix)
    p = r.shape[1]
    if bandwidth is None or np.isscalar(bandwidth):
        bws = [bandwidth] * p
    else:
        bws = list(bandwidth)
    cdfs = [SmoothedResidualCdf.from_residuals(r[:, j], bws[j]) for j in range(p)]
    centered = np.column_stack([c.centered_residuals for c in cdfs])
    q = gaussian_scores(centered, cdfs)
    if np.any(q.std(axis=0) == 0):
        raise DegenerateDataError("a Gaussian-score column is constant")
    return RrNonparamParams(correlation_matrix(q), cdfs)


def estimate_gamma_nonparam(residual_matrix, bandwidth=None) -> np.ndarray:
    return fit_nonparam_copula(residual_matrix, bandwidth).gamma


# ---------------------------------------------------------------------------
# latent Gaussian score check
# ---------------------------------------------------------------------------


@dataclass
class LatentScoreReport:
    mu2: float
    rho: float
    n_draws: int
    p_hat: float
    p_se: float
    bin_centers: np.ndarray
    bin_counts: np.ndarray
    bin_empirical: np.ndarray
    bin_expected: np.ndarray
    bin_se: np.ndarray

    @property
    def p_z(self) -> float:
        return abs(self.p_hat - self.mu2) / self.p_se

    @property
    def max_bin_z(self) -> float:
        return float(np.max(np.abs(self.bin_empirical - self.bin_expected) / self.bin_se))

    @property
    def conditional_check(self) -> bool:
        return self.max_bin_z <= 3.0

    def passed(self, k: float = 3.0) -> bool:
        return self.p_z <= k and self.max_bin_z <= k


def verify_latent_score(mu2: float, rho: float, n_draws: int = 1_000_000, seed=0,
                        n_bins: int = 20, z_range: tuple[float, float] = (-2.0, 2.0)) -> LatentScoreReport:
    """Simulate (z1, z2) jointly normal with means (0, Phi^-1(mu2)) and correlation ``rho``.

    ``p_hat`` is the share of draws with ``z2 > 0``.  Draws are grouped into
    ``n_bins`` equal-width bins of ``z1`` over ``z_range``; in each bin the
    share with ``z2 > 0`` is compared with ``cstar`` at the mean ``z1`` of
    the bin, with binomial standard errors.
    """
    if n_draws < 10_000:
        raise ValueError("n_draws must be at least 1e4")
    rng = np.random.default_rng(seed)
    z1 = rng.standard_normal(n_draws)
    e = rng.standard_normal(n_draws)
    z2 = special.ndtri(mu2) + rho * z1 + math.sqrt(1.0 - rho * rho) * e
    y2 = z2 > 0
    p_hat = float(y2.mean())
    p_se = math.sqrt(mu2 * (1.0 - mu2) / n_draws)

    edges = np.linspace(z_range[0], z_range[1], n_bins + 1)
    which = np.digitize(z1, edges) - 1
    inside = (which >= 0) & (which < n_bins)
    counts = np.bincount(which[inside], minlength=n_bins).astype(np.float64)
    hits = np.bincount(which[inside], weights=y2[inside], minlength=n_bins)
    sums = np.bincount(which[inside], weights=z1[inside], minlength=n_bins)
    centers = sums / counts
    expected = cstar(mu2, centers, rho)
    empirical = hits / counts
    se = np.sqrt(expected * (1.0 - expected) / counts)
    return LatentScoreReport(mu2, rho, n_draws, p_hat, p_se, centers, counts, empirical, expected, se)
