"""Last-layer efficiency oracle on a two-equation seemingly unrelated regression.

With identity activations the heads are linear in the feature map, so the
empirical loss fits each response by its own least squares (OLS) while the
Gaussian copula loss is generalized least squares (GLS) on the stacked
system with error covariance ``Sigma (x) I_n``.  FGLS replaces the true
``Sigma`` with the one estimated from OLS residuals, which is what the
estimate-then-freeze training procedure does.

Each equation regresses on an intercept plus the columns in its support.
When both equations use the same regressors GLS and OLS coincide exactly,
so the efficiency gain only shows up through differing supports.

Variances are conditional on the design: one ``D`` per replicate, with the
errors redrawn ``M`` times.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .copula import estimate_rr_gaussian_params
from .errors import DegenerateDataError, ParameterError
from .synthdata import mvn_sample

log = logging.getLogger(__name__)

ESTIMATORS = ("ols", "gls", "fgls")
REGIMES = ("disjoint", "partial")
TIE_RTOL = 1e-12


@dataclass
class SurInstance:
    D: np.ndarray  # [n, K]
    supports: tuple[np.ndarray, np.ndarray]
    weights: np.ndarray  # [2, K], zero off the supports
    biases: np.ndarray  # [2]
    rho: float
    sigmas: tuple[float, float]
    Y: np.ndarray  # [n, 2]
    overlap: str = "disjoint"

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @property
    def K(self) -> int:
        return self.D.shape[1]

    @property
    def sigma_mat(self) -> np.ndarray:
        return sur_covariance(self.rho, self.sigmas)

    @property
    def mean(self) -> np.ndarray:
        return self.D @ self.weights.T + self.biases

    def designs(self) -> list[np.ndarray]:
        """Per-equation design matrices ``[1, D[:, support_j]]``."""
        ones = np.ones((self.n, 1))
        return [np.hstack([ones, self.D[:, s]]) for s in self.supports]

    def true_coefficients(self) -> list[np.ndarray]:
        return [np.concatenate([[self.biases[j]], self.weights[j, s]]) for j, s in enumerate(self.supports)]

    def with_errors(self, eps: np.ndarray) -> "SurInstance":
        return SurInstance(self.D, self.supports, self.weights, self.biases, self.rho, self.sigmas,
                           self.mean + eps, self.overlap)


def sur_covariance(rho: float, sigmas) -> np.ndarray:
    s1, s2 = sigmas
    return np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])


def gen_sur_instance(n: int, K: int, overlap: str = "disjoint", rho: float = 0.7,
                     sigmas=(1.0, 2.0), seed=0, support_size: int = 3) -> SurInstance:
    """Random SUR instance with standard-normal features.

    ``disjoint`` draws two non-overlapping supports; ``partial`` makes them
    share exactly one feature.  Nonzero weights have magnitude in [0.5, 2]
    and a random sign.
    """
    if overlap not in REGIMES:
        raise ValueError(f"overlap must be one of {REGIMES}, got {overlap!r}")
    if K < 4:
        raise ValueError("K must be at least 4")
    if n <= K:
        raise ValueError("need n > K")
    if not -1.0 < rho < 1.0:
        raise ParameterError("rho must lie in (-1, 1)")
    if min(sigmas) <= 0:
        raise ParameterError("sigmas must be positive")
    m = support_size
    needed = 2 * m if overlap == "disjoint" else 2 * m - 1
    if m < 1 or needed > K:
        raise ValueError(f"{overlap} supports of size {m} do not fit in K={K}")
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((n, K))
    perm = rng.permutation(K)
    s1 = np.sort(perm[:m])
    s2 = np.sort(perm[m:2 * m] if overlap == "disjoint" else perm[m - 1:2 * m - 1])
    weights = np.zeros((2, K))
    for j, s in enumerate((s1, s2)):
        weights[j, s] = rng.uniform(0.5, 2.0, s.size) * rng.choice([-1.0, 1.0], s.size)
    biases = rng.standard_normal(2)
    inst = SurInstance(D, (s1, s2), weights, biases, float(rho), (float(sigmas[0]), float(sigmas[1])),
                       np.zeros((n, 2)), overlap)
    return inst.with_errors(mvn_sample(np.zeros(2), inst.sigma_mat, n, rng))


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


@dataclass
class SurFit:
    coefs: list[np.ndarray]  # per equation: [intercept, support weights...]
    supports: tuple[np.ndarray, np.ndarray]
    K: int

    @property
    def weights(self) -> np.ndarray:
        w = np.zeros((2, self.K) + self.coefs[0].shape[1:])
        for j, s in enumerate(self.supports):
            w[j, s] = self.coefs[j][1:]
        return w

    @property
    def biases(self) -> np.ndarray:
        return np.array([c[0] for c in self.coefs])

    def support_vector(self) -> np.ndarray:
        """Support weights of both equations, concatenated (intercepts dropped)."""
        return np.concatenate([c[1:] for c in self.coefs])


def _check_rank(X: np.ndarray) -> None:
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DegenerateDataError(f"design of {X.shape[1]} columns is rank deficient")


def _ols(designs, Y) -> list[np.ndarray]:
    out = []
    for j, X in enumerate(designs):
        _check_rank(X)
        out.append(np.linalg.solve(X.T @ X, X.T @ Y[:, j]))
    return out


def _gls(designs, sigma: np.ndarray, Y) -> list[np.ndarray]:
    """Stacked GLS with ``Omega^-1 = Sigma^-1 (x) I_n`` assembled blockwise.

    ``Y`` may carry trailing replicate axes; they are solved together.
    """
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ParameterError("error covariance is not positive definite") from exc
    sinv = np.linalg.inv(sigma)
    sizes = [X.shape[1] for X in designs]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    A = np.zeros((offs[-1], offs[-1]))
    c = np.zeros((offs[-1],) + Y.shape[2:])
    for j, Xj in enumerate(designs):
        _check_rank(Xj)
        for k, Xk in enumerate(designs):
            A[offs[j]:offs[j + 1], offs[k]:offs[k + 1]] = sinv[j, k] * (Xj.T @ Xk)
            c[offs[j]:offs[j + 1]] += sinv[j, k] * np.tensordot(Xj.T, Y[:, k], axes=1)
    beta = np.linalg.solve(A, c.reshape(offs[-1], -1)).reshape(c.shape)
    return [beta[offs[j]:offs[j + 1]] for j in range(len(designs))]


def ols_fit(instance: SurInstance, Y=None) -> SurFit:
    """Separate least squares per response on its own support."""
    Y = instance.Y if Y is None else np.asarray(Y, dtype=np.float64)
    return SurFit(_ols(instance.designs(), Y), instance.supports, instance.K)


def gls_fit(instance: SurInstance, sigma=None, Y=None) -> SurFit:
    """GLS with a known error covariance (the instance's true one by default)."""
    Y = instance.Y if Y is None else np.asarray(Y, dtype=np.float64)
    sigma = instance.sigma_mat if sigma is None else np.asarray(sigma, dtype=np.float64)
    return SurFit(_gls(instance.designs(), sigma, Y), instance.supports, instance.K)


def estimate_sigma_from_ols(instance: SurInstance, Y=None) -> np.ndarray:
    Y = instance.Y if Y is None else np.asarray(Y, dtype=np.float64)
    designs = instance.designs()
    coefs = _ols(designs, Y)
    resid = np.column_stack([Y[:, j] - designs[j] @ coefs[j] for j in range(2)])
    # the correlation estimator projects a singular estimate back to positive definite
    return estimate_rr_gaussian_params(resid).sigma_mat


def fgls_fit(instance: SurInstance, Y=None) -> SurFit:
    """GLS with the covariance estimated once from OLS residuals."""
    Y = instance.Y if Y is None else np.asarray(Y, dtype=np.float64)
    return gls_fit(instance, estimate_sigma_from_ols(instance, Y), Y)


def exact_variances(instance: SurInstance) -> dict[str, np.ndarray]:
    """Closed-form conditional variances of the support weights given ``D``."""
    designs = instance.designs()
    sig = instance.sigma_mat
    ols = []
    for j, X in enumerate(designs):
        ols.append(sig[j, j] * np.diag(np.linalg.inv(X.T @ X))[1:])
    sinv = np.linalg.inv(sig)
    sizes = [X.shape[1] for X in designs]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    A = np.zeros((offs[-1], offs[-1]))
    for j, Xj in enumerate(designs):
        for k, Xk in enumerate(designs):
            A[offs[j]:offs[j + 1], offs[k]:offs[k + 1]] = sinv[j, k] * (Xj.T @ Xk)
    dg = np.diag(np.linalg.inv(A))
    gls = np.concatenate([dg[offs[j] + 1:offs[j + 1]] for j in range(2)])
    return {"ols": np.concatenate(ols), "gls": gls}


# ---------------------------------------------------------------------------
# replicate experiment
# ---------------------------------------------------------------------------


@dataclass
class EstimatorComparison:
    n: int
    K: int
    rho: float
    replicates: int
    M: int
    overlap: str
    coordinates: list[str]
    variance: dict[str, np.ndarray]  # estimator -> [replicates, coords]
    bias: dict[str, np.ndarray]  # estimator -> [replicates, coords], mean over the M draws
    exact: dict[str, np.ndarray] = field(default_factory=dict)
    fgls_gls_msd: float = float("nan")

    def _dominates(self, estimator: str) -> np.ndarray:
        # relative slack so estimators that coincide up to rounding count as ties
        return self.variance[estimator] <= self.variance["ols"] * (1 + TIE_RTOL)

    def dominance_per_coordinate(self, estimator: str = "gls") -> np.ndarray:
        return np.mean(self._dominates(estimator), axis=0)

    def dominance_fraction(self, estimator: str = "gls") -> float:
        return float(np.mean(self._dominates(estimator)))

    def exact_dominance_fraction(self) -> float:
        return float(np.mean(self.exact["gls"] <= self.exact["ols"] * (1 + TIE_RTOL)))

    def mean_variance_ratio(self, estimator: str = "gls") -> float:
        return float(np.mean(self.variance[estimator] / self.variance["ols"]))

    def bias_summary(self, estimator: str) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate mean bias across replicates and its standard error."""
        b = self.bias[estimator]
        return b.mean(axis=0), b.std(axis=0, ddof=1) / np.sqrt(b.shape[0])

    def unbiased(self, estimator: str, k: float = 3.0) -> bool:
        mean, se = self.bias_summary(estimator)
        return bool(np.all(np.abs(mean) <= k * se))

    def summary(self) -> dict:
        out = {"n": self.n, "K": self.K, "rho": self.rho, "replicates": self.replicates, "M": self.M,
               "overlap": self.overlap,
               "dominance_fraction": self.dominance_fraction(),
               "dominance_fraction_fgls": self.dominance_fraction("fgls"),
               "min_coordinate_dominance": float(self.dominance_per_coordinate().min()),
               "mean_variance_ratio": self.mean_variance_ratio(),
               "mean_variance_ratio_fgls": self.mean_variance_ratio("fgls"),
               "fgls_gls_msd": self.fgls_gls_msd}
        if self.exact:
            out["exact_dominance_fraction"] = self.exact_dominance_fraction()
        for e in ESTIMATORS:
            out[f"unbiased_{e}"] = self.unbiased(e)
        return out

    def write_csv(self, path: str | Path) -> Path:
        """Long format: replicate,coordinate,estimator,variance,bias."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", "coordinate", "estimator", "variance", "bias"])
            for r in range(self.replicates):
                for c, name in enumerate(self.coordinates):
                    for e in ESTIMATORS:
                        w.writerow([r, name, e, repr(float(self.variance[e][r, c])),
                                    repr(float(self.bias[e][r, c]))])
        return path


def _replicate(inst: SurInstance, M: int, rng: np.random.Generator):
    designs = inst.designs()
    eps = mvn_sample(np.zeros(2), inst.sigma_mat, inst.n * M, rng).reshape(M, inst.n, 2)
    Y = inst.mean[:, :, None] + eps.transpose(1, 2, 0)  # [n, 2, M]
    ols = np.concatenate([c[1:] for c in _ols(designs, Y)])  # [coords, M]
    gls = np.concatenate([c[1:] for c in _gls(designs, inst.sigma_mat, Y)])
    fgls = np.empty_like(gls)
    for m in range(M):
        sig = estimate_sigma_from_ols(inst, Y[:, :, m])
        fgls[:, m] = np.concatenate([c[1:] for c in _gls(designs, sig, Y[:, :, m])])
    return {"ols": ols, "gls": gls, "fgls": fgls}


def variance_experiment(n: int = 500, K: int = 8, rho: float = 0.7, replicates: int = 200, M: int = 200,
                        seed: int = 0, sigmas=(1.0, 2.0), overlap: str = "disjoint",
                        support_size: int = 3) -> EstimatorComparison:
    """Conditional-variance comparison of OLS, GLS and FGLS support weights.

    Replicate ``r`` draws its design from ``SeedSequence(seed).spawn(...)[r]``
    and redraws the errors ``M`` times with ``D`` held fixed.
    """
    if replicates < 100:
        log.warning("only %d replicates; dominance fractions will be coarse", replicates)
    if M < 2:
        raise ValueError("need M >= 2 error draws per replicate")
    children = np.random.SeedSequence(seed).spawn(replicates)
    var = {e: [] for e in ESTIMATORS}
    bias = {e: [] for e in ESTIMATORS}
    exact = {"ols": [], "gls": []}
    msd = []
    coords = None
    for child in children:
        rng = np.random.default_rng(child)
        inst = gen_sur_instance(n, K, overlap, rho, sigmas, rng, support_size)
        if coords is None:
            coords = [f"w{j + 1}_{k}" for j, s in enumerate(inst.supports) for k in range(s.size)]
        truth = np.concatenate([c[1:] for c in inst.true_coefficients()])
        est = _replicate(inst, M, rng)
        for e in ESTIMATORS:
            var[e].append(est[e].var(axis=1, ddof=1))
            bias[e].append(est[e].mean(axis=1) - truth)
        ex = exact_variances(inst)
        exact["ols"].append(ex["ols"])
        exact["gls"].append(ex["gls"])
        msd.append(np.mean((est["fgls"] - est["gls"]) ** 2))
    return EstimatorComparison(n, K, float(rho), replicates, M, overlap, coords,
                               {e: np.array(v) for e, v in var.items()},
                               {e: np.array(v) for e, v in bias.items()},
                               {e: np.array(v) for e, v in exact.items()},
                               float(np.mean(msd)))


def convergence_study(ns=(200, 1000, 5000), K: int = 8, rho: float = 0.7, replicates: int = 100,
                      M: int = 100, seed: int = 0, **kw) -> list[dict]:
    """Summaries of ``variance_experiment`` over a grid of sample sizes."""
    return [variance_experiment(n, K, rho, replicates, M, seed, **kw).summary() for n in ns]
