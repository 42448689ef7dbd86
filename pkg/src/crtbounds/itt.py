"""Overall and heterogeneous intent-to-treat effects.

Both estimators are arm-wise ratio estimators, so a change of outcome scale
``y -> c + d*y`` (d > 0) rescales estimates and standard errors by ``d`` and
leaves them otherwise untouched. Standard errors come from the conservative
cluster-level variance estimator; intervals and tests use Normal limits.
"""
from dataclasses import dataclass

import numpy as np
from scipy import special

from .model import StudyData

Z_CRIT = 1.959964
MAX_CONDITION = 1e12


class InsufficientClustersError(ValueError):
    pass


class SingularDesignError(ValueError):
    pass


@dataclass(frozen=True)
class IttResult:
    estimand: str
    estimate: float
    std_error: float
    ci_low: float
    ci_high: float
    chi2_stat: float
    p_value: float

    def to_dict(self):
        return {"estimand": self.estimand, "estimate": self.estimate, "se": self.std_error,
                "ci": [self.ci_low, self.ci_high], "chi2": self.chi2_stat, "p": self.p_value}


@dataclass(frozen=True)
class HeteroIttResult:
    coefficients: tuple
    covariance: np.ndarray
    joint_chi2: float
    joint_dof: int
    joint_p: float

    @property
    def estimates(self):
        return np.array([c.estimate for c in self.coefficients])

    def to_dict(self):
        return {"coefficients": [c.to_dict() for c in self.coefficients],
                "joint_test": {"chi2": self.joint_chi2, "dof": self.joint_dof, "p": self.joint_p}}


def chi2_sf(x, dof):
    """Upper tail of the chi-square distribution via the regularized gamma."""
    if dof <= 0:
        return 1.0
    if np.isinf(x):
        return 0.0
    return float(special.gammaincc(dof / 2.0, x / 2.0))


def _result(name, estimate, se):
    if se > 0:
        chi2 = (estimate / se) ** 2
    else:
        chi2 = 0.0 if estimate == 0 else np.inf
    return IttResult(name, float(estimate), float(se), float(estimate - Z_CRIT * se),
                     float(estimate + Z_CRIT * se), float(chi2), chi2_sf(chi2, 1))


def _arms(data):
    treated = data.z == 1
    m = int(treated.sum())
    if m == 0 or m == data.J:
        raise ValueError("both arms must contain at least one cluster")
    if m < 2 or data.J - m < 2:
        raise InsufficientClustersError("insufficient clusters for variance: each arm needs at least 2")
    return treated, m


def _cluster_sums(data, values):
    """Per-cluster sums of per-unit rows (vectors or matrices)."""
    out = np.zeros((data.J,) + values.shape[1:])
    np.add.at(out, data.cluster, values)
    return out


def estimate_overall_itt(data: StudyData) -> IttResult:
    """Ratio estimator of the overall ITT effect with its conservative SE."""
    treated, m = _arms(data)
    J, N = data.J, data.N
    scale = J / N
    ysum = _cluster_sums(data, data.y)
    n = data.sizes.astype(float)
    ratio = {}
    resid = np.empty(J)
    for z, arm in ((1, treated), (0, ~treated)):
        ratio[z] = ysum[arm].sum() / n[arm].sum()
        resid[arm] = scale * (ysum[arm] - n[arm] * ratio[z])
    est = ratio[1] - ratio[0]
    var1 = np.var(resid[treated], ddof=1)
    var0 = np.var(resid[~treated], ddof=1)
    sigma2 = J * (var1 / m + var0 / (J - m))
    return _result("tau_itt", est, np.sqrt(max(sigma2, 0.0) / J))


def _check_condition(mat, arm):
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularDesignError(f"singular design in the {arm} arm (condition number {cond:.3g})")


def estimate_hetero_itt(data: StudyData, covariates=None, intercept=True) -> HeteroIttResult:
    """Best-linear-projection ITT coefficients, one :class:`IttResult` each.

    ``covariates`` selects covariate columns by name (all when None); an
    intercept column is prepended unless ``intercept=False``. The joint test
    covers every coefficient except the intercept.
    """
    treated, m = _arms(data)
    J, N = data.J, data.N
    scale = J / N
    X = data.design(covariates, intercept)
    names = (["intercept"] if intercept else []) + list(covariates if covariates is not None
                                                         else data.covariate_names)
    p = X.shape[1]
    xx = _cluster_sums(data, X[:, :, None] * X[:, None, :])
    xy = _cluster_sums(data, X * data.y[:, None])

    beta = {}
    bread = {}
    meat = {}
    resid = np.empty((J, p))
    for z, arm, label in ((1, treated, "treated"), (0, ~treated, "control")):
        A = xx[arm].sum(axis=0)
        _check_condition(A, label)
        beta[z] = np.linalg.solve(A, xy[arm].sum(axis=0))
        resid[arm] = scale * (xy[arm] - xx[arm] @ beta[z])
        k = int(arm.sum())
        bread[z] = np.linalg.inv(scale * A / k)
        meat[z] = np.atleast_2d(np.cov(resid[arm], rowvar=False, ddof=1))
    est = beta[1] - beta[0]
    sigma = J * (bread[1] @ meat[1] @ bread[1] / m + bread[0] @ meat[0] @ bread[0] / (J - m))
    cov = (sigma + sigma.T) / 2 / J
    coefs = tuple(_result(name, est[i], np.sqrt(max(cov[i, i], 0.0))) for i, name in enumerate(names))
    lo = 1 if intercept else 0
    if p > lo:
        chi2, dof, pval = wald_test(est[lo:], cov[lo:, lo:], np.zeros(p - lo))
    else:
        chi2, dof, pval = 0.0, 0, 1.0
    return HeteroIttResult(coefs, cov, chi2, dof, pval)


def wald_test(estimate, covariance, null=None):
    """Wald statistic ``(e - n)' C^+ (e - n)`` with degrees of freedom equal to
    the numerical rank of ``C``; returns ``(chi2, dof, p_value)``.

    ``C^+`` is the Moore-Penrose pseudo-inverse, so deviations along
    zero-variance directions do not contribute.
    """
    est = np.atleast_1d(np.asarray(estimate, dtype=float))
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    null = np.zeros_like(est) if null is None else np.atleast_1d(np.asarray(null, dtype=float))
    if cov.shape != (len(est), len(est)) or null.shape != est.shape:
        raise ValueError(f"dimension mismatch: estimate {est.shape}, covariance {cov.shape}, null {null.shape}")
    diff = est - null
    w, v = np.linalg.eigh((cov + cov.T) / 2)
    tol = max(cov.shape) * np.finfo(float).eps * max(np.abs(w).max(initial=0.0), 1e-300)
    keep = w > tol
    dof = int(keep.sum())
    if not np.any(diff):
        return 0.0, dof, 1.0
    proj = v[:, keep].T @ diff
    chi2 = float(np.sum(proj**2 / w[keep]))
    return chi2, dof, chi2_sf(chi2, dof)
