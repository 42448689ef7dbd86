"""Compliance-type classifiers built from randomized, strength-calibrated learners.

A classifier for type t scores each unit with a learner ``f(x; theta)`` plus
a frozen uniform noise term and predicts ``1{f + e >= q}``. The threshold
``q`` is the root of a smooth calibration equation built on the surrogate
indicator, so the number of predicted members matches an estimated group
size. Never-takers are learned on treated clusters (label ``1 - D``),
always-takers on control clusters (label ``D``), and compliers by combining
the two learners.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .model import StudyData
from .rng import stream

NT, AT, CO = "NT", "AT", "CO"
TARGETS = (NT, AT, CO)
_TARGET_CODE = {NT: 0, AT: 1, CO: 2}

OPTIMAL, EMPTY_Q, NONSHRINKING_Q = "OPTIMAL", "EMPTY_Q", "NONSHRINKING_Q"

C_MAX = 0.49
H_FLOOR = 1e-12
TIE_BREAK = 1e-13
GRAD_TOL = 1e-9
MAX_NEWTON = 200


class ConvergenceError(RuntimeError):
    pass


class SingularLearnerError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerKind:
    """Learner family: ``"linear"`` (least squares) or ``"logistic"`` (ridge
    logistic with penalty ``lam``)."""

    name: str
    lam: float = 0.0

    def __post_init__(self):
        if self.name not in ("linear", "logistic"):
            raise ValueError(f"unknown learner {self.name!r}; expected 'linear' or 'logistic'")
        if self.name == "logistic" and not self.lam > 0:
            raise ValueError("logistic ridge requires lam > 0")

    @classmethod
    def linear(cls):
        return cls("linear")

    @classmethod
    def logistic(cls, lam=1e-3):
        return cls("logistic", float(lam))

    @classmethod
    def parse(cls, name, lam=1e-3):
        return cls.linear() if name == "linear" else cls(name, float(lam))


LINEAR = LearnerKind.linear()
LOGISTIC_RIDGE = LearnerKind.logistic()


@dataclass(frozen=True, eq=False)
class TrainedClassifier:
    """A calibrated classifier bound to the units of one study.

    ``f_tilde`` holds the noisy scores of every unit of the study the
    classifier was built for, so predictions are deterministic. For the CO
    classifier ``theta`` is None and ``weights`` / ``parents`` carry
    ``(w_NT, w_AT)`` and ``(theta_NT, theta_AT)``.
    """

    kind: LearnerKind
    target: str
    theta: np.ndarray
    noise: np.ndarray
    r: float
    c: float
    h: float
    q: float
    f_tilde: np.ndarray = field(repr=False)
    diagnosis: str = OPTIMAL
    weights: tuple = None
    parents: tuple = None
    noise_key: tuple = ()

    def predict(self):
        """Hard predictions ``1{f_tilde >= q}`` for every unit."""
        return (self.f_tilde >= self.q).astype(int)

    def scores(self, X):
        """Noise-free learner values on a design matrix ``X``."""
        if self.target == CO:
            return co_scores(self.kind, X, self.parents, self.weights)
        return learner_values(self.kind, X, self.theta)

    @property
    def degenerate(self):
        return not np.isfinite(self.q)

    def to_dict(self):
        out = {"kind": self.kind.name, "lam": self.kind.lam, "target": self.target,
               "theta": None if self.theta is None else [float(v) for v in self.theta],
               "r": self.r, "c": self.c, "h": self.h, "q": _json_float(self.q),
               "diagnosis": self.diagnosis, "noise_seed": list(self.noise_key)}
        if self.target == CO:
            out["weights"] = [float(w) for w in self.weights]
            out["parents"] = [[float(v) for v in p] for p in self.parents]
        return out


def _json_float(v):
    if np.isfinite(v):
        return float(v)
    return "inf" if v > 0 else "-inf"


# ---------------------------------------------------------------- learners

def learner_values(kind: LearnerKind, X, theta):
    eta = np.asarray(X, dtype=float) @ theta
    return eta if kind.name == "linear" else expit(eta)


def _logistic_objective(theta, X, y, lam):
    eta = X @ theta
    return np.mean(np.logaddexp(0.0, eta) - y * eta) + 0.5 * lam * theta @ theta


def fit_learner(kind: LearnerKind, X, labels):
    """Minimize the learner's empirical risk on ``(X, labels)``.

    The logistic objective is the mean logistic loss plus
    ``lam/2 * ||theta||^2``, minimized by damped Newton from zero.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(labels, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ValueError("X must be a matrix with one row per label")
    n, p = X.shape
    if n == 0:
        raise ValueError("cannot fit a learner on zero rows")
    if kind.name == "linear":
        theta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        if rank < p:
            raise SingularLearnerError(f"singular normal equations (rank {rank} < {p})")
        return theta

    lam = kind.lam
    theta = np.zeros(p)
    obj = _logistic_objective(theta, X, y, lam)
    for _ in range(MAX_NEWTON):
        mu = expit(X @ theta)
        grad = X.T @ (mu - y) / n + lam * theta
        if np.max(np.abs(grad)) <= GRAD_TOL:
            return theta
        w = mu * (1.0 - mu)
        hess = (X.T * w) @ X / n + lam * np.eye(p)
        step = np.linalg.solve(hess, grad)
        if 0.5 * grad @ step <= 1e-12 * (1.0 + abs(obj)):
            # inside the quadratic region the decrease is below rounding level
            theta = theta - step
            obj = _logistic_objective(theta, X, y, lam)
            continue
        t = 1.0
        for _ in range(60):
            cand = theta - t * step
            cand_obj = _logistic_objective(cand, X, y, lam)
            if cand_obj <= obj:
                break
            t *= 0.5
        else:
            # no decrease representable in floating point: at the optimum
            if np.max(np.abs(grad)) <= 1e3 * GRAD_TOL:
                return theta
            raise ConvergenceError("Newton line search failed to decrease the objective")
        theta, obj = cand, cand_obj
    mu = expit(X @ theta)
    grad = X.T @ (mu - y) / n + lam * theta
    if np.max(np.abs(grad)) <= GRAD_TOL:
        return theta
    raise ConvergenceError(f"Newton did not converge in {MAX_NEWTON} iterations")


# ------------------------------------------------------- surrogate indicator

def _check_ch(c, h):
    if not (0 < c < 0.5):
        raise ValueError(f"c must lie in (0, 0.5), got {c}")
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")


def surrogate_indicator(v, c, h):
    """Smooth, strictly increasing stand-in for ``1{v >= 0}``.

    Linear on ``[-h, h]`` from ``c`` to ``1 - c`` and exponential tails
    outside, matched in value and slope at ``+-h``.
    """
    _check_ch(c, h)
    v = np.asarray(v, dtype=float)
    k = (1.0 - 2.0 * c) / (2.0 * c * h)
    out = (1.0 - 2.0 * c) * (v + h) / (2.0 * h) + c
    hi = v >= h
    lo = v < -h
    if out.ndim == 0:
        if hi:
            out = 1.0 - c * np.exp(-k * (v - h))
        elif lo:
            out = c * np.exp(k * (v + h))
    else:
        out[hi] = 1.0 - c * np.exp(-k * (v[hi] - h))
        out[lo] = c * np.exp(k * (v[lo] + h))
    return out if out.ndim else float(out)


# --------------------------------------------------------------- noise scale

def choose_noise_r(f_values, target_count, override=None):
    """Noise half-width ``r`` for the randomized learner and the diagnosis of
    the solution set ``{q : #{f >= q} = target_count}``.

    ``override`` replaces the computed ``r`` while keeping the diagnosis.
    """
    f = np.sort(np.asarray(f_values, dtype=float))
    n = len(f)
    k = int(target_count)
    if not 0 <= k <= n:
        raise ValueError(f"target_count must lie in [0, {n}], got {target_count}")
    if k == 0 or k == n:
        return (0.0 if override is None else float(override)), OPTIMAL
    lower, upper = f[n - k - 1], f[n - k]
    if lower == upper:
        q_m = upper
        above = f[f > q_m]
        below = f[f < q_m]
        gaps = []
        if len(above):
            gaps.append(above[0] - q_m)
        if len(below):
            gaps.append(q_m - below[-1])
        if gaps:
            r = min(gaps) / 4.0
        else:
            r = max(TIE_BREAK, (f[-1] - f[0]) / 4.0)
        diagnosis = EMPTY_Q
    elif len(np.unique(f)) <= n / 2:
        r, diagnosis = (upper - lower) / 4.0, NONSHRINKING_Q
    else:
        r, diagnosis = 0.0, OPTIMAL
    return (float(r) if override is None else float(override)), diagnosis


def tie_break(f_values):
    """Deterministic perturbation of size ``1e-13 * (1 + |f|)`` keyed by unit
    index; separates exact float collisions without reordering distinct values
    further apart than the perturbation."""
    f = np.asarray(f_values, dtype=float)
    n = len(f)
    key = (np.arange(n) + 1.0) / (n + 1.0) - 0.5
    return f + TIE_BREAK * (1.0 + np.abs(f)) * key


# ----------------------------------------------------- surrogate parameters

def surrogate_params(d_hat, n_target_hat, n):
    """``c = 1/max(log N_t, log(n - N_t))`` clipped into (0, 0.49] and
    ``h = d_hat/4`` (``1e-12`` when the gap is zero)."""
    if not 0 < n_target_hat < n:
        raise ValueError(f"n_target_hat must lie in (0, {n}), got {n_target_hat}")
    big = max(np.log(n_target_hat), np.log(n - n_target_hat))
    c = C_MAX if big <= 0 else min(C_MAX, 1.0 / big)
    h = d_hat / 4.0 if d_hat > 0 else H_FLOOR
    return float(c), float(h)


def choose_c_h(f_tilde_values, n_target_hat, n, arm_target=None):
    """Surrogate parameters from the noisy learner values of a training arm.

    The gap between the order statistics straddling the arm's positive count
    ``arm_target`` is scaled by ``len(values)/n``. ``arm_target`` defaults to
    ``n_target_hat`` rescaled to the arm size.
    """
    f = np.sort(np.asarray(f_tilde_values, dtype=float))
    n_arm = len(f)
    if arm_target is None:
        arm_target = n_target_hat * n_arm / n
    k = int(min(max(round(arm_target), 1), n_arm - 1)) if n_arm > 1 else 0
    d1 = f[n_arm - k] - f[n_arm - k - 1] if 0 < k < n_arm else 0.0
    return surrogate_params(n_arm * d1 / n, n_target_hat, n)


# -------------------------------------------------------------- calibration

def calibrate_q(f_tilde_values, target, c, h):
    """Root of the strictly decreasing ``H(q) = sum I_{c,h}(f_tilde - q) - target``.

    The bracket starts at ``[min - h - ch log(n/c), max + h + ch log(n/c)]``,
    is narrowed by bisection over the sorted values to one gap between
    adjacent values, and the root inside that gap is found by Brent's method
    to floating-point resolution.
    """
    _check_ch(c, h)
    f = np.asarray(f_tilde_values, dtype=float)
    n = len(f)
    if not 0 < target < n:
        raise ValueError(f"target must lie in (0, {n}), got {target}")

    def H(q):
        return float(np.sum(surrogate_indicator(f - q, c, h))) - target

    pad = h + c * h * np.log(n / c)
    lo, hi = f.min() - pad, f.max() + pad
    width = max(hi - lo, 1.0)
    while H(lo) <= 0:
        lo -= width
        width *= 2
    width = max(hi - lo, 1.0)
    while H(hi) >= 0:
        hi += width
        width *= 2
    # H is monotone, so first narrow the bracket over the sorted values
    grid = np.sort(f)
    a, b = 0, len(grid) - 1
    while b - a > 1:
        mid = (a + b) // 2
        if H(grid[mid]) > 0:
            a = mid
            lo = max(lo, grid[mid])
        else:
            b = mid
            hi = min(hi, grid[mid])
    for q in (grid[a], grid[b]):
        val = H(q)
        if val > 0:
            lo = max(lo, q)
        elif val < 0:
            hi = min(hi, q)
        else:
            return float(q)
    # Brent's method keeps the bracket, so it converges wherever bisection would
    if not lo < hi:
        return float(lo)
    return float(brentq(H, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps))


# ------------------------------------------------------------------ training

def _build(kind, target, theta, f, calib, count, target_total, n_hat, n_total, rng,
           noise_r, noise_key, weights=None, parents=None):
    """Noise, surrogate parameters and threshold for learner values ``f``.

    ``calib`` selects the calibration units, ``count`` is their integer
    positive count used for the noise and gap rules, ``target_total`` the
    calibration target and ``n_hat`` the estimated group size out of
    ``n_total``.
    """
    n_cal = int(calib.sum())
    k = int(min(max(count, 0), n_cal))
    r, diagnosis = choose_noise_r(f[calib], k, override=noise_r)
    u = rng.uniform(-1.0, 1.0, size=len(f))
    noise = r * u
    f_tilde = f + noise if r > 0 else tie_break(f)
    if r == 0:
        noise = f_tilde - f
    if target_total <= 0 or target_total >= n_cal:
        q = np.inf if target_total <= 0 else -np.inf
        big = max(np.log(max(n_hat, 1.0)), np.log(max(n_total - n_hat, 1.0)))
        c = C_MAX if big <= 0 else min(C_MAX, 1.0 / big)
        h = H_FLOOR
    else:
        nh = min(max(n_hat, 1e-9), n_total - 1e-9)
        c, h = choose_c_h(f_tilde[calib], nh, n_total, arm_target=k)
        q = calibrate_q(f_tilde[calib], target_total, c, h)
    for arr in (noise, f_tilde):
        arr.setflags(write=False)
    return TrainedClassifier(kind, target, theta, noise, float(r), c, h, float(q), f_tilde,
                             diagnosis, weights, parents, tuple(noise_key))


def _noise_rng(seed, target, key):
    return stream(seed, "noise", _TARGET_CODE[target], *key)


def group_size_estimates(data: StudyData):
    """Ratio estimates ``(N_NT, N_AT, N_CO)``; each lies in ``[0, N]``."""
    treated = data.unit_z == 1
    N = data.N
    n_t = treated.sum()
    n_c = N - n_t
    n_nt = N * np.sum(1 - data.d[treated]) / n_t if n_t else 0.0
    n_at = N * np.sum(data.d[~treated]) / n_c if n_c else 0.0
    n_nt = float(min(max(n_nt, 0.0), N))
    n_at = float(min(max(n_at, 0.0), N))
    n_co = float(min(max(N - n_nt - n_at, 0.0), N))
    return n_nt, n_at, n_co


def train_nt_at(data: StudyData, kind: LearnerKind = LOGISTIC_RIDGE, covariates=None,
                seed=0, key=(), noise_r=None):
    """Fit and calibrate the NT classifier on treated clusters and the AT
    classifier on control clusters.

    Noise is drawn for every unit of ``data`` from the ``noise`` stream keyed
    by ``(seed, target, *key)``. ``noise_r`` overrides the data-driven noise
    scale.
    """
    X = data.design(covariates, intercept=True)
    treated = data.unit_z == 1
    if not treated.any() or treated.all():
        raise ValueError("both arms need at least one unit to train classifiers")
    d = np.asarray(data.d, dtype=float)
    n_nt, n_at, _ = group_size_estimates(data)
    N = data.N
    out = []
    for target, arm, labels, n_hat in ((NT, treated, 1.0 - d, n_nt), (AT, ~treated, d, n_at)):
        theta = fit_learner(kind, X[arm], labels[arm])
        theta.setflags(write=False)
        f = learner_values(kind, X, theta)
        count = int(round(labels[arm].sum()))
        out.append(_build(kind, target, theta, f, arm, count, float(count), n_hat, N,
                          _noise_rng(seed, target, key), noise_r, (seed, target) + tuple(key)))
    return tuple(out)


def co_scores(kind, X, parents, weights):
    w_nt, w_at = weights
    th_nt, th_at = parents
    X = np.asarray(X, dtype=float)
    eta = w_nt * (X @ th_nt) + w_at * (X @ th_at)
    return -eta if kind.name == "linear" else expit(-eta)


def compose_co(nt: TrainedClassifier, at: TrainedClassifier, data: StudyData, covariates=None,
               seed=0, key=(), noise_r=None, n_hat=None):
    """Complier classifier from the NT and AT learners, calibrated over all
    units to the estimated complier count.

    ``n_hat`` supplies ``(N_NT, N_AT, N_CO)``; by default the ratio
    estimates of :func:`group_size_estimates`.
    """
    if nt.kind != at.kind:
        raise ValueError(f"mixed learner kinds: {nt.kind.name} and {at.kind.name}")
    if nt.target != NT or at.target != AT:
        raise ValueError("compose_co needs an NT and an AT classifier")
    N = data.N
    n_nt, n_at, n_co = group_size_estimates(data) if n_hat is None else n_hat
    weights = (n_nt / N, n_at / N)
    parents = (nt.theta, at.theta)
    f = co_scores(nt.kind, data.design(covariates, intercept=True), parents, weights)
    everyone = np.ones(N, dtype=bool)
    return _build(nt.kind, CO, None, f, everyone, int(round(n_co)), float(n_co), n_co, N,
                  _noise_rng(seed, CO, key), noise_r, (seed, CO) + tuple(key),
                  weights=weights, parents=parents)


def train_classifiers(data: StudyData, kind: LearnerKind = LOGISTIC_RIDGE, covariates=None,
                      seed=0, key=(), noise_r=None):
    """The three classifiers ``{NT, AT, CO}`` estimated from observed data."""
    nt, at = train_nt_at(data, kind, covariates, seed, key, noise_r)
    co = compose_co(nt, at, data, covariates, seed, key, noise_r)
    return {NT: nt, AT: at, CO: co}


def train_on_labels(X, labels, kind: LearnerKind = LOGISTIC_RIDGE, seed=0, key=(), noise_r=None):
    """Population-level classifiers from known compliance labels.

    ``labels`` maps ``"NT"``, ``"AT"`` (and ``"CO"``) to 0/1 vectors over all
    units. NT and AT learners are fit on every unit; the CO learner combines
    them with the true group proportions. Every classifier is calibrated over
    all units to the true group size.
    """
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    everyone = np.ones(N, dtype=bool)
    sizes = {t: float(np.sum(labels[t])) for t in (NT, AT)}
    sizes[CO] = N - sizes[NT] - sizes[AT]
    out = {}
    for t in (NT, AT):
        y = np.asarray(labels[t], dtype=float)
        theta = fit_learner(kind, X, y)
        theta.setflags(write=False)
        f = learner_values(kind, X, theta)
        out[t] = _build(kind, t, theta, f, everyone, int(sizes[t]), sizes[t], sizes[t], N,
                        _noise_rng(seed, t, key), noise_r, (seed, t) + tuple(key))
    weights = (sizes[NT] / N, sizes[AT] / N)
    parents = (out[NT].theta, out[AT].theta)
    f = co_scores(kind, X, parents, weights)
    out[CO] = _build(kind, CO, None, f, everyone, int(sizes[CO]), sizes[CO], sizes[CO], N,
                     _noise_rng(seed, CO, key), noise_r, (seed, CO) + tuple(key),
                     weights=weights, parents=parents)
    return out
