"""Bounds on the network effects of never-takers, always-takers and compliers.

Two families of bounds are produced for each compliance type t:

* classifier bounds, from a linear program over the true-positive,
  false-positive and false-negative outcome totals of calibrated
  classifiers, made always-feasible by penalized elastic variables;
* extended bounds, from closed-form bounds within strata of binary
  covariates, averaged with estimated group-size weights.

Their intersection is reported as the final bound. Outcomes are rescaled to
``[0, 1]`` before any bound is computed and results are mapped back, so all
bounds scale with the outcome and ignore shifts.
"""
import csv
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import lpsolve
from .classify import (AT, CO, NT, TARGETS, LOGISTIC_RIDGE, LearnerKind, group_size_estimates,
                       train_classifiers)
from .model import StudyData

CLASSIFIER, EXTENDED, INTERSECTION = "CLASSIFIER", "EXTENDED", "INTERSECTION"
BIG_M = 1e6
ELASTIC_TOL = 1e-6
CROSS_TOL = 1e-9
MIN_GROUP = 0.5


class DegenerateStratumError(ValueError):
    pass


# ------------------------------------------------------------------ types

@dataclass(frozen=True)
class LpInputs:
    """Plug-in totals feeding the bound program (outcomes on the 0-1 scale).

    ``s_c`` maps ``(t, z)`` to the outcome total among units classified as
    type t in arm z, scaled to the estimated size of group t.
    """

    n_nt: float
    n_at: float
    n_co: float
    s1: float
    s0: float
    s_nt1: float
    s_at0: float
    s_c: dict
    r_nt: float
    r_at: float
    r_co: float
    warnings: tuple = ()

    def n(self, t):
        return {NT: self.n_nt, AT: self.n_at, CO: self.n_co}[t]

    def r(self, t):
        return {NT: self.r_nt, AT: self.r_at, CO: self.r_co}[t]

    def to_dict(self):
        out = {k: v for k, v in asdict(self).items() if k not in ("s_c", "warnings")}
        for (t, z), v in sorted(self.s_c.items()):
            out[f"s_c_{t.lower()}{z}"] = v
        out["warnings"] = list(self.warnings)
        return out


@dataclass(frozen=True)
class Bound:
    estimand: str
    method: str
    lower: float
    upper: float
    feasible: bool = True
    warnings: tuple = ()

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, value, tol=1e-9):
        return self.lower - tol <= value <= self.upper + tol

    def scaled(self, d):
        return Bound(self.estimand, self.method, d * self.lower, d * self.upper, self.feasible,
                     self.warnings)

    def to_dict(self):
        return {"estimand": self.estimand, "method": self.method, "lower": self.lower,
                "upper": self.upper, "feasible": self.feasible, "warnings": list(self.warnings)}


@dataclass(frozen=True)
class StrataSpec:
    """Binary covariate columns defining strata by their joint pattern."""

    columns: tuple

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))

    def labels(self, data: StudyData):
        """Stratum index per unit and the list of patterns."""
        if not self.columns:
            return np.zeros(data.N, dtype=int), [()]
        W = np.column_stack([data.covariate(c) for c in self.columns])
        if not np.all(np.isin(W, (0.0, 1.0))):
            bad = [c for c, col in zip(self.columns, W.T) if not np.all(np.isin(col, (0.0, 1.0)))]
            raise ValueError(f"strata columns must be binary: {bad}")
        patterns, index = np.unique(W, axis=0, return_inverse=True)
        return index.ravel(), [tuple(int(v) for v in p) for p in patterns]


# ------------------------------------------------------------ rescaling

@dataclass(frozen=True)
class OutcomeTransform:
    shift: float
    scale: float
    constant: bool = False


def rescale_outcomes(data: StudyData):
    """Map outcomes onto ``[0, 1]`` by ``(y - min)/(max - min)``.

    Constant outcomes are shifted to zero with unit scale and flagged.
    """
    lo, hi = float(data.y.min()), float(data.y.max())
    if hi == lo:
        return data.with_outcome(np.zeros(data.N)), OutcomeTransform(lo, 1.0, True)
    if lo == 0.0 and hi == 1.0:
        return data, OutcomeTransform(0.0, 1.0)
    y = (data.y - lo) / (hi - lo)
    return data.with_outcome(np.clip(y, 0.0, 1.0)), OutcomeTransform(lo, hi - lo)


# ------------------------------------------------------------ LP inputs

def _ratio(num, den, what, notes):
    if den == 0:
        notes.append(f"zero denominator in {what}; set to 0")
        return 0.0
    return float(num / den)


def compute_lp_inputs(data: StudyData, classifiers) -> LpInputs:
    """Plug-in totals from observed data and the three trained classifiers.

    Outcomes must already lie in ``[0, 1]``. ``classifiers`` maps each type
    to a classifier or directly to a 0/1 prediction vector over units.
    """
    notes = []
    z = data.unit_z
    y = data.y
    d = np.asarray(data.d, dtype=float)
    T, C = z == 1, z == 0
    N = data.N
    n_nt, n_at, n_co = group_size_estimates(data)
    n_hat = {NT: n_nt, AT: n_at, CO: n_co}
    pred = {t: np.asarray(getattr(classifiers[t], "predict", lambda: classifiers[t])(), dtype=float)
            for t in TARGETS}

    s1 = N * _ratio(y[T].sum(), T.sum(), "S(1)", notes)
    s0 = N * _ratio(y[C].sum(), C.sum(), "S(0)", notes)
    s_nt1 = n_nt * _ratio(np.sum(y[T] * (1 - d[T])), np.sum(1 - d[T]), "S_NT(1)", notes)
    s_at0 = n_at * _ratio(np.sum(y[C] * d[C]), np.sum(d[C]), "S_AT(0)", notes)
    s_c = {}
    for t in TARGETS:
        for zz, arm in ((1, T), (0, C)):
            s_c[(t, zz)] = n_hat[t] * _ratio(np.sum(y[arm] * pred[t][arm]), np.sum(pred[t][arm]),
                                             f"S_C,{t}({zz})", notes)
    r_nt = n_nt * _ratio(np.sum(d[T] * pred[NT][T]), np.sum(pred[NT][T]), "R_NT", notes)
    r_at = n_at * _ratio(np.sum((1 - d[C]) * pred[AT][C]), np.sum(pred[AT][C]), "R_AT", notes)
    r_co = n_co * (_ratio(np.sum((1 - d[T]) * pred[CO][T]), np.sum(pred[CO][T]), "R_CO treated", notes)
                   + _ratio(np.sum(d[C] * pred[CO][C]), np.sum(pred[CO][C]), "R_CO control", notes))
    r = {}
    for t, val in ((NT, r_nt), (AT, r_at), (CO, r_co)):
        clipped = min(max(val, 0.0), n_hat[t])
        if clipped != val:
            notes.append(f"R_{t} clipped from {val:.6g} to {clipped:.6g}")
        r[t] = clipped
    return LpInputs(n_nt, n_at, n_co, s1, s0, s_nt1, s_at0, s_c, r[NT], r[AT], r[CO], tuple(notes))


def population_lp_inputs(y0, y1, labels, predictions) -> LpInputs:
    """Exact LP inputs from a science table.

    ``labels`` and ``predictions`` map each type to 0/1 vectors over units;
    ``R_t`` counts predicted members of t that are not of type t.
    """
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    lab = {t: np.asarray(labels[t], dtype=float) for t in TARGETS}
    pred = {t: np.asarray(predictions[t], dtype=float) for t in TARGETS}
    s_c = {(t, z): float(np.sum((y1 if z == 1 else y0) * pred[t])) for t in TARGETS for z in (1, 0)}
    r = {t: float(np.sum((1 - lab[t]) * pred[t])) for t in TARGETS}
    return LpInputs(float(lab[NT].sum()), float(lab[AT].sum()), float(lab[CO].sum()),
                    float(y1.sum()), float(y0.sum()), float(np.sum(y1 * lab[NT])),
                    float(np.sum(y0 * lab[AT])), s_c, r[NT], r[AT], r[CO])


def write_lp_inputs_csv(inputs: LpInputs, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        for k, v in inputs.to_dict().items():
            if k != "warnings":
                w.writerow([k, repr(float(v))])


# ------------------------------------------------------- elastic program

_KINDS = ("TP", "FP", "FN")
N_PRIMARY, N_SLACK, N_A, N_B = 18, 18, 28, 10


def primary_index(t, z, kind):
    return 6 * TARGETS.index(t) + 3 * (0 if z == 1 else 1) + _KINDS.index(kind)


def variable_names():
    names = [f"{k}_{t}{z}" for t in TARGETS for z in (1, 0) for k in _KINDS]
    names += [f"s{l}" for l in range(1, N_SLACK + 1)]
    names += [f"a{l}" for l in range(1, N_A + 1)]
    names += [f"b{l}" for l in range(1, N_B + 1)]
    return tuple(names)


@lru_cache(maxsize=1)
def _constraint_matrix():
    """Constraint matrix of the elastic program; it does not depend on the data.

    The ten equality rows carry ``+a - b``. The eighteen inequality rows
    ``g <= rhs`` become ``g + s - a = rhs`` so each elastic ``a`` relaxes its
    row. Returns the read-only matrix and the per-row pair of columns
    ``(basic if rhs >= 0, basic if rhs < 0)``.
    """
    n_var = N_PRIMARY + N_SLACK + N_A + N_B
    A = np.zeros((28, n_var))
    P = primary_index
    row = 0
    for z in (1, 0):
        for t in TARGETS:
            A[row, P(t, z, "TP")] = A[row, P(t, z, "FN")] = 1.0
        row += 1
    for t, z in ((NT, 1), (AT, 0)):
        A[row, P(t, z, "TP")] = A[row, P(t, z, "FN")] = 1.0
        row += 1
    for z in (0, 1):
        for t in TARGETS:
            A[row, P(t, z, "TP")] = A[row, P(t, z, "FP")] = 1.0
            row += 1
    for t in TARGETS:
        for k in _KINDS:
            A[row, P(t, 0, k)] = 1.0
            A[row, P(t, 1, k)] = -1.0
            row += 1
    for t in TARGETS:
        A[row, P(t, 1, "TP")] = 1.0
        row += 1
    for t in TARGETS:
        for k in ("FP", "FN"):
            A[row, P(t, 1, k)] = 1.0
            row += 1
    s0, a0, b0 = N_PRIMARY, N_PRIMARY + N_SLACK, N_PRIMARY + N_SLACK + N_A
    pairs = []
    for l in range(N_B):
        A[l, a0 + l] = 1.0
        A[l, b0 + l] = -1.0
        pairs.append((a0 + l, b0 + l))
    for l in range(N_SLACK):
        r = N_B + l
        A[r, s0 + l] = 1.0
        A[r, a0 + N_B + l] = -1.0
        pairs.append((s0 + l, a0 + N_B + l))
    A.setflags(write=False)
    return A, np.array(pairs)


def _constraint_rhs(inputs: LpInputs):
    sc = inputs.s_c
    b = [inputs.s1, inputs.s0, inputs.s_nt1, inputs.s_at0]
    b += [sc[(t, z)] for z in (0, 1) for t in TARGETS]
    b += [0.0] * 9
    b += [inputs.n(t) - inputs.r(t) for t in TARGETS]
    b += [inputs.r(t) for t in TARGETS for _ in ("FP", "FN")]
    return np.array(b, dtype=float)


def _constraint_system(inputs: LpInputs):
    """``(A, b, basis)`` of the elastic program in equality form, where
    ``basis`` is the obvious feasible basis of slack and elastic columns."""
    A, pairs = _constraint_matrix()
    b = _constraint_rhs(inputs)
    basis = np.where(b >= 0, pairs[:, 0], pairs[:, 1]).tolist()
    return A, b, basis


def _effect_coefficients(t, n_t):
    c = np.zeros(N_PRIMARY)
    for k in ("TP", "FN"):
        c[primary_index(t, 1, k)] = 1.0 / n_t
        c[primary_index(t, 0, k)] = -1.0 / n_t
    return c


def build_elastic_lp(inputs: LpInputs, estimand, sense):
    """The elastic bound program for ``estimand`` as a :class:`LinearProgram`,
    together with an obvious primal feasible basis."""
    A, b, basis = _constraint_system(inputs)
    n_t = inputs.n(estimand)
    c = np.zeros(A.shape[1])
    c[:N_PRIMARY] = _effect_coefficients(estimand, n_t)
    penalty = BIG_M if sense == lpsolve.MIN else -BIG_M
    c[N_PRIMARY + N_SLACK:] = penalty
    return lpsolve.LinearProgram(c, A, b, sense, names=variable_names()), basis


def classifier_bounds(inputs: LpInputs, estimand, dump_dir=None) -> Bound:
    """Minimize and maximize the elastic program for ``estimand``."""
    if estimand not in TARGETS:
        raise ValueError(f"unknown estimand {estimand!r}")
    n_t = inputs.n(estimand)
    if n_t < MIN_GROUP:
        return Bound(estimand, CLASSIFIER, 0.0, 0.0, True,
                     (f"estimated {estimand} group size {n_t:.3g} < {MIN_GROUP}; effect set to 0",))
    coef = _effect_coefficients(estimand, n_t)
    values, feasible = {}, True
    basis = None
    for sense in (lpsolve.MIN, lpsolve.MAX):
        lp, start = build_elastic_lp(inputs, estimand, sense)
        if dump_dir is not None:
            lpsolve.dump_csv(lp, Path(dump_dir) / f"lp_{estimand.lower()}_{sense.lower()}.csv")
        sol = lpsolve.solve(lp, basis=basis if basis is not None else start)
        if sol.status != lpsolve.OPTIMAL:
            raise RuntimeError(f"bound program for {estimand} ({sense}) returned {sol.status}")
        basis = sol.basis
        values[sense] = float(coef @ sol.x[:N_PRIMARY])
        if np.any(sol.x[N_PRIMARY + N_SLACK:] > ELASTIC_TOL):
            feasible = False
    notes = () if feasible else ("elastic variables activated: plug-in program infeasible",)
    return _clamped(estimand, CLASSIFIER, values[lpsolve.MIN], values[lpsolve.MAX], feasible, notes)


def _clamped(estimand, method, lower, upper, feasible=True, notes=()):
    if lower > upper + CROSS_TOL:
        mid = 0.5 * (lower + upper)
        notes = tuple(notes) + (f"crossed bounds [{lower:.6g}, {upper:.6g}] replaced by midpoint",)
        return Bound(estimand, method, mid, mid, feasible, notes)
    if lower > upper:
        lower = upper
    return Bound(estimand, method, float(lower), float(upper), feasible, tuple(notes))


# ------------------------------------------------------- extended bounds

def _stratum_bounds(estimand, n_nt, n_at, n_co, s0, s1, s_nt1, s_at0):
    """Closed-form bounds on the within-stratum effect."""
    if estimand == NT:
        pi0 = (s0 - s_at0) / (n_nt + n_co)
        gamma = n_nt / (n_nt + n_co)
        pi1 = s_nt1 / n_nt
        return max(0.0, pi1 - pi0 / gamma), min(pi1, pi1 + (1.0 - gamma - pi0) / gamma)
    if estimand == AT:
        lam1 = (s1 - s_nt1) / (n_at + n_co)
        delta = n_at / (n_at + n_co)
        lam0 = s_at0 / n_at
        return (max(0.0, (lam1 - 1.0 + delta) / delta - lam0),
                min(1.0 - lam0, lam1 / delta - lam0))
    pi0 = (s0 - s_at0) / (n_nt + n_co)
    gamma = n_nt / (n_nt + n_co)
    lam1 = (s1 - s_nt1) / (n_at + n_co)
    delta = n_at / (n_at + n_co)
    return (max(0.0, (lam1 - delta) / (1.0 - delta) - pi0 / (1.0 - gamma)),
            min(1.0, lam1 / (1.0 - delta) + (gamma - pi0) / (1.0 - gamma)))


def stratum_estimates(data: StudyData, strata: StrataSpec):
    """Per-stratum plug-in estimates ``(pattern, N_NT, N_AT, N_CO, S0, S1,
    S_NT1, S_AT0)`` and any warnings. Outcomes must lie in ``[0, 1]``."""
    index, patterns = strata.labels(data)
    k = len(patterns)
    z = data.unit_z
    y = np.asarray(data.y, dtype=float)
    d = np.asarray(data.d, dtype=float)

    def tally(mask, weights=None):
        return np.bincount(index[mask], None if weights is None else weights[mask], minlength=k)

    treated, control = z == 1, z == 0
    n_w = np.bincount(index, minlength=k).astype(float)
    n_t, n_c = tally(treated), tally(control)
    for w in np.flatnonzero((n_t == 0) | (n_c == 0)):
        arm = "treated" if n_t[w] == 0 else "control"
        raise DegenerateStratumError(f"stratum {dict(zip(strata.columns, patterns[w]))} has no {arm} clusters")
    n_nt = n_w * tally(treated, 1 - d) / n_t
    n_at = n_w * tally(control, d) / n_c
    n_co = n_w - n_nt - n_at
    s1 = n_w * tally(treated, y) / n_t
    s0 = n_w * tally(control, y) / n_c
    s_nt1 = n_w * tally(treated, y * (1 - d)) / n_t
    s_at0 = n_w * tally(control, y * d) / n_c
    out, notes = [], []
    for w, pattern in enumerate(patterns):
        co = float(n_co[w])
        if co < 0:
            notes.append(f"stratum {pattern}: estimated CO count {co:.3g} < 0 set to 0")
            co = 0.0
        out.append((pattern, float(n_nt[w]), float(n_at[w]), co, float(s0[w]), float(s1[w]),
                    float(s_nt1[w]), float(s_at0[w])))
    return out, notes


def extended_bounds(data: StudyData, strata: StrataSpec, estimand, estimates=None) -> Bound:
    """Weighted average over strata of closed-form per-stratum bounds.

    ``estimates`` may pass a precomputed :func:`stratum_estimates` result.
    """
    if estimand not in TARGETS:
        raise ValueError(f"unknown estimand {estimand!r}")
    rows, notes = estimates if estimates is not None else stratum_estimates(data, strata)
    pos = {NT: 1, AT: 2, CO: 3}[estimand]
    total = sum(r[pos] for r in rows)
    if total < MIN_GROUP:
        return Bound(estimand, EXTENDED, 0.0, 0.0, True,
                     tuple(notes) + (f"estimated {estimand} group size {total:.3g} < {MIN_GROUP}; effect set to 0",))
    lo = hi = 0.0
    for pattern, n_nt, n_at, n_co, s0, s1, s_nt1, s_at0 in rows:
        weight = (n_nt, n_at, n_co)[pos - 1]
        if weight <= 0:
            continue
        l, u = _stratum_bounds(estimand, n_nt, n_at, n_co, s0, s1, s_nt1, s_at0)
        lo += weight / total * l
        hi += weight / total * u
    return _clamped(estimand, EXTENDED, lo, hi, True, notes)


def intersect(a: Bound, b: Bound) -> Bound:
    """``[max(lowers), min(uppers)]``; crossings beyond 1e-9 collapse to the
    midpoint with a warning."""
    if a.estimand != b.estimand:
        raise ValueError(f"estimand mismatch: {a.estimand} vs {b.estimand}")
    return _clamped(a.estimand, INTERSECTION, max(a.lower, b.lower), min(a.upper, b.upper),
                    a.feasible and b.feasible, a.warnings + b.warnings)


# --------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class BoundsConfig:
    kind: LearnerKind = LOGISTIC_RIDGE
    covariates: tuple = None
    strata: tuple = ()
    noise_r: float = None
    seed: int = 0


@dataclass(frozen=True)
class BoundsResult:
    """Bounds for every estimand on the original outcome scale."""

    classifier: dict
    extended: dict
    intersection: dict
    inputs: LpInputs = field(repr=False, default=None)
    transform: OutcomeTransform = None

    def rows(self):
        out = []
        for t in TARGETS:
            for part in (self.classifier, self.extended, self.intersection):
                if part.get(t) is not None:
                    out.append(part[t])
        return out


def estimate_bounds(data: StudyData, cfg: BoundsConfig = BoundsConfig(), key=(), dump_dir=None,
                    classifiers=None) -> BoundsResult:
    """Full bound pipeline: rescale, train classifiers, solve, intersect.

    ``key`` indexes the noise streams (e.g. a bootstrap replicate), so each
    call is reproducible in isolation. Extended bounds are None when no strata
    are configured or a stratum lacks an arm.
    """
    scaled, tr = rescale_outcomes(data)
    if classifiers is None:
        classifiers = train_classifiers(scaled, cfg.kind, cfg.covariates, cfg.seed, key, cfg.noise_r)
    inputs = compute_lp_inputs(scaled, classifiers)
    estimates = None
    if cfg.strata:
        try:
            estimates = stratum_estimates(scaled, StrataSpec(cfg.strata))
        except DegenerateStratumError:
            estimates = None
    cls, ext, both = {}, {}, {}
    for t in TARGETS:
        cls[t] = classifier_bounds(inputs, t, dump_dir).scaled(tr.scale)
        ext[t] = None
        if estimates is not None:
            ext[t] = extended_bounds(scaled, StrataSpec(cfg.strata), t, estimates).scaled(tr.scale)
        both[t] = intersect(cls[t], ext[t]) if ext[t] is not None else \
            Bound(t, INTERSECTION, cls[t].lower, cls[t].upper, cls[t].feasible, cls[t].warnings)
    return BoundsResult(cls, ext, both, inputs, tr)


@dataclass(frozen=True)
class BoundsPipeline:
    """Picklable ``(data, key) -> BoundsResult`` callable for the bootstrap."""

    cfg: BoundsConfig = BoundsConfig()

    def __call__(self, data: StudyData, key=()):
        return estimate_bounds(data, self.cfg, key=key)
