"""Cluster-bootstrap percentile confidence sets for estimated bounds.

Each replicate resamples treated clusters among treated and control clusters
among control (with replacement) and reruns the whole bound pipeline,
classifier training included, with noise drawn from the replicate's own
stream. Lower ends use the ``alpha/2`` percentile and upper ends the
``1 - alpha/2`` percentile of the replicate bounds.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds import CLASSIFIER, CROSS_TOL, EXTENDED, INTERSECTION
from .classify import TARGETS
from .model import StudyData
from .rng import stream

MAX_MISSING = 0.2


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 1000
    alpha: float = 0.05
    seed: int = 0
    threads: int = 1
    retain: bool = False

    def __post_init__(self):
        if int(self.B) < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class ConfidenceSet:
    estimand: str
    method: str
    lb_alpha2: float
    ub_1_alpha2: float
    B: int
    alpha: float
    n_missing: int = 0
    lower_samples: np.ndarray = field(default=None, repr=False)
    upper_samples: np.ndarray = field(default=None, repr=False)
    warnings: tuple = ()

    def contains(self, value, tol=1e-9):
        return self.lb_alpha2 - tol <= value <= self.ub_1_alpha2 + tol

    def to_dict(self):
        return {"estimand": self.estimand, "method": self.method,
                "ci": [self.lb_alpha2, self.ub_1_alpha2], "B": self.B, "alpha": self.alpha,
                "n_missing_replicates": self.n_missing, "warnings": list(self.warnings)}


def quantile(samples, p):
    """Type-7 sample quantile: linear interpolation at ``h = (n - 1) p``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("quantile of an empty sample")
    if not 0 <= p <= 1:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return float(np.quantile(x, p, method="linear"))


def resample_clusters(data: StudyData, rng):
    """Cluster positions of one stratified bootstrap draw (treated first)."""
    treated = np.flatnonzero(data.z == 1)
    control = np.flatnonzero(data.z == 0)
    return np.concatenate([rng.choice(treated, size=len(treated), replace=True),
                           rng.choice(control, size=len(control), replace=True)])


def _replicate(args):
    data, pipeline, seed, key, b = args
    idx = resample_clusters(data, stream(seed, "bootstrap", *key, b))
    res = pipeline(data.take_clusters(idx), (*key, b))
    return ({t: (res.classifier[t].lower, res.classifier[t].upper) for t in TARGETS},
            {t: (None if res.extended[t] is None else (res.extended[t].lower, res.extended[t].upper))
             for t in TARGETS})


def _interval(estimand, method, lo, hi, cfg, n_missing, lows, highs, retain):
    notes = ()
    if lo > hi + CROSS_TOL:
        mid = 0.5 * (lo + hi)
        notes = (f"crossed interval [{lo:.6g}, {hi:.6g}] replaced by midpoint",)
        lo = hi = mid
    elif lo > hi:
        lo = hi
    return ConfidenceSet(estimand, method, float(lo), float(hi), cfg.B, cfg.alpha, n_missing,
                         np.asarray(lows) if retain else None,
                         np.asarray(highs) if retain else None, notes)


def cluster_bootstrap(data: StudyData, pipeline, cfg: BootstrapConfig, point=None, key=()):
    """Percentile confidence sets for every estimand and method.

    ``pipeline(data, key)`` must return a bounds result with ``classifier``
    and ``extended`` maps; replicate ``b`` is called with ``(*key, b)``.
    ``point`` is the point-estimate result used to choose, per end, whether
    the intersection interval takes the classifier or the extended
    percentile; the classifier wins ties. Returns
    ``{estimand: {method: ConfidenceSet or None}}``.
    """
    if data.m == 0 or data.m == data.J:
        raise ValueError("both arms must contain clusters")
    if point is None:
        point = pipeline(data, key)
    tasks = [(data, pipeline, cfg.seed, tuple(key), b) for b in range(int(cfg.B))]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as ex:
            reps = list(ex.map(_replicate, tasks))
    else:
        reps = [_replicate(t) for t in tasks]

    a2 = cfg.alpha / 2
    want_ext = any(point.extended[t] is not None for t in TARGETS)
    out = {}
    for t in TARGETS:
        cl = np.array([r[0][t] for r in reps])
        ext = [r[1][t] for r in reps if r[1][t] is not None]
        n_missing = len(reps) - len(ext)
        cls_lo, cls_hi = quantile(cl[:, 0], a2), quantile(cl[:, 1], 1 - a2)
        res = {CLASSIFIER: _interval(t, CLASSIFIER, cls_lo, cls_hi, cfg, 0, cl[:, 0], cl[:, 1],
                                     cfg.retain),
               EXTENDED: None}
        lo, hi = cls_lo, cls_hi
        if want_ext:
            if n_missing > MAX_MISSING * len(reps):
                raise BootstrapError(f"{n_missing} of {len(reps)} replicates lack extended bounds for {t}")
            ex = np.array(ext)
            ext_lo, ext_hi = quantile(ex[:, 0], a2), quantile(ex[:, 1], 1 - a2)
            res[EXTENDED] = _interval(t, EXTENDED, ext_lo, ext_hi, cfg, n_missing, ex[:, 0], ex[:, 1],
                                      cfg.retain)
            pc, pe = point.classifier[t], point.extended[t]
            if pe is not None:
                if pe.lower > pc.lower:
                    lo = ext_lo
                if pe.upper < pc.upper:
                    hi = ext_hi
        res[INTERSECTION] = _interval(t, INTERSECTION, lo, hi, cfg, n_missing, [], [], False)
        out[t] = res
    return out
