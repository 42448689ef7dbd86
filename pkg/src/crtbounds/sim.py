"""Synthetic cluster randomized trials with household interference.

The generator follows a household study of non-pharmaceutical
interventions: covariates ``(male, age, age^2, vaccine)``, compliance types
whose probabilities depend on sex and age, and binary outcomes whose
probability rises with the share of household peers using the treatment.
One population is drawn per configuration; replications re-randomize the
treatment assignment only.
"""
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from . import bounds as bnd
from .classify import AT, CO, NT, TARGETS, LearnerKind, train_on_labels
from .infer import BootstrapConfig, cluster_bootstrap
from .itt import estimate_hetero_itt, estimate_overall_itt
from .model import StudyData
from .rng import stream

COVARIATES = ("male", "age", "age2", "vaccine")
LABEL_CODES = {NT: 0, AT: 1, CO: 2}


@dataclass(frozen=True)
class SimConfig:
    """Design and generator knobs; every field can be set from JSON."""

    J: int = 151
    m: int = 72
    size_probs: dict = field(default_factory=lambda: {2: 0.4, 3: 0.3, 4: 0.2, 5: 0.1})
    p_male: float = 0.5
    age_range: tuple = (1, 79)
    p_vaccine: float = 0.15
    reps: int = 1000
    seed: int = 0
    learner: str = "logistic"
    lam: float = 1e-3
    strata: tuple = ("male", "vaccine")
    noise_r: float = 1e-10
    bootstrap: int = 0
    alpha: float = 0.05
    analyses: tuple = ("itt", "hetero")

    def __post_init__(self):
        probs = {int(k): float(v) for k, v in dict(self.size_probs).items()}
        object.__setattr__(self, "size_probs", probs)
        object.__setattr__(self, "age_range", tuple(int(a) for a in self.age_range))
        object.__setattr__(self, "strata", tuple(self.strata))
        object.__setattr__(self, "analyses", tuple(self.analyses))
        if not 1 <= self.m <= self.J - 1:
            raise ValueError(f"m must lie in [1, J-1]; got J={self.J}, m={self.m}")
        if any(k < 1 for k in probs) or any(v < 0 for v in probs.values()):
            raise ValueError("cluster sizes must be >= 1 with non-negative probabilities")
        if abs(sum(probs.values()) - 1.0) > 1e-9:
            raise ValueError("cluster-size probabilities must sum to 1")
        unknown = set(self.analyses) - {"itt", "hetero", "bounds"}
        if unknown:
            raise ValueError(f"unknown analyses {sorted(unknown)}")

    @classmethod
    def from_json(cls, path):
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**raw)

    def to_dict(self):
        out = asdict(self)
        out["size_probs"] = {str(k): v for k, v in self.size_probs.items()}
        return out

    @property
    def kind(self):
        return LearnerKind.parse(self.learner, self.lam)


@dataclass(frozen=True, eq=False)
class Population:
    """Science table: covariates, compliance labels and potential outcomes."""

    cluster: np.ndarray
    x: np.ndarray
    label: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    covariate_names: tuple = COVARIATES

    def __post_init__(self):
        if np.any(self.d0 > self.d1):
            raise AssertionError("receipt is not monotone")
        if np.any(self.y0 > self.y1):
            raise AssertionError("outcome is not monotone")
        codes = np.select([(self.d0 == 0) & (self.d1 == 0), (self.d0 == 1) & (self.d1 == 1)],
                          [LABEL_CODES[NT], LABEL_CODES[AT]], LABEL_CODES[CO])
        if not np.array_equal(codes, self.label):
            raise AssertionError("compliance labels disagree with receipts")

    @property
    def J(self):
        return int(self.cluster.max()) + 1

    @property
    def N(self):
        return len(self.y0)

    def indicator(self, t):
        return (self.label == LABEL_CODES[t]).astype(int)

    def labels(self):
        return {t: self.indicator(t) for t in TARGETS}

    def design(self):
        return np.column_stack([np.ones(self.N), self.x])


def compliance_probabilities(male, age):
    """Normalized ``(NT, AT, CO)`` probabilities per unit."""
    male = np.asarray(male, dtype=float)
    age = np.asarray(age, dtype=float)
    div = np.where(male == 1, 150.0, 20.0)
    logw = np.column_stack([np.zeros_like(age), -(age - 40) * (age - 65) / div,
                            -(age - 20) * (age - 50) / div])
    return np.exp(logw - logsumexp(logw, axis=1, keepdims=True))


def outcome_probability(d, peer_mean, vaccine):
    """Outcome probability given own receipt, peer receipt share and vaccine."""
    d = np.asarray(d)
    return np.where(d == 1, expit(-3 + 2 + 4 * np.asarray(vaccine, dtype=float)),
                    expit(-3 + 2 * np.asarray(peer_mean, dtype=float)))


def peer_mean(values, cluster, sizes):
    """Mean of ``values`` over each unit's cluster peers (0 when alone)."""
    totals = np.bincount(cluster, weights=values, minlength=len(sizes))
    n = sizes[cluster]
    return np.where(n > 1, (totals[cluster] - values) / np.maximum(n - 1, 1), 0.0)


def generate_population(cfg: SimConfig, rng=None) -> Population:
    rng = stream(cfg.seed, "population") if rng is None else rng
    choices = np.array(sorted(cfg.size_probs))
    probs = np.array([cfg.size_probs[k] for k in choices])
    sizes = rng.choice(choices, size=cfg.J, p=probs)
    cluster = np.repeat(np.arange(cfg.J), sizes)
    N = len(cluster)
    male = (rng.random(N) < cfg.p_male).astype(float)
    age = rng.integers(cfg.age_range[0], cfg.age_range[1] + 1, size=N).astype(float)
    vaccine = (rng.random(N) < cfg.p_vaccine).astype(float)
    p = compliance_probabilities(male, age)
    u = rng.random(N)
    label = (u[:, None] >= np.cumsum(p, axis=1)[:, :2]).sum(axis=1)
    d0 = (label == LABEL_CODES[AT]).astype(int)
    d1 = (label != LABEL_CODES[NT]).astype(int)
    y0 = (rng.random(N) < outcome_probability(d0, peer_mean(d0, cluster, sizes), vaccine)).astype(int)
    extra = (rng.random(N) < outcome_probability(d1, peer_mean(d1, cluster, sizes), vaccine)).astype(int)
    y1 = np.maximum(y0, extra)
    x = np.column_stack([male, age, age**2, vaccine])
    return Population(cluster, x, label, d0, d1, y0, y1)


def true_estimands(pop: Population) -> dict:
    """Finite-population estimands; group effects of empty groups are 0."""
    tau = (pop.y1 - pop.y0).astype(float)
    X = pop.design()
    beta, _, rank, _ = np.linalg.lstsq(X, tau, rcond=None)
    if rank < X.shape[1]:
        raise np.linalg.LinAlgError("singular design for the best linear projection")
    out = {"tau_itt": float(tau.mean()), "beta": beta}
    for t in TARGETS:
        g = pop.indicator(t) == 1
        out[f"tau_{t.lower()}"] = float(tau[g].mean()) if g.any() else 0.0
    return out


def randomize(pop: Population, m: int, rng) -> StudyData:
    """Assign ``m`` clusters to treatment by simple random sampling and reveal
    the matching receipts and outcomes."""
    J = pop.J
    if not 1 <= m <= J - 1:
        raise ValueError(f"m must lie in [1, {J - 1}], got {m}")
    z = np.zeros(J, dtype=int)
    z[rng.choice(J, size=m, replace=False)] = 1
    zu = z[pop.cluster]
    d = np.where(zu == 1, pop.d1, pop.d0)
    y = np.where(zu == 1, pop.y1, pop.y0).astype(float)
    ids = tuple(f"c{j}" for j in range(J))
    return StudyData(ids, z, pop.cluster, d, y, pop.x, pop.covariate_names)


def population_bounds(pop: Population, kind: LearnerKind, seed=0, key=(), noise_r=None):
    """Classifier bounds from exact science-table inputs and population-level
    classifiers fit on the true labels."""
    labels = pop.labels()
    clf = train_on_labels(pop.design(), labels, kind, seed, key, noise_r)
    inputs = bnd.population_lp_inputs(pop.y0, pop.y1, labels, {t: clf[t].predict() for t in TARGETS})
    return {t: bnd.classifier_bounds(inputs, t) for t in TARGETS}


# ------------------------------------------------------------ replications

def _one_replication(args):
    cfg, pop, truth, r = args
    data = randomize(pop, cfg.m, stream(cfg.seed, "randomization", r))
    out = {"rep": r}
    try:
        if "itt" in cfg.analyses:
            out["itt"] = estimate_overall_itt(data).to_dict()
        if "hetero" in cfg.analyses:
            out["hetero"] = estimate_hetero_itt(data).to_dict()
        if "bounds" in cfg.analyses:
            bcfg = bnd.BoundsConfig(cfg.kind, None, cfg.strata, cfg.noise_r, cfg.seed)
            point = bnd.estimate_bounds(data, bcfg, key=(r,))
            out["bounds"] = {t: {m: (b[t].to_dict() if b[t] is not None else None)
                                 for m, b in ((bnd.CLASSIFIER, point.classifier),
                                              (bnd.EXTENDED, point.extended),
                                              (bnd.INTERSECTION, point.intersection))}
                             for t in TARGETS}
            pb = population_bounds(pop, cfg.kind, cfg.seed, (r,), cfg.noise_r)
            out["population_bounds"] = {t: pb[t].to_dict() for t in TARGETS}
            if cfg.bootstrap > 0:
                bc = BootstrapConfig(cfg.bootstrap, cfg.alpha, cfg.seed)
                cs = cluster_bootstrap(data, bnd.BoundsPipeline(bcfg), bc, point=point, key=(r,))
                out["ci"] = {t: {m: (c.to_dict() if c is not None else None) for m, c in v.items()}
                             for t, v in cs.items()}
    except Exception as exc:  # recorded and counted, never fatal
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


@dataclass
class ReplicationReport:
    config: dict
    truth: dict
    n_reps: int
    n_failed: int
    itt: dict = None
    hetero: list = None
    bounds: dict = None
    failures: list = field(default_factory=list)
    elapsed_seconds: float = 0.0

    def to_dict(self):
        return asdict(self)

    def table1_rows(self):
        rows = []
        if self.itt:
            rows.append({"estimand": "tau_itt", **self.itt})
        for h in self.hetero or []:
            rows.append(h)
        return rows

    def table3_rows(self):
        rows = []
        for t, methods in (self.bounds or {}).items():
            for m, stats in methods.items():
                rows.append({"estimand": t, "method": m, **stats})
        return rows


def _summ(est, se, ci, p, truth):
    est = np.asarray(est, dtype=float)
    n = len(est)
    covered = np.array([lo <= truth <= hi for lo, hi in ci])
    return {"truth": float(truth), "mean_estimate": float(est.mean()),
            "bias": float(est.mean() - truth),
            "sd": float(est.std(ddof=1)) if n > 1 else 0.0,
            "mc_se": float(est.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
            "mean_se": float(np.mean(se)), "mean_var": float(np.mean(np.square(se))),
            "coverage": float(covered.mean()), "mean_p": float(np.mean(p))}


def summarize(cfg: SimConfig, truth: dict, results: list, elapsed=0.0) -> ReplicationReport:
    ok = [r for r in results if "error" not in r]
    failures = [{"rep": r["rep"], "error": r["error"]} for r in results if "error" in r]
    tr = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in truth.items()}
    rep = ReplicationReport(cfg.to_dict(), tr, len(results), len(failures), failures=failures,
                            elapsed_seconds=elapsed)
    if not ok:
        return rep
    if "itt" in ok[0]:
        it = [r["itt"] for r in ok]
        rep.itt = _summ([i["estimate"] for i in it], [i["se"] for i in it], [i["ci"] for i in it],
                        [i["p"] for i in it], truth["tau_itt"])
    if "hetero" in ok[0]:
        coefs = [r["hetero"]["coefficients"] for r in ok]
        rep.hetero = []
        for k, name in enumerate(c["estimand"] for c in coefs[0]):
            col = [c[k] for c in coefs]
            s = _summ([c["estimate"] for c in col], [c["se"] for c in col], [c["ci"] for c in col],
                      [c["p"] for c in col], truth["beta"][k])
            rep.hetero.append({"estimand": f"beta_{name}", **s})
        rep.hetero.append({"estimand": "joint_test",
                           "mean_p": float(np.mean([r["hetero"]["joint_test"]["p"] for r in ok]))})
    if "bounds" in ok[0]:
        rep.bounds = {}
        for t in TARGETS:
            tau = truth[f"tau_{t.lower()}"]
            rep.bounds[t] = {}
            for m in (bnd.CLASSIFIER, bnd.EXTENDED, bnd.INTERSECTION):
                bs = [r["bounds"][t][m] for r in ok if r["bounds"][t][m] is not None]
                if not bs:
                    continue
                stats = {"truth": tau, "n": len(bs),
                         "mean_lower": float(np.mean([b["lower"] for b in bs])),
                         "mean_upper": float(np.mean([b["upper"] for b in bs])),
                         "bound_coverage": float(np.mean([b["lower"] - 1e-9 <= tau <= b["upper"] + 1e-9
                                                          for b in bs])),
                         "infeasible_share": float(np.mean([not b["feasible"] for b in bs]))}
                cis = [r["ci"][t][m] for r in ok if "ci" in r and r["ci"][t].get(m) is not None]
                if cis:
                    stats["mean_ci_lower"] = float(np.mean([c["ci"][0] for c in cis]))
                    stats["mean_ci_upper"] = float(np.mean([c["ci"][1] for c in cis]))
                    stats["ci_coverage"] = float(np.mean([c["ci"][0] - 1e-9 <= tau <= c["ci"][1] + 1e-9
                                                          for c in cis]))
                rep.bounds[t][m] = stats
            pbs = [r["population_bounds"][t] for r in ok]
            rep.bounds[t]["POPULATION"] = {
                "truth": tau, "n": len(pbs),
                "mean_lower": float(np.mean([b["lower"] for b in pbs])),
                "mean_upper": float(np.mean([b["upper"] for b in pbs])),
                "bound_coverage": float(np.mean([b["lower"] - 1e-9 <= tau <= b["upper"] + 1e-9
                                                 for b in pbs])),
                "infeasible_share": float(np.mean([not b["feasible"] for b in pbs]))}
    return rep


def replicate(cfg: SimConfig, analyses=None, reps=None, threads=1, pop=None) -> ReplicationReport:
    """Fix one population and analyse ``reps`` independent randomizations.

    Replication ``r`` draws its assignment from the ``randomization`` stream
    at index ``r``, so results do not depend on ``threads``.
    """
    if analyses is not None or reps is not None:
        kw = {}
        if analyses is not None:
            kw["analyses"] = tuple(analyses)
        if reps is not None:
            kw["reps"] = int(reps)
        cfg = SimConfig(**{**cfg.__dict__, **kw})
    start = time.perf_counter()
    pop = generate_population(cfg) if pop is None else pop
    truth = true_estimands(pop)
    tasks = [(cfg, pop, truth, r) for r in range(cfg.reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_one_replication, tasks, chunksize=max(1, cfg.reps // (4 * threads))))
    else:
        results = [_one_replication(t) for t in tasks]
    return summarize(cfg, truth, results, time.perf_counter() - start)
