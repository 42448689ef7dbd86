"""Bounds on spillover and complier effects from one simulated trial.

Run with ``python3 demos/bounds_walkthrough.py``; the bootstrap takes a few
seconds.
"""
# %% One realized trial and its science-table truth
from crtbounds import bounds as bnd
from crtbounds import sim
from crtbounds.classify import LOGISTIC_RIDGE, TARGETS
from crtbounds.infer import BootstrapConfig, cluster_bootstrap
from crtbounds.rng import stream

cfg = sim.SimConfig()
pop = sim.generate_population(cfg)
truth = sim.true_estimands(pop)
data = sim.randomize(pop, cfg.m, stream(cfg.seed, "randomization", 0))

# %% Classifier bounds, stratum bounds and their intersection
bcfg = bnd.BoundsConfig(LOGISTIC_RIDGE, None, ("male", "vaccine"), None, seed=1)
point = bnd.estimate_bounds(data, bcfg)
for t in TARGETS:
    c, e, i = point.classifier[t], point.extended[t], point.intersection[t]
    print(f"{t}: truth {truth['tau_' + t.lower()]:.3f}  classifier [{c.lower:.3f}, {c.upper:.3f}]  "
          f"strata [{e.lower:.3f}, {e.upper:.3f}]  both [{i.lower:.3f}, {i.upper:.3f}]")

# %% Bounds computed from the science table itself always cover the truth
for t, b in sim.population_bounds(pop, LOGISTIC_RIDGE).items():
    print(f"{t}: population bounds [{b.lower:.3f}, {b.upper:.3f}]")

# %% Percentile confidence sets from a stratified cluster bootstrap
ci = cluster_bootstrap(data, bnd.BoundsPipeline(bcfg), BootstrapConfig(B=100, seed=1), point=point)
for t in TARGETS:
    cs = ci[t][bnd.INTERSECTION]
    print(f"{t}: 95% confidence set [{cs.lb_alpha2:.3f}, {cs.ub_1_alpha2:.3f}]")
