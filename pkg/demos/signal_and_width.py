"""How classifier quality narrows the bounds.

Compliance types are drawn from covariates with a tunable signal. Stronger
signal makes the trained classifiers more accurate and the bounds narrower on
average; single estimands can move either way because group sizes change too.
Run with ``python3 demos/signal_and_width.py``.
"""
# %% A population family indexed by signal strength
import numpy as np

from crtbounds import bounds as bnd
from crtbounds import sim
from crtbounds.classify import AT, LOGISTIC_RIDGE, NT, TARGETS
from crtbounds.rng import stream


def population(strength, J=151, seed=8):
    rng = stream(seed, "population")
    sizes = rng.integers(1, 5, size=J)
    cluster = np.repeat(np.arange(J), sizes)
    N = len(cluster)
    x = rng.normal(size=(N, 2))
    vaccine = (rng.random(N) < 0.5).astype(float)
    logits = np.column_stack([strength * x[:, 0], strength * x[:, 1], np.zeros(N)])
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    label = (rng.random(N)[:, None] >= np.cumsum(p, axis=1)[:, :2]).sum(axis=1)
    d0 = (label == sim.LABEL_CODES[AT]).astype(int)
    d1 = (label != sim.LABEL_CODES[NT]).astype(int)
    y0 = rng.random(N) < sim.outcome_probability(d0, sim.peer_mean(d0, cluster, sizes), vaccine)
    y1 = y0 | (rng.random(N) < sim.outcome_probability(d1, sim.peer_mean(d1, cluster, sizes), vaccine))
    return sim.Population(cluster, np.column_stack([x, vaccine]), label, d0, d1,
                          y0.astype(int), y1.astype(int), ("x0", "x1", "vaccine"))


# %% Average classifier-bound width over a few randomizations
cfg = bnd.BoundsConfig(LOGISTIC_RIDGE, ("x0", "x1"), (), None, 8)
for strength in (0.0, 1.0, 2.0, 5.0):
    pop = population(strength)
    widths = {t: [] for t in TARGETS}
    for r in range(20):
        res = bnd.estimate_bounds(sim.randomize(pop, 72, stream(8, "randomization", r)), cfg, key=(r,))
        for t in TARGETS:
            widths[t].append(res.classifier[t].upper - res.classifier[t].lower)
    mean = np.mean([np.mean(w) for w in widths.values()])
    print(f"signal {strength:>3}: " + "  ".join(f"{t} {np.mean(w):.3f}" for t, w in widths.items())
          + f"  mean {mean:.3f}")
