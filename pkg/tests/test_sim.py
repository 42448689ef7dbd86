import json

import numpy as np
import pytest
from scipy.special import expit

from crtbounds import sim
from crtbounds.classify import AT, CO, NT
from crtbounds.itt import estimate_overall_itt
from crtbounds.rng import stream


def _pop(label, y0, y1, cluster=None, x=None):
    label = np.asarray(label)
    n = len(label)
    cluster = np.arange(n) // 2 if cluster is None else np.asarray(cluster)
    d0 = (label == sim.LABEL_CODES[AT]).astype(int)
    d1 = (label != sim.LABEL_CODES[NT]).astype(int)
    if x is None:
        rng = np.random.default_rng(n)
        age = rng.integers(1, 80, size=n).astype(float)
        x = np.column_stack([rng.integers(0, 2, n), age, age**2, rng.integers(0, 2, n)])
    return sim.Population(cluster, np.asarray(x, dtype=float), label, d0, d1, np.asarray(y0),
                          np.asarray(y1))


def test_outcome_probability_examples():
    # an NT unit among NT peers: nobody takes treatment in either arm
    assert sim.outcome_probability(0, 0.0, 0) == pytest.approx(0.04743, abs=1e-5)
    assert sim.outcome_probability(0, 0.0, 1) == pytest.approx(expit(-3))
    for peers in (0.0, 0.5, 1.0):
        assert sim.outcome_probability(1, peers, 1) == pytest.approx(0.95257, abs=1e-5)
    assert sim.outcome_probability(0, 1.0, 0) == pytest.approx(expit(-1))


def test_peer_mean():
    cluster = np.array([0, 0, 0, 1, 2, 2])
    sizes = np.array([3, 1, 2])
    v = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(sim.peer_mean(v, cluster, sizes), [0.5, 1.0, 0.5, 0.0, 1.0, 0.0])


def test_compliance_probabilities():
    rng = np.random.default_rng(0)
    male = rng.integers(0, 2, 500)
    age = rng.integers(1, 80, 500)
    p = sim.compliance_probabilities(male, age)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
    # unnormalized weights: 1, -(a-40)(a-65)/div, -(a-20)(a-50)/div on the log scale
    a, div = 30.0, 20.0
    w = np.exp([0.0, -(a - 40) * (a - 65) / div, -(a - 20) * (a - 50) / div])
    np.testing.assert_allclose(sim.compliance_probabilities([0], [a])[0], w / w.sum(), rtol=1e-12)


def test_generated_population_invariants(default_population):
    pop = default_population
    assert np.all(pop.d0 <= pop.d1) and np.all(pop.y0 <= pop.y1)
    assert pop.J == 151
    for t, (a, b) in ((NT, (0, 0)), (AT, (1, 1)), (CO, (0, 1))):
        g = pop.indicator(t) == 1
        assert np.all(pop.d0[g] == a) and np.all(pop.d1[g] == b)
    again = sim.generate_population(sim.SimConfig())
    np.testing.assert_array_equal(again.y1, pop.y1)


def test_monotonicity_is_enforced():
    with pytest.raises(AssertionError):
        _pop([0, 1], [1, 0], [0, 0])


def test_all_always_takers():
    pop = _pop([1] * 6, [0, 1, 0, 0, 1, 0], [1, 1, 0, 1, 1, 0])
    tr = sim.true_estimands(pop)
    assert tr["tau_nt"] == 0.0 and tr["tau_co"] == 0.0
    assert tr["tau_at"] == pytest.approx(2 / 6)


def test_true_estimands_null_and_constant():
    lab = [0, 1, 2, 0, 1, 2, 2, 0, 1, 2, 0, 0]
    zero = sim.true_estimands(_pop(lab, [0, 1] * 6, [0, 1] * 6))
    assert zero["tau_itt"] == 0.0
    np.testing.assert_allclose(zero["beta"], 0.0, atol=1e-12)
    one = sim.true_estimands(_pop(lab, [0] * 12, [1] * 12))
    assert one["tau_itt"] == 1.0
    np.testing.assert_allclose(one["beta"], [1, 0, 0, 0, 0], atol=1e-9)


def test_hand_population_tau_nt():
    lab = [0, 0, 1, 2, 0, 2, 1, 0, 2, 2]
    y0 = [0, 1, 0, 0, 0, 1, 1, 0, 0, 0]
    y1 = [1, 1, 1, 1, 0, 1, 1, 1, 0, 1]
    tr = sim.true_estimands(_pop(lab, y0, y1))
    # NT units 0, 1, 4, 7 have effects 1, 0, 0, 1
    assert tr["tau_nt"] == pytest.approx(0.5)
    assert tr["tau_at"] == pytest.approx(0.5)
    assert tr["tau_co"] == pytest.approx(0.5)
    assert tr["tau_itt"] == pytest.approx(0.5)


def test_randomize_two_clusters():
    pop = _pop([0, 2, 1, 2], [0, 0, 1, 0], [1, 0, 1, 1])
    rng = np.random.default_rng(5)
    first = sum(sim.randomize(pop, 1, rng).z[0] for _ in range(10_000))
    assert 4800 <= first <= 5200
    with pytest.raises(ValueError):
        sim.randomize(pop, 2, rng)


def test_randomize_reveals_potential_outcomes(default_population):
    pop = default_population
    data = sim.randomize(pop, 72, stream(0, "randomization", 0))
    zu = data.unit_z
    assert data.m == 72
    np.testing.assert_array_equal(data.d, np.where(zu == 1, pop.d1, pop.d0))
    np.testing.assert_array_equal(data.y, np.where(zu == 1, pop.y1, pop.y0))
    flat = sim.Population(pop.cluster, pop.x, pop.label, pop.d0, pop.d1, pop.y0, pop.y0)
    np.testing.assert_array_equal(sim.randomize(flat, 72, stream(0, "randomization", 1)).y, pop.y0)


def test_zero_effect_coverage(default_population):
    pop = default_population
    null = sim.Population(pop.cluster, pop.x, pop.label, pop.d0, pop.d1, pop.y0, pop.y0)
    rep = sim.replicate(sim.SimConfig(reps=2000, analyses=("itt",)), pop=null)
    assert rep.n_failed == 0
    assert rep.truth["tau_itt"] == 0.0
    assert 0.93 <= rep.itt["coverage"] <= 0.97


def test_single_replication_matches_direct_run(default_population):
    cfg = sim.SimConfig(reps=1, analyses=("itt",))
    rep = sim.replicate(cfg, pop=default_population)
    direct = estimate_overall_itt(sim.randomize(default_population, cfg.m, stream(cfg.seed, "randomization", 0)))
    assert rep.itt["mean_estimate"] == direct.estimate
    assert rep.itt["mean_se"] == direct.std_error
    assert rep.itt["coverage"] == float(direct.ci_low <= rep.truth["tau_itt"] <= direct.ci_high)


def test_variance_is_conservative(default_population):
    rep = sim.replicate(sim.SimConfig(reps=500, analyses=("itt",)), pop=default_population)
    assert rep.itt["mean_var"] / rep.itt["sd"] ** 2 > 1.0


def test_thread_count_does_not_change_results(default_population):
    cfg = sim.SimConfig(reps=6, analyses=("itt", "hetero"))
    a = sim.replicate(cfg, pop=default_population).to_dict()
    b = sim.replicate(cfg, threads=2, pop=default_population).to_dict()
    a.pop("elapsed_seconds"), b.pop("elapsed_seconds")
    assert a == b


def test_bounds_report_schema(default_population):
    rep = sim.replicate(sim.SimConfig(reps=2, analyses=("bounds",), bootstrap=5), pop=default_population)
    rows = rep.table3_rows()
    assert {r["method"] for r in rows} == {"CLASSIFIER", "EXTENDED", "INTERSECTION", "POPULATION"}
    cls = [r for r in rows if r["method"] == "CLASSIFIER"][0]
    assert {"mean_lower", "mean_upper", "bound_coverage", "ci_coverage"} <= set(cls)
    pop_rows = [r for r in rows if r["method"] == "POPULATION"]
    assert all(r["bound_coverage"] == 1.0 for r in pop_rows)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        sim.SimConfig(J=10, m=10)
    with pytest.raises(ValueError):
        sim.SimConfig(size_probs={2: 0.5, 3: 0.4})
    with pytest.raises(ValueError):
        sim.SimConfig(analyses=("itt", "nope"))
    f = tmp_path / "cfg.json"
    f.write_text(json.dumps({"J": 20, "m": 9, "size_probs": {"2": 1.0}}))
    cfg = sim.SimConfig.from_json(f)
    assert cfg.size_probs == {2: 1.0} and cfg.J == 20
    f.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ValueError, match="unknown"):
        sim.SimConfig.from_json(f)
