import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ensembledagger.dagger import (
    DaggerConfig,
    Dataset,
    Discrepancy,
    Doubt,
    Ensemble,
    EnsembleConfig,
    Vanilla,
    decide,
    child_seeds,
    derive_seed,
    permits,
    rule_from_dict,
    rule_to_dict,
    run_dagger,
    run_epoch,
    write_epoch_records_csv,
)
from ensembledagger.nncore import TrainConfig
from ensembledagger.pendulum import Actor, ExpertController, PendulumParams
from ensembledagger.uncertainty import EnsemblePolicy, PredictiveDistribution

ENV = PendulumParams()
EXPERT = ExpertController()
TINY = DaggerConfig(epochs=2, ensemble=EnsembleConfig(hidden_sizes=(8,), n_members=3),
                    train=TrainConfig(epochs=3, batch_size=16, l2_coeff=1e-5))


def _dist(mean, var):
    return PredictiveDistribution(np.atleast_1d(mean), np.atleast_1d(var))


def test_vanilla_epoch_zero_full_beta_is_expert():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = decide(Vanilla(1.0, 0.5), _dist(0.3, 0.0), [0.1], 0, rng)
        assert d.actor == Actor.EXPERT and d.chosen_action.tolist() == [0.1]


def test_discrepancy_example():
    d = decide(Discrepancy(0.2), _dist(0.5, 0.0), [0.0], 1, None)
    assert d.actor == Actor.EXPERT and d.discrepancy_sq == 0.25


def test_ensemble_example():
    # discrepancy 0.5 <= 1 and doubt 0.05 <= 0.1
    d = decide(Ensemble(1.0, 0.1), _dist(np.sqrt(0.5), 0.05), [0.0], 1, None)
    assert d.actor == Actor.NOVICE
    assert d.chosen_action.tolist() == [np.sqrt(0.5)]
    assert d.discrepancy_sq == pytest.approx(0.5) and d.doubt == 0.05


def test_doubt_uses_mean_variance():
    d = decide(Doubt(3.0), PredictiveDistribution([0.0, 0.0], [2.0, 4.0]), [9.0, 9.0], 1, None)
    assert d.actor == Actor.NOVICE and d.doubt == 3.0


def test_decide_dimension_mismatch():
    with pytest.raises(ValueError):
        decide(Doubt(1.0), _dist([0.0, 0.0], [0.0, 0.0]), [0.0], 1, None)


@pytest.mark.parametrize("epoch", [0, 1, 3])
def test_vanilla_frequency_within_binomial_bounds(epoch):
    rule = Vanilla(0.8, 0.6)
    beta = 0.8 * 0.6 ** epoch
    assert rule.beta(epoch) == pytest.approx(beta, rel=1e-15)
    rng = np.random.default_rng(epoch)
    n = 10_000
    k = sum(decide(rule, _dist(0.0, 0.0), [1.0], epoch, rng).actor == Actor.EXPERT for _ in range(n))
    assert abs(k - n * beta) <= 3 * math.sqrt(n * beta * (1 - beta))


def test_rule_validation():
    for bad in (lambda: Vanilla(1.5, 0.5), lambda: Vanilla(0.5, 1.0), lambda: Discrepancy(-1),
                lambda: Doubt(-0.1), lambda: Ensemble(1.0, -1.0)):
        with pytest.raises(ValueError):
            bad()


def test_rule_dict_round_trip():
    for r in (Vanilla(0.9, 0.3), Discrepancy(0.1), Doubt(1e-3), Ensemble(0.2, 0.01)):
        assert rule_from_dict(rule_to_dict(r)) == r
    with pytest.raises(ValueError):
        rule_from_dict({"kind": "oracle"})


pos = st.floats(0, 10, allow_nan=False)


@given(pos, pos, pos, pos)
def test_permission_algebra(disc, doubt, tau, chi):
    both = permits(Ensemble(tau, chi), disc, doubt)
    assert both == (permits(Discrepancy(tau), disc, doubt) and permits(Doubt(chi), disc, doubt))
    assert permits(Discrepancy(math.inf), disc, doubt) and permits(Doubt(math.inf), disc, doubt)


@given(pos, pos, pos)
def test_permission_monotone(value, t1, t2):
    lo, hi = sorted((t1, t2))
    if permits(Discrepancy(lo), value, 0.0):
        assert permits(Discrepancy(hi), value, 0.0)
    if permits(Doubt(lo), 0.0, value):
        assert permits(Doubt(hi), 0.0, value)


def test_vanilla_has_no_permitted_set():
    with pytest.raises(TypeError):
        permits(Vanilla(), 0.0, 0.0)


def test_dataset_append_only_and_finite():
    ds = Dataset()
    ds.extend([[0.0, 1.0]], [[0.5]])
    ds.extend(np.zeros((3, 2)), np.zeros(3))
    assert len(ds) == 4 and ds.observations[0].tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        ds.extend([[np.nan, 0.0]], [[0.0]])
    with pytest.raises(ValueError):
        ds.extend(np.zeros((2, 2)), np.zeros(3))
    obs = ds.observations
    obs[0] = 99.0
    assert ds.observations[0, 0] == 0.0


def _novice(seed=0):
    return EnsemblePolicy.create([2, 8, 1], seeds=range(seed, seed + 3))


def test_epoch_zero_is_expert_only():
    rec, delta = run_epoch(_novice(), EXPERT, ENV, Doubt(1e9), 0, derive_seed(0, 0, 1, 0))
    assert all(a == Actor.EXPERT for a in rec.trajectory.actors)
    assert len(delta) == rec.trajectory_len


def test_delta_carries_expert_labels():
    rec, delta = run_epoch(_novice(), EXPERT, ENV, Discrepancy(math.inf), 1, derive_seed(0, 0, 1, 1))
    assert rec.n_novice_actions == rec.trajectory_len > 0
    np.testing.assert_array_equal(delta.observations, rec.trajectory.states[:-1])
    np.testing.assert_array_equal(delta.actions[:, 0], EXPERT(rec.trajectory.states[:-1]))
    assert not np.allclose(delta.actions[:, 0], rec.trajectory.actions)


def test_infinite_discrepancy_matches_zero_beta():
    seed = derive_seed(3, 0, 1, 2)
    a, _ = run_epoch(_novice(), EXPERT, ENV, Discrepancy(math.inf), 2, seed)
    b, _ = run_epoch(_novice(), EXPERT, ENV, Vanilla(0.0, 0.5), 2, seed)
    assert a.trajectory.actors == b.trajectory.actors
    np.testing.assert_array_equal(a.trajectory.states, b.trajectory.states)


def test_run_epoch_deterministic():
    seed = derive_seed(1, 0, 1, 1)
    a, da = run_epoch(_novice(), EXPERT, ENV, Doubt(1e-3), 1, seed)
    b, db = run_epoch(_novice(), EXPERT, ENV, Doubt(1e-3), 1, seed)
    assert a.trajectory.states.tobytes() == b.trajectory.states.tobytes()
    assert a.trajectory.actors == b.trajectory.actors
    assert da.fingerprint() == db.fingerprint()


def test_initial_state_independent_of_rule():
    seed = derive_seed(0, 4, 1, 2)
    a, _ = run_epoch(_novice(), EXPERT, ENV, Doubt(0.0), 2, seed)
    b, _ = run_epoch(_novice(), EXPERT, ENV, Discrepancy(math.inf), 2, seed)
    assert a.trajectory.states[0].tolist() == b.trajectory.states[0].tolist()


def test_blow_up_is_recorded_not_raised():
    class Wild:
        def predict(self, x):
            return _dist(np.inf, 0.0)

    rec, delta = run_epoch(Wild(), EXPERT, PendulumParams(u_min=-np.inf, u_max=np.inf),
                           Doubt(1.0), 1, 0)
    assert rec.blew_up and rec.trajectory_len == 0 and len(delta) == 0


def test_full_beta_run_is_expert_only_and_grows_by_two_trajectories():
    cfg = DaggerConfig(epochs=1, ensemble=TINY.ensemble, train=TINY.train)
    recs = run_dagger(cfg, Vanilla(1.0, 0.3))
    assert [r.epoch for r in recs] == [0, 1]
    assert all(a == Actor.EXPERT for r in recs for a in r.trajectory.actors)
    assert recs[-1].dataset_size == sum(r.trajectory_len for r in recs)


def test_dataset_size_is_cumulative_and_run_deterministic(tmp_path):
    recs = run_dagger(TINY, Doubt(1e-3))
    sizes = np.cumsum([r.trajectory_len for r in recs])
    assert [r.dataset_size for r in recs] == sizes.tolist()
    again = run_dagger(TINY, Doubt(1e-3))
    for a, b in zip(recs, again):
        assert a.trajectory.states.tobytes() == b.trajectory.states.tobytes()
    write_epoch_records_csv(recs, tmp_path / "a.csv")
    write_epoch_records_csv(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "epoch,trajectory_len,novice_action_fraction,failure_flag,dataset_size"


def test_initial_conditions_shared_across_rules():
    a = run_dagger(TINY, Doubt(1e-3))
    b = run_dagger(TINY, Discrepancy(0.1))
    for ra, rb in zip(a, b):
        assert ra.trajectory.states[0].tolist() == rb.trajectory.states[0].tolist()


def test_callable_rule_and_callback():
    seen = []

    def schedule(epoch, novice, dataset):
        assert novice is not None and len(dataset) > 0
        return Discrepancy(0.1 * epoch)

    def cb(rec, novice, nxt, ds):
        seen.append((rec.epoch, novice is None, nxt is not None, len(ds)))

    recs = run_dagger(TINY, schedule, on_epoch=cb)
    assert recs[0].rule is None and recs[2].rule == Discrepancy(0.2)
    assert [s[:3] for s in seen] == [(0, True, True), (1, False, True), (2, False, True)]


def test_failure_fn_applied():
    recs = run_dagger(TINY, Doubt(1e-3), failure_fn=lambda tr: True)
    assert all(r.failure for r in recs)


def test_warm_start_differs_from_scratch():
    warm = DaggerConfig(epochs=2, ensemble=TINY.ensemble, train=TINY.train, warm_start=True)
    kept = []
    run_dagger(warm, Doubt(1e-3), on_epoch=lambda r, n, nx, d: kept.append(nx))
    fresh = []
    run_dagger(TINY, Doubt(1e-3), on_epoch=lambda r, n, nx, d: fresh.append(nx))
    assert not np.array_equal(kept[-1].net.weights[0], fresh[-1].net.weights[0])


def test_child_seeds_do_not_depend_on_call_history():
    ss = derive_seed(0, 1, 2)
    first = [c.generate_state(2).tolist() for c in child_seeds(ss, 3)]
    ss.spawn(5)  # advancing the parent's spawn counter must not matter
    again = [c.generate_state(2).tolist() for c in child_seeds(ss, 3)]
    assert first == again
    assert len({tuple(s) for s in first}) == 3
