import dataclasses
import math

import numpy as np
import pytest

from fedpals.aggregation import AggregationWeights, fedavg_weights
from fedpals.distshift import (
    SYNTHETIC_CLIENT_MARGINALS,
    SYNTHETIC_CLIENT_SIZES,
    Dataset,
    GaussianTaskSpec,
    make_target_delta,
    point_mass_dataset,
    sample_gaussian_dataset,
)
from fedpals.federation import (
    ClientState,
    ClientUpdate,
    FederationConfig,
    Strategy,
    aggregate,
    client_seed,
    run_round,
    select_participants,
    server_weights,
    train,
    verify_unbiasedness,
)
from fedpals.labelspace import LabelMarginal
from fedpals.learners import LocalUpdateConfig, ModelArch, ParamVector, init_params, local_update, loss_and_grad
from oracles import fsum_combination

ARCH = ModelArch("logistic", 2, 3)
TASK = GaussianTaskSpec()
FULL = LocalUpdateConfig(epochs=1, batch_size=1 << 30, learning_rate=0.1)


def synthetic_clients(seed=0):
    return [
        ClientState(i, sample_gaussian_dataset(TASK, LabelMarginal(m), n, seed=seed * 10 + i))
        for i, (m, n) in enumerate(zip(SYNTHETIC_CLIENT_MARGINALS, SYNTHETIC_CLIENT_SIZES))
    ]


def target_test(delta=0.0, n=300):
    return sample_gaussian_dataset(TASK, make_target_delta(delta), n, seed=99)


def config(strategy, rounds=5, target=None, **kw):
    return FederationConfig(ARCH, strategy, rounds, kw.pop("local", FULL), target=target, **kw)


class TestAggregate:
    def test_one_hot(self, rng):
        ups = [ParamVector(rng.normal(size=9), ARCH.layout) for _ in range(3)]
        np.testing.assert_array_equal(aggregate(ups, np.array([0.0, 1.0, 0.0])).values, ups[1].values)

    def test_midpoint(self):
        layout = ((1,),)
        out = aggregate([ParamVector([2.0], layout), ParamVector([4.0], layout)], AggregationWeights([0.5, 0.5]))
        np.testing.assert_array_equal(out.values, [3.0])

    def test_matches_exact_sum(self, rng):
        for _ in range(20):
            M = int(rng.integers(2, 12))
            ups = [ParamVector(rng.normal(0, 10, 9), ARCH.layout) for _ in range(M)]
            w = fedavg_weights(rng.integers(1, 1000, M))
            ref = fsum_combination(w.alpha, [u.values for u in ups])
            np.testing.assert_allclose(aggregate(ups, w).values, ref, rtol=0, atol=1e-12)

    def test_errors(self):
        a = ParamVector(np.zeros(9), ARCH.layout)
        b = ParamVector(np.zeros(9), ((9,),))
        with pytest.raises(ValueError, match="layouts differ"):
            aggregate([a, b], np.array([0.5, 0.5]))
        with pytest.raises(ValueError, match="updates for"):
            aggregate([a], np.array([0.5, 0.5]))


class TestStrategy:
    def test_names(self):
        assert Strategy("fedavg").name == "fedavg"
        assert Strategy("fedpals", lam=0.0).name == "fedpals_lam0"
        assert Strategy("fedpals", ess_target=0.5).name == "fedpals_ess0.5"
        assert Strategy("fedpals_prox", lam=1.0, prox_mu=0.01).name == "fedpals_prox_lam1_mu0.01"

    @pytest.mark.parametrize(
        "kw",
        [
            {"kind": "scaffold"},
            {"kind": "fedpals"},
            {"kind": "fedpals", "lam": 1.0, "ess_target": 0.5},
            {"kind": "fedpals", "lam": -1.0},
            {"kind": "fedpals", "ess_target": 1.5},
            {"kind": "fedpals_prox", "lam": 0.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            Strategy(**kw)

    def test_config_invariants(self):
        with pytest.raises(ValueError, match="rounds"):
            config(Strategy("fedavg"), rounds=0)
        with pytest.raises(ValueError, match="client_fraction"):
            config(Strategy("fedavg"), client_fraction=0.0)
        with pytest.raises(ValueError, match="target"):
            config(Strategy("fedpals", lam=0.0))


def test_only_summaries_cross_to_server():
    assert {f.name for f in dataclasses.fields(ClientUpdate)} == {"params", "n", "marginal"}


class TestRunRound:
    def test_single_client_equals_local_update(self):
        client = synthetic_clients()[:1]
        g = init_params(ARCH, 0)
        for strat in (Strategy("fedavg"), Strategy("fedpals", lam=0.3)):
            cfg = config(strat, target=make_target_delta(0.3))
            new, rec = run_round(g, client, cfg, 1)
            expected = local_update(ARCH, g, client[0].dataset, FULL, client_seed(0, 0, 1))
            np.testing.assert_array_equal(new.values, expected.values)
            np.testing.assert_array_equal(rec.alpha, [1.0])

    def test_identical_clients_match_centralized_step(self, rng):
        data = sample_gaussian_dataset(TASK, LabelMarginal([0.3, 0.3, 0.4]), 30, seed=1)
        clients = [ClientState(i, data) for i in range(4)]
        g = ParamVector(rng.normal(size=9), ARCH.layout)
        new, _ = run_round(g, clients, config(Strategy("fedavg")), 1)
        _, grad = loss_and_grad(ARCH, g, data)
        np.testing.assert_allclose(new.values, g.values - 0.1 * grad.values, rtol=0, atol=1e-14)

    def test_fedpals_in_hull_target_weights(self):
        recs = train(config(Strategy("fedpals", lam=0.0), rounds=4, target=make_target_delta(0.0)), synthetic_clients(), target_test())
        for r in recs:
            np.testing.assert_allclose(r.alpha, [0.5, 0.5], atol=1e-8)
            assert r.coverage and r.residual < 1e-15

    def test_participant_padding(self):
        data = sample_gaussian_dataset(TASK, LabelMarginal([0.3, 0.3, 0.4]), 12, seed=1)
        clients = [ClientState(i, data) for i in range(10)]
        cfg = config(Strategy("fedavg"), client_fraction=0.25)
        g = init_params(ARCH, 0)
        for t in range(1, 6):
            _, rec = run_round(g, clients, cfg, t)
            assert len(rec.participants) == math.ceil(0.25 * 10)
            absent = np.setdiff1d(np.arange(10), rec.participants)
            np.testing.assert_array_equal(rec.alpha[absent], 0.0)
            assert abs(rec.alpha.sum() - 1.0) < 1e-12

    def test_select_participants_deterministic(self):
        assert select_participants(20, 0.1, 3, 7) == select_participants(20, 0.1, 3, 7)
        assert select_participants(5, 1.0, 0, 1) == [0, 1, 2, 3, 4]

    def test_degenerate_subsample_flags_coverage(self):
        one = sample_gaussian_dataset(TASK, LabelMarginal([1.0, 0.0, 0.0]), 10, seed=2)
        clients = [ClientState(i, one) for i in range(3)]
        cfg = config(Strategy("fedpals", lam=0.0), target=make_target_delta(0.0))
        _, rec = run_round(init_params(ARCH, 0), clients, cfg, 1)
        assert not rec.coverage
        assert abs(rec.alpha.sum() - 1) < 1e-12 and np.all(rec.alpha >= 0)
        assert rec.residual == pytest.approx(0.375, abs=1e-12)

    def test_no_clients(self):
        with pytest.raises(ValueError, match="no clients"):
            run_round(init_params(ARCH, 0), [], config(Strategy("fedavg")), 1)

    def test_ess_target_strategy(self):
        clients = synthetic_clients()
        T = LabelMarginal([0.2, 0.3, 0.5])
        cfg = config(Strategy("fedpals", ess_target=0.95), target=T)
        _, rec = run_round(init_params(ARCH, 0), clients, cfg, 1)
        assert rec.ess / 58 == pytest.approx(0.95, rel=0.01)

    def test_full_ess_target_is_fedavg(self):
        cfg = config(Strategy("fedpals", ess_target=1.0), target=make_target_delta(1.0))
        _, rec = run_round(init_params(ARCH, 0), synthetic_clients(), cfg, 1)
        np.testing.assert_array_equal(rec.alpha, [40 / 58, 18 / 58])
        assert math.isinf(rec.lam)


class TestTrain:
    def test_deterministic(self):
        cfg = config(Strategy("fedpals", lam=0.0), rounds=6, target=make_target_delta(0.4), local=LocalUpdateConfig(1, 8, 0.1))
        a = train(cfg, synthetic_clients(), target_test(0.4))
        b = train(cfg, synthetic_clients(), target_test(0.4))
        strip = lambda recs: [dataclasses.replace(r, wall_ms=0.0, alpha=r.alpha.tobytes()) for r in recs]
        assert strip(a) == strip(b)

    def test_empty_test_set(self):
        with pytest.raises(ValueError, match="empty target test set"):
            train(config(Strategy("fedavg")), synthetic_clients(), Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 3))

    def test_checkpoint_resume_matches_uninterrupted(self, tmp_path):
        local = LocalUpdateConfig(1, 8, 0.1)
        full = train(config(Strategy("fedavg"), rounds=6, local=local), synthetic_clients(), target_test())
        ck = tmp_path / "ck.bin"
        train(config(Strategy("fedavg"), rounds=3, local=local), synthetic_clients(), target_test(), checkpoint=ck)
        rest = train(config(Strategy("fedavg"), rounds=6, local=local), synthetic_clients(), target_test(), checkpoint=ck, resume=True)
        assert [r.round for r in rest] == [4, 5, 6]
        assert [r.target_loss for r in rest] == [r.target_loss for r in full[3:]]

    def test_large_lambda_tracks_fedavg(self):
        T = make_target_delta(0.7)
        local = LocalUpdateConfig(1, 8, 0.1)
        fa = train(config(Strategy("fedavg"), rounds=10, local=local), synthetic_clients(), target_test(0.7))
        fp = train(config(Strategy("fedpals", lam=1e10), rounds=10, target=T, local=local), synthetic_clients(), target_test(0.7))
        for a, b in zip(fa, fp):
            assert np.max(np.abs(a.alpha - b.alpha)) < 1e-4
        assert abs(fa[-1].target_loss - fp[-1].target_loss) < 1e-3


class TestOracle:
    def test_oracle_clients_get_fedavg_weights(self):
        T = LabelMarginal([0.5, 0.3, 0.2])
        clients = [ClientState(i, sample_gaussian_dataset(TASK, T, n, seed=i)) for i, n in enumerate([10, 20, 30])]
        for c in clients:
            np.testing.assert_array_equal(c.marginal.probs, T.probs)
        ups = [ClientUpdate(init_params(ARCH, 0), c.n, c.marginal) for c in clients]
        dec = server_weights(ups, Strategy("fedpals", lam=0.0), T)
        np.testing.assert_allclose(dec.weights.alpha, fedavg_weights([10, 20, 30]).alpha, atol=1e-9)

    def test_oracle_rejects_mismatched_clients(self):
        cfg = config(Strategy("oracle"), target=make_target_delta(0.0))
        with pytest.raises(ValueError, match="oracle strategy: client 0"):
            train(cfg, synthetic_clients(), target_test())


def two_point_instance():
    universe = [np.array([[1.0, -0.5]]), np.array([[-0.3, 0.8]])]
    clients = [ClientState(0, point_mass_dataset(universe, [5, 0])), ClientState(1, point_mass_dataset(universe, [0, 5]))]
    target = point_mass_dataset(universe, [3, 2])
    return clients, target


class TestUnbiasedness:
    ARCH2 = ModelArch("logistic", 2, 2)

    def test_two_clients_exact(self, rng):
        clients, target = two_point_instance()
        for _ in range(5):
            p = ParamVector(rng.normal(size=6), self.ARCH2.layout)
            assert verify_unbiasedness(clients, np.array([0.6, 0.4]), target, self.ARCH2, p, 0.7) < 1e-10

    def test_zero_step(self, rng):
        clients, target = two_point_instance()
        p = ParamVector(rng.normal(size=6), self.ARCH2.layout)
        assert verify_unbiasedness(clients, fedavg_weights([5, 5]), target, self.ARCH2, p, 0.0) == 0.0

    def test_fedavg_is_biased(self, rng):
        clients, target = two_point_instance()
        p = ParamVector(rng.normal(size=6), self.ARCH2.layout)
        assert verify_unbiasedness(clients, fedavg_weights([5, 5]), target, self.ARCH2, p, 1.0) > 1e-3

    def test_coverage_violation(self, rng):
        universe = [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([[1.0, 1.0]])]
        clients = [ClientState(0, point_mass_dataset(universe, [2, 2, 0])), ClientState(1, point_mass_dataset(universe, [2, 0, 2]))]
        target = point_mass_dataset(universe, [0, 2, 2])
        with pytest.raises(ValueError, match="instance violates target coverage"):
            verify_unbiasedness(clients, np.array([0.5, 0.5]), target, ARCH, init_params(ARCH, 0), 0.1)
