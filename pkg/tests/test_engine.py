import numpy as np
import pytest

from fedpvr import rng as rng_mod
from fedpvr.engine import (ClientResult, ClientState, DivergenceError, FederatedEngine,
                           ServerState, Strategy, client_local_update, comm_cost, comm_ratio,
                           server_aggregate)
from fedpvr.objectives import MlpArchitecture, MlpObjective, QuadraticObjective, optimum
from fedpvr.params import Mask, mask_from_layer_cutoff, masked, pairwise_sum

from oracles import fedavg_fixed_point


def quad_pair():
    return [QuadraticObjective([1.0], [1.0]), QuadraticObjective([4.0], [-4.0])]


def mlp_clients(seed=0, n_clients=3, hidden=(4,)):
    rng = np.random.default_rng(seed)
    arch = MlpArchitecture(3, hidden, 3)
    objs = [MlpObjective(arch, rng.standard_normal((12, 3)), rng.integers(0, 3, 12))
            for _ in range(n_clients)]
    return arch, objs, arch.init(rng)


class TestStrategy:
    def test_validation(self):
        with pytest.raises(ValueError, match="needs a mask"):
            Strategy("fedpvr", 0.1, 5)
        with pytest.raises(ValueError, match="fixes its own mask"):
            Strategy("scaffold", 0.1, 5, mask=Mask.ones(2))
        with pytest.raises(ValueError, match="global_lr"):
            Strategy("fedavg", 0.1, 5, global_lr=0.5)
        Strategy("fedavg", 0.1, 5, global_lr=0.5, allow_small_global_lr=True)
        with pytest.raises(ValueError, match="prox_mu"):
            Strategy("fedavg", 0.1, 5, prox_mu=0.1)

    def test_resolved_masks(self):
        assert Strategy("fedavg", 0.1, 1).resolve_mask(3) == Mask.zeros(3)
        assert Strategy("fedprox", 0.1, 1, prox_mu=0.1).resolve_mask(3) == Mask.zeros(3)
        assert Strategy("scaffold", 0.1, 1).resolve_mask(3) == Mask.ones(3)


class TestCommCost:
    def test_formulas(self):
        d = 1000
        assert comm_cost(Strategy("fedavg", 0.1, 1), d) == (d, d)
        assert comm_cost(Strategy("scaffold", 0.1, 1), d) == (2 * d, 2 * d)
        bits = np.zeros(d)
        bits[-30:] = 1
        assert comm_cost(Strategy("fedpvr", 0.1, 1, mask=Mask(bits)), d) == (d + 30, d + 30)

    def test_ratios(self):
        pvr = Strategy("fedpvr", 0.1, 1, mask=Mask.zeros(10000))
        assert comm_ratio(pvr, 10000, 300) == pytest.approx(2.06)
        assert comm_ratio(pvr, 10000, 10000) == 4.0
        assert comm_ratio(Strategy("fedavg", 0.1, 1), 10000) == 2.0
        assert comm_ratio(Strategy("scaffold", 0.1, 1), 10000) == 4.0

    def test_record_accounting(self):
        arch, objs, x0 = mlp_clients()
        mask = mask_from_layer_cutoff(arch.layout, 1)
        eng = FederatedEngine(objs, Strategy("fedpvr", 0.1, 2, batch_size=4, mask=mask), x0)
        rec = eng.run_round()
        assert rec.params_down == rec.params_up == 3 * (arch.dim + mask.v)


class TestClientUpdate:
    def test_fedavg_is_plain_sgd(self):
        _, objs, x0 = mlp_clients()
        strat = Strategy("fedavg", 0.05, 6, batch_size=5)
        res = client_local_update(x0, np.zeros_like(x0), ClientState(0, np.zeros_like(x0)),
                                  objs[0], strat, Mask.zeros(x0.size), rng_mod.stream(3, 7))
        y, rng = x0.copy(), rng_mod.stream(3, 7)
        for _ in range(6):
            y = y - 0.05 * objs[0].stochastic_gradient(y, 5, rng).gradient
        assert res.y.tobytes() == y.tobytes()
        assert not res.c.any()

    def test_single_step_algebra(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        obj = QuadraticObjective(A, [1.0, -1.0])
        x = np.array([0.3, -0.7])
        strat = Strategy("scaffold", 0.1, 1)
        res = client_local_update(x, np.zeros(2), ClientState(0, np.zeros(2)), obj, strat,
                                  Mask.ones(2), np.random.default_rng(0))
        grad = obj.full_gradient(x)
        np.testing.assert_allclose(res.y, x - 0.1 * grad, rtol=0, atol=1e-15)
        np.testing.assert_allclose(res.c, grad, rtol=0, atol=1e-12)

    def test_telescoping_identity(self):
        arch, objs, x0 = mlp_clients(seed=1)
        mask = mask_from_layer_cutoff(arch.layout, 1)
        rng = np.random.default_rng(5)
        c = rng.standard_normal(x0.size) * mask.as_float()
        ci = rng.standard_normal(x0.size) * mask.as_float()
        strat = Strategy("fedpvr", 0.07, 8, batch_size=3, mask=mask)
        res = client_local_update(x0, c, ClientState(0, ci), objs[0], strat, mask,
                                  np.random.default_rng(2), trace=True)
        oracle = masked(np.mean(res.gradients, axis=0), mask)
        np.testing.assert_allclose(res.c, oracle, rtol=0, atol=1e-10)

    def test_fedprox_pulls_toward_server(self):
        obj = QuadraticObjective([1.0], [10.0])
        kwargs = dict(x=np.zeros(1), c=np.zeros(1), state=ClientState(0, np.zeros(1)), obj=obj,
                      mask=Mask.zeros(1))
        free = client_local_update(strategy=Strategy("fedavg", 0.1, 20), rng=np.random.default_rng(0), **kwargs)
        prox = client_local_update(strategy=Strategy("fedprox", 0.1, 20, prox_mu=1.0),
                                   rng=np.random.default_rng(0), **kwargs)
        assert 0 < prox.y[0] < free.y[0]

    def test_momentum_only_touches_sgd_block(self):
        obj = QuadraticObjective([1.0, 1.0], [1.0, 1.0])
        mask = Mask([0, 1])
        args = (np.zeros(2), np.zeros(2), ClientState(0, np.zeros(2)), obj)
        plain = client_local_update(*args, Strategy("fedpvr", 0.1, 3, mask=mask), mask,
                                    np.random.default_rng(0))
        heavy = client_local_update(*args, Strategy("fedpvr", 0.1, 3, momentum=0.9, mask=mask),
                                    mask, np.random.default_rng(0))
        assert heavy.y[1] == plain.y[1]
        assert heavy.y[0] > plain.y[0]

    def test_divergence_names_client_and_step(self):
        obj = QuadraticObjective([1e200], [1.0])
        with pytest.raises(DivergenceError, match="client 4") as info:
            client_local_update(np.ones(1), np.zeros(1), ClientState(4, np.zeros(1)), obj,
                                Strategy("fedavg", 1e200, 5), Mask.zeros(1),
                                np.random.default_rng(0))
        assert info.value.client == 4 and info.value.step >= 1


class TestServerAggregate:
    @staticmethod
    def result(i, y, c):
        return ClientResult(i, np.asarray(y, float), np.asarray(c, float), 0.0, 0.0, 1)

    def test_plain_average(self):
        server = ServerState(np.zeros(2), np.zeros(2), 1.0)
        out = server_aggregate(server, [self.result(1, [3, 0], [1, 1]), self.result(0, [1, 2], [0, 1])], 2)
        np.testing.assert_array_equal(out.x, [2.0, 1.0])
        np.testing.assert_array_equal(out.c, [0.5, 1.0])
        assert out.round == 1

    def test_single_client(self):
        server = ServerState(np.zeros(2), np.zeros(2), 1.0)
        out = server_aggregate(server, [self.result(0, [0.25, -3.0], [0, 0])], 1)
        np.testing.assert_array_equal(out.x, [0.25, -3.0])

    def test_global_lr_scales_step(self):
        server = ServerState(np.ones(1), np.zeros(1), 2.0)
        out = server_aggregate(server, [self.result(0, [2.0], [0]), self.result(1, [4.0], [0])], 2)
        np.testing.assert_array_equal(out.x, [5.0])

    def test_missing_client(self):
        server = ServerState(np.zeros(1), np.zeros(1), 1.0)
        with pytest.raises(ValueError, match=r"missing clients \[1\]"):
            server_aggregate(server, [self.result(0, [1.0], [0])], 2)


class TestEngine:
    def test_support_and_mean_invariants(self):
        arch, objs, x0 = mlp_clients(seed=2, n_clients=4)
        mask = mask_from_layer_cutoff(arch.layout, 1)
        eng = FederatedEngine(objs, Strategy("fedpvr", 0.1, 3, batch_size=4, mask=mask), x0, seed=1)
        off = mask.complement()
        for _ in range(4):
            eng.run_round()
            for cl in eng.clients:
                assert not masked(cl.c, off).any()
            assert not masked(eng.server.c, off).any()
            mean = pairwise_sum([cl.c for cl in eng.clients]) / eng.n_clients
            assert eng.server.c.tobytes() == mean.tobytes()

    @pytest.mark.parametrize("pair", [("scaffold", 1), ("fedavg", 0)])
    def test_reduction_equivalence(self, pair):
        kind, bit = pair
        arch, objs, x0 = mlp_clients(seed=3)
        mask = Mask.ones(arch.dim) if bit else Mask.zeros(arch.dim)
        a = FederatedEngine(objs, Strategy(kind, 0.1, 4, batch_size=5), x0, seed=9)
        b = FederatedEngine(objs, Strategy("fedpvr", 0.1, 4, batch_size=5, mask=mask), x0, seed=9)
        for _ in range(5):
            ra, rb = a.run_round(), b.run_round()
            assert np.max(np.abs(ra.model - rb.model)) < 1e-12

    def test_one_dimensional_fixed_points(self):
        objs = quad_pair()
        x_star = optimum(objs)
        assert x_star[0] == pytest.approx(-0.6)
        avg = FederatedEngine(objs, Strategy("fedavg", 0.05, 5), [0.0])
        avg.run(400)
        oracle = fedavg_fixed_point([o.A for o in objs], [o.b for o in objs], 0.05, 5)
        assert abs(avg.x[0] - oracle[0]) < 1e-8
        assert abs(avg.x[0] - x_star[0]) > 1e-2
        pvr = FederatedEngine(objs, Strategy("fedpvr", 0.05, 5, mask=Mask.ones(1)), [0.0])
        pvr.run(200)
        assert (pvr.x[0] - x_star[0]) ** 2 < 1e-8

    def test_deterministic_and_worker_independent(self):
        arch, objs, x0 = mlp_clients(seed=4, n_clients=4)
        strat = Strategy("scaffold", 0.1, 3, batch_size=4)
        runs = []
        for workers in (1, 1, 3):
            eng = FederatedEngine(objs, strat, x0, seed=5, workers=workers)
            runs.append([r.model.tobytes() for r in eng.run(3)])
        assert runs[0] == runs[1] == runs[2]

    def test_record_metrics(self):
        objs = quad_pair()
        eng = FederatedEngine(objs, Strategy("fedavg", 0.05, 5), [0.0],
                              evaluator=lambda x: {"test_loss": float(x[0] ** 2), "gap": 1.0})
        rec = eng.run_round()
        assert rec.round == 1
        assert rec.test_loss == pytest.approx(rec.model[0] ** 2)
        assert rec.extra == {"gap": 1.0}
        assert rec.client_drift > 0
        assert rec.diversity.round == 1

    def test_drift_shrinks_as_scaffold_converges(self):
        objs = quad_pair()
        eng = FederatedEngine(objs, Strategy("scaffold", 0.05, 5), [0.0])
        drift = [r.client_drift for r in eng.run(60)]
        # at the fixed point the corrected local steps vanish
        assert all(b <= a for a, b in zip(drift[20:], drift[21:]))
        assert drift[-1] < 1e-10

    def test_client_batch_capped_at_shard(self):
        _, objs, x0 = mlp_clients()
        eng = FederatedEngine(objs, Strategy("fedavg", 0.1, 1, batch_size=1000), x0)
        assert eng.client_batch == [12, 12, 12]
        eng.run_round()

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_carries_last_finite_record(self):
        objs = [QuadraticObjective([1.0], [1.0])]
        eng = FederatedEngine(objs, Strategy("fedavg", 1e150, 1), [0.0])
        with pytest.raises(DivergenceError) as info:
            eng.run(20)
        assert info.value.round_index > 1
        assert info.value.last_record is not None
        assert np.all(np.isfinite(info.value.last_record.model))
