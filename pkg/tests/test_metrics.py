import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedpvr.metrics import (DEGENERATE, NOT_REACHED, XI_INFINITE, cka_linear, client_cka,
                            client_drift, control_variate_error, drift_diversity,
                            format_rounds, rounds_to_target, speedup)
from fedpvr.objectives import MlpArchitecture
from fedpvr.params import LayerLayout, Mask


class TestDriftDiversity:
    def test_orthonormal_pair(self):
        assert drift_diversity([[1.0, 0.0], [0.0, 1.0]]).xi_global == 1.0

    @pytest.mark.parametrize("n", [1, 2, 5, 10])
    def test_identical_updates(self, n):
        m = np.array([0.3, -1.2, 2.0])
        assert drift_diversity([m] * n).xi_global == pytest.approx(1 / n, rel=1e-14)

    def test_cancellation_sentinel(self):
        assert drift_diversity([[1.0, 0.0], [-1.0, 0.0]]).xi_global == XI_INFINITE

    def test_degenerate(self):
        assert drift_diversity([[0.0, 0.0], [0.0, 0.0]]).xi_global == DEGENERATE

    def test_per_layer(self):
        layout = LayerLayout.from_lengths([2, 1], ["body", "head"])
        rep = drift_diversity([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]], layout, round_index=3)
        assert rep.round == 3
        assert rep.xi_per_layer["body"] == 1.0
        assert rep.xi_per_layer["head"] == XI_INFINITE

    def test_mask_restriction(self):
        rep = drift_diversity([[1.0, 5.0], [1.0, -5.0]], mask=Mask([1, 0]))
        assert rep.xi_global == pytest.approx(0.5)

    @settings(max_examples=300)
    @given(st.integers(1, 8).flatmap(
        lambda n: st.lists(arrays(np.float64, 4, elements=st.floats(-10, 10)), min_size=n, max_size=n)))
    def test_lower_bound(self, deltas):
        xi = drift_diversity(deltas).xi_global
        if isinstance(xi, float) and math.isfinite(xi):
            assert xi >= 1 / len(deltas) * (1 - 1e-12)

    def test_lower_bound_random_draws(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            xi = drift_diversity(list(rng.standard_normal((n, 6)))).xi_global
            assert xi >= 1 / n * (1 - 1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        deltas = list(rng.standard_normal((4, 5)))
        base = drift_diversity(deltas).xi_global
        assert drift_diversity([3.7 * m for m in deltas]).xi_global == pytest.approx(base, rel=1e-12)


class TestClientDrift:
    def test_no_movement(self):
        x = np.array([1.0, 2.0])
        assert client_drift([[x.copy()], [x.copy()]], x) == 0.0

    def test_average(self):
        x = np.zeros(2)
        assert client_drift([[np.array([1.0, 0.0]), np.array([0.0, 2.0])]], x) == 2.5

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        traj = [[rng.standard_normal(3) for _ in range(4)] for _ in range(3)]
        assert client_drift(traj, rng.standard_normal(3)) > 0


class TestCka:
    def test_identical(self):
        X = np.random.default_rng(0).standard_normal((50, 4))
        assert cka_linear(X, X) == pytest.approx(1.0, abs=1e-12)

    def test_rotation_and_scale_invariance(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((100, 6))
        Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        assert cka_linear(X, X @ Q) == pytest.approx(1.0, abs=1e-10)
        assert cka_linear(X, 5.0 * X) == pytest.approx(1.0, abs=1e-10)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        X, Y = rng.standard_normal((40, 3)), rng.standard_normal((40, 5))
        assert cka_linear(X, Y) == pytest.approx(cka_linear(Y, X), rel=1e-12)

    def test_independent_features_are_dissimilar(self):
        values = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            values.append(cka_linear(rng.standard_normal((2000, 8)), rng.standard_normal((2000, 8))))
        assert max(values) < 0.05

    def test_zero_variance(self):
        with pytest.raises(ValueError, match="zero-variance"):
            cka_linear(np.ones((5, 2)), np.random.default_rng(0).standard_normal((5, 2)))

    def test_client_report(self):
        rng = np.random.default_rng(3)
        arch = MlpArchitecture(3, (4,), 2)
        params = [arch.init(rng) for _ in range(3)]
        rep = client_cka(arch, params, rng.standard_normal((30, 3)))
        for name in rep.layers:
            mat = rep.matrices[name]
            np.testing.assert_allclose(mat, mat.T)
            np.testing.assert_allclose(np.diag(mat), 1.0, atol=1e-8)
            finite = mat[np.isfinite(mat)]
            assert np.all((finite >= 0) & (finite <= 1))


class TestRoundsToTarget:
    def test_first_hit(self):
        assert rounds_to_target([0.5, 0.7], 0.66) == 2

    def test_not_reached(self):
        assert rounds_to_target([0.1, 0.2], 0.66) is NOT_REACHED

    def test_lower_is_better(self):
        assert rounds_to_target([1.0, 1e-3, 1e-7], 1e-6, higher_is_better=False) == 3

    def test_speedup_table_entry(self):
        s = speedup(55, 27)
        assert s == pytest.approx(2.037, abs=1e-3)
        assert format_rounds(27, 80, s) == "27(2.0x)"
        assert format_rounds(NOT_REACHED, 80, speedup(55, NOT_REACHED)) == "80+(-)"


def test_control_variate_error():
    assert control_variate_error([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 2.0]]) == 2.5
