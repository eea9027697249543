import numpy as np
import pytest

from ssmlab.core import StateTrajectory
from ssmlab.metrics import (
    forgetting_rate,
    freeze_erase_rates,
    k_delayed,
    perturbation_ratio,
    state_entropy,
    state_entropy_histogram,
    stiv,
    tau_from_trajectory,
    token_entropy,
    trajectory_pair_stiv,
    xcross,
)


def traj(arr):
    return StateTrajectory(states=np.asarray(arr, dtype=np.float64))


class TestStiv:
    def test_identical_is_zero(self):
        h = traj(np.random.default_rng(0).standard_normal((11, 3)))
        res = stiv(h, h, 0.5)
        assert res.value == 0.0
        assert res.corrupted_steps == ()

    def test_every_step_corrupted(self):
        clean = traj(np.zeros((8, 2)))
        adv = traj(np.full((8, 2), 10.0))
        assert stiv(clean, adv, 0.5).value == 1.0

    def test_exact_fraction(self):
        clean = traj(np.zeros((101, 1)))
        states = np.zeros((101, 1))
        states[:51] = 2.0
        assert stiv(clean, traj(states), 1.0).value == pytest.approx(51 / 101)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            stiv(traj(np.zeros((5, 2))), traj(np.zeros((6, 2))), 0.1)

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(1)
        clean = traj(rng.standard_normal((40, 4)))
        adv = traj(clean.states + rng.standard_normal((40, 4)) * 0.5)
        v1 = stiv(clean, adv, 0.2).value
        v2 = stiv(clean, adv, 0.8).value
        assert v1 >= v2

    def test_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            clean = traj(rng.standard_normal((12, 3)))
            adv = traj(rng.standard_normal((12, 3)))
            assert 0.0 <= stiv(clean, adv, 0.3).value <= 1.0


class TestTauRule:
    def test_fraction_of_peak(self):
        states = np.zeros((4, 2))
        states[2] = [3.0, 0.0]
        assert tau_from_trajectory(traj(states), 0.1) == pytest.approx(0.3)

    def test_sweep_fractions_supported(self):
        states = np.ones((6, 1)) * 2.0
        for frac in (0.05, 0.1, 0.2):
            assert tau_from_trajectory(traj(states), frac) == pytest.approx(2.0 * frac)

    def test_zero_trajectory_rejected(self):
        with pytest.raises(ValueError):
            tau_from_trajectory(traj(np.zeros((5, 2))), 0.1)

    def test_pair_aggregation(self):
        rng = np.random.default_rng(3)
        cleans = [traj(rng.standard_normal((10, 2))) for _ in range(3)]
        advs = [traj(c.states + 10.0) for c in cleans]
        mean_val, per_layer = trajectory_pair_stiv(cleans, advs, 0.1)
        assert len(per_layer) == 3
        assert mean_val == pytest.approx(np.mean([r.value for r in per_layer]))


class TestKDelayed:
    def test_corruption_before_window_is_false(self):
        res = stiv(traj(np.zeros((10, 1))),
                   traj(np.r_[np.ones((3, 1)) * 5, np.zeros((7, 1))]), 1.0)
        assert not k_delayed(res, 5)

    def test_boundary_step_counts(self):
        states = np.zeros((10, 1))
        states[4] = 9.0
        res = stiv(traj(np.zeros((10, 1))), traj(states), 1.0)
        assert k_delayed(res, 4)
        assert not k_delayed(res, 5)

    def test_empty_corruption(self):
        res = stiv(traj(np.zeros((6, 1))), traj(np.zeros((6, 1))), 1.0)
        assert not k_delayed(res, 0)


class TestXcross:
    def test_identity_map(self):
        res = xcross([(1.0, 1.0), (2.0, 2.0)])
        assert res.ratio == pytest.approx(1.0)

    def test_zero_outputs(self):
        assert xcross([(1.0, 0.0), (3.0, 0.0)]).ratio == 0.0

    def test_arithmetic_and_flag(self):
        res = xcross([(1.0, 4.0), (1.0, 4.0)], budget=0.01)
        assert res.ratio == pytest.approx(4.0)
        assert res.critically_amplifying

    def test_flag_requires_small_budget(self):
        assert not xcross([(1.0, 4.0)], budget=0.05).critically_amplifying

    def test_zero_denominator(self):
        with pytest.raises(ValueError):
            xcross([(0.0, 1.0)])

    def test_scale_equivariance(self):
        base = [(1.0, 2.0), (2.0, 5.0)]
        r0 = xcross(base).ratio
        r_out = xcross([(s, 3.0 * o) for s, o in base]).ratio
        r_state = xcross([(3.0 * s, o) for s, o in base]).ratio
        assert r_out == pytest.approx(3.0 * r0)
        assert r_state == pytest.approx(r0 / 3.0)


class TestPerturbationRatio:
    def test_equal_distributions(self):
        res = perturbation_ratio([1.0, 2.0, 3.0], [3.0, 2.0, 1.0])
        assert res.rho == pytest.approx(1.0)
        assert not res.suppressed

    def test_suppressed_attack_convention(self):
        res = perturbation_ratio([0.0, 0.0], [1.0, 2.0])
        assert res.rho == 1.0
        assert res.suppressed

    def test_zero_random_denominator(self):
        res = perturbation_ratio([1.0], [0.0])
        assert res.suppressed
        assert np.isnan(res.rho)


class TestFreezeErase:
    def test_constant_nonzero(self):
        sfr, ser = freeze_erase_rates(traj(np.ones((10, 2))))
        assert sfr == 100.0
        assert ser == 0.0

    def test_all_zero(self):
        sfr, ser = freeze_erase_rates(traj(np.zeros((10, 2))))
        assert sfr == 100.0
        assert ser == 100.0

    def test_random_unit_states(self):
        rng = np.random.default_rng(4)
        states = rng.standard_normal((200, 8))
        states /= np.linalg.norm(states, axis=1, keepdims=True)
        sfr, ser = freeze_erase_rates(traj(states))
        assert sfr == 0.0
        assert ser == 0.0


class TestEntropies:
    def test_uniform_four_symbols(self):
        toks = "ACGT" * 25
        assert token_entropy(toks, "ACGT") == pytest.approx(2.0)

    def test_single_symbol(self):
        assert token_entropy("AAAA", "ACGT") == 0.0

    def test_half_quarter_quarter(self):
        toks = "AABC" * 10
        assert token_entropy(toks, "ABC") == pytest.approx(1.5)

    def test_state_entropy_scalar_unit_variance(self):
        rng = np.random.default_rng(5)
        # enforce exact sample variance 1
        w = rng.standard_normal((64, 1))
        w = (w - w.mean()) / w.std(ddof=1)
        expect = 0.5 * np.log2(2 * np.pi * np.e)
        assert state_entropy(w) == pytest.approx(expect, abs=1e-3)

    def test_state_entropy_scaling_adds_n_bits(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((64, 3))
        h1 = state_entropy(w)
        h2 = state_entropy(2.0 * w)
        assert h2 - h1 == pytest.approx(3.0, abs=1e-3)

    def test_state_entropy_rotation_invariance(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((64, 4))
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        assert abs(state_entropy(w @ q.T) - state_entropy(w)) < 1e-9

    def test_state_entropy_regularizer_floor(self):
        w = np.ones((64, 2))
        expect = 0.5 * 2 * np.log2(2 * np.pi * np.e * 1e-6)
        assert state_entropy(w) == pytest.approx(expect, rel=1e-6)

    def test_histogram_variant_nonnegative(self):
        rng = np.random.default_rng(8)
        assert state_entropy_histogram(rng.standard_normal((64, 3))) >= 0.0


class TestForgettingRate:
    def test_all_recalled(self):
        assert forgetting_rate([True] * 8) == 0.0

    def test_none_recalled(self):
        assert forgetting_rate([False] * 5) == 100.0

    def test_quarter(self):
        assert forgetting_rate([True] * 6 + [False] * 2) == 25.0
