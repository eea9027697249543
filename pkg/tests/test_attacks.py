import itertools

import numpy as np
import pytest

from ssmlab.attacks import (
    InapplicableAttackError,
    InfeasibleEntropyError,
    InfeasibleStealthError,
    InjectionScorer,
    SystemOracle,
    apply_commits,
    gate_l1_sum,
    generic_extract,
    generic_query_count,
    inject_random,
    inject_stealth,
    inject_targeted,
    make_haystack,
    pgd_output_attack,
    selection_subversion,
    ssd_extract,
    ssd_query_count,
)
from ssmlab.core import DiscreteSsm, lti_scan
from ssmlab.metrics import stiv, tau_from_trajectory, token_entropy
from ssmlab.model import StackedModel, forward_model
from ssmlab.stats import rng_for


def genomic_model(seed=0, n_layers=2, n_state=12, d_model=4, step=0.05):
    return StackedModel.build(n_layers=n_layers, n_state=n_state, d_model=d_model,
                              alphabet="ACGT", step=step, seed=seed)


def selective_model(seed=0, n_layers=2, n_state=8, d_model=4):
    return StackedModel.build(n_layers=n_layers, n_state=n_state, d_model=d_model,
                              alphabet="ACGT", layer_kind="selective", seed=seed)


def first_layer_stiv(model, clean_tokens, edited_tokens, fraction=0.1):
    """Independent oracle: recompute the layer-1 trajectories by full scans."""
    sysd = model.layers[0].discretize()
    x_c = model.embedding[np.asarray(clean_tokens)]
    x_a = model.embedding[np.asarray(edited_tokens)]
    _, t_c = lti_scan(sysd, x_c)
    _, t_a = lti_scan(sysd, x_a)
    tau = tau_from_trajectory(t_c, fraction)
    return stiv(t_c, t_a, tau).value


class TestGreedyInjection:
    def test_zero_budget_unchanged(self):
        model = genomic_model()
        seq = rng_for(1, 0).integers(0, 4, 16)
        rec = inject_targeted(model, seq, 0)
        assert np.array_equal(rec.extras["edited_tokens"], seq)
        assert rec.extras["stiv"] == 0.0

    def test_single_edit_matches_brute_force(self):
        # greedy with B=1 must match exhaustive search over all 8x3 single edits
        model = genomic_model(seed=3)
        rng = rng_for(2, 0)
        for trial in range(5):
            seq = rng.integers(0, 4, 8)
            scorer = InjectionScorer(model, 8)
            commits, curve = scorer.attack(seq, 1)
            best_brute = -1.0
            for p, v in itertools.product(range(8), range(4)):
                if v == seq[p]:
                    continue
                edited = seq.copy()
                edited[p] = v
                best_brute = max(best_brute, first_layer_stiv(model, seq, edited))
            assert curve[0] == pytest.approx(best_brute, abs=1e-12)

    def test_scorer_curve_matches_independent_scan(self):
        # rank-one bookkeeping equals a fresh full recompute after 3 commits
        model = genomic_model(seed=4)
        seq = rng_for(3, 0).integers(0, 4, 20)
        scorer = InjectionScorer(model, 20)
        commits, curve = scorer.attack(seq, 3)
        edited = apply_commits(seq, commits)
        assert curve[-1] == pytest.approx(first_layer_stiv(model, seq, edited),
                                          abs=1e-12)

    def test_greedy_near_optimal_vs_exhaustive_pairs(self):
        # length <= 8, B = 2: greedy reaches >= 95% of the exhaustive optimum
        model = genomic_model(seed=5, n_layers=1)
        rng = rng_for(4, 0)
        for trial in range(3):
            seq = rng.integers(0, 4, 8)
            scorer = InjectionScorer(model, 8)
            commits, curve = scorer.attack(seq, 2)
            greedy_val = curve[-1]
            best = 0.0
            for p1, p2 in itertools.combinations(range(8), 2):
                for v1, v2 in itertools.product(range(4), range(4)):
                    if v1 == seq[p1] or v2 == seq[p2]:
                        continue
                    edited = seq.copy()
                    edited[p1], edited[p2] = v1, v2
                    best = max(best, first_layer_stiv(model, seq, edited))
            assert greedy_val >= 0.95 * best - 1e-12

    def test_budget_exactness(self):
        model = genomic_model(seed=6)
        seq = rng_for(5, 0).integers(0, 4, 24)
        rec = inject_targeted(model, seq, 5)
        assert len(rec.positions) <= 5
        diff = np.flatnonzero(rec.extras["edited_tokens"] != seq)
        assert len(diff) <= 5

    def test_targeted_beats_random_usually(self):
        model = genomic_model(seed=7)
        rng = rng_for(6, 0)
        wins = 0
        trials = 12
        for i in range(trials):
            seq = rng.integers(0, 4, 24)
            t_rec = inject_targeted(model, seq, 4)
            r_rec = inject_random(seq, 4, seed=1000 + i)
            r_stiv = first_layer_stiv(model, seq, r_rec.extras["edited_tokens"])
            t_stiv = first_layer_stiv(model, seq, t_rec.extras["edited_tokens"])
            wins += t_stiv >= r_stiv
        assert wins >= 0.9 * trials


class TestStealth:
    def test_floor_zero_equals_targeted(self):
        model = genomic_model(seed=8)
        seq = rng_for(7, 0).integers(0, 4, 18)
        s_rec = inject_stealth(model, seq, 3, similarity_floor=0.0)
        t_rec = inject_targeted(model, seq, 3)
        assert np.array_equal(s_rec.extras["edited_tokens"],
                              t_rec.extras["edited_tokens"])

    def test_edit_distance_and_adjacency(self):
        model = genomic_model(seed=9)
        seq = rng_for(8, 0).integers(0, 4, 20)
        rec = inject_stealth(model, seq, 4, similarity_floor=0.5)
        pos = sorted(rec.positions)
        assert len(pos) <= 4
        assert all(b - a >= 2 for a, b in zip(pos, pos[1:]))

    def test_stealth_never_beats_targeted(self):
        model = genomic_model(seed=10)
        rng = rng_for(9, 0)
        for _ in range(4):
            seq = rng.integers(0, 4, 16)
            s = inject_stealth(model, seq, 3, similarity_floor=0.5)
            t = inject_targeted(model, seq, 3)
            assert s.extras["stiv"] <= t.extras["stiv"] + 1e-12

    def test_infeasible_budget(self):
        model = genomic_model(seed=11)
        seq = rng_for(10, 0).integers(0, 4, 10)
        with pytest.raises(InfeasibleStealthError):
            inject_stealth(model, seq, 6, similarity_floor=0.5)


class TestRandomInjection:
    def test_full_budget_touches_everything(self):
        seq = rng_for(11, 0).integers(0, 4, 12)
        rec = inject_random(seq, 12, seed=0)
        assert np.all(rec.extras["edited_tokens"] != seq)

    def test_seed_reproducible(self):
        seq = rng_for(12, 0).integers(0, 4, 30)
        r1 = inject_random(seq, 5, seed=33)
        r2 = inject_random(seq, 5, seed=33)
        assert r1.positions == r2.positions
        assert np.array_equal(r1.extras["edited_tokens"], r2.extras["edited_tokens"])


class TestPgdOutputAttack:
    def test_zero_epsilon_zero_delta(self):
        model = genomic_model(seed=12)
        seq = rng_for(13, 0).integers(0, 4, 16)
        rec = pgd_output_attack(model, seq, 0.0, steps=3)
        assert rec.output_delta_norm == 0.0

    def test_budget_respected(self):
        model = genomic_model(seed=13)
        seq = rng_for(14, 0).integers(0, 4, 16)
        rec = pgd_output_attack(model, seq, 0.02, steps=5)
        assert np.max(np.abs(rec.delta)) <= 0.02 + 1e-15
        assert rec.output_delta_norm >= 0.0


class TestHaystack:
    def test_low_entropy_target(self):
        doc = make_haystack(2000, [5, 6, 7], 0.3, mode="low", alphabet_size=128,
                            seed=1)
        measured = token_entropy(doc.tokens.tolist(), range(128))
        assert 1.6 <= measured <= 2.0

    def test_benign_and_high_targets(self):
        for mode, lo, hi in [("benign", 4.0, 4.4), ("high", 6.0, 6.4)]:
            doc = make_haystack(3000, [1, 2], 0.1, mode=mode, alphabet_size=128,
                                seed=2)
            assert lo <= doc.measured_bits <= hi

    def test_needle_verbatim(self):
        needle = [9, 8, 7, 6]
        doc = make_haystack(500, needle, 0.5, mode="low", seed=3)
        start = doc.needle_start
        assert start == int(0.5 * 500)
        assert np.array_equal(doc.tokens[start:start + 4], needle)

    def test_small_alphabet_high_mode_infeasible(self):
        with pytest.raises(InfeasibleEntropyError):
            make_haystack(500, [0], 0.1, mode="high", alphabet_size=4, seed=4)


class TestSelectionSubversion:
    def test_pure_lti_inapplicable(self):
        model = genomic_model(seed=14)
        seq = rng_for(15, 0).integers(0, 4, 12)
        with pytest.raises(InapplicableAttackError):
            selection_subversion(model, seq, 0.01, "freeze")

    def test_freeze_decreases_gate_sum(self):
        model = selective_model(seed=15)
        seq = rng_for(16, 0).integers(0, 4, 24)
        rec = selection_subversion(model, seq, 0.05, "freeze", steps=10)
        assert rec.extras["gate_sum_adv"] < rec.extras["gate_sum_clean"]

    def test_erase_increases_gate_sum(self):
        model = selective_model(seed=16)
        seq = rng_for(17, 0).integers(0, 4, 24)
        rec = selection_subversion(model, seq, 0.05, "erase", steps=10)
        assert rec.extras["gate_sum_adv"] > rec.extras["gate_sum_clean"]

    def test_zero_epsilon_leaves_rates(self):
        model = selective_model(seed=17)
        seq = rng_for(18, 0).integers(0, 4, 16)
        rec = selection_subversion(model, seq, 0.0, "freeze", steps=2)
        assert np.all(rec.delta == 0.0)
        assert rec.extras["gate_sum_adv"] == pytest.approx(rec.extras["gate_sum_clean"])


def random_hidden_system(rng, n):
    return DiscreteSsm(a_bar=rng.uniform(0.1, 0.95, n),
                       b_bar=rng.standard_normal((n, 1)),
                       c=rng.standard_normal((1, n)),
                       d=np.zeros((1, 1)))


class TestExtraction:
    def test_query_count_formulas(self):
        assert ssd_query_count(64) == 4096
        assert ssd_query_count(8) == 64
        assert ssd_query_count(1) == 2
        assert generic_query_count(64) == 262144
        for n in (64, 128, 256, 512, 1024):
            assert generic_query_count(n) // ssd_query_count(n) == n

    def test_scalar_system_exact(self):
        rng = rng_for(20, 0)
        sysd = random_hidden_system(rng, 1)
        oracle = SystemOracle(sysd)
        res = ssd_extract(oracle, 1, delta_target=1e-9)
        assert res.query_count == 2
        assert res.rel_error < 1e-12
        assert abs(res.a_bar_est[0] - sysd.a_bar[0]) < 1e-10

    def test_n8_ssd_noise_free(self):
        rng = rng_for(21, 0)
        sysd = random_hidden_system(rng, 8)
        oracle = SystemOracle(sysd)
        res = ssd_extract(oracle, 8, delta_target=1e-8)
        assert res.query_count == 64
        assert res.rel_error < 1e-8
        assert oracle.query_count == 64

    def test_n8_generic_noise_free(self):
        rng = rng_for(22, 0)
        sysd = random_hidden_system(rng, 8)
        oracle = SystemOracle(sysd)
        res = generic_extract(oracle, 8, delta_target=0.01)
        assert res.query_count == 512
        assert res.rel_error < 1e-6

    def test_noisy_oracle_raises_when_target_unreachable(self):
        rng = rng_for(23, 0)
        sysd = random_hidden_system(rng, 4)
        oracle = SystemOracle(sysd, noise_std=0.5, seed=5)
        from ssmlab.attacks import RecoveryError
        with pytest.raises(RecoveryError):
            ssd_extract(oracle, 4, delta_target=1e-12)

    def test_oracle_wrapper_contract(self):
        rng = rng_for(24, 0)
        with pytest.raises(ValueError):
            SystemOracle(DiscreteSsm(a_bar=[0.5], b_bar=[[1.0]], c=[[1.0]],
                                     d=[[0.3]]))
        sysd = random_hidden_system(rng, 2)
        oracle = SystemOracle(sysd)
        u = np.zeros(3)
        u[0] = 1.0
        single = oracle(u)
        batched = oracle.batch(u[None, :])
        assert single == pytest.approx(batched[0])
