import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from fedpriv.privacy import MechanismRecord, PrivacyBudget, gamma_procedure_II, lipschitz_constant
from fedpriv.procedures import (
    ProcedureI,
    ProcedureII,
    ProcedureIII,
    SharedRandomness,
    TestOutcome,
    Transcript,
    build_procedure,
    calibrate_threshold,
    classical_stat,
    clip_level,
    coordinate_budget,
    empirical_critical_value,
    haar_rotation,
    null_statistics,
    partition_servers,
    replication_streams,
    retained_coordinates,
    robust_ceil,
    simulate_statistics,
    stat_I,
    test_I,
    test_II,
    test_III,
    thresholds_T_L,
    transcript_I,
    transcript_II,
    transcript_III,
)
from fedpriv.rng import Phase
from fedpriv.sequence_model import ModelConfig, dimension, draw_observations, gen_signal_single_level


def config(**kw):
    args = dict(m=10, n=50, sigma=1.0, s=1.0, epsilon=1.0, delta=1e-3, alpha=0.05)
    args.update(kw)
    return ModelConfig(**args)


class TestClassicalStat:
    def test_zero_mean(self):
        assert classical_stat(np.zeros((4, 2)), 1, 1.0, 4) == pytest.approx(-math.sqrt(2), rel=1e-15)

    def test_centred_single_observation(self):
        x = np.ones((1, 2))
        assert classical_stat(x, 1, 1.0, 1) == pytest.approx(0.0, abs=1e-15)

    def test_null_moments(self):
        rng = np.random.default_rng(0)
        vals = np.array([classical_stat(rng.standard_normal((20, 14)), 3, 1.0, 20) for _ in range(10_000)])
        assert abs(vals.mean()) < 3 * vals.std(ddof=1) / math.sqrt(vals.size)
        assert vals.var(ddof=1) == pytest.approx(2.0, rel=0.10)

    @given(seed=st.integers(0, 2**31), k=st.integers(-20, 20))
    def test_scale_equivariance(self, seed, k):
        # powers of two scale floats exactly, so equality is bitwise
        x = np.random.default_rng(seed).standard_normal((5, 6))
        c = 2.0**k
        assert classical_stat(c * x, 2, c * 1.3, 5) == classical_stat(x, 2, 1.3, 5)

    def test_rejects_untruncated_block(self):
        with pytest.raises(ValueError):
            classical_stat(np.zeros((3, 5)), 2, 1.0, 3)


class TestStatI:
    def test_exact_cancellation(self):
        x = np.zeros((4, 2))
        x[:, 0] = 1.0
        # ||sqrt(4) * xbar||^2 = 4
        assert stat_I(x, 1, 1.0, 1.0, 4, chi2_draw=4.0) == 0.0

    def test_saturates(self):
        tau = 0.3
        x = np.zeros((1, 2))
        x[0, 0] = math.sqrt(10 * tau * math.sqrt(2))
        assert stat_I(x, 1, tau, 1.0, 1, chi2_draw=0.0) == tau

    def test_null_mean_zero(self):
        rng = np.random.default_rng(1)
        vals = np.array([stat_I(rng.standard_normal((20, 6)), 2, 5.0, 1.0, 20, rng) for _ in range(10_000)])
        assert abs(vals.mean()) < 3 * vals.std(ddof=1) / math.sqrt(vals.size)

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(ValueError):
            stat_I(np.zeros((2, 2)), 1, 0.0, 1.0, 2, chi2_draw=1.0)


class TestThresholds:
    def test_cardinality(self):
        assert thresholds_T_L(3, 10, 1.0, 1.0, 100, 1.0, 2.0).size == 15
        assert math.ceil(1 + 2 * math.log2(100)) == 15

    def test_halving(self):
        t = thresholds_T_L(4, 30, 1.5, 2.0, 300, 0.7, 3.0)
        assert np.allclose(t[1:] / t[:-1], 0.5, rtol=1e-15, atol=0)

    def test_first_term_limit(self):
        n, R, sigma, L = 10, 1.0, 1.0, 3
        t = thresholds_T_L(L, n, sigma, R, 100, 80.0, math.inf)
        assert t[0] == pytest.approx(2 * n * R * R / (sigma * sigma * math.sqrt(2**L)), rel=1e-15)

    def test_first_term_coefficient(self):
        t = thresholds_T_L(2, 10, 1.0, 1.0, 50, 1.0, 2.0)
        assert t[0] == pytest.approx(2 * 10 * 0.5 / 2.0, rel=1e-15)


class TestTranscriptI:
    def test_single_threshold_release(self):
        rng = np.random.default_rng(0)
        tr = transcript_I(np.zeros((5, 2)), 1, [1.0], PrivacyBudget(1.0, 0.01, 1), 1.0, 5, rng)
        assert tr.payload.size == 1 and tr.records[0].components == 1

    def test_payload_length(self):
        taus = thresholds_T_L(2, 5, 1.0, 1.0, 50, 1.0, 2.0)
        tr = transcript_I(np.zeros((5, 6)), 2, taus, PrivacyBudget(1.0, 0.01, taus.size), 1.0, 5,
                          np.random.default_rng(0))
        assert tr.payload.size == taus.size == len(tr.records)

    def test_zero_statistic_replays_noise(self):
        taus = [2.0, 1.0, 0.5]
        tr = transcript_I(np.zeros((5, 2)), 1, taus, PrivacyBudget(1.0, 0.01, 3), 1.0, 5,
                          np.random.default_rng(42), statistics=[0.0, 0.0, 0.0])
        assert np.array_equal(tr.payload, np.random.default_rng(42).standard_normal(3))

    def test_records_carry_lipschitz_and_scale(self):
        taus = [2.0, 1.0]
        tr = transcript_I(np.zeros((5, 2)), 1, taus, PrivacyBudget(1.0, 0.01, 2), 1.0, 5,
                          np.random.default_rng(0), N=50)
        for t, rec in zip(taus, tr.records):
            D = lipschitz_constant(5, 1, t, 50)
            assert rec.sensitivity == D
            assert rec.scaled_sensitivity == pytest.approx(1.0 / math.sqrt(2 * 2 * math.log(200)), rel=1e-14)

    def test_component_mismatch_raises(self):
        with pytest.raises(ValueError):
            transcript_I(np.zeros((5, 2)), 1, [1.0, 2.0], PrivacyBudget(1.0, 0.01, 1), 1.0, 5,
                         np.random.default_rng(0))

    @given(seed=st.integers(0, 2**31))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        block = rng.standard_normal((9, 6))
        perm = rng.permutation(9)
        taus = [3.0, 1.5, 0.75]
        budget = PrivacyBudget(1.0, 0.01, 3)
        a = transcript_I(block, 2, taus, budget, 1.0, 9, np.random.default_rng(7))
        b = transcript_I(block[perm], 2, taus, budget, 1.0, 9, np.random.default_rng(7))
        assert a.payload.tobytes() == b.payload.tobytes()


def _transcript(values, tag="I", coords=()):
    rec = MechanismRecord(1.0, 1.0, 1, 1.0, 0.01)
    return Transcript(0, np.asarray(values, dtype=float), (rec,) * len(values), tag, tuple(coords))


class TestTestI:
    def test_collapses_to_value(self):
        # |T| = 1 floors sqrt(ln |T|) at 1, like |T| = e
        out = test_I([_transcript([2.5])], [1.0], kappa=2.0, gammas=[0.3])
        assert out.statistic == 2.5 and out.reject

    def test_zero_transcripts(self):
        out = test_I([_transcript([0.0, 0.0]) for _ in range(3)], [1.0, 0.5], kappa=0.1, gammas=[0.2, 0.2])
        assert out.statistic == 0.0 and not out.reject

    def test_normalisation(self):
        ts = [_transcript([4.0, 1.0]), _transcript([2.0, 1.0])]
        out = test_I(ts, [1.0, 0.5], kappa=100.0, gammas=[2.0, 0.5])
        b = math.sqrt(max(math.log(2), 1.0))
        assert out.statistic == pytest.approx(max(6.0 / (math.sqrt(2) * 2.0 * b), 2.0 / (math.sqrt(2) * b)))

    def test_mismatched_thresholds(self):
        with pytest.raises(ValueError):
            test_I([_transcript([1.0]), _transcript([1.0, 2.0])], [1.0], 0.0, [1.0])

    def test_tie_rejects(self):
        assert TestOutcome.decide(1.0, 1.0, "I").reject


class TestPartition:
    def test_min_branch(self):
        assert coordinate_budget(100, 0.1, 3) == 1
        assert partition_servers(5, 3, 100, 0.1).K == 1

    def test_max_branch(self):
        a = partition_servers(6, 3, 100, 1.0)
        assert a.K == 14
        assert all(len(c) == 14 for c in a.server_coordinates)

    def test_round_robin_enumeration(self):
        # m=4, d=2, K=1: n eps^2 = 1 gives K = 1 at L = 1
        a = partition_servers(4, 1, 1, 1.0)
        assert a.K == 1 and a.set_size == 2
        assert a.coordinate_sets == ((0, 1), (2, 3))
        assert a.server_coordinates == ((0,), (0,), (1,), (1,))

    @given(m=st.integers(1, 60), L=st.integers(1, 6), n=st.integers(1, 200), eps=st.floats(0.05, 3.0))
    def test_every_server_covers_budget(self, m, L, n, eps):
        a = partition_servers(m, L, n, eps)
        d = dimension(L)
        assert len(a.coordinate_sets) == d
        assert all(len(s) == min(a.set_size, m) for s in a.coordinate_sets)
        assert all(len(c) >= min(a.K, d) for c in a.server_coordinates)

    def test_robust_ceil(self):
        assert robust_ceil(100 * 0.1**2) == 1
        assert robust_ceil(1.2) == 2


class TestTranscriptII:
    def test_zero_data_is_noise(self):
        a = partition_servers(3, 2, 10, 1.0)
        tr = transcript_II(np.zeros((10, 6)), a, 2, PrivacyBudget(1.0, 0.01, a.load), 1.0, 2.0,
                           np.random.default_rng(3), server_id=1)
        assert np.array_equal(tr.payload, np.random.default_rng(3).standard_normal(len(a.server_coordinates[1])))

    def test_gamma_example(self):
        expected = 1.0 / (2 * math.sqrt(2 * math.log(200)) * 2)
        assert gamma_procedure_II(1.0, 0.01, 1, 2.0) == pytest.approx(expected, rel=1e-15)
        assert expected == pytest.approx(0.07679, abs=1e-5)

    def test_signal_mean(self):
        a = partition_servers(1, 1, 1, 2.0)
        f = np.array([0.4, -0.7])
        budget = PrivacyBudget(1.0, 0.01, a.load)
        g = gamma_procedure_II(1.0, 0.01, a.load, 50.0)
        rng = np.random.default_rng(4)
        pay = np.array([transcript_II(f[None, :], a, 1, budget, 1.0, 50.0, rng).payload for _ in range(20_000)])
        se = pay.std(axis=0, ddof=1) / math.sqrt(pay.shape[0])
        assert np.all(np.abs(pay.mean(axis=0) - g * f) < 3 * se)

    def test_sensitivity_worst_case(self):
        L, tau = 2, 1.3
        a = partition_servers(2, L, 20, 1.0)
        budget = PrivacyBudget(1.0, 0.01, a.load)
        g = gamma_procedure_II(1.0, 0.01, a.load, tau)
        coords = list(a.server_coordinates[0])
        x = np.zeros((20, dimension(L)))
        y = x.copy()
        x[0, coords] = 10.0
        y[0, coords] = -10.0

        def pre_noise(block):
            zero_noise = transcript_II(block, a, L, budget, 1.0, tau, np.random.default_rng(0))
            return zero_noise.payload - np.random.default_rng(0).standard_normal(len(coords))

        gap = np.linalg.norm(pre_noise(x) - pre_noise(y))
        assert gap == pytest.approx(g * 2 * tau * math.sqrt(a.load), rel=1e-12)
        assert len(coords) == a.load


class TestTestII:
    def test_zero_transcripts(self):
        a = partition_servers(2, 1, 1, 1.0)
        ts = [
            _transcript([0.0] * len(c), "II", c) for c in a.server_coordinates
        ]
        eta = 0.4
        out = test_II(ts, a, 1, 0.0, eta)
        assert out.statistic == pytest.approx(-math.sqrt(2) * (eta + 1) / max(eta, 1.0), rel=1e-15)

    def test_singleton_coordinate(self):
        a = partition_servers(1, 1, 1, 1.0)
        y, eta = 2.0, 3.0
        ts = [_transcript([y, 0.0], "II", a.server_coordinates[0])]
        out = test_II(ts, a, 1, 0.0, eta)
        expected = ((y * y - eta - 1) + (0 - eta - 1)) / (math.sqrt(2) * max(eta, 1.0))
        assert out.statistic == pytest.approx(expected, rel=1e-15)

    def test_rejects_foreign_coordinates(self):
        a = partition_servers(2, 1, 1, 1.0)
        ts = [_transcript([1.0], "II", (1,)), _transcript([1.0], "II", (1,))]
        with pytest.raises(ValueError):
            test_II(ts, a, 1, 0.0, 1.0)


class TestHaar:
    def test_d1_signs(self):
        vals = np.array([haar_rotation(1, s).rotation[0, 0] for s in range(10_000)])
        assert set(np.unique(vals)) == {-1.0, 1.0}
        assert abs(np.mean(vals > 0) - 0.5) < 0.02

    @given(d=st.integers(1, 40), seed=st.integers(0, 2**31))
    def test_orthogonal(self, d, seed):
        u = haar_rotation(d, seed).rotation
        assert np.max(np.abs(u.T @ u - np.eye(d))) < 1e-10

    def test_deterministic(self):
        assert np.array_equal(haar_rotation(5, 3).rotation, haar_rotation(5, 3).rotation)

    def test_first_coordinate_law(self):
        d = 6
        z = np.array([3.0, -1.0, 0.0, 2.0, 0.5, 1.0])
        r = np.linalg.norm(z)
        first = np.array([(haar_rotation(d, s).rotation @ z)[0] for s in range(10_000)]) / r
        # first coordinate of a uniform point on S^{d-1}: (u+1)/2 ~ Beta((d-1)/2, (d-1)/2)
        law = stats.beta((d - 1) / 2, (d - 1) / 2, loc=-1, scale=2)
        ks = stats.kstest(first, law.cdf)
        assert ks.statistic < 1.63 / math.sqrt(first.size)

    def test_rejects_bad_dimension(self):
        with pytest.raises(ValueError):
            haar_rotation(0, 1)


class TestTranscriptIII:
    def test_identity_rotation_matches_clipped_sums(self):
        L, tau = 2, 0.8
        rng = np.random.default_rng(5)
        block = rng.standard_normal((7, 6)) * 2
        budget = PrivacyBudget(1.0, 0.01, 4)
        tr = transcript_III(block, SharedRandomness(np.eye(6)), L, budget, 1.0, tau,
                            np.random.default_rng(1), N=70)
        keep = retained_coordinates(4, L)
        expected = tr.records[0].scale_gamma * np.clip(block[:, :keep], -tau, tau).sum(axis=0)
        expected = expected + np.random.default_rng(1).standard_normal(keep)
        assert np.allclose(tr.payload, expected, rtol=1e-14, atol=1e-14)

    def test_zero_data_is_noise(self):
        tr = transcript_III(np.zeros((4, 14)), haar_rotation(14, 0), 3, PrivacyBudget(1.0, 0.01, 3),
                            1.0, 1.0, np.random.default_rng(2), N=40)
        assert np.array_equal(tr.payload, np.random.default_rng(2).standard_normal(tr.payload.size))

    def test_retained_set(self):
        assert [retained_coordinates(K, 4) for K in (1, 2, 3, 4, 5, 30)] == [2, 2, 6, 6, 14, 30]
        assert retained_coordinates(100, 2) == 6

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            transcript_III(np.zeros((4, 14)), haar_rotation(6, 0), 3, PrivacyBudget(1.0, 0.01, 3),
                           1.0, 1.0, np.random.default_rng(2), N=40)

    def test_energy_splits_uniformly(self):
        # tau far above every rotated value leaves the sums unclipped
        L, n, rho, g, K = 3, 5, 4.0, 0.3, 3
        d = dimension(L)
        f = np.zeros(d)
        f[2**3 - 2 + 5 - 1] = rho
        rng = np.random.default_rng(6)
        energies = []
        for s in range(6000):
            block = f + rng.standard_normal((n, d))
            tr = transcript_III(block, haar_rotation(d, rng), L, PrivacyBudget(1.0, 0.01, K), 1.0, 1e6,
                                rng, N=50, gamma=g, K=K)
            energies.append(tr.payload @ tr.payload)
        energies = np.array(energies)
        keep = retained_coordinates(K, L)
        expected = g * g * n * n * rho * rho * keep / d + keep * (n * g * g + 1)
        se = energies.std(ddof=1) / math.sqrt(energies.size)
        assert abs(energies.mean() - expected) < 3 * se


class TestTestIII:
    def test_zero_transcripts(self):
        nu = 1.5
        out = test_III([_transcript([0.0] * 6, "III") for _ in range(3)], 3, 0.0, nu)
        assert out.statistic == pytest.approx(-math.sqrt(6) * nu / max(nu - 1, 1), rel=1e-15)

    def test_singleton(self):
        y, nu = 3.0, 4.0
        out = test_III([_transcript([y], "III")], 1, 0.0, nu)
        assert out.statistic == pytest.approx((y * y - nu) / (nu - 1), rel=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            test_III([_transcript([1.0]), _transcript([1.0, 2.0])], 1, 0.0, 1.0)


class TestWholeReplication:
    """The vectorised procedure objects agree with the per-server operations."""

    def _data(self, cfg, L, seed=3):
        f = np.zeros(dimension(L))
        f[0] = 0.5
        return draw_observations(f, cfg.m, cfg.n, cfg.sigma, seed)

    def test_procedure_I(self):
        cfg, L = config(m=4, n=10), 2
        proc = ProcedureI.build(cfg, L)
        x = self._data(cfg, L)
        noise, _ = replication_streams(1, 0, 0, "I", cfg.m)
        fast = proc.payloads(x, noise)
        noise, _ = replication_streams(1, 0, 0, "I", cfg.m)
        slow = np.array([
            transcript_I(x[j], L, proc.taus, proc.budget, cfg.sigma, cfg.n, noise[j], N=cfg.N).payload
            for j in range(cfg.m)
        ])
        assert np.allclose(fast, slow, rtol=1e-12, atol=1e-12)
        stat = proc.statistic(x, replication_streams(1, 0, 0, "I", cfg.m)[0], None)
        outcome = test_I(
            [transcript_I(x[j], L, proc.taus, proc.budget, cfg.sigma, cfg.n, n_, N=cfg.N)
             for j, n_ in enumerate(replication_streams(1, 0, 0, "I", cfg.m)[0])],
            proc.taus, 0.0, proc.gammas,
        )
        assert stat == pytest.approx(outcome.statistic, rel=1e-12)

    def test_procedure_II(self):
        cfg, L = config(m=5, n=3, epsilon=0.5), 2
        proc = ProcedureII.build(cfg, L)
        x = self._data(cfg, L)
        noise, _ = replication_streams(1, 0, 0, "II", cfg.m)
        ts = [
            transcript_II(x[j], proc.assignment, L, proc.budget, cfg.sigma, proc.tau, noise[j], server_id=j)
            for j in range(cfg.m)
        ]
        expected = test_II(ts, proc.assignment, L, 0.0, proc.eta).statistic
        stat = proc.statistic(x, replication_streams(1, 0, 0, "II", cfg.m)[0], None)
        assert stat == pytest.approx(expected, rel=1e-12)

    def test_procedure_III(self):
        cfg, L = config(m=4, n=8, epsilon=0.5), 3
        proc = ProcedureIII.build(cfg, L)
        x = self._data(cfg, L)
        noise, shared = replication_streams(1, 0, 0, "III", cfg.m)
        rot = haar_rotation(dimension(L), shared)
        ts = [
            transcript_III(x[j], rot, L, proc.budget, cfg.sigma, proc.tau, noise[j], N=cfg.N, server_id=j)
            for j in range(cfg.m)
        ]
        expected = test_III(ts, L, 0.0, proc.nu).statistic
        noise, shared = replication_streams(1, 0, 0, "III", cfg.m)
        assert proc.statistic(x, noise, shared) == pytest.approx(expected, rel=1e-12)

    def test_classical_pools_servers(self):
        cfg, L = config(m=3, n=4), 1
        x = self._data(cfg, L)
        proc = build_procedure("classical", cfg, L)
        assert proc.statistic(x, [], None) == classical_stat(x.reshape(12, 2), 1, 1.0, 12)

    def test_unknown_protocol(self):
        with pytest.raises(ValueError):
            build_procedure("IV", config(), 1)

    def test_clip_level(self):
        assert clip_level(100, 1.0) == pytest.approx(math.sqrt(math.log(100)))


class TestCalibration:
    def test_alpha_one_gives_minimum(self):
        stats_ = np.array([3.0, -1.0, 2.0])
        assert empirical_critical_value(stats_, 1.0) == -1.0

    def test_needs_enough_reps(self):
        with pytest.raises(ValueError):
            calibrate_threshold("classical", config(), 1, 0.05, 999, 0)

    def test_classical_clt_limit(self):
        reps, alpha = 10_000, 0.05
        kappa = calibrate_threshold("classical", config(m=1, n=5), 10, alpha, reps, 1)
        assert dimension(10) == 2046
        normal = stats.norm(scale=math.sqrt(2))
        target = normal.ppf(1 - alpha)
        # quantile standard error sqrt(a(1-a)/reps) / density, plus the chi-square skew correction
        se = math.sqrt(alpha * (1 - alpha) / reps) / normal.pdf(target)
        skew = 2 * (stats.norm.ppf(1 - alpha) ** 2 - 1) / (3 * math.sqrt(2046))
        assert abs(kappa - target) < 3 * se + skew

    def test_seed_stability(self):
        cfg = config(m=3, n=10)
        a = null_statistics(build_procedure("II", cfg, 2), 2000, 11)
        b = null_statistics(build_procedure("II", cfg, 2), 2000, 12)
        ka, kb = empirical_critical_value(a, 0.05), empirical_critical_value(b, 0.05)
        rng = np.random.default_rng(0)
        boot = [empirical_critical_value(rng.choice(a, a.size), 0.05) for _ in range(500)]
        se = np.std(boot, ddof=1)
        assert abs(ka - kb) < 3 * math.sqrt(2) * se

    def test_deterministic(self):
        cfg = config(m=3, n=10)
        assert calibrate_threshold("I", cfg, 2, 0.05, 1000, 4) == calibrate_threshold("I", cfg, 2, 0.05, 1000, 4)


@pytest.mark.slow
@pytest.mark.parametrize("tag, m, n, L", [("I", 10, 50, 2), ("II", 10, 50, 2), ("III", 10, 50, 3)])
def test_calibrated_level(tag, m, n, L):
    cfg = config(m=m, n=n)
    proc = build_procedure(tag, cfg, L)
    kappa = empirical_critical_value(null_statistics(proc, 5000, 21), 0.05)
    fresh = simulate_statistics(proc, np.zeros(dimension(L)), 5000, 21, Phase.EVALUATE)
    assert abs(np.mean(fresh >= kappa) - 0.05) <= 0.01


@pytest.mark.slow
@pytest.mark.parametrize("tag", ["classical", "II", "III"])
def test_power_monotone_in_rho(tag):
    cfg, L, reps = config(m=10, n=50, epsilon=1.0), 2, 600
    proc = build_procedure(tag, cfg, L)
    kappa = empirical_critical_value(null_statistics(proc, 1000, 5), 0.05)
    powers = []
    for rho in (0.1, 0.2, 0.3, 0.45, 0.6):
        f = gen_signal_single_level(L, rho, "uniform").vector(L)
        powers.append(np.mean(simulate_statistics(proc, f, reps, 5, Phase.EVALUATE) >= kappa))
    powers = np.array(powers)
    se = np.sqrt(np.maximum(powers * (1 - powers), 1e-4) / reps)
    drops = [i for i in range(4) if powers[i + 1] < powers[i]]
    assert len(drops) <= 1
    for i in drops:
        assert powers[i] - powers[i + 1] <= 2 * math.hypot(se[i], se[i + 1])
    assert powers[-1] > powers[0]


@pytest.mark.slow
def test_procedure_III_power_ignores_signal_orientation():
    cfg, L, reps, rho = config(m=10, n=50, epsilon=1.0), 2, 1500, 2.0
    proc = build_procedure("III", cfg, L)
    kappa = empirical_critical_value(null_statistics(proc, 1000, 8), 0.05)
    d = dimension(L)
    spike = gen_signal_single_level(L, rho, "spike").vector(L)
    q = haar_rotation(d, 99).rotation
    p1 = np.mean(simulate_statistics(proc, spike, reps, 8, Phase.EVALUATE) >= kappa)
    p2 = np.mean(simulate_statistics(proc, q @ spike, reps, 8, Phase.EVALUATE) >= kappa)
    se = math.sqrt(p1 * (1 - p1) / reps + p2 * (1 - p2) / reps)
    assert abs(p1 - p2) < 3 * se
    assert 0.1 < p1 < 0.95
