import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from fieldexp.errors import InternalConsistencyError, SingularRegimeError
from fieldexp.field_model import Clustered, FieldParams, Periodic, signal_covariance
from fieldexp.kalman_exponent import (
    ScalarInnovations,
    build_periodic_state_space,
    clustering_exponent,
    scalar_exponent,
    scalar_exponent_from_correlation,
    scalar_riccati_fixed_point,
    vector_exponent,
    vector_lyapunov_solve,
    vector_riccati_solve,
)


def params_at(snr, rate=1.0, pi0=1.0):
    return FieldParams(diffusion_rate=rate, stationary_variance=pi0,
                       noise_variance=pi0 / snr)


def riccati_root_oracle(a, pi0, sig2):
    """Positive root of the steady-state quadratic
    p^2 + p (1-a^2)(sig2 - pi0) - pi0 (1-a^2) sig2 = 0."""
    b = (1.0 - a * a) * (sig2 - pi0)
    c = -pi0 * (1.0 - a * a) * sig2
    return (-b + math.sqrt(b * b - 4.0 * c)) / 2.0


def gaussian_kl_rate(snr):
    """KL divergence between N(0,1) and N(0,1+snr) (unit noise variance)."""
    return 0.5 * (1.0 / (1.0 + snr) - 1.0 + math.log(1.0 + snr))


class TestScalarRiccati:
    def test_independent_samples(self):
        inn = scalar_riccati_fixed_point(params_at(2.0), 0.0)
        assert inn.p == pytest.approx(1.0, abs=1e-14)
        assert inn.r_e == pytest.approx(1.5, abs=1e-14)
        assert inn.gain == 0.0
        assert inn.r_e_tilde == pytest.approx(0.5, abs=1e-14)

    def test_perfect_correlation(self):
        inn = scalar_riccati_fixed_point(params_at(1.0), 1.0)
        assert inn == ScalarInnovations(p=0.0, r_e=1.0, r_e_tilde=1.0, gain=0.0)

    def test_against_quadratic_root(self):
        params = FieldParams(1.0, 1.0, 1.0)
        inn = scalar_riccati_fixed_point(params, 0.5)
        # sqrt(3)/2, the positive root at equal signal and noise power
        assert inn.p == pytest.approx(math.sqrt(0.75), abs=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(a=st.floats(0.0, 0.999), snr=st.floats(0.01, 100.0),
           pi0=st.floats(0.1, 10.0))
    def test_quadratic_oracle_and_bounds(self, a, snr, pi0):
        sig2 = pi0 / snr
        params = FieldParams(1.0, pi0, sig2)
        inn = scalar_riccati_fixed_point(params, a)
        oracle = riccati_root_oracle(a, pi0, sig2)
        assert inn.p == pytest.approx(oracle, rel=1e-9, abs=1e-12 * pi0)
        assert inn.r_e == pytest.approx(sig2 + inn.p, abs=1e-14 * max(sig2, 1))
        assert inn.r_e >= sig2
        assert inn.r_e_tilde >= sig2 * (1 - 1e-15)
        assert inn.gain == pytest.approx(a * inn.p / inn.r_e, abs=1e-14)

    def test_out_of_range_correlation(self):
        with pytest.raises(ValueError):
            scalar_riccati_fixed_point(params_at(1.0), -0.1)
        with pytest.raises(ValueError):
            scalar_riccati_fixed_point(params_at(1.0), 1.1)


class TestScalarExponent:
    @pytest.mark.parametrize("snr", [0.1, 1.0, 10.0, 100.0])
    def test_reduces_to_kl_at_zero_correlation(self, snr):
        res = scalar_exponent_from_correlation(params_at(snr), 0.0)
        assert res.exponent_per_sensor == pytest.approx(gaussian_kl_rate(snr),
                                                        abs=1e-12)

    def test_unit_snr_value(self):
        # 0.5*ln 2 - 0.25
        res = scalar_exponent_from_correlation(params_at(1.0), 0.0)
        assert res.exponent_per_sensor == pytest.approx(0.09657359027997264,
                                                        abs=1e-14)

    def test_zero_at_perfect_correlation(self):
        assert scalar_exponent(params_at(1.0), 0.0).exponent_per_sensor == 0.0
        zero_rate = FieldParams(0.0, 1.0, 1.0)
        assert scalar_exponent(zero_rate, 7.0).exponent_per_sensor == 0.0

    def test_continuity_toward_perfect_correlation(self):
        res = scalar_exponent_from_correlation(params_at(1.0), 1.0 - 1e-6)
        assert res.exponent_per_sensor < 1e-3

    def test_negative_spacing_rejected(self):
        with pytest.raises(ValueError):
            scalar_exponent(params_at(1.0), -1.0)

    def test_decreasing_in_correlation_above_unit_snr(self):
        for snr in (2.0, 10.0):
            ks = [scalar_exponent_from_correlation(params_at(snr), a).exponent_per_sensor
                  for a in np.arange(0.0, 0.951, 0.05)]
            assert np.all(np.diff(ks) < 0)

    def test_interior_maximum_below_unit_snr(self):
        for snr in (0.1, 0.5):
            grid = np.arange(0.0, 1.0001, 0.05)
            ks = [scalar_exponent_from_correlation(params_at(snr), a).exponent_per_sensor
                  for a in grid]
            best = int(np.argmax(ks))
            assert 0 < best < len(grid) - 1

    def test_increasing_in_snr(self):
        for a in (0.0, 0.5, 0.9):
            ks = [scalar_exponent_from_correlation(params_at(s), a).exponent_per_sensor
                  for s in np.logspace(-1, 4, 11)]
            assert np.all(np.diff(ks) > 0)

    def test_high_snr_logarithmic_growth(self):
        target = 0.5 * math.log(10.0)
        for a in (0.0, 0.5, 0.9):
            k1 = scalar_exponent_from_correlation(params_at(1e3), a).exponent_per_sensor
            k2 = scalar_exponent_from_correlation(params_at(1e4), a).exponent_per_sensor
            assert abs((k2 - k1) - target) <= 0.05 * target

    def test_echoes_inputs(self):
        params = params_at(2.0)
        res = scalar_exponent(params, 0.7)
        assert res.params_echo == params
        assert res.config_echo.spacing == 0.7
        assert scalar_exponent(params, 0.0).config_echo is None


class TestClusteringExponent:
    def test_single_cluster_matches_scalar(self):
        params = params_at(3.0)
        lay = Clustered(cluster_size=1, cluster_count=10, period=0.8)
        a = clustering_exponent(params, lay)
        b = scalar_exponent(params, 0.8)
        assert a.exponent_per_sensor == pytest.approx(b.exponent_per_sensor, abs=1e-14)

    def test_wide_separation_reaches_boosted_kl(self):
        # far-apart clusters of two act like independent pairs at doubled SNR
        params = params_at(10.0)
        lay = Clustered(cluster_size=2, cluster_count=4, period=60.0)
        res = clustering_exponent(params, lay)
        assert res.exponent_per_sensor == pytest.approx(0.5 * gaussian_kl_rate(20.0),
                                                        abs=1e-12)

    def test_per_block_is_size_times_per_sensor(self):
        params = params_at(0.5)
        res = clustering_exponent(params, Clustered(4, 5, 1.2))
        assert res.exponent_per_block == pytest.approx(4 * res.exponent_per_sensor)

    def test_optimal_size_is_interior_at_intermediate_correlation(self):
        # 10 dB, unit field, 100 sensors: a mid-size cluster beats both extremes
        params = FieldParams(1.0, 1.0, 0.1)
        ks = {m: clustering_exponent(
            params, Clustered(m, 100 // m, m / 100.0)).exponent_per_sensor
            for m in (1, 2, 4, 5, 10)}
        assert ks[1] == pytest.approx(0.10775924751177124, abs=1e-9)
        assert ks[5] == pytest.approx(0.11303951488118873, abs=1e-9)
        assert max(ks, key=ks.get) == 5

    def test_type_check(self):
        with pytest.raises(TypeError):
            clustering_exponent(params_at(1.0), Periodic((0.5,), 2))


class TestStateSpace:
    def test_single_sensor_reduces_to_scalar_model(self):
        params = params_at(2.0)
        ss = build_periodic_state_space(params, [0.4])
        a = math.exp(-0.4)
        np.testing.assert_allclose(ss.feedback, [[a]])
        np.testing.assert_allclose(ss.input, [[1.0]])
        np.testing.assert_allclose(ss.process_cov, [[1.0 - a * a]], atol=1e-15)
        np.testing.assert_allclose(ss.initial_cov, [[1.0]])

    def test_colocated_pair(self):
        params = params_at(1.0)
        ss = build_periodic_state_space(params, [0.0, 0.9])
        np.testing.assert_allclose(ss.initial_cov, [[1.0, 1.0], [1.0, 1.0]])
        assert np.max(np.abs(np.linalg.eigvals(ss.feedback))) == pytest.approx(
            math.exp(-0.9), abs=1e-12)

    def test_equal_split_transition_column(self):
        params = params_at(1.0)
        delta = 0.6
        ss = build_periodic_state_space(params, [delta / 2, delta / 2])
        np.testing.assert_allclose(ss.feedback[:, -1],
                                   [math.exp(-delta / 2), math.exp(-delta)],
                                   atol=1e-15)
        assert np.all(ss.feedback[:, 0] == 0.0)

    def test_process_cov_ordering_wrap_gap_first(self):
        params = params_at(1.0)
        ss = build_periodic_state_space(params, [0.3, 0.5])
        np.testing.assert_allclose(
            np.diag(ss.process_cov),
            [1.0 - math.exp(-2 * 0.5), 1.0 - math.exp(-2 * 0.3)],
            atol=1e-15,
        )

    def test_zero_offsets_allowed_inside_period(self):
        # zero wrap gap puts a zero in the leading process-covariance slot
        ss = build_periodic_state_space(params_at(1.0), [0.5, 0.0])
        assert ss.process_cov[0, 0] == 0.0
        assert ss.process_cov[1, 1] == pytest.approx(1.0 - math.exp(-1.0))

    def test_initial_cov_matches_one_period_of_signal_covariance(self):
        params = params_at(4.0)
        offsets = [0.2, 0.1, 0.7]
        ss = build_periodic_state_space(params, offsets)
        one_period = signal_covariance(params, Periodic(tuple(offsets), 1))
        np.testing.assert_allclose(ss.initial_cov, one_period, atol=1e-14)

    def test_singular_regimes_rejected(self):
        with pytest.raises(SingularRegimeError):
            build_periodic_state_space(FieldParams(0.0, 1.0, 1.0), [0.5])
        with pytest.raises(SingularRegimeError):
            build_periodic_state_space(params_at(1.0), [0.0, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(
        rate=st.floats(0.05, 10.0),
        gaps=st.lists(st.floats(0.0, 2.0), min_size=1, max_size=5),
        pi0=st.floats(0.2, 5.0),
    )
    def test_stationarity_identity(self, rate, gaps, pi0):
        if sum(gaps) <= 0:
            gaps[-1] = 0.3
        params = FieldParams(rate, pi0, 1.0)
        ss = build_periodic_state_space(params, gaps)  # identity checked inside
        residual = ss.initial_cov - (
            ss.feedback @ ss.initial_cov @ ss.feedback.T
            + ss.input @ ss.process_cov @ ss.input.T
        )
        assert np.max(np.abs(residual)) < 1e-10 * pi0


def random_instances(count, seed=1234):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        m = int(rng.integers(1, 6))
        offsets = rng.uniform(0.0, 1.5, m)
        if m > 1 and rng.random() < 0.4:
            offsets[rng.integers(0, m - 1)] = 0.0
        if offsets.sum() <= 0:
            offsets[-1] = 0.5
        snr = math.exp(rng.uniform(math.log(0.05), math.log(50)))
        yield FieldParams(rng.uniform(0.05, 8.0), 1.0, 1.0 / snr), offsets


class TestVectorSolvers:
    def test_matches_scipy_dare(self):
        for params, offsets in random_instances(25):
            ss = build_periodic_state_space(params, offsets)
            p, _ = vector_riccati_solve(ss, params.noise_variance)
            drive = ss.input @ ss.process_cov @ ss.input.T
            ref = scipy.linalg.solve_discrete_are(
                ss.feedback.T, np.eye(ss.dim), drive,
                params.noise_variance * np.eye(ss.dim))
            np.testing.assert_allclose(p, ref, atol=1e-8)

    def test_matches_recursion_from_stationary_start(self):
        for params, offsets in random_instances(15, seed=77):
            ss = build_periodic_state_space(params, offsets)
            sig2 = params.noise_variance
            p, _ = vector_riccati_solve(ss, sig2)
            cov = ss.initial_cov.copy()
            drive = ss.input @ ss.process_cov @ ss.input.T
            eye = sig2 * np.eye(ss.dim)
            for _ in range(100_000):
                fp = ss.feedback @ cov
                nxt = fp @ ss.feedback.T + drive - fp @ np.linalg.solve(eye + cov, fp.T)
                nxt = 0.5 * (nxt + nxt.T)
                if np.max(np.abs(nxt - cov)) < 1e-15:
                    cov = nxt
                    break
                cov = nxt
            np.testing.assert_allclose(p, cov, atol=1e-8)

    def test_solution_is_stabilizing_and_psd(self):
        for params, offsets in random_instances(10, seed=5):
            ss = build_periodic_state_space(params, offsets)
            p, r_e = vector_riccati_solve(ss, params.noise_variance)
            assert np.min(np.linalg.eigvalsh(p)) >= -1e-10 * max(np.linalg.norm(p), 1)
            gain = ss.feedback @ p @ np.linalg.inv(r_e)
            assert np.max(np.abs(np.linalg.eigvals(ss.feedback - gain))) < 1.0

    def test_scalar_consistency(self):
        params = params_at(3.0)
        ss = build_periodic_state_space(params, [0.5])
        p, r_e = vector_riccati_solve(ss, params.noise_variance)
        inn = scalar_riccati_fixed_point(params, math.exp(-0.5))
        assert p[0, 0] == pytest.approx(inn.p, abs=1e-10)
        assert r_e[0, 0] == pytest.approx(inn.r_e, abs=1e-10)
        pt, rte = vector_lyapunov_solve(ss, p, r_e, params.noise_variance)
        assert rte[0, 0] == pytest.approx(inn.r_e_tilde, abs=1e-10)

    def test_lyapunov_series_oracle(self):
        for params, offsets in random_instances(10, seed=99):
            ss = build_periodic_state_space(params, offsets)
            sig2 = params.noise_variance
            p, r_e = vector_riccati_solve(ss, sig2)
            pt, _ = vector_lyapunov_solve(ss, p, r_e, sig2)
            gain = ss.feedback @ p @ np.linalg.inv(r_e)
            closed = ss.feedback - gain
            term = gain @ gain.T
            total = np.zeros_like(term)
            power = np.eye(ss.dim)
            for _ in range(20_000):
                contrib = power @ term @ power.T
                total += contrib
                if np.max(np.abs(contrib)) < 1e-18:
                    break
                power = closed @ power
            np.testing.assert_allclose(pt, total, atol=1e-10)

    def test_negligible_feedback_gives_noise_only_floor(self):
        # huge gaps: transition ~ 0, so the filter ignores the past
        params = params_at(5.0)
        ss = build_periodic_state_space(params, [40.0, 40.0])
        p, r_e = vector_riccati_solve(ss, params.noise_variance)
        pt, rte = vector_lyapunov_solve(ss, p, r_e, params.noise_variance)
        np.testing.assert_allclose(pt, 0.0, atol=1e-20)
        np.testing.assert_allclose(rte, params.noise_variance * np.eye(2), atol=1e-15)


class TestVectorExponent:
    def test_reduces_to_scalar(self):
        rng = np.random.default_rng(2024)
        for _ in range(10):
            rate = rng.uniform(0.1, 5.0)
            d = rng.uniform(0.05, 2.0)
            snr = math.exp(rng.uniform(math.log(0.1), math.log(30)))
            params = FieldParams(rate, 1.0, 1.0 / snr)
            kv = vector_exponent(params, Periodic((d,), 1)).exponent_per_sensor
            ks = scalar_exponent(params, d).exponent_per_sensor
            assert kv == pytest.approx(ks, abs=1e-10)

    def test_clustering_identity(self):
        rng = np.random.default_rng(7)
        for m in (2, 3, 4, 5):
            for _ in range(3):
                rate = rng.uniform(0.2, 5.0)
                dt = rng.uniform(0.05, 2.0)
                snr = math.exp(rng.uniform(math.log(0.1), math.log(20)))
                params = FieldParams(rate, 1.0, 1.0 / snr)
                kc = clustering_exponent(params, Clustered(m, 2, dt)).exponent_per_sensor
                kv = vector_exponent(
                    params, Periodic((0.0,) * (m - 1) + (dt,), 1)).exponent_per_sensor
                assert kv == pytest.approx(kc, abs=1e-8)

    def test_two_sensor_frozen_values(self):
        # 10 dB, period 0.02: strong correlation favors the co-located pair,
        # weak correlation the even split (values frozen from an independent
        # dense-solver implementation)
        p10 = FieldParams(1.0, 1.0, 0.1)
        k_pair = vector_exponent(p10, Periodic((0.0, 0.02), 1)).exponent_per_block
        k_even = vector_exponent(p10, Periodic((0.01, 0.01), 1)).exponent_per_block
        assert k_pair == pytest.approx(0.21955271740203464, abs=1e-9)
        assert k_even == pytest.approx(0.2155184950235416, abs=1e-9)
        assert k_pair > k_even

        p_weak = FieldParams(100.0, 1.0, 0.1)
        k_pair = vector_exponent(p_weak, Periodic((0.0, 0.02), 1)).exponent_per_block
        k_even = vector_exponent(p_weak, Periodic((0.01, 0.01), 1)).exponent_per_block
        assert k_pair == pytest.approx(1.038498010087848, abs=1e-9)
        assert k_even == pytest.approx(1.3926776806380148, abs=1e-9)
        assert k_even > k_pair

    def test_against_dense_kl_rate(self):
        # the exponent equals the large-n per-sensor KL rate between the two
        # hypotheses; extrapolate the dense-covariance rate in 1/n
        params = FieldParams(9.0, 1.0, 0.1)
        offsets = (0.0, 0.015, 0.015)
        kv = vector_exponent(params, Periodic(offsets, 1)).exponent_per_sensor

        def kl_rate(periods):
            layout = Periodic(offsets, periods)
            n = layout.total_sensors()
            sig2 = params.noise_variance
            cov1 = signal_covariance(params, layout) + sig2 * np.eye(n)
            chol = np.linalg.cholesky(cov1)
            logdet1 = 2.0 * np.sum(np.log(np.diag(chol)))
            trace = sig2 * np.trace(np.linalg.inv(cov1))
            return 0.5 * (trace - n + logdet1 - n * math.log(sig2)) / n

        n1, n2 = 3 * 150, 3 * 300
        k1, k2 = kl_rate(150), kl_rate(300)
        extrapolated = (n2 * k2 - n1 * k1) / (n2 - n1)
        assert kv == pytest.approx(extrapolated, abs=1e-6)

    def test_exponent_nonnegative(self):
        for params, offsets in random_instances(15, seed=404):
            res = vector_exponent(params, Periodic(tuple(offsets), 1))
            assert res.exponent_per_block >= 0.0
            assert res.exponent_per_sensor == pytest.approx(
                res.exponent_per_block / len(offsets))

    def test_type_check(self):
        with pytest.raises(TypeError):
            vector_exponent(params_at(1.0), Clustered(2, 2, 1.0))
