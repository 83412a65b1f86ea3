import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stallkit.errors import MgfUndefined, Unstable
from stallkit.queueing import (
    ShiftedExp,
    StreamQueue,
    arith_geometric_sum,
    batch_service_mgf,
    download_mgf_cached,
    geometric_sum,
    load_intensity,
    mgf_shifted_exp,
    pk_waiting_mgf,
    staircase_product_sum,
    tandem_chunk_mgf_bound,
)
from .conftest import batch_mean_stderr, mg1_waiting_times


def queue(rate, shift, lam, mix=((1.0, 1),)):
    return StreamQueue(service=ShiftedExp(rate, shift), agg_rate=lam, batch_mix=mix)


class TestShiftedExpMgf:
    def test_at_zero(self):
        assert mgf_shifted_exp(ShiftedExp(2.0, 0.5), 0.0) == 1.0

    def test_hand_value(self):
        # 2 e^{0.5} / (2 - 1)
        got = mgf_shifted_exp(ShiftedExp(2.0, 0.5), 1.0)
        assert got == pytest.approx(2.0 * math.exp(0.5), rel=1e-12)
        assert got == pytest.approx(3.2974425414002564, rel=1e-12)

    def test_pole(self):
        with pytest.raises(MgfUndefined):
            mgf_shifted_exp(ShiftedExp(2.0, 0.5), 2.0)

    def test_monte_carlo(self, rng):
        s = ShiftedExp(1.7, 0.3)
        x = s.shift + rng.exponential(1.0 / s.rate, size=200_000)
        for t in (0.2, 0.5, 0.7):
            samples = np.exp(t * x)
            se = samples.std(ddof=1) / np.sqrt(len(samples))
            assert abs(samples.mean() - mgf_shifted_exp(s, t)) < 3 * se


class TestBatchServiceMgf:
    def test_degenerate_single_chunk(self):
        q = queue(2.0, 0.5, 0.1)
        for t in (0.0, 0.3, 1.0):
            assert batch_service_mgf(q, t) == pytest.approx(
                mgf_shifted_exp(q.service, t), rel=1e-12
            )

    def test_hand_mixture(self):
        q = queue(2.0, 0.0, 0.1, mix=((0.5, 1), (0.5, 2)))
        # M(1) = 2, so 0.5*2 + 0.5*4 = 3
        assert batch_service_mgf(q, 1.0) == pytest.approx(3.0, rel=1e-12)

    def test_at_zero(self):
        q = queue(2.0, 0.7, 0.1, mix=((0.25, 1), (0.75, 3)))
        assert batch_service_mgf(q, 0.0) == pytest.approx(1.0, rel=1e-12)

    def test_monte_carlo(self, rng):
        from .conftest import sample_batch_service

        q = queue(1.5, 0.2, 0.1, mix=((0.4, 1), (0.4, 2), (0.2, 4)))
        draws = sample_batch_service(rng, q.service, q.batch_mix, 200_000)
        for t in (0.1, 0.25):
            samples = np.exp(t * draws)
            se = samples.std(ddof=1) / np.sqrt(len(samples))
            assert abs(samples.mean() - batch_service_mgf(q, t)) < 3 * se


class TestLoadIntensity:
    def test_zero_rate(self):
        assert load_intensity(queue(2.0, 0.5, 0.0, mix=((1.0, 5),))) == 0.0

    def test_hand_value(self):
        q = queue(2.0, 0.5, 0.1, mix=((1.0, 5),))
        assert load_intensity(q) == pytest.approx(0.5, rel=1e-12)

    def test_matches_numeric_mgf_derivative(self):
        q = queue(1.3, 0.4, 0.25, mix=((0.6, 2), (0.4, 7)))
        eps = 1e-6
        b_prime = (batch_service_mgf(q, eps) - batch_service_mgf(q, -eps)) / (2 * eps)
        assert load_intensity(q) == pytest.approx(q.agg_rate * b_prime, rel=1e-6)


class TestPkWaitingMgf:
    def test_empty_queue(self):
        q = queue(2.0, 0.5, 0.0, mix=())
        assert pk_waiting_mgf(q, 0.5) == 1.0

    def test_mean_against_pk_formula(self):
        # M/M/1: rate 1, shift 0, lam 0.3 -> E[W] = lam E[S^2] / (2 (1 - rho))
        q = queue(1.0, 0.0, 0.3)
        expected = 0.3 * 2.0 / (2.0 * 0.7)
        eps = 1e-6
        mean = (pk_waiting_mgf(q, eps) - pk_waiting_mgf(q, -eps)) / (2 * eps)
        assert mean == pytest.approx(expected, rel=1e-5)
        assert expected == pytest.approx(0.42857142857, rel=1e-9)

    def test_unstable(self):
        q = queue(1.0, 0.0, 1.05)
        with pytest.raises(Unstable):
            pk_waiting_mgf(q, 0.1)

    def test_monte_carlo(self, rng):
        q = queue(1.2, 0.3, 0.5, mix=((0.7, 1), (0.3, 2)))
        assert load_intensity(q) < 0.9
        w = mg1_waiting_times(rng, q, 400_000)
        t = 0.05
        mean, se = batch_mean_stderr(np.exp(t * w))
        assert abs(mean - pk_waiting_mgf(q, t)) < 3 * se


class TestDownloadMgfCached:
    def test_empty_queue_single_chunk(self):
        q = queue(2.0, 0.5, 0.0, mix=())
        for t in (0.2, 1.0):
            assert download_mgf_cached(q, 1, t) == pytest.approx(
                mgf_shifted_exp(q.service, t), rel=1e-12
            )

    def test_hand_power(self):
        q = queue(2.0, 0.0, 0.0, mix=())
        assert download_mgf_cached(q, 3, 1.0) == pytest.approx(8.0, rel=1e-12)

    def test_monte_carlo(self, rng):
        q = queue(1.5, 0.2, 0.25, mix=((1.0, 3),))
        assert load_intensity(q) < 0.9
        w = mg1_waiting_times(rng, q, 300_000)
        g, t = 3, 0.03
        chunks = q.service.shift * g + rng.gamma(g, 1.0 / q.service.rate, size=len(w))
        mean, se = batch_mean_stderr(np.exp(t * (w + chunks)))
        assert abs(mean - download_mgf_cached(q, g, t)) < 3 * se


def simulate_tandem_downloads(rng, dc, dbar, l_cached, v, n):
    """Monte-Carlo download times of chunk v on the tandem path, empty system:
    E(g) = W_dc + sum of dc services; D(g) = max(D(g-1), E(g)) + dbar service."""
    w_dc = mg1_waiting_times(rng, dc, n) if dc.agg_rate > 0 else np.zeros(n)
    w_dbar = mg1_waiting_times(rng, dbar, n) if dbar.agg_rate > 0 else np.zeros(n)
    k = v - l_cached
    y_dc = dc.service.shift + rng.exponential(1.0 / dc.service.rate, size=(n, k))
    y_db = dbar.service.shift + rng.exponential(1.0 / dbar.service.rate, size=(n, k))
    e = w_dc[:, None] + np.cumsum(y_dc, axis=1)
    d = w_dbar
    for g in range(k):
        d = np.maximum(d, e[:, g]) + y_db[:, g]
    return d


class TestTandemChunkMgfBound:
    def test_hand_two_term_sum(self):
        dc = queue(2.0, 0.1, 0.0, mix=())
        dbar = queue(3.0, 0.2, 0.0, mix=())
        t = 0.5
        m_dc = mgf_shifted_exp(dc.service, t)
        m_db = mgf_shifted_exp(dbar.service, t)
        got = tandem_chunk_mgf_bound(dc, dbar, l_cached=2, v=3, t=t)
        assert got == pytest.approx(m_db + m_dc * m_db, rel=1e-12)

    def test_small_t_limit_counts_terms(self):
        dc = queue(2.0, 0.1, 0.0, mix=())
        dbar = queue(3.0, 0.2, 0.0, mix=())
        got = tandem_chunk_mgf_bound(dc, dbar, l_cached=1, v=4, t=1e-9)
        assert got == pytest.approx(4.0, abs=1e-6)  # v - l_cached + 1

    def test_dominates_monte_carlo(self, rng):
        dc = queue(1.6, 0.15, 0.3, mix=((1.0, 2),))
        dbar = queue(2.2, 0.1, 0.3, mix=((1.0, 2),))
        l_cached, v, t = 1, 3, 0.07
        d = simulate_tandem_downloads(rng, dc, dbar, l_cached, v, 200_000)
        mean, se = batch_mean_stderr(np.exp(t * d))
        assert tandem_chunk_mgf_bound(dc, dbar, l_cached, v, t) >= mean - 3 * se


@st.composite
def stable_queues(draw):
    rate = draw(st.floats(0.5, 4.0))
    shift = draw(st.floats(0.0, 1.0))
    lens = draw(st.lists(st.integers(1, 6), min_size=1, max_size=3, unique=True))
    raw = [draw(st.floats(0.1, 1.0)) for _ in lens]
    mix = tuple((w / sum(raw), k) for w, k in zip(raw, lens))
    service = ShiftedExp(rate, shift)
    mean_batch = sum(w * k for w, k in mix) * service.mean
    rho = draw(st.floats(0.05, 0.85))
    return StreamQueue(service, rho / mean_batch, mix)


class TestMgfProperties:
    @settings(max_examples=60, deadline=None)
    @given(stable_queues(), st.floats(0.01, 0.99))
    def test_at_least_one_and_increasing(self, q, frac):
        # valid exponents sit below both the pole and the stability root
        hi = q.service.rate
        lo_t, hi_t = 0.25 * frac * hi, 0.5 * frac * hi
        try:
            a = pk_waiting_mgf(q, lo_t)
            b = pk_waiting_mgf(q, hi_t)
        except MgfUndefined:
            return
        assert 1.0 <= a <= b
        assert batch_service_mgf(q, lo_t) >= 1.0
        assert mgf_shifted_exp(q.service, lo_t) >= 1.0

    @settings(max_examples=40, deadline=None)
    @given(stable_queues())
    def test_limit_to_one(self, q):
        assert pk_waiting_mgf(q, 1e-12) == pytest.approx(1.0, abs=1e-6)
        assert batch_service_mgf(q, 1e-12) == pytest.approx(1.0, abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(stable_queues(), st.integers(1, 5))
    def test_download_mgf_nondecreasing_in_chunk(self, q, g):
        t = 0.1 * q.service.rate
        try:
            a = download_mgf_cached(q, g, t)
            b = download_mgf_cached(q, g + 1, t)
        except MgfUndefined:
            return
        assert b >= a


class TestSumHelpers:
    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.2, 3.0), st.integers(0, 60))
    def test_geometric_sum_matches_terms(self, x, k):
        assert geometric_sum(x, k) == pytest.approx(
            sum(x**v for v in range(1, k + 1)), rel=1e-9, abs=1e-12
        )

    def test_geometric_sum_near_one(self):
        for x in (1.0, 1.0 + 4e-9, 1.0 - 4e-9):
            assert geometric_sum(x, 17) == pytest.approx(
                math.fsum(x**v for v in range(1, 18)), rel=1e-10
            )

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.2, 2.0), st.integers(0, 40))
    def test_arith_geometric_matches_terms(self, x, k):
        assert arith_geometric_sum(x, k) == pytest.approx(
            sum(a * x**a for a in range(1, k + 1)), rel=1e-9, abs=1e-12
        )

    @settings(max_examples=150, deadline=None)
    @given(st.floats(0.3, 1.8), st.floats(0.3, 1.8), st.integers(0, 25))
    def test_staircase_matches_double_sum(self, x, y, k):
        brute = math.fsum(x**b * y ** (a - b + 1) for a in range(1, k + 1) for b in range(1, a + 1))
        assert staircase_product_sum(x, y, k) == pytest.approx(brute, rel=1e-8, abs=1e-12)

    def test_staircase_near_equal_ratio(self):
        x = 0.9
        for y in (0.9, 0.9 + 1e-10, 0.9 - 1e-10):
            brute = math.fsum(
                x**b * y ** (a - b + 1) for a in range(1, 13) for b in range(1, a + 1)
            )
            assert staircase_product_sum(x, y, 12) == pytest.approx(brute, rel=1e-7)
