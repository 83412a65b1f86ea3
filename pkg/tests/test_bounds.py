import math

import numpy as np
import pytest

from stallkit.bounds import (
    bound_report,
    capacity_violation_prob,
    edge_recursion_consts,
    evaluate_msd,
    evaluate_sdtp,
    evaluate_ttfc,
    msd_bound,
    sdtp_bound,
    sdtp_bound_reference,
    ttfc_bound,
    weighted_objective,
)
from stallkit.errors import ConstraintViolated
from stallkit.model import SystemTopology, exponent_sup, project_feasible, uniform_init

from .instances import random_instance
from .test_model import small_topology, tiny_topology, fully_cached_single_stream_vars


class TestEdgeRecursionConsts:
    def test_window_zero_disables_edge(self):
        cbar, atilde, abar = edge_recursion_consts(
            lam=0.5, omega=0.0, h=0.2, sigma=3.0, startup_delay=1.0, segments=4, tau=2.0
        )
        assert cbar == 0.0
        assert atilde == 1.0
        assert abar == pytest.approx(math.exp(-0.2 * (3.0 + 1.0 + 3 * 2.0)), rel=1e-12)

    def test_no_arrivals(self):
        cbar, atilde, _ = edge_recursion_consts(0.0, 50.0, 0.2, 3.0, 1.0, 4, 2.0)
        assert cbar == 0.0 and atilde == 1.0

    def test_hand_evaluation(self):
        lam, omega, h, sigma, ds, segs, tau = 0.02, 50.0, 0.01, 5.0, 1.0, 3, 8.0
        c = 1.0 - math.exp(-lam * omega)
        a = math.exp(-lam * omega)
        b = 1.0 - lam / (lam + h) * (1.0 - math.exp(-(lam + h) * omega))
        cbar, atilde, abar = edge_recursion_consts(lam, omega, h, sigma, ds, segs, tau)
        assert cbar == pytest.approx(c / b * math.exp(-h * sigma), rel=1e-12)
        assert atilde == pytest.approx(a / b, rel=1e-12)
        assert abar == pytest.approx(a / b * math.exp(-h * (sigma + ds + 2 * tau)), rel=1e-12)


class TestSdtpAgainstReference:
    """The vectorized closed forms must match the chunk-by-chunk evaluator."""

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_reference(self, seed):
        mode = "fixed" if seed % 3 == 0 else "zero"
        topo, vars = random_instance(seed, omega_mode=mode)
        sigmas = [0.0, 2.0, 7.5]
        vec = evaluate_sdtp(topo, vars, sigmas)
        for i in range(topo.num_files):
            for l in range(topo.num_edge_routers):
                for s_idx, sigma in enumerate(sigmas):
                    ref = sdtp_bound_reference(topo, vars, i, l, sigma)
                    assert vec[i, l, s_idx] == pytest.approx(ref, rel=1e-8), (
                        f"file {i} router {l} sigma {sigma}"
                    )

    def test_scalar_wrapper(self):
        topo, vars = random_instance(99)
        assert sdtp_bound(topo, vars, 0, 0, 4.0) == pytest.approx(
            evaluate_sdtp(topo, vars, [4.0])[0, 0, 0]
        )


class TestSdtpShape:
    def test_decreasing_in_sigma(self):
        topo, vars = random_instance(5)
        sig = np.linspace(0.0, 40.0, 9)
        raw = evaluate_sdtp(topo, vars, sig)
        assert (np.diff(raw, axis=2) <= 1e-12).all()

    def test_decays_exponentially(self):
        topo, vars = random_instance(5)
        raw = evaluate_sdtp(topo, vars, [0.0, 100.0])
        h = vars.h[:, None]
        np.testing.assert_allclose(
            raw[:, :, 1], raw[:, :, 0] * np.exp(-h * 100.0), rtol=1e-9
        )

    def test_nonincreasing_in_service_rate(self):
        topo, vars = random_instance(8)
        a = weighted_objective(topo, vars, sigma=4.0)
        import dataclasses

        faster = SystemTopology(**{
            **{f.name: getattr(topo, f.name) for f in dataclasses.fields(topo)},
            "base_rate_dc": topo.base_rate_dc * 1.5,
            "base_rate_edge": topo.base_rate_edge * 1.5,
        })
        b = weighted_objective(faster, vars, sigma=4.0)
        assert b <= a + 1e-12

    def test_nondecreasing_in_arrivals_without_edge_cache(self):
        import dataclasses

        topo, vars = random_instance(13, omega_mode="zero")
        a = weighted_objective(topo, vars, sigma=4.0)
        hotter = SystemTopology(**{
            **{f.name: getattr(topo, f.name) for f in dataclasses.fields(topo)},
            "arrival_rate": topo.arrival_rate * 1.2,
        })
        b = weighted_objective(hotter, vars, sigma=4.0)
        assert b >= a - 1e-12

    def test_fully_cached_ignores_datacenter_rates(self):
        import dataclasses

        topo = tiny_topology()
        vars = fully_cached_single_stream_vars(topo)
        vars = vars.replace(h=[0.05], g=[0.05])
        a = evaluate_sdtp(topo, vars, [2.0])
        slower_dc = SystemTopology(**{
            **{f.name: getattr(topo, f.name) for f in dataclasses.fields(topo)},
            "base_rate_dc": topo.base_rate_dc * 0.01,
        })
        b = evaluate_sdtp(slower_dc, vars, [2.0])
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_raises_on_pole(self):
        topo, vars = random_instance(3)
        bad = vars.replace(h=np.full(topo.num_files, 1e3))
        with pytest.raises(ConstraintViolated):
            evaluate_sdtp(topo, bad, [1.0])


class TestMeanBound:
    def test_stall_free_system_small_bound(self):
        # no arrivals anywhere: the only mass is the +1 slack in the log
        topo = small_topology(arrival_rate=np.zeros((3, 2)))
        vars = uniform_init(topo).replace(g=np.full(3, 0.5), h=np.full(3, 0.5))
        msd = evaluate_msd(topo, vars)
        assert (msd >= 0).all()
        assert msd.max() < 10.0  # log(1 + M_D)/g stays modest on an idle system

    def test_single_segment_equals_ttfc_form(self):
        # with L_i = 1, zero startup delay, and unit exponent the mean-stall
        # machinery IS the first-chunk bound (rates high enough for the pole)
        topo = small_topology(
            segments=[1, 1, 1], startup_delay=0.0,
            base_rate_edge=np.full((2, 2), 16.0), base_rate_dc=np.full(2, 16.0),
        )
        vars = uniform_init(topo)
        vars = vars.replace(g=np.ones(3), h=np.ones(3))
        np.testing.assert_allclose(
            evaluate_msd(topo, vars), evaluate_ttfc(topo, vars), rtol=1e-12
        )

    def test_ttfc_hand_value_idle_fully_cached(self):
        # single server, single stream, no arrivals, file cached at the server:
        # ttfc = log(2 + M(1)) with M the chunk MGF at exponent 1
        topo = tiny_topology(arrival_rate=[[0.0]])
        vars = fully_cached_single_stream_vars(topo)
        m1 = 2.0 * math.exp(0.5) / (2.0 - 1.0)
        assert ttfc_bound(topo, vars, 0, 0) == pytest.approx(math.log(2.0 + m1), rel=1e-10)

    def test_msd_dominates_zero(self):
        topo, vars = random_instance(21, omega_mode="fixed")
        assert (evaluate_msd(topo, vars) >= 0).all()


class TestCapacityViolation:
    def test_half_at_mean(self):
        # one file, size 10 s, in-cache probability 0.5, capacity at the mean
        topo = tiny_topology(
            segments=[5], tau=2.0, edge_capacity=[5.0], arrival_rate=[[0.1]]
        )
        omega = np.array([[math.log(2.0) / 0.1]])  # e^{-lam w} = 0.5
        vars = fully_cached_single_stream_vars(topo).replace(omega=omega)
        assert capacity_violation_prob(topo, vars, 0) == pytest.approx(0.5, rel=1e-9)

    def test_zero_window_zero_probability(self):
        topo = tiny_topology()
        vars = fully_cached_single_stream_vars(topo)
        assert capacity_violation_prob(topo, vars, 0) == 0.0

    def test_monotone_in_window(self):
        topo, vars = random_instance(17, omega_mode="fixed")
        base = capacity_violation_prob(topo, vars)
        bigger = capacity_violation_prob(topo, vars.replace(omega=vars.omega * 2.0))
        assert (bigger >= base - 1e-12).all()


class TestWeightedObjective:
    def test_endpoints(self):
        topo, vars = random_instance(30)
        kappa = topo.arrival_rate / topo.arrival_rate.sum()
        tail = float((kappa * np.minimum(evaluate_sdtp(topo, vars, [4.0])[:, :, 0], 1.0)).sum())
        mean = float((kappa * evaluate_msd(topo, vars)).sum())
        assert weighted_objective(topo, vars, 4.0, theta=1.0) == pytest.approx(tail, rel=1e-12)
        assert weighted_objective(topo, vars, 4.0, theta=0.0) == pytest.approx(mean, rel=1e-12)
        mix = weighted_objective(topo, vars, 4.0, theta=0.3)
        assert mix == pytest.approx(0.3 * tail + 0.7 * mean, rel=1e-12)

    def test_uniform_rates_weight_equally(self):
        topo = small_topology(arrival_rate=np.full((3, 2), 0.01))
        kappa = topo.arrival_rate / topo.arrival_rate.sum()
        np.testing.assert_allclose(kappa, 1.0 / 6.0)


class TestBoundReport:
    def test_report_roundtrip(self, tmp_path):
        topo, vars = random_instance(2)
        rep = bound_report(topo, vars, [0.0, 4.0], ttfc_exponent=float(vars.h[0]))
        assert rep.feasible
        assert (rep.sdtp <= 1.0 + 1e-12).all()
        out = tmp_path / "bounds.csv"
        rep.write_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0].split(",")[:4] == ["file", "router", "sigma", "sdtp_bound"]
        assert len(lines) == 1 + topo.num_files * topo.num_edge_routers * 2

    def test_report_degrades_per_metric(self):
        # a unit ttfc exponent can sit past slow streams' poles; the tail and
        # mean columns must survive
        topo, vars = random_instance(2)
        rep = bound_report(topo, vars, [4.0], ttfc_exponent=1e6)
        assert not rep.feasible
        assert np.isnan(rep.ttfc).all()
        assert np.isfinite(rep.sdtp_raw).all() and np.isfinite(rep.msd).all()
        assert any("ttfc" in n for n in rep.notes)

    def test_empty_sigma_grid(self, tmp_path):
        topo, vars = random_instance(2)
        rep = bound_report(topo, vars, [])
        out = tmp_path / "bounds.csv"
        rep.write_csv(out)
        assert out.read_text().strip().splitlines()[0].startswith("file,router")


class TestTtfcDominance:
    def test_bound_dominates_simulated_first_chunk_time(self):
        from stallkit.simulator import run
        from stallkit.workload import gen_poisson_trace

        topo, vars = random_instance(33, omega_mode="zero", exponent_frac=0.3)
        t = float(vars.h[0])
        bound = evaluate_ttfc(topo, vars, exponent=t)
        total = topo.arrival_rate.sum()
        trace = gen_poisson_trace(topo, 6000 / total, seed=9)
        m = run(topo, vars, "ttl", trace, seed=4)
        kappa = topo.arrival_rate / total
        weighted = float((kappa * bound).sum())
        sim, se = m.mean_ttfc()
        assert weighted >= sim - 3 * se
