import numpy as np
import pytest

from stallkit.errors import ParseError, UnknownFileId
from stallkit.workload import RequestTrace, gen_catalog, gen_poisson_trace, load_trace

from .test_model import small_topology


class TestGenCatalog:
    def test_round_up_to_chunks(self):
        # a 301.2 s draw at tau=8 becomes 38 chunks = 304 s
        assert int(np.ceil(301.2 / 8.0)) == 38

    def test_support_floor(self):
        # Pareto support starts at the scale, so 38 chunks is the minimum at tau=8
        segs = gen_catalog(500, shape=2.0, scale=300.0, tau=8.0, seed=1)
        assert segs.min() >= int(np.ceil(300.0 / 8.0)) == 38
        assert (segs * 8.0 < 3600.0 + 8.0).all()

    def test_deterministic(self):
        a = gen_catalog(64, 2.0, 300.0, 8.0, seed=42)
        b = gen_catalog(64, 2.0, 300.0, 8.0, seed=42)
        np.testing.assert_array_equal(a, b)

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            gen_catalog(5, shape=0.9, scale=300.0, tau=8.0, seed=0)


class TestGenPoissonTrace:
    def test_zero_rates_empty(self):
        topo = small_topology(arrival_rate=np.zeros((3, 2)))
        assert len(gen_poisson_trace(topo, horizon=100.0, seed=0)) == 0

    def test_total_count_near_rate(self):
        # aggregate rate 0.01455/s over 1e6 s: count within 3 sqrt(n) of 14550
        total = 0.01455
        topo = small_topology(arrival_rate=np.full((3, 2), total / 6.0))
        trace = gen_poisson_trace(topo, horizon=1e6, seed=7)
        expect = total * 1e6
        assert abs(len(trace) - expect) < 3.0 * np.sqrt(expect)

    def test_per_stream_rate_within_ci(self):
        topo = small_topology(arrival_rate=np.full((3, 2), 0.02))
        trace = gen_poisson_trace(topo, horizon=2e5, seed=3)
        for i in range(3):
            for l in range(2):
                n = int(((trace.files == i) & (trace.routers == l)).sum())
                assert abs(n - 0.02 * 2e5) < 4.0 * np.sqrt(0.02 * 2e5)

    def test_interarrivals_exponential_mean(self):
        topo = small_topology(
            num_servers=1, r=1, routers=1,
            segments=[3], streams_dc=[1], streams_edge=[[1]],
            base_rate_dc=[3.0], shift_dc=[0.1], base_rate_edge=[[3.0]],
            shift_edge=[[0.1]], server_capacity=[3.0], edge_capacity=[50.0],
            violation_budget=[0.05], arrival_rate=[[0.5]],
        )
        trace = gen_poisson_trace(topo, horizon=2e5, seed=5)
        gaps = np.diff(trace.times)
        assert gaps.mean() == pytest.approx(2.0, rel=0.02)

    def test_times_sorted(self):
        topo = small_topology()
        trace = gen_poisson_trace(topo, horizon=1e4, seed=11)
        assert (np.diff(trace.times) >= 0).all()


class TestLoadTrace:
    def test_well_formed(self, tmp_path):
        p = tmp_path / "trace.csv"
        p.write_text("time_s,file_id,router_id\n0.5,0,0\n1.5,1,1\n2.0,0,1\n")
        trace = load_trace(p, segments=[4, 5])
        assert len(trace) == 3
        assert trace.files.tolist() == [0, 1, 0]

    def test_out_of_order_timestamp(self, tmp_path):
        p = tmp_path / "trace.csv"
        p.write_text("time_s,file_id,router_id\n1.5,0,0\n0.5,0,0\n")
        with pytest.raises(ParseError, match="line 3"):
            load_trace(p, segments=[4])

    def test_unknown_file_id(self, tmp_path):
        p = tmp_path / "trace.csv"
        p.write_text("time_s,file_id,router_id\n0.5,7,0\n")
        with pytest.raises(UnknownFileId):
            load_trace(p, segments=[4])

    def test_length_override(self, tmp_path):
        p = tmp_path / "trace.csv"
        p.write_text("time_s,file_id,router_id,length_s\n0.5,0,0,24\n")
        trace = load_trace(p, segments=[4], tau=8.0)
        assert trace.segments[0] == 3

    def test_trace_type_rejects_unsorted(self):
        with pytest.raises(ParseError):
            RequestTrace(np.array([1.0, 0.5]), np.array([0, 0]),
                         np.array([0, 0]), np.array([3]))


class TestCatalogIO:
    def test_roundtrip(self, tmp_path):
        from stallkit.workload import load_catalog, save_catalog

        segs = np.array([38, 120, 7])
        p = tmp_path / "catalog.csv"
        save_catalog(segs, tau=8.0, path=p)
        back = load_catalog(p, tau=8.0)
        np.testing.assert_array_equal(back, segs)

    def test_bad_header(self, tmp_path):
        from stallkit.workload import load_catalog

        p = tmp_path / "catalog.csv"
        p.write_text("id,len\n0,304\n")
        with pytest.raises(ParseError):
            load_catalog(p, tau=8.0)

    def test_gapped_ids_rejected(self, tmp_path):
        from stallkit.workload import load_catalog

        p = tmp_path / "catalog.csv"
        p.write_text("file_id,length_s\n0,304\n2,64\n")
        with pytest.raises(ParseError):
            load_catalog(p, tau=8.0)
