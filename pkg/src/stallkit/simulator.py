"""Seeded discrete-event simulation of the full streaming pipeline.

One run processes a request trace through: per-router edge-cache policy,
two-stage probabilistic (server, stream) sampling for misses, FIFO
shifted-exponential service on every parallel stream, the tandem
datacenter -> relay coupling for uncached chunks, the playback recursion,
and empirical metric collection.

Event ordering: a single heap keyed by (time, kind, seq) with service
completions (kind 0) ahead of arrivals (kind 1) and playback checkpoints
(kind 2) at equal times.  All randomness flows through one seeded generator
consumed in event order, so a (topology, vars, policy, trace, seed) tuple
reproduces bit-identical metrics.

The relay stream serves jobs in enqueue order; a chunk becomes serviceable
only once its datacenter copy has arrived, which realizes the download
recursion D(g) = max(D(g-1), E(g)) + Y(g) (the server idles while the head
job waits on the datacenter, so "work conservation" holds only for the
datacenter and cache-hit streams).
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NoSamples, UnstableDetected
from .model import DecisionVariables, SystemTopology
from .policies import make_policy
from .workload import RequestTrace

_COMPLETION, _ARRIVAL, _CHECKPOINT = 0, 1, 2


@dataclass
class PlaybackRecord:
    """Outcome of one request: chunk download offsets, stall, first-chunk time."""

    file: int
    router: int
    start: float
    served_from: str              # "edge_hit" | "edge_join" | "cdn"
    downloads: np.ndarray         # (L,) seconds after start
    play: np.ndarray              # (L,) seconds after start
    stall: float
    ttfc: float


def playback_times(downloads, tau, startup_delay):
    """Chunk play offsets: first at max(d_s, D1), then max(prev + tau, Dg)."""
    play = np.empty(len(downloads))
    t = max(startup_delay, downloads[0])
    play[0] = t
    for g in range(1, len(downloads)):
        t = max(t + tau, downloads[g])
        play[g] = t
    return play


def stall_duration(downloads, tau, startup_delay) -> float:
    play = playback_times(downloads, tau, startup_delay)
    return float(play[-1] - startup_delay - (len(downloads) - 1) * tau)


class _Stream:
    """One FIFO parallel stream; jobs may carry an availability gate."""

    __slots__ = ("rate", "shift", "queue", "busy", "busy_time", "label", "gated")

    def __init__(self, rate, shift, label, gated=False):
        self.rate = rate
        self.shift = shift
        self.queue = deque()
        self.busy = False
        self.busy_time = 0.0
        self.label = label
        self.gated = gated

    def head_ready(self) -> bool:
        if not self.queue:
            return False
        return (not self.gated) or self.queue[0][2].available[self.queue[0][1]]


class _Fetch:
    """A CDN fetch: download state of one request's chunks."""

    __slots__ = ("record", "n_chunks", "downloads", "done", "available",
                 "joiners", "entry", "complete_time")

    def __init__(self, record, n_chunks):
        self.record = record
        self.n_chunks = n_chunks
        self.downloads = np.full(n_chunks, np.nan)
        self.done = 0
        self.available = np.zeros(n_chunks, dtype=bool)  # datacenter gate
        self.joiners = []
        self.entry = None
        self.complete_time = math.inf


@dataclass
class Metrics:
    """Empirical estimates collected after warm-up."""

    sigma_grid: np.ndarray
    n_requests: int = 0
    n_measured: int = 0
    sdtp_counts: np.ndarray | None = None
    stall_sum: float = 0.0
    stall_sq: float = 0.0
    ttfc_sum: float = 0.0
    ttfc_sq: float = 0.0
    served: dict = field(default_factory=lambda: {"edge_hit": 0, "edge_join": 0, "cdn": 0})
    too_large: int = 0
    utilization: dict = field(default_factory=dict)
    occupancy_times: list = field(default_factory=list)
    occupancy_values: list = field(default_factory=list)
    stream_arrivals: dict = field(default_factory=dict)  # label -> [n, sum, sumsq, last_t]
    stream_windows: dict = field(default_factory=dict)   # label -> {window index: count}
    request_log: list | None = None

    def record(self, rec: PlaybackRecord) -> None:
        self.n_measured += 1
        self.sdtp_counts += rec.stall >= self.sigma_grid
        self.stall_sum += rec.stall
        self.stall_sq += rec.stall**2
        self.ttfc_sum += rec.ttfc
        self.ttfc_sq += rec.ttfc**2
        self.served[rec.served_from] += 1
        if self.request_log is not None:
            self.request_log.append(rec)

    # -- estimators ---------------------------------------------------------
    def sdtp(self, sigma) -> tuple:
        """(estimate, binomial stderr) of Pr(stall >= sigma)."""
        if self.n_measured == 0:
            raise NoSamples("no completed playbacks")
        idx = int(np.argmin(np.abs(self.sigma_grid - sigma)))
        if abs(self.sigma_grid[idx] - sigma) > 1e-9:
            raise ValueError(f"sigma {sigma} not on the measured grid")
        p = self.sdtp_counts[idx] / self.n_measured
        se = math.sqrt(max(p * (1 - p), 1e-300) / self.n_measured)
        return float(p), se

    def mean_stall(self) -> tuple:
        if self.n_measured == 0:
            raise NoSamples("no completed playbacks")
        n = self.n_measured
        mean = self.stall_sum / n
        var = max(self.stall_sq / n - mean**2, 0.0)
        return mean, math.sqrt(var / n)

    def mean_ttfc(self) -> tuple:
        if self.n_measured == 0:
            raise NoSamples("no completed playbacks")
        n = self.n_measured
        mean = self.ttfc_sum / n
        var = max(self.ttfc_sq / n - mean**2, 0.0)
        return mean, math.sqrt(var / n)

    def miss_rate(self) -> float:
        total = sum(self.served.values())
        return self.served["cdn"] / total if total else 0.0


def measure_sdtp(metrics: Metrics, sigma) -> tuple:
    return metrics.sdtp(sigma)


def poisson_check(metrics: Metrics) -> dict:
    """Per-stream forwarded-arrival diagnostics: coefficient of variation of
    inter-arrival times and the index of dispersion of windowed counts.

    Soft check: both near 1 is consistent with Poisson forwarding; fixed-TTL
    thinning may legitimately push them away from 1.
    """
    out = {}
    for label, (n, total, sq, _last) in metrics.stream_arrivals.items():
        if n < 2:
            continue
        mean = total / n
        var = max(sq / n - mean**2, 0.0)
        entry = {
            "n": n,
            "mean_gap": mean,
            "cv": math.sqrt(var) / mean if mean > 0 else math.nan,
            "dispersion": math.nan,
        }
        windows = metrics.stream_windows.get(label)
        if windows:
            lo, hi = min(windows), max(windows)
            counts = np.zeros(hi - lo + 1)
            for w, c in windows.items():
                counts[w - lo] = c
            if len(counts) > 3 and counts.mean() > 0:
                entry["dispersion"] = float(counts.var(ddof=1) / counts.mean())
        out[label] = entry
    return out


def run(
    topo: SystemTopology,
    vars: DecisionVariables,
    policy: str,
    trace: RequestTrace,
    seed: int,
    horizon: float | None = None,
    sigma_grid=(0.0, 2.0, 4.0, 8.0, 16.0),
    warmup_frac: float = 0.1,
    deterministic_service: bool = False,
    queue_bound: int = 200_000,
    ttl_mode: str = "fixed",
    policy_kwargs: dict | None = None,
    request_log: bool = False,
) -> Metrics:
    """Simulate ``trace`` through the pipeline; deterministic given ``seed``.

    Non-integer placements are floored.  Requests arriving within
    ``warmup_frac`` of the horizon are processed but not measured.
    """
    if len(trace) == 0:
        raise ValueError("empty workload")
    rng = np.random.default_rng(seed)
    horizon = float(horizon if horizon is not None else trace.times[-1] + 1.0)
    warmup = warmup_frac * horizon

    placement = np.floor(vars.placement).astype(int)
    segments = trace.segments
    sizes = segments * topo.tau

    # per-router policies
    policies = []
    for l in range(topo.num_edge_routers):
        policies.append(
            make_policy(
                policy, float(topo.edge_capacity[l]), windows=vars.omega[:, l],
                ttl_mode=ttl_mode, **(policy_kwargs or {}),
            )
        )

    # streams keyed by (class, server, slot, router)
    streams = {}
    for j in range(topo.num_servers):
        for l in range(topo.num_edge_routers):
            for b in range(int(topo.streams_dc[j])):
                a_d = vars.w_d[j, b, l] * topo.base_rate_dc[j]
                streams[("d", j, b, l)] = _Stream(a_d, topo.shift_dc[j], ("d", j, b, l))
                a_db = vars.w_dbar[j, b, l] * topo.base_rate_edge[j, l]
                streams[("dbar", j, b, l)] = _Stream(
                    a_db, topo.shift_edge[j, l], ("dbar", j, b, l), gated=True
                )
            for nu in range(int(topo.streams_edge[j, l])):
                a_e = vars.w_e[j, nu, l] * topo.base_rate_edge[j, l]
                streams[("e", j, nu, l)] = _Stream(a_e, topo.shift_edge[j, l], ("e", j, nu, l))

    cum_pi = np.cumsum(vars.pi, axis=1)          # (r, m, R)
    cum_p = np.cumsum(vars.p, axis=2)            # (r, m, E, R)
    cum_q = np.cumsum(vars.q, axis=2)            # (r, m, D, R)

    sigma_grid = np.asarray(sigma_grid, dtype=float)
    metrics = Metrics(sigma_grid=sigma_grid, sdtp_counts=np.zeros(len(sigma_grid)),
                      request_log=[] if request_log else None)
    pending = 0  # playbacks not yet finalized

    heap = []
    seq = 0

    def push(time, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (time, kind, seq, payload))
        seq += 1

    def sample_service(stream) -> float:
        if stream.rate <= 0:
            raise UnstableDetected(
                f"stream {stream.label} has zero rate but received work"
            )
        if deterministic_service:
            return stream.shift
        return stream.shift + rng.exponential(1.0 / stream.rate)

    def start_service(stream, now):
        t0, chunk, fetch, kind = stream.queue[0]
        dur = sample_service(stream)
        stream.busy = True
        stream.busy_time += dur
        push(now + dur, _COMPLETION, ("svc", stream.label))

    def maybe_start(stream, now):
        if not stream.busy and stream.head_ready():
            start_service(stream, now)

    window_width = max(horizon / 50.0, 1e-9)

    def note_arrival(label, now):
        st = metrics.stream_arrivals.setdefault(label, [0, 0.0, 0.0, None])
        if st[3] is not None:
            gap = now - st[3]
            st[0] += 1
            st[1] += gap
            st[2] += gap * gap
        st[3] = now
        wins = metrics.stream_windows.setdefault(label, {})
        w = int(now / window_width)
        wins[w] = wins.get(w, 0) + 1

    def finalize(fetch: _Fetch):
        nonlocal pending
        rec = fetch.record
        rec_downloads = fetch.downloads
        play = playback_times(rec_downloads, topo.tau, topo.startup_delay)
        stall = float(play[-1] - topo.startup_delay - (fetch.n_chunks - 1) * topo.tau)
        full = PlaybackRecord(rec["file"], rec["router"], rec["start"], "cdn",
                              rec_downloads.copy(), play, stall, float(rec_downloads[0]))
        if rec["measured"]:
            metrics.record(full)
        pending -= 1
        fetch.complete_time = rec["start"] + float(rec_downloads.max())
        if fetch.entry is not None:
            fetch.entry.complete_at = fetch.complete_time
        for joiner in fetch.joiners:
            finalize_join(joiner, fetch)

    def finalize_join(joiner, fetch):
        nonlocal pending
        offsets = np.maximum(fetch.record["start"] + fetch.downloads - joiner["start"], 0.0)
        play = playback_times(offsets, topo.tau, topo.startup_delay)
        stall = float(play[-1] - topo.startup_delay - (len(offsets) - 1) * topo.tau)
        full = PlaybackRecord(joiner["file"], joiner["router"], joiner["start"],
                              "edge_join", offsets, play, stall, float(offsets[0]))
        if joiner["measured"]:
            metrics.record(full)
        pending -= 1

    def schedule_fetch(i, l, now, measured, entry):
        nonlocal pending
        if int(segments[i]) < 1:
            raise ValueError("zero-length file in catalog")
        u = rng.random()
        j = int(np.searchsorted(cum_pi[i, :, l], u * cum_pi[i, -1, l]))
        u = rng.random()
        nu = int(np.searchsorted(cum_p[i, j, :, l], u * cum_p[i, j, -1, l]))
        u = rng.random()
        beta = int(np.searchsorted(cum_q[i, j, :, l], u * cum_q[i, j, -1, l]))
        n = int(segments[i])
        lc = min(int(placement[j, i]), n)
        fetch = _Fetch({"file": i, "router": l, "start": now, "measured": measured}, n)
        fetch.entry = entry
        if entry is not None:
            entry.origin = fetch
            entry.complete_at = math.inf
        pending += 1

        e_stream = streams[("e", j, nu, l)]
        d_stream = streams[("d", j, beta, l)]
        db_stream = streams[("dbar", j, beta, l)]
        if lc > 0:
            note_arrival(e_stream.label, now)
            for g in range(lc):
                e_stream.queue.append((now, g, fetch, "e"))
            if len(e_stream.queue) > queue_bound:
                raise UnstableDetected(f"queue bound exceeded on {e_stream.label}")
            maybe_start(e_stream, now)
        if n - lc > 0:
            note_arrival(d_stream.label, now)
            for g in range(lc, n):
                d_stream.queue.append((now, g, fetch, "d"))
                db_stream.queue.append((now, g, fetch, "dbar"))
            if len(d_stream.queue) > queue_bound:
                raise UnstableDetected(f"queue bound exceeded on {d_stream.label}")
            maybe_start(d_stream, now)
            maybe_start(db_stream, now)

    def on_completion(label, now):
        stream = streams[label]
        _t0, chunk, fetch, kind = stream.queue.popleft()
        stream.busy = False
        if kind == "e" or kind == "dbar":
            fetch.downloads[chunk] = now - fetch.record["start"]
            fetch.done += 1
            if fetch.done == fetch.n_chunks:
                push(now, _CHECKPOINT, ("playback", fetch))
        else:  # datacenter copy arrived at the cache server
            fetch.available[chunk] = True
            db = streams[("dbar",) + label[1:]]
            maybe_start(db, now)
        maybe_start(stream, now)

    def on_arrival(idx, now):
        nonlocal pending
        i = int(trace.files[idx])
        l = int(trace.routers[idx])
        measured = now >= warmup
        metrics.n_requests += 1
        pol = policies[l]
        dec = pol.on_request(i, float(sizes[i]), now, rng)
        pol.state.assert_capacity()
        if dec.too_large:
            metrics.too_large += 1
        if dec.hit:
            entry = pol.state.resident[i]
            origin = entry.origin
            if dec.join_inflight and origin is not None and origin.done < origin.n_chunks:
                pending += 1
                origin.joiners.append(
                    {"file": i, "router": l, "start": now, "measured": measured}
                )
            else:
                # fully resident: every chunk is immediately available
                offsets = np.zeros(int(segments[i]))
                play = playback_times(offsets, topo.tau, topo.startup_delay)
                rec = PlaybackRecord(i, l, now, "edge_hit", offsets, play, 0.0, 0.0)
                if measured:
                    metrics.record(rec)
        else:
            entry = pol.state.resident.get(i) if dec.admitted else None
            schedule_fetch(i, l, now, measured, entry)
        metrics.occupancy_times.append(now)
        metrics.occupancy_values.append(pol.state.occupancy)

    for idx in range(len(trace)):
        push(float(trace.times[idx]), _ARRIVAL, idx)

    last_time = 0.0
    while heap:
        now, kind, _s, payload = heapq.heappop(heap)
        last_time = now
        if kind == _ARRIVAL:
            on_arrival(payload, now)
        elif kind == _COMPLETION:
            on_completion(payload[1], now)
        else:
            finalize(payload[1])

    assert pending == 0, "simulation ended with unfinished playbacks"

    for label, stream in streams.items():
        if stream.busy_time > 0:
            metrics.utilization[label] = stream.busy_time / max(last_time, 1e-12)
    # decimate the occupancy series to a manageable length
    if len(metrics.occupancy_times) > 4000:
        step = len(metrics.occupancy_times) // 2000
        metrics.occupancy_times = metrics.occupancy_times[::step]
        metrics.occupancy_values = metrics.occupancy_values[::step]
    metrics.occupancy_times = np.asarray(metrics.occupancy_times)
    metrics.occupancy_values = np.asarray(metrics.occupancy_values)
    return metrics
