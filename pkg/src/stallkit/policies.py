"""Edge-cache policies and distributed-cache placement strategies.

Every policy owns one router's cache and answers a single question per
request: serve from the edge (hit / join an in-flight download) or forward to
the CDN, evicting residents as needed so occupancy NEVER exceeds capacity.
Sizes are seconds of video (chunks * tau) throughout.

The TTL policy evicts a file once it has gone unrequested for its window; on
admission pressure it evicts the resident closest to expiry.  LRU, qLRU,
kLRU, kRandom, and adaptSize are the classical baselines: qLRU admits with a
fixed probability, kLRU/kRandom promote through a ladder of virtual id-only
caches and differ only in the real cache's eviction victim, and adaptSize
admits with probability exp(-size/c), retuning c periodically to maximize a
modeled object hit ratio.
"""

from __future__ import annotations

import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PolicyDecision:
    hit: bool
    join_inflight: bool = False
    evictions: list = field(default_factory=list)
    admitted: bool = False
    too_large: bool = False


@dataclass
class ResidentEntry:
    file_id: int
    size: float            # seconds of video
    last_request: float
    expiry: float = math.inf      # TTL policies only
    complete_at: float = -math.inf  # when the download reaches the edge
    origin: object = None  # simulator's download record for join semantics


class EdgeCacheState:
    """Resident set plus occupancy bookkeeping for one router's cache."""

    def __init__(self, capacity: float):
        if capacity <= 0:
            raise ValueError("capacity must be > 0")
        self.capacity = float(capacity)
        self.resident: dict[int, ResidentEntry] = {}
        self.occupancy = 0.0
        self.too_large_count = 0

    def add(self, entry: ResidentEntry) -> None:
        assert entry.file_id not in self.resident
        self.resident[entry.file_id] = entry
        self.occupancy += entry.size

    def remove(self, file_id: int) -> ResidentEntry:
        entry = self.resident.pop(file_id)
        self.occupancy -= entry.size
        return entry

    def assert_capacity(self) -> None:
        assert self.occupancy <= self.capacity + 1e-9, (
            f"edge occupancy {self.occupancy} exceeds capacity {self.capacity}"
        )


class EdgeCachePolicy:
    """Shared admit/evict skeleton; subclasses pick victims and admissions."""

    def __init__(self, capacity: float):
        self.state = EdgeCacheState(capacity)

    def on_request(self, file_id: int, size: float, now: float, rng) -> PolicyDecision:
        raise NotImplementedError

    def _hit(self, entry: ResidentEntry, now: float) -> PolicyDecision:
        entry.last_request = now
        return PolicyDecision(hit=True, join_inflight=now < entry.complete_at)

    def _admit(self, file_id: int, size: float, now: float, victim_fn) -> PolicyDecision:
        state = self.state
        if size > state.capacity:
            state.too_large_count += 1
            return PolicyDecision(hit=False, too_large=True)
        evictions = []
        while state.occupancy + size > state.capacity:
            victim = victim_fn()
            state.remove(victim)
            evictions.append(victim)
        entry = ResidentEntry(file_id, size, last_request=now, complete_at=now)
        state.add(entry)
        state.assert_capacity()
        return PolicyDecision(hit=False, evictions=evictions, admitted=True)


class TTLPolicy(EdgeCachePolicy):
    """Evict a file once unrequested for its window; admission pressure evicts
    the resident closest to expiry.

    ``windows`` maps file id to the window in seconds.  In "exponential"
    mode each request redraws the residency window from Exp(1/window).
    """

    def __init__(self, capacity, windows, mode="fixed"):
        super().__init__(capacity)
        if mode not in ("fixed", "exponential"):
            raise ValueError(f"unknown TTL mode {mode}")
        self.windows = np.asarray(windows, dtype=float)
        self.mode = mode

    def _draw_window(self, file_id, rng) -> float:
        w = float(self.windows[file_id])
        if w <= 0:
            return 0.0
        if self.mode == "exponential":
            return rng.exponential(w)
        return w

    def on_request(self, file_id, size, now, rng) -> PolicyDecision:
        state = self.state
        entry = state.resident.get(file_id)
        if entry is not None and now <= entry.expiry:
            dec = self._hit(entry, now)
            entry.expiry = now + self._draw_window(file_id, rng)
            return dec
        if entry is not None:  # present but expired
            state.remove(file_id)
        # drop everything already expired, then evict by closest expiry
        expired = [f for f, e in state.resident.items() if e.expiry < now]
        for fid in expired:
            state.remove(fid)

        def victim():
            return min(state.resident, key=lambda f: state.resident[f].expiry)

        dec = self._admit(file_id, size, now, victim)
        dec.evictions = expired + dec.evictions
        if dec.admitted:
            state.resident[file_id].expiry = now + self._draw_window(file_id, rng)
        return dec


class LRUPolicy(EdgeCachePolicy):
    """Whole-file LRU: the least recently requested resident goes first."""

    def on_request(self, file_id, size, now, rng) -> PolicyDecision:
        state = self.state
        entry = state.resident.get(file_id)
        if entry is not None:
            return self._hit(entry, now)
        return self._admit(file_id, size, now, self._lru_victim)

    def _lru_victim(self):
        state = self.state
        return min(state.resident, key=lambda f: state.resident[f].last_request)


class QLRUPolicy(LRUPolicy):
    """LRU that admits a missed file only with probability q."""

    def __init__(self, capacity, q):
        super().__init__(capacity)
        if not 0 < q <= 1:
            raise ValueError("q must lie in (0, 1]")
        self.q = float(q)

    def on_request(self, file_id, size, now, rng) -> PolicyDecision:
        entry = self.state.resident.get(file_id)
        if entry is not None:
            return self._hit(entry, now)
        if rng.random() >= self.q:
            return PolicyDecision(hit=False, admitted=False)
        return self._admit(file_id, size, now, self._lru_victim)


class _VirtualLRU:
    """Id-only LRU holding up to ``capacity`` seconds of (virtual) video."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.entries: OrderedDict[int, float] = OrderedDict()  # id -> size
        self.occupancy = 0.0

    def __contains__(self, fid):
        return fid in self.entries

    def remove(self, fid):
        self.occupancy -= self.entries.pop(fid)

    def insert(self, fid, size):
        if size > self.capacity:
            return
        while self.occupancy + size > self.capacity:
            _, evicted = self.entries.popitem(last=False)
            self.occupancy -= evicted
        self.entries[fid] = size
        self.occupancy += size

    def touch(self, fid):
        self.entries.move_to_end(fid)


class KLRUPolicy(LRUPolicy):
    """k-LRU admission ladder: a file climbs k-1 virtual caches and enters the
    real cache on its k-th qualifying traversal.  ``victim`` selects the real
    cache's eviction rule ("lru" or "random")."""

    def __init__(self, capacity, k, victim="lru"):
        super().__init__(capacity)
        if k < 1:
            raise ValueError("k must be >= 1")
        if victim not in ("lru", "random"):
            raise ValueError(f"unknown victim rule {victim}")
        self.k = int(k)
        self.victim = victim
        self.ladder = [_VirtualLRU(capacity) for _ in range(self.k - 1)]

    def on_request(self, file_id, size, now, rng) -> PolicyDecision:
        state = self.state
        entry = state.resident.get(file_id)
        if entry is not None:
            return self._hit(entry, now)
        level = -1
        for v, cache in enumerate(self.ladder):
            if file_id in cache:
                level = v
        target = level + 1
        if level >= 0:
            self.ladder[level].remove(file_id)
        if target >= self.k - 1:
            if self.victim == "random":
                def victim():
                    keys = list(state.resident)
                    return keys[rng.integers(len(keys))]
            else:
                victim = self._lru_victim
            return self._admit(file_id, size, now, victim)
        self.ladder[target].insert(file_id, size)
        return PolicyDecision(hit=False, admitted=False)


class AdaptSizePolicy(LRUPolicy):
    """Size-aware probabilistic admission: admit with probability e^{-size/c}.

    Every ``window`` requests, c is refit on a log grid by maximizing the
    modeled object hit ratio under a characteristic-time approximation of
    LRU-with-admission occupancy.
    """

    def __init__(self, capacity, c=None, window=1000, grid_points=24):
        super().__init__(capacity)
        self.c = float(c) if c is not None else capacity
        self.window = int(window)
        self.grid_points = int(grid_points)
        self.history: deque = deque(maxlen=self.window)  # (time, file, size)
        self.requests_seen = 0

    def on_request(self, file_id, size, now, rng) -> PolicyDecision:
        self.history.append((now, file_id, size))
        self.requests_seen += 1
        if self.requests_seen % self.window == 0:
            self._retune()
        entry = self.state.resident.get(file_id)
        if entry is not None:
            return self._hit(entry, now)
        if rng.random() >= math.exp(-size / self.c):
            return PolicyDecision(hit=False, admitted=False)
        return self._admit(file_id, size, now, self._lru_victim)

    def _retune(self) -> None:
        span = self.history[-1][0] - self.history[0][0]
        if span <= 0:
            return
        counts, sizes = {}, {}
        for _, fid, size in self.history:
            counts[fid] = counts.get(fid, 0) + 1
            sizes[fid] = size
        lam = np.array([counts[f] / span for f in counts])
        size = np.array([sizes[f] for f in counts])
        total_size = float(size.sum())
        grid = np.geomspace(max(size.min(), 1e-6), max(total_size, 1.0),
                            self.grid_points)
        best_c, best_ohr = self.c, -1.0
        for c in grid:
            ohr = _modeled_hit_ratio(lam, size, np.exp(-size / c), self.state.capacity)
            if ohr > best_ohr:
                best_c, best_ohr = float(c), ohr
        self.c = best_c


def _modeled_hit_ratio(lam, size, admit, capacity) -> float:
    """Object hit ratio under the characteristic-time occupancy model.

    A file is resident with probability
        p_i(T) = a_i (1 - e^{-lam_i T}) / (e^{-lam_i T} + a_i (1 - e^{-lam_i T}))
    where T solves sum_i size_i p_i(T) = capacity (or T = inf if everything
    admitted fits).
    """

    def occupancy(T):
        fresh = -np.expm1(-lam * T)
        p = admit * fresh / ((1.0 - fresh) + admit * fresh)
        return p, float((size * p).sum())

    p_inf = np.ones_like(lam)
    if float(size.sum()) <= capacity:
        p = p_inf
    else:
        lo, hi = 1e-9, 1e12
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            _, occ = occupancy(mid)
            if occ > capacity:
                hi = mid
            else:
                lo = mid
        p, _ = occupancy(lo)
    return float((lam * p).sum() / lam.sum())


def make_policy(name, capacity, windows=None, ttl_mode="fixed", q=0.67, k=6,
                adaptsize_window=1000) -> EdgeCachePolicy:
    """Construct a policy by CLI name."""
    name = name.lower()
    if name == "ttl":
        if windows is None:
            raise ValueError("ttl policy needs per-file windows")
        return TTLPolicy(capacity, windows, mode=ttl_mode)
    if name == "lru":
        return LRUPolicy(capacity)
    if name == "qlru":
        return QLRUPolicy(capacity, q)
    if name == "klru":
        return KLRUPolicy(capacity, k, victim="lru")
    if name == "krandom":
        return KLRUPolicy(capacity, k, victim="random")
    if name == "adaptsize":
        return AdaptSizePolicy(capacity, window=adaptsize_window)
    raise ValueError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# distributed-cache placement strategies


def placement_equal(topo) -> np.ndarray:
    """Split each server's capacity evenly across files (whole chunks)."""
    share = np.floor(topo.server_capacity / topo.num_files)
    return np.minimum(topo.segments[None, :].astype(float), share[:, None])


def placement_hottest(topo) -> np.ndarray:
    """Greedily cache whole files by descending total arrival rate; the last
    file may be cached partially."""
    order = np.argsort(-topo.arrival_rate.sum(axis=1), kind="stable")
    out = np.zeros((topo.num_servers, topo.num_files))
    for j in range(topo.num_servers):
        left = float(topo.server_capacity[j])
        for i in order:
            if left <= 0:
                break
            take = min(float(topo.segments[i]), np.floor(left))
            out[j, i] = take
            left -= take
    return out


def placement_from_vars(topo, vars) -> np.ndarray:
    """Round a continuous placement down, then hand leftover capacity to the
    hottest files one chunk at a time."""
    out = np.floor(np.clip(vars.placement, 0.0, topo.segments[None, :]))
    rate = topo.arrival_rate.sum(axis=1)
    order = np.argsort(-rate, kind="stable")
    for j in range(topo.num_servers):
        left = float(topo.server_capacity[j]) - out[j].sum()
        for i in order:
            while left >= 1.0 and out[j, i] < topo.segments[i]:
                out[j, i] += 1.0
                left -= 1.0
    return out
