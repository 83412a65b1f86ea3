"""MGF engine for shifted-exponential parallel-stream queues.

Every parallel stream is an M/G/1 queue whose per-request service time is a
batch of shifted-exponential chunk services (one batch length per file, mixed
by the file's share of the stream's traffic).  This module provides the
chunk-service MGF, the batch-service MGF, the Pollaczek-Khinchine waiting-time
MGF, the download-time MGF on the cache-hit path, and the union-bound MGF for
chunks that traverse the tandem datacenter path.

Two-sided conventions that recur downstream:

* Waiting time and service are independent, so download-time MGFs are the
  waiting MGF times a product of chunk-service MGFs.  The waiting MGF carries
  no extra batch factor.
* Geometric and arithmetico-geometric sums switch to term-by-term evaluation
  when the ratio is within ``RATIO_SWITCH`` of 1, to avoid 0/0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import MgfUndefined, Unstable

# |ratio - 1| below which closed-form geometric sums fall back to term sums.
RATIO_SWITCH = 1e-8


@dataclass(frozen=True)
class ShiftedExp:
    """Shifted-exponential chunk service: shift + Exp(rate)."""

    rate: float
    shift: float = 0.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be > 0, got {self.rate}")
        if self.shift < 0:
            raise ValueError(f"shift must be >= 0, got {self.shift}")

    @property
    def mean(self) -> float:
        return self.shift + 1.0 / self.rate

    @property
    def second_moment(self) -> float:
        # E[(shift + E)^2] with E ~ Exp(rate)
        return self.shift**2 + 2.0 * self.shift / self.rate + 2.0 / self.rate**2


@dataclass(frozen=True)
class StreamQueue:
    """One parallel stream: Poisson batch arrivals into a FIFO M/G/1 queue.

    ``batch_mix`` lists ``(weight, batch_len)`` pairs: with probability
    ``weight`` an arriving request brings ``batch_len`` consecutive chunk
    services.  Weights must sum to 1.
    """

    service: ShiftedExp
    agg_rate: float
    batch_mix: tuple

    def __post_init__(self):
        if self.agg_rate < 0:
            raise ValueError("agg_rate must be >= 0")
        mix = tuple((float(w), float(n)) for (w, n) in self.batch_mix)
        object.__setattr__(self, "batch_mix", mix)
        if mix:
            total = math.fsum(w for w, _ in mix)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"batch_mix weights sum to {total}, expected 1")
            if any(w < 0 or n < 0 for w, n in mix):
                raise ValueError("batch_mix entries must be non-negative")
        elif self.agg_rate > 0:
            raise ValueError("non-empty batch_mix required when agg_rate > 0")

    @property
    def mean_batch_len(self) -> float:
        return math.fsum(w * n for w, n in self.batch_mix)


def mgf_shifted_exp(s: ShiftedExp, t: float) -> float:
    """E[e^{tS}] = rate * e^{shift*t} / (rate - t), defined for t < rate."""
    if t >= s.rate:
        raise MgfUndefined(f"t={t} >= rate={s.rate}")
    return s.rate * math.exp(s.shift * t) / (s.rate - t)


def mgf_shifted_exp_m1(s: ShiftedExp, t: float) -> float:
    """mgf_shifted_exp(s, t) - 1 without cancellation at small t.

    M - 1 = (rate * (e^{shift t} - 1) + t) / (rate - t).
    """
    if t >= s.rate:
        raise MgfUndefined(f"t={t} >= rate={s.rate}")
    return (s.rate * math.expm1(s.shift * t) + t) / (s.rate - t)


def batch_service_mgf(q: StreamQueue, t: float) -> float:
    """MGF of one request's total service time on the stream.

    Mixture over files of the chunk MGF raised to the batch length.  An empty
    stream (no traffic) serves nothing and has MGF 1.
    """
    return 1.0 + batch_service_mgf_m1(q, t)


def batch_service_mgf_m1(q: StreamQueue, t: float) -> float:
    """batch_service_mgf(q, t) - 1, accurate near t = 0.

    M^n - 1 is evaluated as expm1(n * log1p(M - 1)); the Pollaczek-Khinchine
    denominator t - agg_rate*(B(t)-1) needs this precision at small t.
    """
    if not q.batch_mix:
        return 0.0
    log_m = math.log1p(mgf_shifted_exp_m1(q.service, t))
    return math.fsum(w * math.expm1(n * log_m) for w, n in q.batch_mix)


def load_intensity(q: StreamQueue) -> float:
    """rho = agg_rate * E[batch service] = agg_rate * B'(0)."""
    return q.agg_rate * q.mean_batch_len * q.service.mean


def pk_waiting_mgf(q: StreamQueue, t: float) -> float:
    """Pollaczek-Khinchine waiting-time MGF: (1-rho) t / (t - L(B(t)-1)).

    Requires rho < 1, t inside the chunk-MGF domain, and the denominator
    positive (the stability region of the transform).
    """
    rho = load_intensity(q)
    if rho >= 1.0:
        raise Unstable(f"load intensity {rho} >= 1")
    if t == 0.0:
        return 1.0
    b_m1 = batch_service_mgf_m1(q, t)  # raises MgfUndefined past the pole
    denom = t - q.agg_rate * b_m1
    # the transform exists left of the positive root; for t < 0 the
    # denominator is provably negative and the ratio stays positive
    if t > 0.0 and denom <= 0.0:
        raise MgfUndefined(f"t - agg_rate*(B(t)-1) = {denom} <= 0 at t={t}")
    return (1.0 - rho) * t / denom


def download_mgf_cached(q: StreamQueue, g: int, t: float) -> float:
    """MGF of the download time of chunk ``g`` served entirely by one stream.

    The request waits once, then receives chunks 1..g back to back:
    W + sum of g chunk services.
    """
    if g < 1:
        raise ValueError(f"chunk index must be >= 1, got {g}")
    return pk_waiting_mgf(q, t) * mgf_shifted_exp(q.service, t) ** g


def tandem_chunk_mgf_bound(
    dc: StreamQueue, dbar: StreamQueue, l_cached: int, v: int, t: float
) -> float:
    """Union-bound MGF of the download time of chunk ``v`` on the tandem path.

    Chunks ``l_cached+1 .. v`` cross the datacenter stream ``dc`` and then the
    relay stream ``dbar``; the download time is a max-recursion
    D(g) = max(D(g-1), E(g)) + Y(g).  Unrolling gives
    D(v) = max_y U(v, y), and replacing the max by a sum yields the bound

        PK_dbar * M_dbar^(v-l)  +  sum_{w=l+1..v} PK_dc * M_dc^(w-l) * M_dbar^(v-w+1)

    where PK is the per-queue waiting MGF and M the chunk-service MGF.  The
    first term is the relay-queue backlog path; the w-th term is the path on
    which chunk w's datacenter service is the bottleneck.
    """
    if v < l_cached + 1:
        raise ValueError(f"v={v} must be >= l_cached+1={l_cached + 1}")
    pk_dbar = pk_waiting_mgf(dbar, t)
    pk_dc = pk_waiting_mgf(dc, t)
    m_dc = mgf_shifted_exp(dc.service, t)
    m_dbar = mgf_shifted_exp(dbar.service, t)
    head = pk_dbar * m_dbar ** (v - l_cached)
    tail = math.fsum(
        pk_dc * m_dc ** (w - l_cached) * m_dbar ** (v - w + 1)
        for w in range(l_cached + 1, v + 1)
    )
    return head + tail


def geometric_sum(x: float, k: float) -> float:
    """sum_{v=1..k} x^v for real k >= 0, robust near x = 1.

    Evaluated as x * expm1(k log x) / (x - 1), which keeps full precision
    except at x = 1 itself, where a Taylor expansion takes over.
    """
    if k <= 0:
        return 0.0
    d = x - 1.0
    if abs(d) < RATIO_SWITCH:
        return k * (1.0 + 0.5 * (k + 1.0) * d * (1.0 + (k - 1.0) * d / 3.0))
    return x * math.expm1(k * math.log(x)) / d


def geometric_sum_deriv(x: float, k: float) -> float:
    """d/dx of geometric_sum: sum_{v=1..k} v x^(v-1), robust near x = 1."""
    if k <= 0:
        return 0.0
    d = x - 1.0
    if abs(d) < 1e-6:
        s2 = k * (k + 1.0)
        return 0.5 * s2 + d * s2 * (k - 1.0) / 3.0 + d * d * s2 * (k - 1.0) * (k - 2.0) / 8.0
    # ((k+1) x^k - 1 - G(x)) / (x - 1), with x^k - 1 via expm1 for accuracy
    xk_m1 = math.expm1(k * math.log(x))
    numer = (k + 1.0) * xk_m1 + k - geometric_sum(x, k)
    return numer / d


def arith_geometric_sum(x: float, k: float) -> float:
    """sum_{a=1..k} a * x^a for real k >= 0, robust near x = 1."""
    return x * geometric_sum_deriv(x, k)


def staircase_product_sum(x: float, y: float, k: float) -> float:
    """sum_{a=1..k} sum_{b=1..a} x^b y^(a-b+1), robust near x = y and 1.

    This is the double sum behind the tandem-path tail term: a indexes the
    chunk position past the cached prefix, b the datacenter bottleneck chunk.
    It equals x y G[x, y] with G[.,.] the divided difference of the geometric
    sum; near x = y the midpoint derivative replaces the divided difference.
    """
    if k <= 0:
        return 0.0
    scale = max(abs(x), abs(y), 1e-300)
    if abs(x - y) < 1e-7 * scale:
        return x * y * geometric_sum_deriv(0.5 * (x + y), k)
    return x * y * (geometric_sum(x, k) - geometric_sum(y, k)) / (x - y)
