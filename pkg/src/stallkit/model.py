"""Domain types shared by the analytic, optimization, and simulation paths.

All types are immutable value objects: numpy fields are marked read-only at
construction, so instances can be shared freely across threads.  Units are
seconds and 1/second throughout; config parsing converts anything declared in
milliseconds before these types are built.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import InfeasibleVars, InvalidTopology, NoFeasiblePoint

# Margin keeping strict inequalities (rho < 1, t < alpha) closed for projections.
DELTA_FEAS = 1e-6
_SUM_TOL = 1e-7


def _freeze(obj) -> None:
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            v.setflags(write=False)


def _as_array(x, shape, dtype=float, name=""):
    a = np.asarray(x, dtype=dtype)
    if a.shape == ():
        a = np.full(shape, a[()], dtype=dtype)
    if a.shape != shape:
        raise InvalidTopology(f"{name}: expected shape {shape}, got {a.shape}")
    return a.copy()


@dataclass(frozen=True)
class SystemTopology:
    """Static description of the datacenter / cache-server / edge-router tiers.

    Scalars may be passed for any per-server or per-router field and are
    broadcast.  ``segments`` holds the chunk count of each file; chunk length
    is ``tau`` seconds and playback begins after ``startup_delay`` seconds.
    """

    num_servers: int
    num_edge_routers: int
    num_files: int
    segments: np.ndarray          # (r,) int, chunks per file
    tau: float                    # seconds per chunk
    startup_delay: float          # seconds
    streams_dc: np.ndarray        # (m,) int, datacenter<->server streams (mirrored server<->edge)
    streams_edge: np.ndarray      # (m,R) int, cache-hit streams
    base_rate_dc: np.ndarray      # (m,) 1/s
    shift_dc: np.ndarray          # (m,) s
    base_rate_edge: np.ndarray    # (m,R) 1/s
    shift_edge: np.ndarray        # (m,R) s
    server_capacity: np.ndarray   # (m,) segments
    edge_capacity: np.ndarray     # (R,) seconds of video
    violation_budget: np.ndarray  # (R,) probability
    arrival_rate: np.ndarray      # (r,R) requests/s

    def __post_init__(self):
        m, rr, r = self.num_servers, self.num_edge_routers, self.num_files
        if min(m, rr, r) < 1:
            raise InvalidTopology("counts must be >= 1")
        conv = {
            "segments": ((r,), int),
            "streams_dc": ((m,), int),
            "streams_edge": ((m, rr), int),
            "base_rate_dc": ((m,), float),
            "shift_dc": ((m,), float),
            "base_rate_edge": ((m, rr), float),
            "shift_edge": ((m, rr), float),
            "server_capacity": ((m,), float),
            "edge_capacity": ((rr,), float),
            "violation_budget": ((rr,), float),
            "arrival_rate": ((r, rr), float),
        }
        for name, (shape, dtype) in conv.items():
            object.__setattr__(self, name, _as_array(getattr(self, name), shape, dtype, name))
        if not self.tau > 0:
            raise InvalidTopology("tau must be > 0")
        if self.startup_delay < 0:
            raise InvalidTopology("startup_delay must be >= 0")
        if (self.segments < 1).any():
            raise InvalidTopology("every file needs >= 1 segment")
        if (self.streams_dc < 1).any() or (self.streams_edge < 1).any():
            raise InvalidTopology("stream counts must be >= 1")
        if (self.base_rate_dc <= 0).any() or (self.base_rate_edge <= 0).any():
            raise InvalidTopology("base rates must be > 0")
        if (self.shift_dc < 0).any() or (self.shift_edge < 0).any():
            raise InvalidTopology("shifts must be >= 0")
        if (self.arrival_rate < 0).any():
            raise InvalidTopology("arrival rates must be >= 0")
        if (self.server_capacity < 0).any():
            raise InvalidTopology("server capacities must be >= 0")
        if (self.edge_capacity <= 0).any():
            raise InvalidTopology("edge capacities must be > 0")
        if ((self.violation_budget <= 0) | (self.violation_budget >= 1)).any():
            raise InvalidTopology("violation budgets must lie in (0, 1)")
        _freeze(self)

    @property
    def max_streams_dc(self) -> int:
        return int(self.streams_dc.max())

    @property
    def max_streams_edge(self) -> int:
        return int(self.streams_edge.max())

    @property
    def dc_mask(self) -> np.ndarray:
        """(m, D) bool: which datacenter-stream slots exist per server."""
        d = self.max_streams_dc
        return np.arange(d)[None, :] < self.streams_dc[:, None]

    @property
    def edge_mask(self) -> np.ndarray:
        """(m, E, R) bool: which cache-hit-stream slots exist per (server, router)."""
        e = self.max_streams_edge
        return np.arange(e)[None, :, None] < self.streams_edge[:, None, :]

    @property
    def file_lengths(self) -> np.ndarray:
        """(r,) seconds of video per file."""
        return self.segments * self.tau


@dataclass(frozen=True)
class DecisionVariables:
    """Optimizer state: scheduling probabilities, bandwidth weights, placement,
    TTL windows, and the auxiliary bound exponents.

    Stream axes are padded to the topology-wide maxima; entries outside the
    stream masks must be zero.
    """

    pi: np.ndarray       # (r, m, R) server choice probabilities
    p: np.ndarray        # (r, m, E, R) cache-hit stream probabilities
    q: np.ndarray        # (r, m, D, R) datacenter stream probabilities
    w_d: np.ndarray      # (m, D, R) datacenter->server bandwidth fractions
    w_dbar: np.ndarray   # (m, D, R) server->edge relay fractions
    w_e: np.ndarray      # (m, E, R) server->edge cache-hit fractions
    placement: np.ndarray  # (m, r) cached segments, continuous during optimization
    omega: np.ndarray    # (r, R) TTL windows, seconds
    h: np.ndarray        # (r,) tail-bound exponents, 1/s
    g: np.ndarray        # (r,) mean-bound exponents, 1/s

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, np.asarray(getattr(self, f.name), dtype=float))
        _freeze(self)

    def replace(self, **kw) -> "DecisionVariables":
        return replace(self, **{k: np.array(v, dtype=float) for k, v in kw.items()})

    def violations(self, topo: SystemTopology, tol: float = _SUM_TOL) -> list:
        """Names of violated invariants, empty when feasible."""
        out = []
        dc, em = topo.dc_mask, topo.edge_mask
        if (self.pi < -tol).any() or (self.p < -tol).any() or (self.q < -tol).any():
            out.append("scheduling probabilities must be >= 0")
        if np.abs(self.pi.sum(axis=1) - 1.0).max() > tol:
            out.append("sum_j pi[i,j,l] must equal 1")
        if np.abs((self.p * em[None]).sum(axis=2) - 1.0).max() > tol:
            out.append("sum_nu p[i,j,nu,l] must equal 1")
        if np.abs((self.q * dc[None, :, :, None]).sum(axis=2) - 1.0).max() > tol:
            out.append("sum_beta q[i,j,beta,l] must equal 1")
        for name, arr in (("p", self.p), ("q", self.q)):
            mask = em[None] if name == "p" else dc[None, :, :, None]
            if (np.abs(arr) * ~mask).max() > tol:
                out.append(f"{name} must be 0 on padded stream slots")
        if (self.w_d < -tol).any() or (self.w_dbar < -tol).any() or (self.w_e < -tol).any():
            out.append("bandwidth weights must be >= 0")
        if ((self.w_d * dc[:, :, None]).sum(axis=1) - 1.0).max() > tol:
            out.append("sum_beta w_d[j,beta,l] must be <= 1")
        joint = (self.w_dbar * dc[:, :, None]).sum(axis=1) + (self.w_e * em).sum(axis=1)
        if (joint - 1.0).max() > tol:
            out.append("sum_beta w_dbar + sum_nu w_e must be <= 1 per (j,l)")
        if (self.placement < -tol).any():
            out.append("placement must be >= 0")
        if (self.placement - topo.segments[None, :] > tol).any():
            out.append("placement L[j,i] must be <= L_i")
        if (self.placement.sum(axis=1) - topo.server_capacity > tol).any():
            out.append("sum_i L[j,i] must be <= server capacity C_j")
        if (self.omega < -tol).any():
            out.append("omega must be >= 0")
        if (self.h <= 0).any():
            out.append("h must be > 0")
        if (self.g <= 0).any():
            out.append("g must be > 0")
        return out

    def check(self, topo: SystemTopology) -> None:
        bad = self.violations(topo)
        if bad:
            raise InfeasibleVars("; ".join(bad))


@dataclass(frozen=True)
class StreamParams:
    """Per-stream derived quantities: split rates, thinned aggregate arrival
    rates, and load intensities.  Padded slots carry rate 0 and load 0."""

    alpha_d: np.ndarray     # (m, D, R) 1/s
    alpha_dbar: np.ndarray  # (m, D, R)
    alpha_e: np.ndarray     # (m, E, R)
    lam_d: np.ndarray       # (m, D, R) requests/s (relay rate equals this)
    lam_e: np.ndarray       # (m, E, R)
    rho_d: np.ndarray       # (m, D, R)
    rho_dbar: np.ndarray    # (m, D, R)
    rho_e: np.ndarray       # (m, E, R)

    def __post_init__(self):
        _freeze(self)

    @property
    def lam_dbar(self) -> np.ndarray:
        return self.lam_d

    def max_load(self) -> float:
        return max(self.rho_d.max(), self.rho_dbar.max(), self.rho_e.max())

    def stable(self, margin: float = 0.0) -> bool:
        return self.max_load() < 1.0 - margin


def thinned_rate(topo: SystemTopology, omega: np.ndarray) -> np.ndarray:
    """(r, R) per-file forwarded rate lambda * exp(-lambda * omega)."""
    lam = topo.arrival_rate
    return lam * np.exp(-lam * omega)


def derive_stream_params(topo: SystemTopology, vars: DecisionVariables,
                         validate: bool = True) -> StreamParams:
    """Split rates, thinned aggregate rates, and loads for every stream.

    Split rate = weight * base rate.  Aggregate rates carry the TTL thinning
    factor exp(-lambda*omega) (only requests missing the edge cache reach the
    streams).  Load = aggregate rate * mean batch service time.

    ``validate=False`` skips the type-invariant check so finite-difference
    probes may evaluate the smooth off-simplex extension of the formulas.
    """
    if validate:
        vars.check(topo)
    dc = topo.dc_mask[:, :, None]     # (m, D, 1)
    em = topo.edge_mask               # (m, E, R)

    alpha_d = vars.w_d * topo.base_rate_dc[:, None, None]
    alpha_dbar = vars.w_dbar * topo.base_rate_edge[:, None, :]
    alpha_e = vars.w_e * topo.base_rate_edge[:, None, :]

    thin = thinned_rate(topo, vars.omega)                    # (r, R)
    pi_thin = thin[:, None, :] * vars.pi                     # (r, m, R)
    lam_e = np.einsum("iml,imel->mel", pi_thin, vars.p) * em
    lam_d = np.einsum("iml,imbl->mbl", pi_thin, vars.q) * dc

    cached = vars.placement.T                                # (r, m)
    rest = topo.segments[:, None] - cached                   # (r, m)
    # chunk-weighted forwarded rates per stream
    we_e = np.einsum("iml,imel,im->mel", pi_thin, vars.p, cached) * em
    we_d = np.einsum("iml,imbl,im->mbl", pi_thin, vars.q, rest) * dc

    def load(weighted, alpha, shift):
        # a stream carrying chunk work with zero bandwidth is infinitely loaded
        mean = np.where(alpha > 0, shift + 1.0 / np.where(alpha > 0, alpha, 1.0), np.inf)
        with np.errstate(invalid="ignore"):
            return np.where(weighted > 0, weighted * mean, 0.0)

    rho_e = load(we_e, alpha_e, topo.shift_edge[:, None, :])
    rho_dbar = load(we_d, alpha_dbar, topo.shift_edge[:, None, :])
    rho_d = load(we_d, alpha_d, topo.shift_dc[:, None, None])
    return StreamParams(alpha_d, alpha_dbar, alpha_e, lam_d, lam_e, rho_d, rho_dbar, rho_e)


# ---------------------------------------------------------------------------
# Euclidean projections


def project_simplex(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = total} by sort-and-threshold.

    Rows already on the simplex (to within a few ulps) pass through unchanged
    so the projection is bitwise idempotent.
    """
    if total <= 0:
        return np.zeros_like(v)
    n = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - total
    idx = np.arange(1, n + 1)
    cond = u - css / idx > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho + 1)[..., None]
    proj = np.maximum(v - theta, 0.0)
    ok = (v.min(axis=-1) >= 0) & (np.abs(v.sum(axis=-1) - total) <= 1e-12 * max(1.0, total))
    return np.where(ok[..., None], v, proj)


def project_capped_sum(v: np.ndarray, cap: float, lower: np.ndarray | None = None) -> np.ndarray:
    """Euclidean projection onto {x >= lower, sum x <= cap}."""
    lb = np.zeros_like(v) if lower is None else lower
    slack = cap - lb.sum()
    if slack < -1e-12:
        raise NoFeasiblePoint(f"lower bounds sum to {lb.sum():.6g} > cap {cap:.6g}")
    u = np.maximum(v - lb, 0.0)
    if u.sum() <= max(slack, 0.0):
        return lb + u
    return lb + project_simplex(v - lb, max(slack, 0.0))


def project_box_capped_sum(v: np.ndarray, upper: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection onto {0 <= x <= upper, sum x <= cap}."""
    x = np.clip(v, 0.0, upper)
    if x.sum() <= cap:
        return x
    lo, hi = 0.0, float(np.max(v))
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0.0, upper).sum() > cap:
            lo = mid
        else:
            hi = mid
    return np.clip(v - hi, 0.0, upper)


def exponent_sup(topo: SystemTopology, vars: DecisionVariables) -> float:
    """Supremum of valid bound exponents: every MGF below its pole and every
    waiting-time transform inside its stability region.

    Streams with zero bandwidth contribute no pole constraint; if such a
    stream carries chunk work its load is infinite and no exponent exists.
    """
    sp = derive_stream_params(topo, vars)
    if not sp.stable():
        raise NoFeasiblePoint(f"max stream load {sp.max_load():.4g} >= 1")
    thin = thinned_rate(topo, vars.omega)
    pi_thin = thin[:, None, :] * vars.pi
    sup = np.inf
    streams = (
        (sp.alpha_e, topo.shift_edge[:, None, :], sp.lam_e,
         np.einsum("iml,imel->imel", pi_thin, vars.p), vars.placement.T),
        (sp.alpha_dbar, topo.shift_edge[:, None, :], sp.lam_d,
         np.einsum("iml,imbl->imbl", pi_thin, vars.q),
         topo.segments[:, None] - vars.placement.T),
        (sp.alpha_d, topo.shift_dc[:, None, None] * np.ones_like(sp.alpha_d), sp.lam_d,
         np.einsum("iml,imbl->imbl", pi_thin, vars.q),
         topo.segments[:, None] - vars.placement.T),
    )
    rho_by_class = (sp.rho_e, sp.rho_dbar, sp.rho_d)
    for (alpha, shift, lam, file_rates, lengths), rho in zip(streams, rho_by_class):
        live = alpha > 0
        if live.any():
            sup = min(sup, float(alpha[live].min()))
        for idx in np.argwhere(rho > 0):
            j, s, l = (int(v) for v in idx)
            a, sh = float(alpha[j, s, l]), float(np.broadcast_to(shift, alpha.shape)[j, s, l])
            rates = file_rates[:, j, s, l]
            lens = lengths[:, j]
            sup = min(sup, _stability_root(a, sh, rates, lens))
    if not np.isfinite(sup) or sup <= 0:
        raise NoFeasiblePoint("no positive exponent admits all MGFs")
    return sup


def _stability_root(alpha: float, shift: float, rates: np.ndarray, lens: np.ndarray) -> float:
    """Positive root of t - sum_i rate_i (M(t)^len_i - 1) on (0, alpha)."""

    def slack(t):
        m = alpha * np.exp(shift * t) / (alpha - t)
        with np.errstate(over="ignore", invalid="ignore"):
            total = np.sum(rates * (m**lens - 1.0))
        return t - float(np.where(np.isnan(total), np.inf, total))

    hi = alpha * (1.0 - 1e-12)
    if slack(hi) > 0:
        return alpha
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if slack(mid) > 0:
            lo = mid
        else:
            hi = mid
    return lo


def project_feasible(vars: DecisionVariables, topo: SystemTopology,
                     delta_feas: float = DELTA_FEAS) -> DecisionVariables:
    """Euclidean projection of the decision variables onto the feasible set.

    Scheduling rows go to their simplexes, bandwidth rows to capped simplexes,
    placement to its box-plus-budget set, omega to the nonnegative orthant,
    and the exponents h, g into (0, sup) with a strict margin.  Idempotent.
    """
    r, m, rr = topo.num_files, topo.num_servers, topo.num_edge_routers
    dc, em = topo.dc_mask, topo.edge_mask

    pi = np.transpose(project_simplex(np.transpose(vars.pi, (0, 2, 1))), (0, 2, 1))

    p = np.zeros_like(vars.p)
    q = np.zeros_like(vars.q)
    for j in range(m):
        for l in range(rr):
            ne = int(topo.streams_edge[j, l])
            p[:, j, :ne, l] = project_simplex(vars.p[:, j, :ne, l])
            nd = int(topo.streams_dc[j])
            q[:, j, :nd, l] = project_simplex(vars.q[:, j, :nd, l])

    w_d = np.zeros_like(vars.w_d)
    w_dbar = np.zeros_like(vars.w_dbar)
    w_e = np.zeros_like(vars.w_e)
    for j in range(m):
        for l in range(rr):
            nd, ne = int(topo.streams_dc[j]), int(topo.streams_edge[j, l])
            w_d[j, :nd, l] = project_capped_sum(vars.w_d[j, :nd, l], 1.0)
            row = np.concatenate([vars.w_dbar[j, :nd, l], vars.w_e[j, :ne, l]])
            proj = project_capped_sum(row, 1.0)
            w_dbar[j, :nd, l] = proj[:nd]
            w_e[j, :ne, l] = proj[nd:]

    placement = np.stack([
        project_box_capped_sum(vars.placement[j], topo.segments.astype(float),
                               float(topo.server_capacity[j]))
        for j in range(m)
    ])

    omega = np.maximum(vars.omega, 0.0)

    base = vars.replace(pi=pi, p=p, q=q, w_d=w_d, w_dbar=w_dbar, w_e=w_e,
                        placement=placement, omega=omega,
                        h=np.full(r, 1e-3), g=np.full(r, 1e-3))
    sup = exponent_sup(topo, base)
    hi = sup * (1.0 - delta_feas)
    lo = min(delta_feas, 0.5 * hi)
    h = np.clip(vars.h, lo, hi)
    g = np.clip(vars.g, lo, hi)
    return base.replace(h=h, g=g)


def uniform_init(topo: SystemTopology, omega_default: float = 0.0,
                 exponent_default: float = 0.01) -> DecisionVariables:
    """Uniform scheduling and bandwidth split, proportional cache fill.

    Cache-hit and relay weights share the server->edge budget equally, so the
    e-family and dbar-family each receive half before projection.  The result
    is passed through project_feasible.
    """
    r, m, rr = topo.num_files, topo.num_servers, topo.num_edge_routers
    dmax, emax = topo.max_streams_dc, topo.max_streams_edge
    dc, em = topo.dc_mask, topo.edge_mask

    pi = np.full((r, m, rr), 1.0 / m)
    p = np.where(em[None], 1.0 / np.maximum(topo.streams_edge[None, :, None, :], 1), 0.0)
    p = np.broadcast_to(p, (r, m, emax, rr)).copy()
    q = np.where(dc[None, :, :, None], 1.0 / topo.streams_dc[None, :, None, None], 0.0)
    q = np.broadcast_to(q, (r, m, dmax, rr)).copy()

    w_d = np.where(dc[:, :, None], 1.0 / topo.streams_dc[:, None, None], 0.0)
    w_d = np.broadcast_to(w_d, (m, dmax, rr)).copy()
    w_dbar = 0.5 * w_d
    w_e = np.where(em, 0.5 / np.maximum(topo.streams_edge[:, None, :], 1), 0.0)

    total_segments = float(topo.segments.sum())
    fill = np.minimum(1.0, topo.server_capacity / max(total_segments, 1.0))
    placement = fill[:, None] * topo.segments[None, :].astype(float)

    vars = DecisionVariables(
        pi=pi, p=p, q=q, w_d=w_d, w_dbar=w_dbar, w_e=w_e,
        placement=placement,
        omega=np.full((r, rr), float(omega_default)),
        h=np.full(r, float(exponent_default)),
        g=np.full(r, float(exponent_default)),
    )
    return project_feasible(vars, topo)
