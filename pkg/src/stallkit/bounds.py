"""Closed-form upper bounds on stall-duration metrics.

For a request of file i at router l with tail exponent t, the bound has the
shape

    sum_j pi_ijl * [ cbar + atilde e^{-t sigma} + abar * (chunk-MGF sums) ]

where (cbar, atilde, abar) come from the edge-cache window recursion and the
chunk sums run the per-chunk download MGFs through the playback union bound.
The cache-hit prefix contributes a geometric sum of the discounted chunk MGF
Mtilde = M(t) e^{-t tau}; the tandem datacenter suffix contributes a second
geometric sum plus a staircase double sum (one term per possible datacenter
bottleneck chunk).

Everything here is written against an array module ``xp`` so the same code
runs under numpy (reporting, finite differences, validation) and jax.numpy
(analytic gradients inside the optimizer).  A slow reference evaluator built
directly on the scalar queueing primitives backs the closed forms in tests.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.special

from . import queueing as qg
from .errors import ConstraintViolated
from .model import DecisionVariables, SystemTopology, derive_stream_params, thinned_rate

_GS_SWITCH = 1e-8
_SC_SWITCH = 1e-7


def _erfc(xp, x):
    if xp is np:
        return scipy.special.erfc(x)
    import jax.scipy.special

    return jax.scipy.special.erfc(x)


# ---------------------------------------------------------------------------
# xp-agnostic stable sums (mirror the scalar versions in queueing)


def _geom_sum(xp, x, k):
    """sum_{v=1..k} x^v elementwise, smooth in real k, safe near x = 1.

    The closed form x expm1(k log x)/(x-1) passes smoothly through k = 0
    (value 0), so gradients at a zero-placement boundary equal the one-sided
    derivative instead of a clipped branch.
    """
    d = x - 1.0
    small = xp.abs(d) < _GS_SWITCH
    d_safe = xp.where(small, 1.0, d)
    x_safe = xp.where(x > 0, x, 1.0)
    closed = x * xp.expm1(k * xp.log(x_safe)) / d_safe
    taylor = k * (1.0 + 0.5 * (k + 1.0) * d * (1.0 + (k - 1.0) * d / 3.0))
    return xp.where(small, taylor, closed)


def _geom_sum_deriv(xp, x, k):
    d = x - 1.0
    small = xp.abs(d) < 1e-6
    d_safe = xp.where(small, 1.0, d)
    x_safe = xp.where(x > 0, x, 1.0)
    xk_m1 = xp.expm1(k * xp.log(x_safe))
    closed = ((k + 1.0) * xk_m1 + k - _geom_sum(xp, x, k)) / d_safe
    s2 = k * (k + 1.0)
    taylor = 0.5 * s2 + d * s2 * (k - 1.0) / 3.0 + d * d * s2 * (k - 1.0) * (k - 2.0) / 8.0
    return xp.where(small, taylor, closed)


def _staircase(xp, x, y, k):
    """sum_{a=1..k} sum_{b=1..a} x^b y^(a-b+1) via the divided difference of
    the geometric sum; midpoint derivative when x and y nearly coincide.
    Smooth through k = 0 like _geom_sum."""
    scale = xp.maximum(xp.maximum(xp.abs(x), xp.abs(y)), 1e-300)
    diff = x - y
    small = xp.abs(diff) < _SC_SWITCH * scale
    diff_safe = xp.where(small, 1.0, diff)
    split = x * y * (_geom_sum(xp, x, k) - _geom_sum(xp, y, k)) / diff_safe
    merged = x * y * _geom_sum_deriv(xp, 0.5 * (x + y), k)
    return xp.where(small, merged, split)


# ---------------------------------------------------------------------------
# shared machinery


def topology_constants(topo: SystemTopology) -> dict:
    """Static arrays consumed by the bound core (identical under numpy/jax)."""
    return {
        "segments": topo.segments.astype(float),
        "tau": float(topo.tau),
        "startup_delay": float(topo.startup_delay),
        "lam": topo.arrival_rate,
        "rate_dc": topo.base_rate_dc,
        "shift_dc": topo.shift_dc,
        "rate_edge": topo.base_rate_edge,
        "shift_edge": topo.shift_edge,
        "dc_mask": topo.dc_mask.astype(float),
        "edge_mask": topo.edge_mask.astype(float),
        "edge_capacity": topo.edge_capacity,
    }


def _chunk_mgf(xp, alpha, shift, t, live):
    """alpha e^{shift t} / (alpha - t) with dead streams pinned to 1."""
    a_safe = xp.where(live, alpha, 1.0)
    denom = a_safe - t
    ok = live & (denom > 0)
    denom_safe = xp.where(ok, denom, 1.0)
    m = a_safe * xp.exp(shift * t) / denom_safe
    return xp.where(ok, m, 1.0), ok

def _log_chunk_mgf(xp, alpha, shift, t, ok):
    a_safe = xp.where(ok, alpha, 2.0)
    t_safe = xp.where(ok, t, 1.0)
    return xp.where(ok, shift * t_safe - xp.log1p(-t_safe / a_safe), 0.0)


def _core(xp, tc: dict, va: dict, t, ds, seg, cached):
    """Per-(file, server, router) chunk-sum term and edge-window constants.

    ``t``     (r,) exponent per file
    ``ds``    startup delay folded into the bound
    ``seg``   (r,) playback horizon in chunks (full length, or 1 for TTFC)
    ``cached`` (m, r) cached-chunk counts used for the tagged request

    Returns (inner, ctilde, atilde, pole_ok, den_ok) where ``inner`` is the
    p/q-mixed chunk sum per (i, j, l) and the *_ok arrays flag MGF existence.
    Batch mixtures always reflect the full workload; only the tagged request's
    horizon is truncated by ``seg``/``cached``.
    """
    tau = tc["tau"]
    lam = tc["lam"]                       # (r, R)
    full_seg = tc["segments"]             # (r,)
    place = va["placement"]               # (m, r) workload-side placement
    omega = va["omega"]                   # (r, R)

    t4 = t[:, None, None, None]

    # split rates (m, D|E, R)
    a_d = va["w_d"] * tc["rate_dc"][:, None, None]
    a_db = va["w_dbar"] * tc["rate_edge"][:, None, :]
    a_e = va["w_e"] * tc["rate_edge"][:, None, :]
    live_d = (a_d > 0) & (tc["dc_mask"][:, :, None] > 0)
    live_db = (a_db > 0) & (tc["dc_mask"][:, :, None] > 0)
    live_e = (a_e > 0) & (tc["edge_mask"] > 0)

    sh_d = xp.broadcast_to(tc["shift_dc"][:, None, None], a_d.shape)
    sh_db = xp.broadcast_to(tc["shift_edge"][:, None, :], a_db.shape)
    sh_e = xp.broadcast_to(tc["shift_edge"][:, None, :], a_e.shape)

    # chunk MGFs per (i, stream)
    m_d, ok_d = _chunk_mgf(xp, a_d[None], sh_d[None], t4, live_d[None])
    m_db, ok_db = _chunk_mgf(xp, a_db[None], sh_db[None], t4, live_db[None])
    m_e, ok_e = _chunk_mgf(xp, a_e[None], sh_e[None], t4, live_e[None])

    # thinned per-file stream rates
    thin = lam * xp.exp(-lam * omega)                     # (r, R)
    coef_e = thin[:, None, None, :] * va["pi"][:, :, None, :] * va["p"]   # (f,m,E,R)
    coef_d = thin[:, None, None, :] * va["pi"][:, :, None, :] * va["q"]   # (f,m,D,R)

    # loads (workload side, full placement)
    len_e = place.T                                       # (f, m) cached chunks
    len_d = full_seg[:, None] - place.T                   # (f, m) datacenter chunks
    mean_e = xp.where(live_e, sh_e + 1.0 / xp.where(live_e, a_e, 1.0), 0.0)
    mean_db = xp.where(live_db, sh_db + 1.0 / xp.where(live_db, a_db, 1.0), 0.0)
    mean_d = xp.where(live_d, sh_d + 1.0 / xp.where(live_d, a_d, 1.0), 0.0)
    rho_e = xp.einsum("fmsl,fm->msl", coef_e, len_e) * mean_e
    rho_db = xp.einsum("fmsl,fm->msl", coef_d, len_d) * mean_db
    rho_d = xp.einsum("fmsl,fm->msl", coef_d, len_d) * mean_d

    # waiting-transform denominators t - sum_f coef_f (M^{len_f} - 1)
    def pk_parts(log_m, ok, coef, lens):
        powm1 = xp.expm1(lens[None, :, :, None, None] * log_m[:, None])  # (i,f,m,s,l)
        den = t4 - xp.einsum("fmsl,ifmsl->imsl", coef, powm1)
        return den

    den_e = pk_parts(_log_chunk_mgf(xp, a_e[None], sh_e[None], t4, ok_e), ok_e, coef_e, len_e)
    den_db = pk_parts(_log_chunk_mgf(xp, a_db[None], sh_db[None], t4, ok_db), ok_db, coef_d, len_d)
    den_d = pk_parts(_log_chunk_mgf(xp, a_d[None], sh_d[None], t4, ok_d), ok_d, coef_d, len_d)

    def pk(rho, den):
        # infeasible transforms get a huge finite sentinel (inf * 0 would
        # turn zero-length chunk sums into NaN); the ok-flags still name them
        den_safe = xp.where(den > 0, den, 1.0)
        return xp.where(den > 0, (1.0 - rho[None]) * t4 / den_safe, 1e300)

    pk_e, pk_db, pk_d = pk(rho_e, den_e), pk(rho_db, den_db), pk(rho_d, den_d)

    # discounted chunk MGFs
    disc = xp.exp(-t4 * tau)
    mt_e, mt_db, mt_d = m_e * disc, m_db * disc, m_d * disc

    cached_i = cached.T[:, :, None]                       # (i, m, 1) tagged request
    k_i = (seg[:, None] - cached.T)[:, :, None]           # (i, m, 1) tandem chunks

    # delta_e: cache-hit prefix, per (i, m, E, R) then mixed over nu by p
    d_e = pk_e * _geom_sum(xp, mt_e, cached_i[..., None] * xp.ones_like(mt_e))
    # delta_dbar: relay backlog path
    e_lc = xp.exp(-t4 * tau * cached_i[..., None])
    d_db = pk_db * e_lc * _geom_sum(xp, mt_db, k_i[..., None] * xp.ones_like(mt_db))
    # delta_dd: datacenter bottleneck staircase
    e_lc1 = xp.exp(-t4 * tau * (cached_i[..., None] - 1.0))
    d_dd = pk_d * e_lc1 * _staircase(xp, mt_d, mt_db, k_i[..., None] * xp.ones_like(mt_d))

    inner = xp.einsum("imsl,imsl->iml", va["p"], d_e) + xp.einsum(
        "imsl,imsl->iml", va["q"], d_db + d_dd
    )

    # edge-window recursion constants per (i, l)
    lam_t = lam + t[:, None]
    b = 1.0 - lam / lam_t * (-xp.expm1(-lam_t * omega))
    ctilde = -xp.expm1(-lam * omega) / b
    atilde = xp.exp(-lam * omega) / b

    # existence diagnostics (workload side: streams with load must admit t)
    def stream_ok(ok, den, rho, coef, lens):
        work = xp.einsum("fmsl,fm->msl", coef, lens) > 0
        fine = (~work)[None] | (ok & (den > 0))
        return fine.reshape(fine.shape[0], -1).all(axis=1)

    ok_all = (
        stream_ok(ok_e, den_e, rho_e, coef_e, len_e)
        & stream_ok(ok_db, den_db, rho_db, coef_d, len_d)
        & stream_ok(ok_d, den_d, rho_d, coef_d, len_d)
    )
    return inner, ctilde, atilde, ok_all


def _sdtp_core(xp, tc, va, sigmas):
    """Raw tail bound per (file, router, sigma)."""
    t = va["h"]
    seg = tc["segments"]
    inner, ctilde, atilde, ok = _core(xp, tc, va, t, tc["startup_delay"], seg, va["placement"])
    mixed = xp.einsum("iml,iml->il", va["pi"], inner)
    ds_tau = tc["startup_delay"] - tc["tau"]
    body = ctilde + atilde + atilde * xp.exp(-t[:, None] * ds_tau) * mixed
    sig = xp.asarray(sigmas, dtype=float)
    raw = xp.exp(-t[:, None, None] * sig[None, None, :]) * body[:, :, None]
    return raw, ok


def _mean_core(xp, tc, va, t, ds, seg, cached):
    """(1/t) log sum_j pi (1 + M_D) per (file, router)."""
    inner, ctilde, atilde, ok = _core(xp, tc, va, t, ds, seg, cached)
    m_d = (
        ctilde[:, None, :]
        + atilde[:, None, :]
        + atilde[:, None, :] * xp.exp(-t[:, None, None] * (ds - tc["tau"])) * inner
    )
    total = xp.einsum("iml,iml->il", va["pi"], 1.0 + m_d)
    return xp.log(total) / t[:, None], ok


def _vars_arrays(vars: DecisionVariables) -> dict:
    return {
        "pi": vars.pi, "p": vars.p, "q": vars.q,
        "w_d": vars.w_d, "w_dbar": vars.w_dbar, "w_e": vars.w_e,
        "placement": vars.placement, "omega": vars.omega,
        "h": vars.h, "g": vars.g,
    }


def _require(topo, vars, exponent_name):
    """Raise ConstraintViolated naming the first failed existence condition."""
    sp = derive_stream_params(topo, vars, validate=False)
    t = getattr(vars, exponent_name)
    for cls, rho, alpha, lam in (
        ("e", sp.rho_e, sp.alpha_e, sp.lam_e),
        ("dbar", sp.rho_dbar, sp.alpha_dbar, sp.lam_d),
        ("d", sp.rho_d, sp.alpha_d, sp.lam_d),
    ):
        if rho.max() >= 1.0:
            idx = np.unravel_index(np.argmax(rho), rho.shape)
            raise ConstraintViolated(
                f"load rho_{cls}{idx} = {rho.max():.4g} >= 1 (stability)"
            )
        loaded = rho > 0
        if loaded.any():
            amin = alpha[loaded].min()
            if t.max() >= amin:
                raise ConstraintViolated(
                    f"exponent {exponent_name} max {t.max():.4g} >= stream rate "
                    f"{amin:.4g} on a loaded {cls}-stream (MGF pole)"
                )


def evaluate_sdtp(topo: SystemTopology, vars: DecisionVariables, sigmas, check=True):
    """Raw stall-tail bound at each sigma: array (r, R, len(sigmas)).

    Raw values may exceed 1; clamp downstream where a probability is needed.
    """
    if check:
        _require(topo, vars, "h")
    raw, ok = _sdtp_core(np, topology_constants(topo), _vars_arrays(vars), np.atleast_1d(sigmas))
    if check and not ok.all():
        bad = int(np.argmin(ok))
        raise ConstraintViolated(
            f"waiting-time transform undefined at h for file {bad} "
            "(t - agg_rate*(B(t)-1) <= 0 on some stream)"
        )
    return raw


def evaluate_msd(topo: SystemTopology, vars: DecisionVariables, check=True):
    """Mean stall-duration bound per (file, router), seconds."""
    if check:
        _require(topo, vars, "g")
    tc = topology_constants(topo)
    va = _vars_arrays(vars)
    out, ok = _mean_core(np, tc, va, vars.g, tc["startup_delay"], tc["segments"], vars.placement)
    if check and not ok.all():
        bad = int(np.argmin(ok))
        raise ConstraintViolated(f"waiting-time transform undefined at g for file {bad}")
    return out


def evaluate_ttfc(topo: SystemTopology, vars: DecisionVariables, exponent=1.0, check=True):
    """Time-to-first-chunk bound per (file, router): the mean-bound machinery
    with zero startup delay, unit exponent, and a one-chunk horizon."""
    tc = topology_constants(topo)
    va = dict(_vars_arrays(vars))
    t = np.full(topo.num_files, float(exponent))
    va["h"] = va["g"] = t
    first = np.minimum(vars.placement, 1.0)
    if check:
        _require(topo, vars.replace(h=t, g=t), "g")
    out, ok = _mean_core(np, tc, va, t, 0.0, np.ones(topo.num_files), first)
    if check and not ok.all():
        bad = int(np.argmin(ok))
        raise ConstraintViolated(f"waiting-time transform undefined at ttfc exponent for file {bad}")
    return out


def edge_recursion_consts(lam, omega, h, sigma, startup_delay, segments, tau):
    """Window-recursion constants (cbar, atilde, abar) for one (file, router).

    c = 1 - e^{-lam w}  (request finds the file at the edge)
    a = e^{-lam w}      (request goes to the CDN)
    b = 1 - lam/(lam+h) (1 - e^{-(lam+h) w})   (stall-inheritance recursion)
    cbar = (c/b) e^{-h sigma};  abar = (a/b) e^{-h (sigma + ds + (L-1) tau)}.
    """
    c = -math.expm1(-lam * omega)
    a = math.exp(-lam * omega)
    b = 1.0 - lam / (lam + h) * (-math.expm1(-(lam + h) * omega))
    cbar = c / b * math.exp(-h * sigma)
    atilde = a / b
    abar = atilde * math.exp(-h * (sigma + startup_delay + (segments - 1.0) * tau))
    return cbar, atilde, abar


def capacity_violation_prob(topo: SystemTopology, vars: DecisionVariables, router=None):
    """Gaussian estimate of Pr(edge occupancy > capacity) per router.

    Occupancy of file i is tau*L_i with probability 1 - e^{-lam w}; the sum
    over files is approximated as normal.  A degenerate (zero-variance) mix
    collapses to a step at the mean.
    """
    sizes = (topo.segments * topo.tau)[:, None]        # (r, 1)
    miss = np.exp(-topo.arrival_rate * vars.omega)     # (r, R)
    mu = (sizes * (1.0 - miss)).sum(axis=0)
    var = ((sizes**2) * miss * (1.0 - miss)).sum(axis=0)
    out = np.where(
        var > 0,
        0.5 * scipy.special.erfc((topo.edge_capacity - mu) / np.sqrt(2.0 * np.maximum(var, 1e-300))),
        (mu > topo.edge_capacity).astype(float),
    )
    return out if router is None else float(out[router])


def weighted_objective(topo: SystemTopology, vars: DecisionVariables, sigma: float,
                       theta: float = 1.0, check=True) -> float:
    """Arrival-weighted mix of clamped tail bound and mean bound.

    theta = 1 is the pure tail objective; theta = 0 the pure mean objective.
    Tail bounds above 1 carry no probability information and are clamped.
    """
    lam = topo.arrival_rate
    total = lam.sum()
    if total <= 0:
        return 0.0
    kappa = lam / total
    obj = 0.0
    if theta > 0:
        raw = evaluate_sdtp(topo, vars, [sigma], check=check)[:, :, 0]
        obj += theta * float((kappa * np.minimum(raw, 1.0)).sum())
    if theta < 1:
        msd = evaluate_msd(topo, vars, check=check)
        obj += (1.0 - theta) * float((kappa * msd).sum())
    return obj


# ---------------------------------------------------------------------------
# scalar wrappers and the reference evaluator


def sdtp_bound(topo, vars, file, router, sigma, check=True) -> float:
    """Raw tail bound for one (file, router, sigma)."""
    return float(evaluate_sdtp(topo, vars, [sigma], check=check)[file, router, 0])


def msd_bound(topo, vars, file, router, check=True) -> float:
    return float(evaluate_msd(topo, vars, check=check)[file, router])


def ttfc_bound(topo, vars, file, router, check=True) -> float:
    return float(evaluate_ttfc(topo, vars, check=check)[file, router])


def _stream_queue(alpha, shift, agg, coefs, lens):
    if agg <= 0:
        return qg.StreamQueue(qg.ShiftedExp(max(alpha, 1e-12), shift), 0.0, ())
    mix = tuple((c / agg, n) for c, n in zip(coefs, lens))
    return qg.StreamQueue(qg.ShiftedExp(alpha, shift), agg, mix)


def sdtp_bound_reference(topo, vars, file, router, sigma) -> float:
    """Slow chunk-by-chunk tail bound built from the queueing primitives.

    Replaces every geometric/staircase closed form with the explicit sum over
    chunk indices; used to validate the vectorized path.
    """
    i, l = file, router
    sp = derive_stream_params(topo, vars)
    thin = thinned_rate(topo, vars.omega)
    h = float(vars.h[i])
    tau, ds = topo.tau, topo.startup_delay
    seg = int(topo.segments[i])
    lam = float(topo.arrival_rate[i, l])
    omega = float(vars.omega[i, l])

    cbar, atilde, abar = edge_recursion_consts(lam, omega, h, sigma, ds, seg, tau)
    total = 0.0
    for j in range(topo.num_servers):
        lc = int(round(vars.placement[j, i]))
        coef_e = thin[:, l] * vars.pi[:, j, l]
        chunk_sum = 0.0
        for nu in range(int(topo.streams_edge[j, l])):
            pnu = vars.p[i, j, nu, l]
            if pnu == 0 and lc > 0:
                continue
            eq = _stream_queue(
                sp.alpha_e[j, nu, l], topo.shift_edge[j, l], sp.lam_e[j, nu, l],
                coef_e * vars.p[:, j, nu, l], vars.placement[j],
            )
            s = math.fsum(
                math.exp(h * (seg - v) * tau) * qg.download_mgf_cached(eq, v, h)
                for v in range(1, lc + 1)
            )
            chunk_sum += pnu * s
        for beta in range(int(topo.streams_dc[j])):
            qb = vars.q[i, j, beta, l]
            if qb == 0 and seg - lc > 0:
                continue
            coefs = coef_e * vars.q[:, j, beta, l]
            lens = topo.segments - vars.placement[j]
            dq = _stream_queue(sp.alpha_d[j, beta, l], topo.shift_dc[j],
                               sp.lam_d[j, beta, l], coefs, lens)
            dbq = _stream_queue(sp.alpha_dbar[j, beta, l], topo.shift_edge[j, l],
                                sp.lam_d[j, beta, l], coefs, lens)
            s = math.fsum(
                math.exp(h * (seg - v) * tau)
                * qg.tandem_chunk_mgf_bound(dq, dbq, lc, v, h)
                for v in range(lc + 1, seg + 1)
            )
            chunk_sum += qb * s
        total += vars.pi[i, j, l] * (
            cbar + atilde * math.exp(-h * sigma) + abar * chunk_sum
        )
    return total


# ---------------------------------------------------------------------------
# reporting


@dataclass
class BoundReport:
    """Per-(file, router) bound evaluations over a sigma grid."""

    sigmas: list
    sdtp_raw: np.ndarray      # (r, R, S)
    msd: np.ndarray           # (r, R)
    ttfc: np.ndarray          # (r, R)
    feasible: bool
    notes: list = field(default_factory=list)

    @property
    def sdtp(self) -> np.ndarray:
        return np.minimum(self.sdtp_raw, 1.0)

    def write_csv(self, path) -> None:
        r, rr, _ = self.sdtp_raw.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "router", "sigma", "sdtp_bound", "sdtp_raw",
                        "msd_bound", "ttfc_bound", "feasible_flag"])
            for i in range(r):
                for l in range(rr):
                    for s_idx, sigma in enumerate(self.sigmas):
                        w.writerow([
                            i, l, sigma,
                            f"{self.sdtp[i, l, s_idx]:.10g}",
                            f"{self.sdtp_raw[i, l, s_idx]:.10g}",
                            f"{self.msd[i, l]:.10g}",
                            f"{self.ttfc[i, l]:.10g}",
                            int(self.feasible),
                        ])


def bound_report(topo, vars, sigmas, ttfc_exponent=1.0) -> BoundReport:
    """Evaluate all three bounds, degrading per metric on infeasibility."""
    sigmas = list(np.atleast_1d(sigmas))
    shape = (topo.num_files, topo.num_edge_routers)
    notes = []
    feasible = True

    def attempt(tag, fn, fallback):
        nonlocal feasible
        try:
            return fn(), True
        except ConstraintViolated as exc:
            feasible = False
            notes.append(f"{tag}: {exc}")
            return fallback, False

    raw, _ = attempt(
        "sdtp",
        lambda: evaluate_sdtp(topo, vars, sigmas) if sigmas
        else np.zeros(shape + (0,)),
        np.full(shape + (len(sigmas),), np.nan),
    )
    msd, _ = attempt("msd", lambda: evaluate_msd(topo, vars), np.full(shape, np.nan))
    ttfc, _ = attempt(
        "ttfc", lambda: evaluate_ttfc(topo, vars, exponent=ttfc_exponent),
        np.full(shape, np.nan),
    )
    return BoundReport(sigmas, raw, msd, ttfc, feasible, notes)
