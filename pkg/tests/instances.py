"""Random small but stable (topology, variables) instances for oracle tests."""

import numpy as np

from stallkit.model import SystemTopology, exponent_sup, project_feasible, uniform_init


def random_instance(seed, m_max=3, r_max=10, rho_cap=0.8, omega_mode="zero",
                    seg_max=6, exponent_frac=0.35):
    """A stable random instance with integer placement.

    Arrival rates are rescaled so every stream load stays below ``rho_cap``
    at uniform scheduling.  ``omega_mode`` is "zero" (no edge caching) or
    "fixed" (moderate TTL windows).  The bound exponents h and g are set to
    ``exponent_frac`` of the largest admissible exponent.
    """
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, m_max + 1))
    routers = int(rng.integers(1, 3))
    r = int(rng.integers(1, r_max + 1))
    segments = rng.integers(1, seg_max + 1, size=r)
    tau = float(rng.uniform(1.0, 4.0))
    topo_kw = dict(
        num_servers=m,
        num_edge_routers=routers,
        num_files=r,
        segments=segments,
        tau=tau,
        startup_delay=float(rng.uniform(0.0, 2.0)),
        streams_dc=rng.integers(1, 3, size=m),
        streams_edge=rng.integers(1, 3, size=(m, routers)),
        base_rate_dc=rng.uniform(2.0, 6.0, size=m),
        shift_dc=rng.uniform(0.0, 0.4 * tau, size=m),
        base_rate_edge=rng.uniform(2.0, 6.0, size=(m, routers)),
        shift_edge=rng.uniform(0.0, 0.4 * tau, size=(m, routers)),
        server_capacity=np.maximum(1.0, segments.sum() * rng.uniform(0.3, 0.8, size=m)),
        edge_capacity=np.full(routers, float(segments.sum() * tau * 10.0)),
        violation_budget=np.full(routers, 0.05),
        arrival_rate=rng.uniform(0.2, 1.0, size=(r, routers)),
    )
    # build at harmless rates, then rescale: stream load is linear in the
    # arrival rates when omega = 0
    cold = SystemTopology(**{**topo_kw, "arrival_rate": topo_kw["arrival_rate"] * 1e-6})
    vars = uniform_init(cold)
    placement = np.floor(vars.placement)  # integer placement within capacity
    vars = project_feasible(vars.replace(placement=placement), cold)

    from stallkit.model import derive_stream_params

    load = derive_stream_params(cold, vars).max_load() * 1e6
    scale = rho_cap * rng.uniform(0.4, 1.0) / max(load, 1e-9)
    topo = SystemTopology(**{**topo_kw, "arrival_rate": topo_kw["arrival_rate"] * scale})

    omega = np.zeros((r, routers))
    if omega_mode == "fixed":
        # windows sized so a decent fraction of requests hit the edge
        omega = rng.uniform(0.2, 1.5, size=(r, routers)) / np.maximum(
            topo.arrival_rate, 1e-6
        )
    vars = project_feasible(vars.replace(omega=omega), topo)
    sup = exponent_sup(topo, vars)
    t = exponent_frac * sup
    vars = vars.replace(h=np.full(r, t), g=np.full(r, t))
    return topo, vars
