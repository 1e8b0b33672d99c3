import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from microgrid_mpc.agents import (
    GridAgent,
    LoadAgent,
    PVAgent,
    QuadraticAgent,
    StorageAgent,
    prox_grid,
    prox_load,
    prox_pv,
    prox_storage,
    reachability_check,
    storage_qp,
)
from microgrid_mpc.qp import CanonicalQP, QPInfeasibleError, solve_qp

T = 6


def qp_prox(agent, v, rho):
    """Prox of a tracking agent through its generic QP encoding."""
    enc = agent.to_qp()
    S = enc.schedule_map
    qp = enc.qp
    prob = CanonicalQP((qp.P + rho * (S.T @ S)).tocsc(), qp.q - rho * (S.T @ v), qp.A, qp.b, qp.lower, qp.upper)
    return S @ solve_qp(prob, eps_abs=1e-10, backend="piqp").x


def small_battery(**kw):
    base = dict(horizon_steps=T, c_max=50.0, d_max=50.0, q_cap=100.0, q_init=50.0, eta_c=0.9, eta_d=0.9,
                q_min_frac=0.2, q_max_frac=0.9, dt_hours=0.25)
    base.update(kw)
    return StorageAgent(**base)


# ------------------------------------------------------------------ load/PV


def test_prox_load_examples():
    ag = LoadAgent([10.0], beta=0.5, alpha_load=1.0)
    assert prox_load(ag, [0.0], 2.0)[0] == pytest.approx(5.0)
    fc = np.array([10.0, 20.0, 5.0])
    np.testing.assert_allclose(prox_load(LoadAgent(fc, 0.5, 3.0), fc, 1.0), fc)
    np.testing.assert_allclose(prox_load(LoadAgent(fc, 1.0, 0.0), [-50.0, 0.0, 99.0], 1.0), fc)


def test_prox_pv_examples():
    assert prox_pv(PVAgent([-100.0], 0.0), [-150.0], 1.0)[0] == pytest.approx(-100)
    assert prox_pv(PVAgent([-100.0], 1e9), [0.0], 1.0)[0] == pytest.approx(-100, abs=1e-5)
    assert prox_pv(PVAgent([-100.0], 1.0), [0.0], 2.0)[0] == pytest.approx(-50)


def test_prox_with_damping_term():
    ag = LoadAgent([10.0, 10.0], beta=0.0, alpha_load=0.0)
    # alpha_prev (p - 4)^2 + (rho/2) p^2 with rho=2, alpha_prev=1  ->  p = 2; NaN entries carry no damping
    np.testing.assert_allclose(prox_load(ag, [0.0, 0.0], 2.0, prev=[4.0, np.nan], alpha_prev=1.0), [2.0, 0.0])


def test_closed_form_matches_qp(rng):
    for _ in range(100):
        fc = rng.uniform(0, 300, T)
        v = rng.normal(0, 200, T)
        rho = float(rng.uniform(0.01, 5))
        prev = rng.uniform(0, 300, T)
        ap = float(rng.uniform(0, 1))
        load = LoadAgent(fc, float(rng.uniform(0, 1)), float(rng.uniform(0, 2)), prev, ap)
        np.testing.assert_allclose(load.prox_native(v, rho), qp_prox(load, v, rho), atol=1e-6)
        pv = PVAgent(-fc, float(rng.uniform(0, 2)), -prev, ap)
        np.testing.assert_allclose(pv.prox_native(v, rho), qp_prox(pv, v, rho), atol=1e-6)


def _nonexpansive(agent, rng, pairs=100, scale=100.0, tol=1e-6):
    """Firm nonexpansiveness: |dp|^2 <= <dp, dv> (implies |dp| <= |dv|)."""
    for _ in range(pairs):
        v1, v2 = rng.normal(0, scale, (2, agent.horizon))
        rho = float(rng.uniform(0.05, 2))
        dp = agent.prox(v1, rho) - agent.prox(v2, rho)
        dv = v1 - v2
        assert dp @ dp <= dp @ dv + tol * np.linalg.norm(dv)


def test_nonexpansive_load_pv(rng):
    _nonexpansive(LoadAgent(rng.uniform(0, 300, T), 0.5, 0.1), rng)
    _nonexpansive(PVAgent(-rng.uniform(0, 300, T), 0.1), rng)


def test_nonexpansive_storage(rng):
    _nonexpansive(small_battery(alpha_cyc=0.01, q_final=50.0), rng, pairs=100, tol=1e-5)


def test_nonexpansive_grid(rng):
    _nonexpansive(GridAgent(rng.uniform(0.02, 0.1, T), 200.0, 0.05, 0.01, 1e-4), rng, pairs=100, tol=1e-5)


def test_nonexpansive_ev(rng):
    ev = small_battery(c_max=7.2, d_max=7.2, q_cap=24.0, q_init=8.0, window=(1, 5), q_required=12.0,
                       q_min_frac=0.3, alpha_cyc=1e-4, name="ev")
    _nonexpansive(ev, rng, pairs=100, scale=10.0, tol=1e-5)


def test_agent_validation():
    with pytest.raises(ValueError):
        LoadAgent([-1.0])
    with pytest.raises(ValueError):
        LoadAgent([1.0], beta=1.5)
    with pytest.raises(ValueError):
        PVAgent([1.0])
    with pytest.raises(ValueError):
        small_battery(window=(2, 9))
    with pytest.raises(ValueError):
        GridAgent([0.1], 0.0)
    with pytest.raises(ValueError):
        prox_load(LoadAgent([1.0, 2.0]), [1.0], 1.0)


# ------------------------------------------------------------------ storage


def test_storage_at_rest():
    ag = StorageAgent(4, 7.2, 7.2, 20.0, 10.0, q_required=10.0, name="ev")
    res = prox_storage(ag, np.zeros(4), 1e-3)
    np.testing.assert_allclose(res.p, 0.0, atol=1e-5)


def test_storage_one_step_forced():
    ag = StorageAgent(1, 7.2, 7.2, 20.0, 0.0, dt_hours=1.0, q_required=5.0)
    res = prox_storage(ag, [0.0], 1.0)
    np.testing.assert_allclose(res.p, [5.0], atol=1e-5)
    np.testing.assert_allclose(res.q, [0.0, 5.0], atol=1e-5)


def test_storage_two_step_even_split():
    ag = StorageAgent(2, 10.0, 10.0, 20.0, 0.0, dt_hours=1.0, q_required=4.0)
    np.testing.assert_allclose(prox_storage(ag, [0.0, 0.0], 1.0).p, [2.0, 2.0], atol=1e-5)


def test_storage_unreachable_requirement():
    ag = StorageAgent(2, 1.0, 1.0, 20.0, 0.0, dt_hours=1.0, q_required=10.0)
    with pytest.raises(QPInfeasibleError):
        prox_storage(ag, [0.0, 0.0], 1.0)


def test_storage_feasibility_and_availability(rng):
    for _ in range(25):
        a = int(rng.integers(0, 3))
        e = int(rng.integers(a + 1, T + 1))
        ag = small_battery(window=(a, e), q_init=float(rng.uniform(30, 80)), alpha_cyc=float(rng.uniform(0, 0.05)),
                           eta_q=0.99)
        res = prox_storage(ag, rng.normal(0, 80, T), float(rng.uniform(0.05, 2)))
        lo, hi = ag.q_bounds
        assert np.all(res.q >= lo - 1e-5) and np.all(res.q <= hi + 1e-5)
        assert np.all(res.p >= -ag.d_max - 1e-5) and np.all(res.p <= ag.c_max + 1e-5)
        assert np.all(res.p[~ag.available()] == 0.0)
        pc, pd, q = ag.split_from_solution(res.solution)
        dyn = q[1:] - ag.eta_q * q[:-1] - ag.eta_c * ag.dt_hours * pc + ag.dt_hours / ag.eta_d * pd
        assert np.abs(dyn).max() <= 1e-5 and q[0] == pytest.approx(ag.q_init, abs=1e-6)


def test_no_free_lunch_with_binding_requirement(rng):
    # with a lossy round trip, charging and discharging in the same step is
    # dominated whenever the charge requirement makes energy valuable
    for _ in range(25):
        ag = small_battery(q_init=30.0, q_final=70.0, eta_q=1.0)
        res = prox_storage(ag, rng.normal(0, 20, T), float(rng.uniform(0.05, 1)))
        pc, pd, _ = ag.split_from_solution(res.solution)
        eps = 1e-4 * ag.c_max
        assert not np.any((pc > eps) & (pd > eps))


def test_storage_workspace_prox_matches_direct(rng):
    ag = small_battery(alpha_cyc=0.01, q_final=50.0)
    for _ in range(10):
        v = rng.normal(0, 60, T)
        direct = prox_storage(ag, v, 0.5, settings=None).p
        np.testing.assert_allclose(ag.prox_native(v, 0.5), direct, atol=1e-4)
        assert ag.last_q is not None and ag.last_q.size == T + 1


def test_reachability_examples():
    # an empty window has no step to charge (or decay) over
    ag = StorageAgent(4, 7.2, 7.2, 100.0, 3.0, eta_q=0.5, window=(2, 2), q_required=1.0)
    assert reachability_check(ag) == (True, 3.0)
    ag = StorageAgent(4, 7.2, 7.2, 100.0, 1.0, dt_hours=0.25, q_required=8.2)
    r = reachability_check(ag)
    assert r.max_attainable == pytest.approx(8.2) and r.feasible
    ag = StorageAgent(2, 10.0, 10.0, 100.0, 0.0, eta_c=0.9, dt_hours=1.0, q_required=20.0)
    r = reachability_check(ag)
    assert r.max_attainable == pytest.approx(18.0) and not r.feasible


def test_storage_qp_objective_is_cycling_cost(rng):
    ag = small_battery(alpha_cyc=0.02, q_final=50.0)
    enc = storage_qp(ag)
    sol = solve_qp(enc.qp, eps_abs=1e-9, backend="piqp")
    p = enc.schedule_map @ sol.x
    assert sol.objective == pytest.approx(ag.cost(p), abs=1e-6)


# --------------------------------------------------------------------- grid


def test_prox_grid_projection():
    ag = GridAgent(np.zeros(4), 200.0)
    v = np.array([10.0, -50.0, 150.0, 0.0])
    np.testing.assert_allclose(prox_grid(ag, v, 1.0), v, atol=1e-5)


def test_prox_grid_sells_at_cap():
    # price large enough that c dt + rho p has no interior root in the box
    ag = GridAgent(np.full(2, 1e4), 200.0)
    np.testing.assert_allclose(prox_grid(ag, [0.0, 0.0], 1.0), [-200.0, -200.0], atol=1e-5)


def test_prox_grid_scalar_oracle(rng):
    for _ in range(20):
        c = rng.uniform(-2, 2, 3) * 100
        v = rng.normal(0, 100, 3)
        rho = float(rng.uniform(0.1, 2))
        ag = GridAgent(c, 120.0)
        expected = np.clip(v - c * ag.dt_hours / rho, -120, 120)
        np.testing.assert_allclose(prox_grid(ag, v, rho), expected, atol=1e-5)


def test_prox_grid_total_variation_flattens(rng):
    ag = GridAgent(rng.uniform(0, 0.1, 5), 200.0, alpha_diff=1e4)
    p = prox_grid(ag, rng.normal(0, 100, 5), 1.0)
    assert np.ptp(p) <= 1e-4


def test_grid_bus_convention():
    ag = GridAgent(np.zeros(2), 200.0)
    # bus convention: grid supplies the bus, so its bus schedule is -import
    np.testing.assert_allclose(ag.prox(np.array([-30.0, 40.0]), 1.0), [-30.0, 40.0], atol=1e-5)
    assert ag.sign == -1


@given(st.lists(st.floats(-300, 300), min_size=T, max_size=T), st.floats(0.05, 3))
def test_quadratic_agent_prox_box(v, rho):
    ag = QuadraticAgent(np.linspace(-5, 5, T), 1.0, -2.0, 2.0)
    p = ag.prox(np.array(v), rho)
    assert np.all(p >= -2) and np.all(p <= 2)
