import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from microgrid_mpc.agents import QuadraticAgent
from microgrid_mpc.exchange import (
    ExchangeError,
    ExchangeSettings,
    ExchangeState,
    mean_schedule,
    rescale_rho,
    residuals,
    run_exchange,
    search_rho,
    write_trace_csv,
)
from microgrid_mpc.reference import solve_centralized

TIGHT = ExchangeSettings(eps_pri=1e-5, eps_dual=1e-5, max_iter=2000, rho=1.0)


def random_toy(rng):
    N = int(rng.integers(2, 6))
    T = int(rng.integers(1, 9))
    agents = []
    for i in range(N):
        agents.append(QuadraticAgent(rng.normal(0, 5, T), rng.uniform(0.5, 2.0, T),
                                     -rng.uniform(1, 8, T), rng.uniform(1, 8, T), name=f"a{i}"))
    return agents


def test_two_agent_example():
    agents = [QuadraticAgent([4.0], name="a"), QuadraticAgent([-2.0], name="b")]
    res = run_exchange(agents, settings=TIGHT)
    assert res.converged
    p1, p2 = res.state.schedules[:, 0]
    assert p1 == pytest.approx(3, abs=1e-4) and p2 == pytest.approx(-3, abs=1e-4)
    # equal marginal costs at the balance optimum
    assert 2 * (p1 - 4) == pytest.approx(2 * (p2 + 2), abs=1e-4)
    # the internal price is the balance multiplier: d f_i / d p_i = -y
    assert res.state.y[0] == pytest.approx(2.0, abs=1e-3)


def test_balanced_targets_converge_fast():
    agents = [QuadraticAgent([1.0, 0.5], name="a"), QuadraticAgent([2.0, -1.0], name="b"),
              QuadraticAgent([-3.0, 0.5], name="c")]
    res = run_exchange(agents, settings=ExchangeSettings())
    # from a cold start each prox closes 2/3 of the gap to its target
    assert res.converged and res.iterations <= 10
    # every iterate is balanced, so the price never moves
    assert all(r <= 1e-12 for r, _ in res.state.residual_history)
    np.testing.assert_allclose(res.state.u, 0.0, atol=1e-9)
    res = run_exchange(agents, settings=TIGHT)
    np.testing.assert_allclose(res.state.schedules, [[1, 0.5], [2, -1], [-3, 0.5]], atol=1e-5)


def test_oracle_equivalence_on_random_toys():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for _ in range(50):
        agents = random_toy(rng)
        res = run_exchange(agents, settings=TIGHT)
        assert res.converged and res.iterations <= 2000
        assert res.r_norm <= 1e-5 and res.s_norm <= 1e-5
        ref = solve_centralized(agents)
        assert abs(res.objective - ref.objective) <= 1e-4 * max(1.0, abs(ref.objective))
        # balance at termination
        assert np.linalg.norm(res.state.schedules.sum(axis=0)) <= len(agents) * 1e-5 + 1e-12
    assert time.perf_counter() - t0 < 30


def test_residual_examples():
    s = ExchangeState(np.array([[1.0], [-1.0]]), np.zeros(1), 1.0)
    assert residuals(s, s) == (0.0, 0.0)
    s = ExchangeState(np.array([[1.0], [1.0]]), np.zeros(1), 1.0)
    assert residuals(s, s)[0] == pytest.approx(1.0)
    prev = ExchangeState(np.array([[0.0], [0.0]]), np.zeros(1), 2.0)
    cur = ExchangeState(np.array([[0.5], [-0.5]]), np.zeros(1), 2.0)
    assert residuals(cur, prev)[1] == pytest.approx(2 * np.sqrt(0.5))


def test_rescale_examples():
    s = ExchangeState(np.zeros((2, 1)), np.array([8.0]), 1.0)
    assert rescale_rho(s, 0.5).u[0] == pytest.approx(16.0)
    assert rescale_rho(s, 1.0) is s
    assert rescale_rho(s, 4.0).u[0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        rescale_rho(s, 0.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_rescale_preserves_unscaled_price(u, rho, new_rho):
    s = ExchangeState(np.zeros((2, len(u))), np.array(u), rho)
    np.testing.assert_allclose(rescale_rho(s, new_rho).y, s.y, rtol=1e-12, atol=1e-9)


def test_rescale_preserves_fixed_point():
    agents = [QuadraticAgent([4.0, 1.0], name="a"), QuadraticAgent([-2.0, 3.0], name="b")]
    res = run_exchange(agents, settings=TIGHT)
    for new_rho in (0.25, 4.0):
        nxt = run_exchange(agents, init=rescale_rho(res.state, new_rho),
                           settings=ExchangeSettings(eps_pri=1e-5, eps_dual=1e-5, max_iter=1, rho=new_rho))
        assert nxt.converged and nxt.r_norm <= 1e-5 and nxt.s_norm <= 1e-5


def test_determinism_across_parallelism():
    rng = np.random.default_rng(9)
    agents = random_toy(rng)
    a = run_exchange(agents, settings=ExchangeSettings(max_iter=300, parallelism=1))
    b = run_exchange(agents, settings=ExchangeSettings(max_iter=300, parallelism=4))
    assert np.array_equal(a.state.schedules, b.state.schedules)
    assert np.array_equal(a.state.u, b.state.u)
    assert a.iterations == b.iterations


def test_mean_fixed_order():
    x = np.array([[1e16, 1.0], [1.0, 1e16], [-1e16, -1e16]])
    assert np.array_equal(mean_schedule(x), ((x[0] + x[1]) + x[2]) / 3)


def test_max_iterations_returns_best():
    agents = [QuadraticAgent([40.0], name="a"), QuadraticAgent([-2.0], name="b")]
    res = run_exchange(agents, settings=ExchangeSettings(eps_pri=1e-12, eps_dual=1e-12, max_iter=3))
    assert res.status == "max_iterations" and res.iterations == 3
    scores = [max(r, s) for r, s in res.state.residual_history]
    assert max(res.r_norm, res.s_norm) <= max(scores) + 1e-12


def test_default_tolerances_scale_with_size():
    assert ExchangeSettings().tolerances(4, 25) == pytest.approx((1e-2, 1e-2))


def test_agent_failure_is_named():
    class Broken(QuadraticAgent):
        def prox_native(self, v, rho):
            raise RuntimeError("boom")

    with pytest.raises(ExchangeError, match="'bad'"):
        run_exchange([QuadraticAgent([1.0], name="ok"), Broken([0.0], name="bad")])


def test_input_validation():
    with pytest.raises(ValueError):
        run_exchange([QuadraticAgent([1.0])])
    with pytest.raises(ValueError):
        run_exchange([QuadraticAgent([1.0]), QuadraticAgent([1.0, 2.0])])
    with pytest.raises(ValueError):
        ExchangeSettings(rho=0)


def test_balance_adaptation_converges():
    agents = [QuadraticAgent([4.0, 1.0], 10.0, name="a"), QuadraticAgent([-2.0, 3.0], 0.1, name="b")]
    res = run_exchange(agents, settings=ExchangeSettings(eps_pri=1e-6, eps_dual=1e-6, rho=100.0,
                                                         rho_adapt="balance", max_iter=2000))
    ref = solve_centralized(agents)
    assert res.converged and res.objective == pytest.approx(ref.objective, rel=1e-4, abs=1e-6)


def test_trace_csv(tmp_path):
    agents = [QuadraticAgent([4.0], name="a"), QuadraticAgent([-2.0], name="b")]
    res = run_exchange(agents, settings=TIGHT)
    path = tmp_path / "trace.csv"
    write_trace_csv(res.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,r_norm,s_norm,objective" and len(lines) == res.iterations + 1


def test_search_rho_finds_few_iterations():
    def make():
        return [QuadraticAgent([4.0, 1.0], 50.0, name="a"), QuadraticAgent([-2.0, 3.0], 50.0, name="b")]

    rho, iters = search_rho(make, rounds=8)
    slow = run_exchange(make(), settings=ExchangeSettings(rho=1e-3)).iterations
    assert iters <= slow
