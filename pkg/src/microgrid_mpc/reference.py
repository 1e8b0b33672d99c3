"""Centralized oracle: one QP over all agents with explicit balance rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .qp import CanonicalQP, QPInfeasibleError, QPSettings, QPSolution, QPStatus, solve_qp

CENTRAL_SETTINGS = QPSettings(eps_abs=1e-8, max_iter=200000, polish=False, backend="piqp")


@dataclass
class CentralizedResult:
    names: tuple
    schedules: np.ndarray  # bus convention, one row per agent
    objective: float
    solution: QPSolution
    blocks: list  # per-agent slice into the stacked variable vector
    encodings: list

    def schedule(self, name) -> np.ndarray:
        return self.schedules[self.names.index(name)]

    def agent_x(self, i) -> np.ndarray:
        return self.solution.x[self.blocks[i]]


def stack_agents(agents):
    """Block-diagonal QP of all agent encodings plus ``sum_i sign_i S_i x_i = 0``."""
    encs = [a.to_qp() for a in agents]
    T = agents[0].horizon
    if any(a.horizon != T for a in agents):
        raise ValueError("all agents must share one horizon")
    blocks = []
    start = 0
    for e in encs:
        blocks.append(slice(start, start + e.qp.n))
        start += e.qp.n
    P = sp.block_diag([e.qp.P for e in encs], format="csc")
    q = np.concatenate([e.qp.q for e in encs])
    A_blocks = sp.block_diag([e.qp.A for e in encs], format="csc")
    balance = sp.hstack([e.sign * e.schedule_map for e in encs], format="csc")
    A = sp.vstack([A_blocks, balance], format="csc")
    b = np.concatenate([np.concatenate([e.qp.b for e in encs]), np.zeros(T)])
    lower = np.concatenate([e.qp.lower for e in encs])
    upper = np.concatenate([e.qp.upper for e in encs])
    offset = sum(e.qp.offset for e in encs)
    return CanonicalQP(P, q, A, b, lower, upper, offset), encs, blocks


def _diagnose(agents, encs) -> str:
    bad = []
    for a, e in zip(agents, encs):
        if solve_qp(e.qp, eps_abs=1e-6, polish=False).status is QPStatus.INFEASIBLE:
            bad.append(a.name)
    if bad:
        return "infeasible agent constraints: " + ", ".join(bad)
    return "power balance rows cannot be met with the agents' feasible sets"


def solve_centralized(agents, settings: QPSettings | None = None,
                      warm_start=None) -> CentralizedResult:
    """Minimize the sum of agent objectives subject to power balance.

    Raises
    ------
    QPInfeasibleError
        Naming the infeasible agents, or the balance rows if every agent is
        feasible on its own.
    """
    agents = list(agents)
    prob, encs, blocks = stack_agents(agents)
    settings = settings or CENTRAL_SETTINGS
    sol = solve_qp(prob, settings, warm_start=warm_start)
    if sol.status in (QPStatus.INFEASIBLE, QPStatus.UNBOUNDED):
        raise QPInfeasibleError(_diagnose(agents, encs))
    rows = []
    for e, blk in zip(encs, blocks):
        rows.append(e.sign * (e.schedule_map @ sol.x[blk]))
    schedules = np.vstack(rows)
    return CentralizedResult(tuple(a.name for a in agents), schedules, sol.objective, sol, blocks, encs)


def run_centralized_mpc(scenario, prescient: bool = False, **kwargs):
    """The MPC loop with the centralized QP in place of the exchange.

    ``prescient=True`` replaces the PV/load forecasts and EV estimates by the
    actual future values.  Extra keyword arguments go to
    :func:`microgrid_mpc.mpc.run`.
    """
    from .mpc import run

    return run(scenario, mode="prescient" if prescient else "centralized", **kwargs)
