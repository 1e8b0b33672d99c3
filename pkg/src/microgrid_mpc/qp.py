"""Canonical quadratic programs and the embedded operator-splitting solver.

Every non-separable agent subproblem is written as

    minimize    1/2 x'Px + q'x + offset
    subject to  Ax = b,  lower <= x <= upper

and handed to :func:`solve_qp`.  The iteration itself is OSQP (ADMM on the
constraint slack with over-relaxation and Ruiz scaling); this module adds
presolve checks, an active-set polishing step, independent KKT residuals and
a persistent :class:`QPWorkspace` for the repeated prox solves inside the
exchange loop, where only the linear term changes between calls.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
import osqp
import piqp
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INF = np.inf


class QPStatus(str, enum.Enum):
    SOLVED = "solved"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class QPInfeasibleError(RuntimeError):
    """Raised by callers that cannot continue without a feasible solution."""


def _as_csc(M, shape=None):
    if M is None:
        return sp.csc_matrix(shape)
    if sp.issparse(M):
        return M.tocsc()
    return sp.csc_matrix(np.atleast_2d(np.asarray(M, dtype=float)))


@dataclass
class CanonicalQP:
    """Quadratic program with equality rows and box bounds.

    Missing pieces default to "absent": ``P=None`` is the zero matrix, ``A=None``
    means no equality rows, ``lower``/``upper`` default to -inf/+inf.
    """

    P: sp.spmatrix | np.ndarray | None
    q: np.ndarray
    A: sp.spmatrix | np.ndarray | None = None
    b: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.P = _as_csc(self.P, (n, n))
        if self.A is None or (not sp.issparse(self.A) and np.size(self.A) == 0):
            self.A = sp.csc_matrix((0, n))
        else:
            self.A = _as_csc(self.A)
        m = self.A.shape[0]
        self.b = np.zeros(m) if self.b is None else np.asarray(self.b, dtype=float).ravel()
        self.lower = np.full(n, -INF) if self.lower is None else np.asarray(self.lower, dtype=float).ravel().copy()
        self.upper = np.full(n, INF) if self.upper is None else np.asarray(self.upper, dtype=float).ravel().copy()
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n or self.b.size != m:
            raise ValueError("A/b dimensions do not match q")
        if self.lower.size != n or self.upper.size != n:
            raise ValueError("bound vectors must have length n")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def AT(self) -> sp.csc_matrix:
        """``A'``, cached until ``A`` is replaced."""
        cached = self.__dict__.get("_AT")
        if cached is None or cached[0] is not self.A:
            cached = (self.A, self.A.T.tocsc())
            self.__dict__["_AT"] = cached
        return cached[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.offset)

    def check(self, psd_tol: float = 1e-8) -> None:
        """Validate symmetry and positive semidefiniteness of ``P``.

        The eigenvalue test is only run for ``n <= 400``; larger instances get
        a Cholesky attempt on ``P + eps*I``.
        """
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-9 * max(1.0, abs(self.P).max()):
            raise ValueError("P is not symmetric")
        if self.n == 0:
            return
        if self.n <= 400:
            lam = np.linalg.eigvalsh(self.P.toarray()).min()
            if lam < -psd_tol:
                raise ValueError(f"P is not positive semidefinite (min eigenvalue {lam:.3e})")
        else:
            scale = max(1.0, abs(self.P).max())
            try:
                np.linalg.cholesky(self.P.toarray() + 1e-8 * scale * np.eye(self.n))
            except np.linalg.LinAlgError as err:
                raise ValueError("P is not positive semidefinite") from err


@dataclass
class QPSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 0.0
    max_iter: int = 20000
    sigma: float = 1e-6
    alpha: float = 1.6
    rho: float = 0.1
    scaling: int = 10
    polish: bool = True
    check_termination: int = 5
    warm_start: object = None  # x0 array or a previous QPSolution
    # QPWorkspace only: tolerance of the splitting phase ahead of the
    # active-set polish (tightened to eps_abs if the polish fails)
    coarse_eps: float | None = None
    # "osqp" (operator splitting, warm-startable) or "piqp" (sparse
    # interior point; no warm start but far fewer, cheaper iterations on
    # the small degenerate storage problems)
    backend: str = "osqp"

    def __post_init__(self):
        if self.backend not in ("osqp", "piqp"):
            raise ValueError("backend must be 'osqp' or 'piqp'")


@dataclass
class QPSolution:
    x: np.ndarray
    objective: float
    status: QPStatus
    primal_residual: float
    dual_residual: float
    iterations: int
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))
    polished: bool = False
    message: str = ""
    active: tuple | None = field(default=None, repr=False)  # (at lower, at upper) masks

    @property
    def solved(self) -> bool:
        return self.status is QPStatus.SOLVED


def kkt_residuals(prob: CanonicalQP, x, y, z) -> tuple[float, float]:
    """Primal and stationarity residuals (infinity norms) of ``(x, y, z)``.

    ``y`` multiplies the equality rows and ``z`` the bounds; stationarity is
    ``P x + q + A'y + z = 0``.
    """
    x = np.asarray(x, dtype=float)
    pri = 0.0
    if prob.m:
        pri = float(np.abs(prob.A @ x - prob.b).max())
    if prob.n:
        viol = np.maximum(prob.lower - x, 0.0) + np.maximum(x - prob.upper, 0.0)
        pri = max(pri, float(viol.max()))
        stat = prob.P @ x + prob.q + prob.AT @ y + z
        dua = float(np.abs(stat).max())
    else:
        dua = 0.0
    return pri, dua


def _presolve(prob: CanonicalQP) -> str | None:
    bad = np.flatnonzero(prob.lower > prob.upper)
    if bad.size:
        j = bad[0]
        return f"bound conflict on variable {j}: lower={prob.lower[j]} > upper={prob.upper[j]}"
    if prob.m:
        empty = np.flatnonzero(np.diff(prob.A.tocsr().indptr) == 0)
        for i in empty:
            if abs(prob.b[i]) > 0:
                return f"equality row {i} is empty but b={prob.b[i]}"
    return None


def _stacked(prob: CanonicalQP):
    A = sp.vstack([prob.A, sp.identity(prob.n, format="csc")], format="csc")
    lo = np.concatenate([prob.b, prob.lower])
    hi = np.concatenate([prob.b, prob.upper])
    return A, lo, hi


def _osqp_kwargs(settings: QPSettings) -> dict:
    return dict(
        verbose=False,
        eps_abs=settings.eps_abs,
        eps_rel=settings.eps_rel,
        max_iter=int(settings.max_iter),
        sigma=settings.sigma,
        alpha=settings.alpha,
        rho=settings.rho,
        scaling=int(settings.scaling),
        polishing=False,
        check_termination=int(settings.check_termination),
        eps_prim_inf=1e-7,
        eps_dual_inf=1e-7,
    )


class _KKTCache:
    """LU factorizations of reduced KKT systems keyed by the active set.

    Also holds the triplets of the regularized base matrix
    ``[[P + delta I, A'], [A, -delta I]]``, from which each reduced system is
    assembled by appending the rows of the active bounds.
    """

    def __init__(self, size: int = 8, delta: float = 1e-8):
        self.size = size
        self.delta = delta
        self._store: dict = {}
        self._base = None

    def base(self, prob: CanonicalQP):
        if self._base is None:
            n, m = prob.n, prob.m
            d = self.delta
            P = prob.P.tocoo()
            A = prob.A.tocoo()
            rows = np.concatenate([P.row, np.arange(n), A.col, A.row + n, n + np.arange(m)])
            cols = np.concatenate([P.col, np.arange(n), A.row + n, A.col, n + np.arange(m)])
            vals = np.concatenate([P.data, np.full(n, d), A.data, A.data, np.full(m, -d)])
            self._base = (rows, cols, vals)
        return self._base

    def get(self, key, build):
        hit = self._store.pop(key, None)
        if hit is None:
            hit = build()
        self._store[key] = hit
        while len(self._store) > self.size:
            self._store.pop(next(iter(self._store)))
        return hit


def _guess_active(prob: CanonicalQP, x, zb):
    """Bound activity suggested by an approximate primal-dual pair."""
    tol = 1e-9 * max(1.0, np.abs(zb).max(initial=0.0))
    near_lo = x - prob.lower < 1e-9 * (1 + np.abs(x))
    near_hi = prob.upper - x < 1e-9 * (1 + np.abs(x))
    act_lo = np.isfinite(prob.lower) & ((zb < -tol) | near_lo)
    act_hi = np.isfinite(prob.upper) & ((zb > tol) | near_hi) & ~act_lo
    return act_lo, act_hi


def _reduced_kkt(prob: CanonicalQP, act_lo, act_hi, fixed, ref, cache, rounds=3):
    """Solve the equality-constrained QP with the given bounds held active.

    Degenerate active sets (for instance idle storage steps, where the
    cycling rows are implied by the active power bounds) have non-unique
    multipliers.  A few proximal-point rounds centred on ``ref = (x, y, z)``,
    a previous primal-dual pair, select the multiplier nearest to it, which
    keeps sign-correct multipliers sign-correct.
    """
    n, m = prob.n, prob.m
    delta = cache.delta
    act = fixed | act_lo | act_hi
    idx = np.flatnonzero(act)

    def build():
        k = idx.size
        rows, cols, vals = cache.base(prob)
        extra = n + m + np.arange(k)
        K = sp.csc_matrix(
            (np.concatenate([vals, np.ones(2 * k), np.full(k, -delta)]),
             (np.concatenate([rows, extra, idx, extra]), np.concatenate([cols, idx, extra, extra]))),
            shape=(n + m + k, n + m + k),
        )
        try:
            return spla.splu(K), K
        except RuntimeError:
            return None, K

    key = (np.packbits(act_lo).tobytes(), np.packbits(act_hi).tobytes())
    lu, K = cache.get(key, build)
    if lu is None:
        return None
    x_ref, y_ref, z_ref = ref
    target = np.where(act_hi, prob.upper, prob.lower)[idx]
    x = x_ref
    lam = np.concatenate([y_ref, z_ref[idx]])
    for _ in range(rounds):
        rhs = np.concatenate([-prob.q + delta * x, prob.b - delta * lam[:m], target - delta * lam[m:]])
        sol = lu.solve(rhs)
        sol = sol + lu.solve(rhs - K @ sol)
        x, lam = sol[:n], sol[n:]
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
        return None
    z = np.zeros(n)
    z[idx] = lam[m:]
    return x, lam[:m], z


def _active_set(prob: CanonicalQP, act_lo, act_hi, ref, cache=None, max_steps=10):
    """Primal-dual active-set refinement starting from a guessed activity.

    Each step solves the reduced KKT system, releases bounds whose multiplier
    has the wrong sign and adds bounds that are violated.  Returns
    ``(x, y, z, act_lo, act_hi)`` on success, ``None`` if the activity does
    not settle within ``max_steps``.
    """
    cache = cache if cache is not None else _KKTCache()
    fixed = np.isfinite(prob.lower) & (prob.lower == prob.upper)
    act_lo = act_lo & ~fixed
    act_hi = act_hi & ~fixed & ~act_lo
    for _ in range(max_steps):
        res = _reduced_kkt(prob, act_lo, act_hi, fixed, ref, cache)
        if res is None:
            return None
        x, y, z = res
        ptol = 1e-9 * (1 + np.abs(x))
        ztol = 1e-9 * max(1.0, np.abs(z).max(initial=0.0))
        below = ~fixed & (x < prob.lower - ptol)
        above = ~fixed & (x > prob.upper + ptol)
        wrong_lo = act_lo & (z > ztol)
        wrong_hi = act_hi & (z < -ztol)
        if not (below.any() or above.any() or wrong_lo.any() or wrong_hi.any()):
            return np.clip(x, prob.lower, prob.upper), y, z, act_lo, act_hi
        act_lo = (act_lo & ~wrong_lo) | below
        act_hi = ((act_hi & ~wrong_hi) | above) & ~act_lo
        ref = (x, y, np.where(act_lo | act_hi | fixed, z, 0.0))
    return None


def _finish(prob, settings, x, y_all, iters, osqp_status, cache=None):
    m = prob.m
    y, z = y_all[:m], y_all[m:]
    pri, dua = kkt_residuals(prob, x, y, z)
    polished = False
    active = None
    if settings.polish and osqp_status in ("solved", "solved inaccurate", "maximum iterations reached"):
        res = _active_set(prob, *_guess_active(prob, x, z), (x, y, z), cache=cache)
        if res is not None:
            xp, yp, zp, lo, hi = res
            ppri, pdua = kkt_residuals(prob, xp, yp, zp)
            if max(ppri, pdua) <= max(pri, dua):
                x, y, z, pri, dua, polished = xp, yp, zp, ppri, pdua, True
                active = (lo, hi)
    if "infeasible" in osqp_status and "dual" in osqp_status:
        status = QPStatus.UNBOUNDED
    elif "infeasible" in osqp_status:
        status = QPStatus.INFEASIBLE
    elif pri <= settings.eps_abs and dua <= settings.eps_abs:
        status = QPStatus.SOLVED
    elif osqp_status == "solved" and settings.eps_rel > 0:
        status = QPStatus.SOLVED
    else:
        status = QPStatus.MAX_ITERATIONS
    obj = prob.objective(x) if status not in (QPStatus.INFEASIBLE, QPStatus.UNBOUNDED) else np.inf
    return QPSolution(
        x=x, objective=obj, status=status, primal_residual=pri, dual_residual=dua,
        iterations=int(iters), y=y, z=z, polished=polished, message=osqp_status, active=active,
    )


def _empty_solution(prob: CanonicalQP) -> QPSolution:
    status = QPStatus.SOLVED if not np.any(np.abs(prob.b) > 0) else QPStatus.INFEASIBLE
    return QPSolution(
        x=np.zeros(0), objective=prob.offset, status=status, primal_residual=0.0,
        dual_residual=0.0, iterations=0, y=np.zeros(prob.m), z=np.zeros(0),
    )


def _infeasible(prob: CanonicalQP, msg: str) -> QPSolution:
    return QPSolution(
        x=np.clip(np.zeros(prob.n), prob.lower, prob.upper), objective=np.inf,
        status=QPStatus.INFEASIBLE, primal_residual=np.inf, dual_residual=np.inf,
        iterations=0, y=np.zeros(prob.m), z=np.zeros(prob.n), message=msg,
    )


def _warm(solver, prob, ws):
    if ws is None:
        return
    if isinstance(ws, QPSolution):
        y_all = np.concatenate([ws.y, ws.z]) if ws.y.size + ws.z.size == prob.m + prob.n else None
        if y_all is None:
            solver.warm_start(x=ws.x)
        else:
            solver.warm_start(x=ws.x, y=y_all)
    else:
        solver.warm_start(x=np.asarray(ws, dtype=float))


_PIQP_STATUS = {
    piqp.PIQP_SOLVED: "solved",
    piqp.PIQP_MAX_ITER_REACHED: "maximum iterations reached",
    piqp.PIQP_PRIMAL_INFEASIBLE: "primal infeasible",
    piqp.PIQP_DUAL_INFEASIBLE: "dual infeasible",
}


class _PIQPProblem:
    """piqp solver on a copy of the problem with fixed variables moved to rows.

    A variable with ``lower == upper`` would otherwise carry two opposing
    bound multipliers that grow without limit; they inflate the relative
    duality gap enough for piqp to stop far from the optimum.
    """

    def __init__(self, prob: CanonicalQP, settings: QPSettings):
        self.fixed = np.flatnonzero(prob.lower == prob.upper)
        A, b = prob.A, prob.b
        lower, upper = prob.lower.copy(), prob.upper.copy()
        if self.fixed.size:
            E = sp.csc_matrix((np.ones(self.fixed.size), (np.arange(self.fixed.size), self.fixed)),
                              shape=(self.fixed.size, prob.n))
            A = sp.vstack([A, E], format="csc")
            b = np.concatenate([b, lower[self.fixed]])
            lower[self.fixed] = -np.inf
            upper[self.fixed] = np.inf
        solver = piqp.SparseSolver()
        solver.settings.verbose = False
        # piqp's stopping test is scaled; aim below eps_abs so the unscaled
        # residual check in _finish passes
        solver.settings.eps_abs = 0.1 * settings.eps_abs
        solver.settings.eps_rel = 0.0
        solver.settings.max_iter = min(int(settings.max_iter), 1000)
        solver.setup(sp.triu(prob.P, format="csc"), prob.q, A, b, None, None, None, lower, upper)
        self.solver = solver

    def update(self, c):
        self.solver.update(c=c)

    def solve(self, prob: CanonicalQP, settings: QPSettings, cache=None) -> QPSolution:
        status = _PIQP_STATUS.get(self.solver.solve(), "numerics")
        r = self.solver.result
        m = prob.m
        x = np.asarray(r.x, dtype=float)
        y_all = np.asarray(r.y, dtype=float)
        z = np.asarray(r.z_bu, dtype=float) - np.asarray(r.z_bl, dtype=float)
        z[self.fixed] = y_all[m:]
        y = np.concatenate([y_all[:m], z])
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            x, y = np.zeros(prob.n), np.zeros(prob.m + prob.n)
        elif status == "solved" and not settings.polish:
            # iterates are strictly inside the box, so besides piqp's own
            # (unscaled, infinity-norm) residuals check complementarity
            pri, dua = float(r.info.primal_res), float(r.info.dual_res)
            slack = np.minimum(x - prob.lower, prob.upper - x)
            slack[self.fixed] = 0.0
            comp = float(np.max(np.abs(z) * np.minimum(slack, 1e300), initial=0.0))
            if max(pri, dua, comp) <= settings.eps_abs:
                return QPSolution(x, prob.objective(x), QPStatus.SOLVED, pri, dua, int(r.info.iter),
                                  y[:m], y[m:], message=status)
        # interior-point iterates are never exactly on the bounds; snap them
        # with the active-set step only when that does not make things worse
        return _finish(prob, settings, x, y, r.info.iter, status, cache)


def solve_qp(prob: CanonicalQP, settings: QPSettings | None = None, **overrides) -> QPSolution:
    """Solve a :class:`CanonicalQP`.

    Parameters
    ----------
    prob : CanonicalQP
        Problem data.  ``P`` must be symmetric PSD.
    settings : QPSettings, optional
        Solver settings; keyword ``overrides`` replace individual fields.

    Returns
    -------
    QPSolution
        ``status`` is ``SOLVED`` only when both the primal residual and the
        stationarity residual are within ``eps_abs``.  Bound conflicts found in
        presolve give ``INFEASIBLE`` without iterating.
    """
    settings = replace(settings or QPSettings(), **overrides)
    if prob.n == 0:
        return _empty_solution(prob)
    msg = _presolve(prob)
    if msg:
        return _infeasible(prob, msg)
    if settings.backend == "piqp":
        sol = _PIQPProblem(prob, settings).solve(prob, settings)
        if sol.status is not QPStatus.MAX_ITERATIONS:
            return sol
        settings = replace(settings, backend="osqp", warm_start=sol.x)
    A, lo, hi = _stacked(prob)
    solver = osqp.OSQP()
    solver.setup(P=sp.triu(prob.P, format="csc"), q=prob.q, A=A, l=lo, u=hi, **_osqp_kwargs(settings))
    _warm(solver, prob, settings.warm_start)
    res = solver.solve(raise_error=False)
    x = res.x if res.x is not None and np.all(np.isfinite(res.x)) else np.zeros(prob.n)
    y = res.y if res.y is not None and np.all(np.isfinite(res.y)) else np.zeros(prob.m + prob.n)
    return _finish(prob, settings, x, y, res.info.iter, res.info.status)


class QPWorkspace:
    """Persistent solver for a family of QPs that differ only in ``q``.

    With the ``"osqp"`` backend successive calls (the agent prox solves of
    successive exchange iterations) usually share the active set of the
    previous solution, so a call first re-solves the reduced KKT system of
    that active set, whose factorization is cached, and refines it with a
    few active-set steps.  Only when that fails does it run the
    operator-splitting iteration, warm started from the previous primal/dual
    pair.  With ``"piqp"`` every call is a cold interior-point solve on the
    persistent factorization structure, falling back to the splitting
    iteration if it reports numerical trouble.
    """

    def __init__(self, prob: CanonicalQP, settings: QPSettings | None = None):
        self.prob = replace(prob)  # own copy; q is overwritten in place
        self.settings = settings or QPSettings(polish=False)
        self.message = _presolve(prob) if prob.n else None
        self._solver = None
        self._cache = _KKTCache()
        self.last: QPSolution | None = None
        self.osqp_calls = 0
        self._piqp = None
        if prob.n and self.message is None:
            if self.settings.backend == "piqp":
                self._piqp = _PIQPProblem(self.prob, self.settings)
            else:
                self._osqp()

    def _osqp(self):
        if self._solver is None:
            A, lo, hi = _stacked(self.prob)
            self._solver = osqp.OSQP()
            self._solver.setup(
                P=sp.triu(self.prob.P, format="csc"), q=self.prob.q, A=A, l=lo, u=hi,
                **_osqp_kwargs(replace(self.settings, backend="osqp")),
            )
        return self._solver

    def solve(self, q=None) -> QPSolution:
        if q is not None:
            q = np.asarray(q, dtype=float).ravel()
            if q.size != self.prob.n:
                raise ValueError("q has the wrong length")
            self.prob.q = q
        prob = self.prob
        if prob.n == 0:
            self.last = _empty_solution(prob)
            return self.last
        if self.message is not None:
            self.last = _infeasible(prob, self.message)
            return self.last
        last = self.last
        if self._piqp is not None:
            self._piqp.update(c=prob.q)
            sol = self._piqp.solve(prob, self.settings, self._cache)
            if sol.status is not QPStatus.MAX_ITERATIONS:
                self.last = sol
                return sol
            last = None
        if last is not None and last.active is not None:
            res = _active_set(prob, *last.active, (last.x, last.y, last.z), cache=self._cache, max_steps=4)
            if res is not None:
                x, y, z, lo, hi = res
                pri, dua = kkt_residuals(prob, x, y, z)
                if pri <= self.settings.eps_abs and dua <= self.settings.eps_abs:
                    self.last = QPSolution(x, prob.objective(x), QPStatus.SOLVED, pri, dua, 0, y, z,
                                           True, "active set", (lo, hi))
                    return self.last
        self._osqp().update(q=prob.q)
        if last is not None and last.status is QPStatus.SOLVED:
            self._solver.warm_start(x=last.x, y=np.concatenate([last.y, last.z]))
        settings = replace(self.settings, polish=True)
        coarse = self.settings.coarse_eps
        if coarse is not None and coarse > settings.eps_abs:
            self._solver.update_settings(eps_abs=coarse)
            res = self._solver.solve(raise_error=False)
            self.osqp_calls += 1
            sol = _finish(prob, settings, res.x, res.y, res.info.iter, res.info.status, self._cache)
            self._solver.update_settings(eps_abs=settings.eps_abs)
            if sol.status is QPStatus.SOLVED or sol.status in (QPStatus.INFEASIBLE, QPStatus.UNBOUNDED):
                self.last = sol
                return sol
        res = self._solver.solve(raise_error=False)
        self.osqp_calls += 1
        self.last = _finish(prob, settings, res.x, res.y, res.info.iter, res.info.status, self._cache)
        return self.last


def _hstack_zero(M: sp.spmatrix, extra: int) -> sp.csc_matrix:
    return sp.hstack([M, sp.csc_matrix((M.shape[0], extra))], format="csc")


def extend(base: CanonicalQP, k: int, q_new=None, lower=None, upper=None,
           rows=None, rows_new=None, rhs=None) -> CanonicalQP:
    """Append ``k`` variables (and optional equality rows) to ``base``.

    ``rows`` acts on the base variables and ``rows_new`` on the appended ones;
    the new constraints are ``rows @ x + rows_new @ x_new = rhs``.
    """
    n = base.n
    P = sp.block_diag([base.P, sp.csc_matrix((k, k))], format="csc")
    q = np.concatenate([base.q, np.zeros(k) if q_new is None else np.asarray(q_new, float)])
    A = _hstack_zero(base.A, k)
    b = base.b
    if rows is not None:
        new = sp.hstack([_as_csc(rows, (0, n)), _as_csc(rows_new, (0, k))], format="csc")
        A = sp.vstack([A, new], format="csc")
        b = np.concatenate([b, np.asarray(rhs, dtype=float)])
    lo = np.concatenate([base.lower, np.full(k, -INF) if lower is None else lower])
    hi = np.concatenate([base.upper, np.full(k, INF) if upper is None else upper])
    return CanonicalQP(P, q, A, b, lo, hi, base.offset)


def l1_to_qp(weights, D, base: CanonicalQP, shift=None) -> CanonicalQP:
    """Add ``sum_j w_j |(D x - shift)_j|`` to ``base`` via a split epigraph.

    New variables ``d+, d- >= 0`` are appended with ``D x - d+ + d- = shift``
    and linear cost ``w'(d+ + d-)``; the first ``base.n`` entries of the
    extended solution solve the penalized base problem.
    """
    D = _as_csc(D)
    k = D.shape[0]
    w = np.broadcast_to(np.asarray(weights, dtype=float), (k,))
    if np.any(w < 0):
        raise ValueError("L1 weights must be nonnegative")
    if D.shape[1] != base.n:
        raise ValueError("difference operator does not match the base problem")
    shift = np.zeros(k) if shift is None else np.asarray(shift, dtype=float)
    I = sp.identity(k, format="csc")
    return extend(
        base, 2 * k, q_new=np.concatenate([w, w]),
        lower=np.zeros(2 * k), upper=np.full(2 * k, INF),
        rows=D, rows_new=sp.hstack([-I, I]), rhs=shift,
    )


def range_to_qp(alpha_range: float, base: CanonicalQP, selector=None) -> CanonicalQP:
    """Add ``alpha_range * (max_t p_t - min_t p_t)`` with ``p = selector @ x``.

    Appends ``s_hi, s_lo`` and per-step slacks ``a_t, b_t >= 0`` so that
    ``p_t + a_t = s_hi`` and ``p_t - b_t = s_lo``.
    """
    if alpha_range < 0:
        raise ValueError("alpha_range must be nonnegative")
    S = sp.identity(base.n, format="csc") if selector is None else _as_csc(selector)
    T = S.shape[0]
    one = np.ones((T, 1))
    I = sp.identity(T, format="csc")
    Z = sp.csc_matrix((T, T))
    # new vars: [s_hi, s_lo, a (T), b (T)]
    rows_new = sp.bmat([
        [sp.csc_matrix(-one), sp.csc_matrix((T, 1)), I, Z],
        [sp.csc_matrix((T, 1)), sp.csc_matrix(-one), Z, -I],
    ], format="csc")
    q_new = np.concatenate([[alpha_range, -alpha_range], np.zeros(2 * T)])
    lower = np.concatenate([[-INF, -INF], np.zeros(2 * T)])
    return extend(
        base, 2 + 2 * T, q_new=q_new, lower=lower,
        rows=sp.vstack([S, S]), rows_new=rows_new, rhs=np.zeros(2 * T),
    )


def difference_matrix(n: int, order: int = 1) -> sp.csc_matrix:
    """Forward difference operator of the given order, shape ``(n - order, n)``."""
    D = sp.identity(n, format="csc")
    for _ in range(order):
        D = (D[1:] - D[:-1]).tocsc()
    return D
