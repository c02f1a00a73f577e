"""Primal-dual interior-point solver returning primal and dual variables.

The solve runs in three stages:

1. a phase-one linear program that finds a point strictly inside every bound
   (trades > 0 and consumption inside the utility domain), or proves there is
   none;
2. path following on the log-barrier KKT system with a fixed centering factor;
3. an active-set polish: bounds whose multiplier dominates the slack are fixed,
   the remaining smooth equality-constrained problem is solved by Newton's
   method, and the equality multipliers are re-fitted at the fixed primal.

Slots where bid and ask coincide carry a single free net-trade variable (the
purchase/sale split is not unique there).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.sparse.linalg import splu

from .errors import DomainEmpty, Infeasible, MaxIterations, SolverError, Unbounded
from .market import MarketSpec
from .program import ConvexProgram, KktSolution, assemble

log = logging.getLogger(__name__)

_REG = 1e-12
_PROX = 1e-8  # proximal weight on variables without a bound (redundant trades)
_PROX_MIN = 1e-14
_BLOWUP = 1e10
_ARBITRAGE_TOL = 1e-6
_POLISH_ROUNDS = 4
_DEEP_GAP = 1e-20


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-9
    max_iter: int = 200
    barrier0: float = 1.0
    reduction: float = 0.2
    boundary: float = 0.99
    domain_margin: float = 1e-12

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.reduction < 1:
            raise ValueError("barrier reduction factor must lie in (0, 1)")
        if not 0 < self.boundary < 1:
            raise ValueError("fraction-to-boundary parameter must lie in (0, 1)")


class _Problem:
    """Reduced variable space: drops the sale variable of pinched slots."""

    def __init__(self, prog: ConvexProgram):
        self.prog = prog
        market = prog.market
        n, d = prog.n, prog.d
        pinched = market.pinched().reshape(n * d)
        keep = np.ones(prog.n_vars, dtype=bool)
        keep[n * d:2 * n * d][pinched] = False
        self.idx = np.flatnonzero(keep)
        self.N = self.idx.size
        self.A = prog.A[:, self.idx].tocsc()
        self.AT = self.A.T.tocsr()
        self.b0 = prog.b0
        self.m = prog.n_eq

        is_c = self.idx >= prog.n_trade
        self.c_pos = np.flatnonzero(is_c)
        c_slot = self.idx[is_c] - prog.n_trade
        lo_full = np.zeros(self.N)
        lo_full[is_c] = market.utility.dom_lo[c_slot]
        bounded = np.ones(self.N, dtype=bool)
        up_pinched = np.zeros(prog.n_vars, dtype=bool)
        up_pinched[:n * d] = pinched
        bounded[up_pinched[self.idx]] = False
        bounded[is_c] = np.isfinite(lo_full[is_c])
        self.B = np.flatnonzero(bounded)
        self.lo = lo_full[self.B]
        self.is_trade_B = self.idx[self.B] < prog.n_trade
        # consumption bounds that the utility tolerates being active (kinks)
        kink = np.zeros(self.N, dtype=bool)
        kink[is_c] = market.utility.kinked[c_slot]
        self.kink_B = kink[self.B]
        self._kkt = {}

    def full(self, z) -> np.ndarray:
        x = np.zeros(self.prog.n_vars)
        x[self.idx] = z
        return x

    def c_of(self, z):
        return z[self.c_pos]

    def grad(self, z):
        g = np.zeros(self.N)
        g[self.c_pos] = self.prog.gradient_c(self.c_of(z))
        return g

    def f(self, z) -> float:
        return self.prog.objective(self.full(z))

    def hess(self, z):
        h = np.zeros(self.N)
        h[self.c_pos] = self.prog.hessian_c(self.c_of(z))
        return h

    def prox(self, h, r_d=None) -> float:
        """Proximal weight for directions without curvature.

        Kept well below the flattest utility curvature (near-arbitrage optima
        with very large consumption) and, Levenberg-Marquardt style, below the
        squared dual residual so nearly flat trade directions converge
        superlinearly once close.
        """
        p = _PROX
        hc = h[self.c_pos]
        hc = hc[hc > 0]
        if hc.size:
            p = min(p, 1e-3 * hc.min())
        if r_d is not None:
            p = min(p, float(np.max(np.abs(r_d), initial=0.0)) ** 2)
        return float(max(p, _PROX_MIN))

    def kkt_solve(self, D, r1, r2, free=None):
        """Solve ``[[D, A'], [A, -reg]] [dz; dy] = [r1; r2]`` (optionally on a
        subset of columns)."""
        K, diag = self._pattern(free)
        n = diag.size
        K.data[diag] = D + _REG
        lu = splu(K)
        rhs = np.concatenate([r1, r2])
        sol = lu.solve(rhs)
        # refine against the unregularised system
        for _ in range(2):
            res = rhs - K @ sol
            res[:n] += _REG * sol[:n]
            res[n:] -= _REG * sol[n:]
            sol = sol + lu.solve(res)
        return sol[:n], sol[n:]

    def _pattern(self, free):
        key = None if free is None else free.tobytes()
        if key not in self._kkt:
            A = self.A if free is None else self.A[:, free]
            n = A.shape[1]
            K = sp.bmat([[sp.identity(n), A.T], [A, -_REG * sp.identity(self.m)]], format="csc")
            K.sort_indices()
            cols = np.repeat(np.arange(K.shape[1]), np.diff(K.indptr))
            diag = np.flatnonzero((K.indices == cols) & (cols < n))
            self._kkt[key] = (K, diag)
        return self._kkt[key]


def _phase_one(pb: _Problem, options: SolverOptions) -> np.ndarray:
    """Point on the equality manifold maximising the smallest bound slack
    (capped at 1) and, with a small weight, the smallest consumption among
    those without a domain bound (also capped at 1)."""
    N, B = pb.N, pb.B
    U = np.setdiff1d(pb.c_pos, B)
    cost = np.zeros(N + 2)
    cost[N] = -1.0
    cost[N + 1] = -1e-3
    A_eq = sp.hstack([pb.A, sp.csc_matrix((pb.m, 2))]).tocsc()
    guard = np.concatenate([B, U])
    rows = np.arange(guard.size)
    aux = np.concatenate([np.full(B.size, N), np.full(U.size, N + 1)])
    G = sp.csc_matrix(
        (np.concatenate([-np.ones(guard.size), np.ones(guard.size)]),
         (np.concatenate([rows, rows]), np.concatenate([guard, aux]))),
        shape=(guard.size, N + 2),
    )
    b_ub = np.concatenate([-pb.lo, np.zeros(U.size)])
    bounds = [(None, None)] * N + [(None, 1.0), (None, 1.0)]
    res = linprog(cost, A_ub=G if guard.size else None, b_ub=b_ub if guard.size else None,
                  A_eq=A_eq, b_eq=-pb.b0, bounds=bounds, method="highs")
    if res.status == 2:
        raise Infeasible("equality system of the program is inconsistent")
    if res.status != 0:
        raise SolverError(f"phase-one LP failed: {res.message}")
    z, s, t = res.x[:N], res.x[N], res.x[N + 1]
    if B.size and s <= options.domain_margin:
        raise DomainEmpty(
            f"no plan keeps consumption inside the utility domain (best slack {s:.3g})"
        )
    # unbounded consumption is guarded at one unit below its LP floor
    return _centre(pb, z, guard, np.concatenate([pb.lo, np.full(U.size, t - 1.0)]))


def _arbitrage_ray(pb: _Problem) -> float:
    """Largest total extra consumption reachable from nothing.

    Solves ``max sum(dc)`` over directions ``A dz = 0`` with nonnegative trade
    and consumption components and ``dc <= 1``.  Anything positive is an
    arbitrage: adding the direction to any plan raises utility forever.
    """
    lo = np.full(pb.N, -np.inf)
    lo[pb.B[pb.is_trade_B]] = 0.0
    lo[pb.c_pos] = 0.0
    hi = np.full(pb.N, np.inf)
    hi[pb.c_pos] = 1.0
    cost = np.zeros(pb.N)
    cost[pb.c_pos] = -1.0
    bounds = [(None if np.isinf(a) else a, None if np.isinf(b) else b) for a, b in zip(lo, hi)]
    res = linprog(cost, A_eq=pb.A, b_eq=np.zeros(pb.m), bounds=bounds, method="highs")
    return -res.fun if res.status == 0 else 0.0


def _centre(pb: _Problem, z_lp, guard, lo):
    """Pull the LP vertex toward the least-squares point nearest to "no trades,
    unit consumption" while keeping half of its slack above ``lo`` on the
    ``guard`` entries.  LP vertices can carry huge offsetting trades that
    wreck the first Newton steps."""
    ref = np.zeros(pb.N)
    ref[pb.B] = pb.lo + 1.0
    ref[pb.c_pos] = np.where(np.isfinite(ref[pb.c_pos]), ref[pb.c_pos], 1.0)
    dz, _ = pb.kkt_solve(np.ones(pb.N), np.zeros(pb.N), -(pb.A @ ref + pb.b0))
    z_ls = ref + dz
    if not guard.size:
        return z_ls
    w_lp = z_lp[guard] - lo
    w_ls = z_ls[guard] - lo
    floor = 0.5 * np.min(w_lp)
    dec = w_ls < w_lp
    theta = 1.0
    if np.any(dec):
        theta = float(min(1.0, np.min((w_lp[dec] - floor) / (w_lp[dec] - w_ls[dec]))))
    return z_lp + max(theta, 0.0) * (z_ls - z_lp)


def _ipm(pb: _Problem, z, options: SolverOptions, inner_tol: float, gap_tol: float | None = None,
         y=None, s=None):
    gap_tol = inner_tol if gap_tol is None else gap_tol
    B, lo = pb.B, pb.lo
    y = np.zeros(pb.m) if y is None else y
    w = z[B] - lo
    s = options.barrier0 / w if s is None else s
    nB = max(B.size, 1)
    for it in range(1, options.max_iter + 1):
        g = pb.grad(z)
        r_p = pb.A @ z + pb.b0
        gs = np.zeros(pb.N)
        gs[B] = s
        r_d = g + pb.AT @ y - gs
        gap = float(w @ s) / nB
        # equality rows cannot be met more tightly than roundoff on |z|
        tol_p = max(inner_tol, 16 * np.finfo(float).eps * (1.0 + np.max(np.abs(z), initial=0.0)))
        if (np.max(np.abs(r_p), initial=0.0) <= tol_p
                and np.max(np.abs(r_d), initial=0.0) <= inner_tol
                and gap <= gap_tol):
            return z, y, s, it
        # no point pushing the barrier far below the stopping tolerance
        tau = max(options.reduction * gap, 1e-3 * gap_tol)
        D = pb.hess(z)
        prox = pb.prox(D, r_d)
        D += prox
        D[B] += s / w - prox
        bar = np.zeros(pb.N)
        bar[B] = tau / w
        dz, dy = pb.kkt_solve(D, -(g + pb.AT @ y - bar), -r_p)
        dw = dz[B]
        ds = tau / w - s - (s / w) * dw
        a_p = _line_search(pb, z, w, dz, r_p, tau, 1.0 + np.max(np.abs(y + dy), initial=0.0),
                           _step_to_boundary(w, dw, options.boundary))
        a_d = _step_to_boundary(s, ds, options.boundary)
        z = z + a_p * dz
        y = y + a_p * dy
        s = s + a_d * ds
        w = z[B] - lo
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > _BLOWUP:
            raise Unbounded(
                "objective improves without bound: market admits arbitrage-like improvement"
            )
    raise MaxIterations(f"interior-point method did not converge in {options.max_iter} iterations")


def _line_search(pb: _Problem, z, w, dz, r_p, tau, rho, a):
    """Backtrack on the l1 barrier merit when the step would more than halve
    the distance to an open utility-domain boundary.  Newton on a utility that
    flattens out can otherwise throw consumption against the boundary where
    the gradient explodes."""
    B, lo = pb.B, pb.lo
    open_dom = ~pb.is_trade_B & ~pb.kink_B
    if not np.any(open_dom & (a * dz[B] < -0.5 * w)):
        return a

    def merit(zz):
        ww = zz[B] - lo
        if np.any(ww <= 0):
            return np.inf
        return pb.f(zz) - tau * np.sum(np.log(ww)) + rho * np.sum(np.abs(pb.A @ zz + pb.b0))

    phi0 = merit(z)
    if not np.isfinite(phi0):
        return a
    slope = min(float(pb.grad(z) @ dz - tau * np.sum(dz[B] / w) - rho * np.sum(np.abs(r_p))), 0.0)
    slack = 1e-13 * (1.0 + abs(phi0))
    trial = a
    for _ in range(40):
        if merit(z + trial * dz) <= phi0 + 1e-4 * trial * slope + slack:
            return trial
        trial *= 0.5
    return a


def _step_to_boundary(v, dv, frac):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, frac * np.min(-v[neg] / dv[neg])))


def _fit_duals(pb: _Problem, z, y0, free):
    """Minimal change of ``y`` satisfying stationarity on the free variables.

    Returns the new duals and whether they are pinned uniquely by those rows.
    """
    M = pb.AT[free].toarray()
    g = pb.grad(z)[free]
    rhs = -g - M @ y0

    def refined(Mw, scale):
        dy = np.linalg.lstsq(Mw, rhs / scale, rcond=None)[0]
        for _ in range(2):
            dy = dy + np.linalg.lstsq(Mw, (rhs - M @ dy) / scale, rcond=None)[0]
        return dy

    rank = np.linalg.matrix_rank(M) if M.size else 0
    dy = refined(M, np.ones(M.shape[0]))
    # rows that only see the tiny multipliers of a near-null subtree need
    # relative accuracy; weight every row by its own magnitude and keep the
    # result unless it costs accuracy on the large rows
    scale = np.abs(M) @ np.abs(y0 + dy) + np.abs(g)
    if np.any(scale > 0):
        scale = np.maximum(scale, 1e-30 * scale.max())
        scale[scale == 0] = 1.0
        dw = refined(M / scale[:, None], scale)
        res = np.max(np.abs(M @ dy - rhs), initial=0.0)
        if np.max(np.abs(M @ dw - rhs), initial=0.0) <= max(4 * res, 1e-12):
            dy = dw
    return y0 + dy, rank < pb.m


def _polish(pb: _Problem, z, y, active, options: SolverOptions):
    """Fix the ``active`` bounds, Newton-solve the rest exactly.

    Returns ``(z, free)`` or ``None``; a boolean mask over ``B`` instead marks
    free trades that ended up negative.
    """
    B = pb.B
    fixed = np.zeros(pb.N, dtype=bool)
    fixed[B[active]] = True
    if np.any(active & ~pb.is_trade_B & ~pb.kink_B):
        return None  # an open domain boundary cannot be active at an optimum
    zf = z.copy()
    zf[B[active]] = pb.lo[active]
    free = np.flatnonzero(~fixed)
    open_B = np.zeros(pb.N, dtype=bool)
    open_B[B[~pb.is_trade_B & ~active]] = True
    lo_full = np.full(pb.N, -np.inf)
    lo_full[B] = pb.lo
    AT_free = pb.AT[free]
    prev = np.inf
    for _ in range(50):
        g = pb.grad(zf)
        r_p = pb.A @ zf + pb.b0
        r_d = g[free] + AT_free @ y
        res = max(np.max(np.abs(r_p), initial=0.0), np.max(np.abs(r_d), initial=0.0))
        # stop at machine precision or once progress stalls near it
        if res <= 1e-15 or (res <= 1e-11 and res > 0.5 * prev):
            break
        prev = res
        D = pb.hess(zf)
        D = D[free] + pb.prox(D, r_d)
        dz, y_new = pb.kkt_solve(D, -g[free], -r_p, free=free)
        step = 1.0
        for _ in range(60):
            trial = zf.copy()
            trial[free] += step * dz
            if np.all(trial[open_B] > lo_full[open_B]):
                break
            step *= 0.5
        else:
            return None
        zf = trial
        y = y + step * (y_new - y)
        if step == 1.0 and np.max(np.abs(dz), initial=0.0) <= 1e-15 * (1 + np.max(np.abs(zf))):
            break
    negative = ~active & pb.is_trade_B & (zf[B] < -options.tol)
    if np.any(negative):
        return negative
    return zf, free


def _to_solution(pb: _Problem, z, y, fixed_lam_src) -> KktSolution:
    prog = pb.prog
    x = pb.full(z)
    up, down, c = prog.unpack(x)
    up = up.copy()
    down = down.copy()
    # pinched slots hold the net trade in ``up``; split it into its parts
    pinched = prog.market.pinched()
    net = up[pinched]
    up[pinched] = np.maximum(net, 0.0)
    down[pinched] = np.maximum(-net, 0.0)
    up = np.maximum(up, 0.0)
    down = np.maximum(down, 0.0)
    lam = np.zeros(prog.n_vars)
    lam[pb.idx] = fixed_lam_src
    lam_up, lam_down, _ = prog.unpack(lam)
    return KktSolution(
        up=up, down=down, c=c.copy(),
        nu=y[:prog.m_T].copy(), mu=y[prog.m_T:].reshape(prog.m_T, prog.d).copy(),
        lam_up=lam_up.copy(), lam_down=lam_down.copy(),
    )


def _polished_solution(pb: _Problem, z, y, s, options: SolverOptions):
    """Polish with a few active-set corrections for bounds the interior point
    left ambiguous; ``(solution, degenerate)`` or ``(None, False)``."""
    prog = pb.prog
    active = s > (z[pb.B] - pb.lo)
    for _ in range(_POLISH_ROUNDS):
        polished = _polish(pb, z, y, active, options)
        if polished is None:
            break
        if isinstance(polished, np.ndarray):
            active = active | polished
            continue
        zp, free = polished
        yp, degenerate = _fit_duals(pb, zp, y, free)
        lam = pb.AT @ yp + pb.grad(zp)
        lam[free] = 0.0
        wrong = active & pb.is_trade_B & (lam[pb.B] < -options.tol)
        lam = np.where(lam < 0, np.where(lam > -options.tol, 0.0, lam), lam)
        cand = _to_solution(pb, zp, yp, lam)
        cand.residuals = prog.kkt_residual(cand)
        if cand.residuals.max() <= options.tol:
            return cand, degenerate
        log.debug("polish rejected: %s", cand.residuals)
        if not np.any(wrong):
            break
        active = active & ~wrong
    return None, False


def solve(program: ConvexProgram | MarketSpec, options: SolverOptions | None = None) -> KktSolution:
    """Maximise expected utility; return the optimiser and its multipliers.

    Raises
    ------
    DomainEmpty
        No admissible plan has finite expected utility.
    Infeasible
        The terminal-position equalities cannot be met.
    Unbounded
        Utility can be increased without bound (arbitrage-like market).
    MaxIterations
        No point meeting ``options.tol`` was found.
    """
    options = options or SolverOptions()
    prog = program if isinstance(program, ConvexProgram) else assemble(program)
    pb = _Problem(prog)
    z0 = _phase_one(pb, options)
    if _arbitrage_ray(pb) > _ARBITRAGE_TOL:
        raise Unbounded("market admits an arbitrage: consumption can be raised at no cost, no maximiser exists")
    inner = 1e-3 * options.tol
    z, y, s, iters = _ipm(pb, z0, options, inner)

    sol, degenerate = _polished_solution(pb, z, y, s, options)
    if sol is None:
        # degenerate pairs (zero trade with zero multiplier) shrink only like
        # sqrt(gap); drive the gap far down so the active set becomes clear
        try:
            z, y, s, more = _ipm(pb, z, options, inner, _DEEP_GAP, y, s)
            iters += more
            sol, degenerate = _polished_solution(pb, z, y, s, options)
        except SolverError as exc:
            log.debug("deep interior-point pass failed: %s", exc)
    if sol is None:
        B = pb.B
        w = z[B] - pb.lo
        zs = z.copy()
        snap = (s > w) & pb.kink_B
        zs[B[snap]] = pb.lo[snap]
        lam = np.zeros(pb.N)
        lam[B] = s
        lam[B[~pb.is_trade_B]] = 0.0
        free = np.setdiff1d(np.arange(pb.N), B[s > w])
        yp, degenerate = _fit_duals(pb, zs, y, free)
        lam_fit = pb.AT @ yp + pb.grad(zs)
        lam_fit[free] = 0.0
        lam = np.maximum(lam_fit, 0.0)
        sol = _to_solution(pb, zs, yp, lam)
        sol.residuals = prog.kkt_residual(sol)
    sol.iterations = iters
    sol.objective = prog.objective(prog.pack(sol.up, sol.down, sol.c))
    sol.degenerate_duals = bool(degenerate)
    if degenerate:
        sol.flags.append("DegenerateDuals")
    sol.converged = sol.residuals.max() <= options.tol
    if not sol.converged:
        raise MaxIterations(
            f"KKT residuals {sol.residuals} above tolerance {options.tol:g} after {iters} iterations"
        )
    return sol


def solve_frictionless(market: MarketSpec, price, options: SolverOptions | None = None) -> KktSolution:
    """Solve the same problem with bid = ask = ``price``."""
    return solve(assemble(market.frictionless(price)), options)
