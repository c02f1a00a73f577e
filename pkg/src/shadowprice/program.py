"""Finite-dimensional convex program behind the utility maximisation.

Variable layout (length ``(2d+1) n``, ``n`` = number of atoms)::

    [ up   : atom-major, asset-minor   (n*d) ]
    [ down : atom-major, asset-minor   (n*d) ]
    [ c    : one slot per atom         (n)   ]

Atoms are in breadth-first order, so the trade slot of level-``t`` atom ``j``
is the increment ``phi_{t+1} - phi_t`` decided on that atom and priced with
the time-``t`` bid/ask; the slots of level ``T`` are the liquidation trades.

Equality rows: ``h0^k`` (terminal bank position) for each terminal atom ``k``,
followed by ``h^{k,i}`` (terminal share position), ``k``-major.  The program is

    minimise  f(x) = -sum_t sum_j P(F_t^j) u_t^j(c_t^j)
    s.t.      h(x) = A x + b0 = 0,   up >= 0,   down >= 0.

With a numeraire ``S^0`` the time-``t`` bank flows are divided by ``S^0_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ShapeMismatch
from .market import MarketSpec


@dataclass(frozen=True)
class ProgramValues:
    f: float
    h0: np.ndarray
    h: np.ndarray
    g_up: np.ndarray
    g_down: np.ndarray


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    feasibility: float
    complementarity: float
    dual_sign: float = 0.0

    def max(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity, self.dual_sign)


@dataclass
class KktSolution:
    """Primal optimiser with Lagrange multipliers.

    Shapes: ``up``, ``down``, ``lam_up``, ``lam_down`` are ``(n, d)`` on the
    flat atom layout; ``c`` is ``(n,)``; ``nu`` is ``(m_T,)``; ``mu`` is
    ``(m_T, d)``.
    """

    up: np.ndarray
    down: np.ndarray
    c: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    lam_up: np.ndarray
    lam_down: np.ndarray
    residuals: KktResiduals | None = None
    objective: float = np.nan
    iterations: int = 0
    degenerate_duals: bool = False
    converged: bool = True
    flags: list = field(default_factory=list)

    @property
    def net(self) -> np.ndarray:
        return self.up - self.down

    @property
    def value(self) -> float:
        """Maximal expected utility, ``-objective``."""
        return -self.objective


class ConvexProgram:
    """Assembled program for one market; immutable after construction."""

    def __init__(self, market: MarketSpec):
        tree = market.tree
        self.market = market
        self.tree = tree
        self.n = n = tree.n_atoms
        self.d = d = market.d
        self.m_T = m_T = tree.n_terminal
        self.n_vars = (2 * d + 1) * n
        self.n_eq = (d + 1) * m_T
        self.probs = tree.flat_probs()
        S0 = market.bank_price()

        rows, cols, vals = [], [], []
        term = np.arange(m_T)
        for t in range(tree.horizon + 1):
            slot = tree.offsets[t] + tree.terminal_ancestor(t)
            w = 1.0 / S0[slot]
            rows.append(term)
            cols.append(self.c_index(slot))
            vals.append(-w)
            for i in range(d):
                rows += [term, term]
                cols += [self.up_index(slot, i), self.down_index(slot, i)]
                vals += [-market.ask[slot, i] * w, market.bid[slot, i] * w]
                hrow = m_T + term * d + i
                rows += [hrow, hrow]
                cols += [self.up_index(slot, i), self.down_index(slot, i)]
                vals += [np.ones(m_T), -np.ones(m_T)]
        self.A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_eq, self.n_vars),
        )
        self.b0 = np.concatenate([np.full(m_T, market.eta0), np.tile(market.eta, m_T)])

    # layout -----------------------------------------------------------------
    def up_index(self, slot, i):
        return np.asarray(slot) * self.d + i

    def down_index(self, slot, i):
        return self.n * self.d + np.asarray(slot) * self.d + i

    def c_index(self, slot):
        return 2 * self.n * self.d + np.asarray(slot)

    @property
    def n_trade(self) -> int:
        return 2 * self.n * self.d

    def layout(self) -> dict:
        return {
            "trade_slots": self.n_trade,
            "consumption_slots": self.n,
            "variables": self.n_vars,
            "equalities": self.n_eq,
            "inequalities": self.n_trade,
        }

    def pack(self, up, down, c) -> np.ndarray:
        nd = self.n * self.d
        up = np.asarray(up, dtype=float).reshape(nd)
        down = np.asarray(down, dtype=float).reshape(nd)
        c = np.asarray(c, dtype=float).reshape(self.n)
        return np.concatenate([up, down, c])

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_vars,):
            raise ShapeMismatch(f"expected {self.n_vars} variables, got {x.shape}")
        nd = self.n * self.d
        return (
            x[:nd].reshape(self.n, self.d),
            x[nd:2 * nd].reshape(self.n, self.d),
            x[2 * nd:],
        )

    # evaluation ---------------------------------------------------------------
    def objective(self, x) -> float:
        c = self.unpack(x)[2]
        u = self.market.utility.value(c)
        if not np.all(np.isfinite(u)):
            return np.inf
        return -float(np.dot(self.probs, u))

    def constraints(self, x) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.b0

    def eval(self, x) -> ProgramValues:
        hx = self.constraints(x)
        up, down, _ = self.unpack(x)
        return ProgramValues(
            f=self.objective(x),
            h0=hx[:self.m_T],
            h=hx[self.m_T:].reshape(self.m_T, self.d),
            g_up=-up,
            g_down=-down,
        )

    def gradient_c(self, c) -> np.ndarray:
        return -self.probs * self.market.utility.derivative(c)

    def hessian_c(self, c) -> np.ndarray:
        return -self.probs * self.market.utility.second_derivative(c)

    def duals(self, nu, mu) -> np.ndarray:
        return np.concatenate([np.asarray(nu, dtype=float).reshape(self.m_T),
                               np.asarray(mu, dtype=float).reshape(self.m_T * self.d)])

    def kkt_residual(self, sol: KktSolution) -> KktResiduals:
        """Max-norm residuals of the optimality system at ``sol``.

        Stationarity in ``c`` is the distance of 0 from the interval
        ``-P * du(c) + (A'y)_c``, so kinks of the utility are handled exactly;
        consumption outside the utility domain has an empty interval and
        infinite stationarity residual.
        """
        shapes = [(sol.up, (self.n, self.d)), (sol.down, (self.n, self.d)),
                  (sol.lam_up, (self.n, self.d)), (sol.lam_down, (self.n, self.d)),
                  (sol.c, (self.n,)), (sol.nu, (self.m_T,)), (sol.mu, (self.m_T, self.d))]
        for arr, shape in shapes:
            if np.shape(arr) != shape:
                raise ShapeMismatch(f"solution array of shape {np.shape(arr)}, expected {shape}")
        x = self.pack(sol.up, sol.down, sol.c)
        aty = self.A.T @ self.duals(sol.nu, sol.mu)
        a_up, a_down, a_c = self.unpack(aty)
        stat_trade = max(
            np.max(np.abs(a_up - sol.lam_up), initial=0.0),
            np.max(np.abs(a_down - sol.lam_down), initial=0.0),
        )
        g_lo, g_hi = self.market.utility.supergradient(sol.c)
        lo = a_c - self.probs * g_hi
        hi = a_c - self.probs * g_lo
        with np.errstate(invalid="ignore"):
            dist = np.where(np.isnan(lo) | np.isnan(hi) | (lo > hi), np.inf,
                            np.maximum(np.maximum(lo, -hi), 0.0))
        stat = max(stat_trade, float(np.max(dist, initial=0.0)))

        hx = self.constraints(x)
        feas = max(
            np.max(np.abs(hx), initial=0.0),
            np.max(np.maximum(-sol.up, 0.0), initial=0.0),
            np.max(np.maximum(-sol.down, 0.0), initial=0.0),
        )
        comp = max(
            np.max(np.abs(sol.lam_up * sol.up), initial=0.0),
            np.max(np.abs(sol.lam_down * sol.down), initial=0.0),
        )
        sign = max(
            np.max(np.maximum(-sol.lam_up, 0.0), initial=0.0),
            np.max(np.maximum(-sol.lam_down, 0.0), initial=0.0),
        )
        return KktResiduals(float(stat), float(feas), float(comp), float(sign))


def assemble(market: MarketSpec) -> ConvexProgram:
    return ConvexProgram(market)


def eval_program(program: ConvexProgram, x) -> ProgramValues:
    return program.eval(x)


def kkt_residual(program: ConvexProgram, solution: KktSolution) -> KktResiduals:
    return program.kkt_residual(solution)
