"""Consistent price systems, certificate assembly and a grid-search oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InstanceTooLarge, NonnegativeNu, SolverError
from .market import (
    MarketSpec,
    PortfolioConsumptionPair,
    expected_utility,
    plan_from_trades,
)
from .program import KktSolution, assemble
from .shadow import (
    ShadowPrice,
    check_complementarity,
    extract_shadow_price,
    implied_lambdas,
)
from .solver import SolverOptions, solve
from .tree import AdaptedProcess, ScenarioTree, conditional_expectation

MARTINGALE_TOL = 1e-8
MARGINAL_TOL = 1e-8
BUDGET_TOL = 1e-8
BUDGET_RTOL = 1e-13  # times the largest position value; roundoff floor of the check
VALUE_RTOL = 1e-6
LAMBDA_MATCH_TOL = 1e-6


@dataclass
class ConsistentPriceSystem:
    """Shadow price with its martingale measure.

    ``Q`` lives on the terminal atoms, ``Z`` is the density process
    ``E(dQ/dP | F_t)`` stored flat (one value per atom).
    """

    tree: ScenarioTree
    S: np.ndarray
    Q: np.ndarray
    alpha: float
    Z: np.ndarray

    def Z_at(self, t: int) -> np.ndarray:
        o = self.tree.offsets
        return self.Z[o[t]:o[t + 1]]

    def S_at(self, t: int) -> np.ndarray:
        o = self.tree.offsets
        return self.S[o[t]:o[t + 1]]


def build_cps(tree: ScenarioTree, nu, shadow) -> ConsistentPriceSystem:
    """``Q(F_T^k) = -nu^k / alpha`` with ``alpha = -sum nu``."""
    nu = np.asarray(nu, dtype=float)
    if np.any(nu >= 0):
        raise NonnegativeNu("a consistent price system needs nu < 0")
    S = shadow.values if isinstance(shadow, ShadowPrice) else np.asarray(shadow, dtype=float)
    if S.ndim == 1:
        S = S.reshape(tree.n_atoms, -1)
    alpha = float(np.sum(-nu))
    Q = -nu / alpha
    T = tree.horizon
    Z = np.concatenate([tree.sum_to_level(-nu, T, t) / (alpha * tree.probs[t]) for t in range(T + 1)])
    return ConsistentPriceSystem(tree, S, Q, alpha, Z)


def check_martingale(tree: ScenarioTree, cps: ConsistentPriceSystem) -> float:
    """Largest ``|E(Z_s S_s | F_t) - Z_t S_t|`` over ``t < s <= T``, atoms and assets."""
    T = tree.horizon
    worst = 0.0
    for s in range(1, T + 1):
        zs = cps.Z_at(s)[:, None] * cps.S_at(s)
        for t in range(s):
            lhs = conditional_expectation(tree, zs, s, t)
            rhs = cps.Z_at(t)[:, None] * cps.S_at(t)
            worst = max(worst, float(np.max(np.abs(lhs - rhs), initial=0.0)))
    return worst


@dataclass
class MarginalUtilityReport:
    max_violation: float
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def check_marginal_utility(market: MarketSpec, cps: ConsistentPriceSystem, c,
                           alpha: float | None = None, tol: float = MARGINAL_TOL) -> MarginalUtilityReport:
    """``Z_t`` must lie in ``(1/alpha) * du_t(c_t)`` on every atom (``tol`` slack)."""
    alpha = cps.alpha if alpha is None else alpha
    c = c.flat()[:, 0] if isinstance(c, AdaptedProcess) else np.asarray(c, dtype=float)
    lo, hi = market.utility.supergradient(c)
    with np.errstate(invalid="ignore"):
        gap = np.maximum(lo / alpha - cps.Z, cps.Z - hi / alpha)
    gap = np.where(np.isnan(gap), np.inf, np.maximum(gap, 0.0))
    levels = market.tree.flat_levels()
    bad = [
        (int(levels[n]), int(n - market.tree.offsets[levels[n]]), float(gap[n]))
        for n in np.flatnonzero(gap > tol)
    ]
    return MarginalUtilityReport(float(np.max(gap, initial=0.0)), bad)


def budget_constraint(tree: ScenarioTree, pair: PortfolioConsumptionPair, cps: ConsistentPriceSystem) -> float:
    """``|E_Q(sum_t c_t) - eta0 - eta' S~_0|`` with the endowment read off the pair."""
    T = tree.horizon
    c = pair.consumption.flat()[:, 0]
    total = np.zeros(tree.n_terminal)
    for t in range(T + 1):
        total += c[tree.offsets[t] + tree.terminal_ancestor(t)]
    eta0 = float(pair.bank[0][0, 0])
    eta = pair.stock[0][0]
    return abs(float(cps.Q @ total) - eta0 - float(eta @ cps.S_at(0)[0]))


def lift_to_frictionless(market: MarketSpec, pair: PortfolioConsumptionPair, shadow) -> PortfolioConsumptionPair:
    """Same holdings, consumption raised by the spread saved when trading at ``S~``.

    ``kappa~_t = kappa_t + d_up_{t+1}' (ask_t - S~_t) + d_down_{t+1}' (S~_t - bid_t)``.
    """
    S = shadow.values if isinstance(shadow, ShadowPrice) else np.asarray(shadow, dtype=float)
    S = S.reshape(market.tree.n_atoms, market.d)
    dphi = pair.stock.increments()
    up, down = np.maximum(dphi, 0.0), np.maximum(-dphi, 0.0)
    kappa = pair.consumption.flat()[:, 0]
    lifted = kappa + np.sum(up * (market.ask - S), axis=1) + np.sum(down * (S - market.bid), axis=1)
    return PortfolioConsumptionPair(
        pair.bank, pair.stock, AdaptedProcess.from_flat(market.tree, lifted)
    )


def solution_pair(market: MarketSpec, sol: KktSolution) -> PortfolioConsumptionPair:
    return plan_from_trades(market, sol.net, sol.c)


@dataclass
class CheckResult:
    passed: bool
    residual: float
    tol: float
    detail: str = ""


@dataclass
class ShadowCertificate:
    market: MarketSpec
    solution: KktSolution | None
    shadow: ShadowPrice | None = None
    cps: ConsistentPriceSystem | None = None
    frictionless: KktSolution | None = None
    value_costs: float = np.nan
    value_frictionless: float = np.nan
    checks: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    oracle: "OracleResult | None" = None
    wall_time: float = 0.0

    @property
    def valid(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks.values())

    @property
    def failing(self) -> list[str]:
        return [k for k, c in self.checks.items() if not c.passed]


def certify(market: MarketSpec, options: SolverOptions | None = None, oracle: bool = False,
            oracle_bound: float = 3.0, oracle_step: float = 1e-4) -> ShadowCertificate:
    """Solve with costs, extract ``S~``, re-solve frictionless at ``S~`` and run every check.

    Solver errors propagate.  Failed checks leave the certificate invalid with
    the failing check names in :attr:`ShadowCertificate.failing`.
    """
    start = time.perf_counter()
    options = options or SolverOptions()
    market = market.normalized()
    tree = market.tree
    sol = solve(assemble(market), options)
    cert = ShadowCertificate(market, sol, value_costs=sol.value)
    cert.flags.extend(sol.flags)
    checks = cert.checks
    checks["kkt"] = CheckResult(bool(sol.residuals.max() <= options.tol), float(sol.residuals.max()), options.tol)

    try:
        shadow = extract_shadow_price(market, sol)
    except (NonnegativeNu, ValueError) as exc:
        checks["shadow_bounds"] = CheckResult(False, np.inf, 0.0, str(exc))
        cert.wall_time = time.perf_counter() - start
        return cert
    cert.shadow = shadow
    if not shadow.unique:
        cert.flags.append("ShadowPriceNotUnique")
    checks["shadow_bounds"] = CheckResult(True, shadow.max_overshoot, 1e-8)

    comp = check_complementarity(market, sol, shadow)
    checks["complementarity"] = CheckResult(
        comp.passed, float(max((v[4] for v in comp.violations), default=0.0)), 1e-7,
        "; ".join(f"t={t} atom={j} asset={i} {side} gap={g:.3g}" for t, j, i, side, g in comp.violations),
    )
    try:
        lam_up, lam_down = implied_lambdas(market, sol)
        gap = max(np.max(np.abs(lam_up - sol.lam_up), initial=0.0),
                  np.max(np.abs(lam_down - sol.lam_down), initial=0.0))
        checks["implied_lambdas"] = CheckResult(bool(gap <= LAMBDA_MATCH_TOL), float(gap), LAMBDA_MATCH_TOL)
    except ValueError as exc:
        checks["implied_lambdas"] = CheckResult(False, np.inf, LAMBDA_MATCH_TOL, str(exc))

    cps = build_cps(tree, sol.nu, shadow)
    cert.cps = cps
    mart = check_martingale(tree, cps)
    checks["martingale"] = CheckResult(bool(mart <= MARTINGALE_TOL), float(mart), MARTINGALE_TOL)
    mu_rep = check_marginal_utility(market, cps, sol.c)
    checks["marginal_utility"] = CheckResult(mu_rep.passed, mu_rep.max_violation, MARGINAL_TOL)
    checks["equivalent_measure"] = CheckResult(bool(np.all(cps.Q > 0)), float(cps.Q.min()), 0.0)

    pair = solution_pair(market, sol)
    lifted = lift_to_frictionless(market, pair, shadow)
    budget = budget_constraint(tree, lifted, cps)
    held = max(float(np.max(np.abs(pair.stock[t]), initial=0.0)) for t in range(tree.horizon + 2))
    btol = BUDGET_TOL + BUDGET_RTOL * held * float(np.max(np.abs(shadow.values), initial=0.0))
    checks["budget"] = CheckResult(bool(budget <= btol), float(budget), btol)

    try:
        fr = solve(assemble(market.frictionless(shadow.values)), options)
    except SolverError as exc:
        checks["value_equality"] = CheckResult(False, np.inf, VALUE_RTOL, f"frictionless solve failed: {exc}")
        cert.wall_time = time.perf_counter() - start
        return cert
    cert.frictionless = fr
    cert.value_frictionless = fr.value
    tol = max(VALUE_RTOL, VALUE_RTOL * abs(sol.value))
    diff = abs(fr.value - sol.value)
    checks["value_equality"] = CheckResult(bool(diff <= tol), float(diff), tol)

    if oracle:
        try:
            res = brute_force_value(market, bound=oracle_bound, step=oracle_step)
        except InstanceTooLarge:
            cert.flags.append("OracleSkipped")
        else:
            cert.oracle = res
            og = abs(res.value - sol.value)
            checks["oracle"] = CheckResult(bool(og <= 1e-4), float(og), 1e-4,
                                           "bound active" if res.bound_active else "")
    cert.wall_time = time.perf_counter() - start
    return cert


# --------------------------------------------------------------------------
# grid-search oracle
# --------------------------------------------------------------------------

@dataclass
class OracleResult:
    value: float
    root_trade: float
    root_consumption: float
    step: float
    bound: float
    bound_active: bool
    evaluations: int
    note: str = "value is the best grid plan; its gap to the continuous optimum is O(step)"


def _grid_argmax(key, lo: int, hi: int):
    """Exact maximiser of a unimodal ``key`` over the integers ``lo..hi``."""
    cache = {}

    def k(i):
        if i not in cache:
            cache[i] = key(i)
        return cache[i]

    while hi - lo > 2:
        m1 = lo + (hi - lo) // 3
        m2 = hi - (hi - lo) // 3
        a, b = k(m1), k(m2)
        if a < b:
            lo = m1 + 1
        elif a > b:
            hi = m2 - 1
        else:
            lo, hi = m1, m2
    best = max(range(lo, hi + 1), key=k)
    return best, k(best)


def brute_force_value(market: MarketSpec, bound: float = 3.0, step: float = 1e-4) -> OracleResult:
    """Best plan on a grid of net trades (and consumption), by backward recursion.

    Works on the net trade of each atom rather than separate purchases and
    sales.  Every per-atom decision ranges over ``{-bound + k*step}``; since the
    problem is concave, each one-dimensional grid search is done by ternary
    search over grid indices, which returns the same grid maximiser as scanning
    all points.  Infeasible plans are ranked by how far consumption falls
    outside the utility domain so the search stays unimodal.

    Only small instances are accepted (``T <= 2``, ``d <= 1``, at most three
    children per atom).
    """
    market = market.normalized()
    tree = market.tree
    T, d = tree.horizon, market.d
    branching = max((np.bincount(p).max() for p in tree.parents[1:]), default=1)
    if T > 2 or d > 1 or branching > 3:
        raise InstanceTooLarge(f"oracle needs T <= 2, d <= 1, <= 3 children (got T={T}, d={d}, {branching})")

    util = market.utility
    probs = tree.flat_probs()
    o = tree.offsets
    n_grid = int(round(2 * bound / step))
    bid = market.bid[:, 0] if d else np.zeros(tree.n_atoms)
    ask = market.ask[:, 0] if d else np.zeros(tree.n_atoms)
    children = [[tree.children(t, j) for j in range(tree.sizes[t])] for t in range(T)]
    pmax = float(np.max(ask, initial=1.0))
    counter = [0]
    hit_bound = [False]

    def u_key(slot, c):
        """(domain margin <= 0, weighted utility)"""
        counter[0] += 1
        lo = util.dom_lo[slot]
        margin = 0.0 if not np.isfinite(lo) else min(0.0, c - lo)
        val = util.value_at(slot, c)
        if not np.isfinite(val):
            margin = min(margin, -1e-300) if margin == 0.0 else margin
            return margin, -np.inf
        return margin, probs[slot] * val

    def node(t, j, bank, shares):
        slot = o[t] + j
        if t == T:
            c = bank + bid[slot] * max(shares, 0.0) - ask[slot] * max(-shares, 0.0)
            return u_key(slot, c), (0.0, c)

        def after_trade(delta):
            cost = ask[slot] * max(delta, 0.0) - bid[slot] * max(-delta, 0.0)
            return bank - cost, shares + delta

        def with_consumption(b, h, c):
            m0, v0 = u_key(slot, c)
            m, v = m0, v0
            for ch in children[t][j]:
                (mc, vc), _ = node(t + 1, int(ch), b - c, h)
                m = min(m, mc)
                v = v + vc
            if m < 0:
                v = -np.inf
            return m, v

        if util.kinked[slot]:
            def consume(b, h):
                c = util.dom_lo[slot]
                return with_consumption(b, h, c), c
        else:
            def consume(b, h):
                lo = util.dom_lo[slot]
                span = abs(b) + 2 * bound * pmax * (T + 1) + abs(h) * pmax + 1.0
                c_lo = lo + step if np.isfinite(lo) else -span
                n_c = int(np.ceil((span - c_lo) / step))
                idx, key = _grid_argmax(lambda k: with_consumption(b, h, c_lo + k * step), 0, n_c)
                return key, c_lo + idx * step

        if d == 0:
            key, c = consume(bank, shares)
            return key, (0.0, c)

        def trade_key(k):
            b, h = after_trade(-bound + k * step)
            return consume(b, h)[0]

        k, key = _grid_argmax(trade_key, 0, n_grid)
        if k in (0, n_grid):
            hit_bound[0] = True
        delta = -bound + k * step
        b, h = after_trade(delta)
        return key, (delta, consume(b, h)[1])

    (margin, value), (delta, c0) = node(0, 0, market.eta0, float(market.eta[0]) if d else 0.0)
    if margin < 0:
        value = -np.inf
    return OracleResult(float(value), float(delta), float(c0), step, bound, hit_bound[0], counter[0])

