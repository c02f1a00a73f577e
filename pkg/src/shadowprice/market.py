"""Bid/ask markets on a scenario tree, utility processes and plan bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidCostRate, MarketError, NonpositiveNumeraire, ShapeMismatch
from .tree import AdaptedProcess, PredictableProcess, ScenarioTree

SELF_FINANCING_TOL = 1e-9

LOG, POWER, EXPONENTIAL, TERMINAL_WEALTH, AFFINE_ZERO = range(5)
KINDS = {
    "log": LOG,
    "power": POWER,
    "exponential": EXPONENTIAL,
    "terminal_wealth_indicator": TERMINAL_WEALTH,
    "affine_zero": AFFINE_ZERO,
}
KIND_NAMES = {v: k for k, v in KINDS.items()}


@dataclass(frozen=True)
class Utility:
    """One-period utility ``x -> scale * base(argscale * x)``.

    ``base`` is ``log``, ``y**(1-p)/(1-p)``, ``-exp(-p*y)/p`` or the 0/-inf
    indicator of ``[floor, inf)``.  ``terminal_wealth_indicator`` is the
    indicator with ``floor = 0``.  ``scale`` carries discount factors and
    ``argscale`` a change of numeraire.
    """

    kind: str
    p: float = 0.0
    scale: float = 1.0
    argscale: float = 1.0
    floor: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MarketError(f"unknown utility kind {self.kind!r}")
        if self.kind == "power" and not (self.p > 0 and self.p != 1):
            raise MarketError(f"power utility needs p > 0, p != 1, got {self.p}")
        if self.kind == "exponential" and not self.p > 0:
            raise MarketError(f"exponential utility needs p > 0, got {self.p}")
        if self.kind == "terminal_wealth_indicator" and self.floor != 0.0:
            raise MarketError("terminal_wealth_indicator has floor 0")
        if not (self.scale > 0 and self.argscale > 0):
            raise MarketError("utility scale and argscale must be positive")

    @property
    def strictly_increasing(self) -> bool:
        return self.kind not in ("terminal_wealth_indicator", "affine_zero")


class UtilityProcess:
    """Utilities ``u_t^j`` for every atom, stored flat in breadth-first order.

    Evaluation is vectorised over atoms.  All methods take a flat consumption
    vector of length ``tree.n_atoms``.
    """

    def __init__(self, tree: ScenarioTree, utilities: Sequence[Sequence[Utility]]):
        if len(utilities) != tree.horizon + 1:
            raise ShapeMismatch(f"expected utilities for {tree.horizon + 1} levels")
        flat = []
        for t, level in enumerate(utilities):
            if len(level) != tree.sizes[t]:
                raise ShapeMismatch(f"level {t}: expected {tree.sizes[t]} utilities")
            flat.extend(level)
        for u in utilities[-1]:
            if not u.strictly_increasing:
                raise MarketError(f"utility at T must be strictly increasing, got {u.kind}")
        self.tree = tree
        self.items = tuple(flat)
        self.kind = np.array([KINDS[u.kind] for u in flat])
        self.p = np.array([u.p for u in flat], dtype=float)
        self.scale = np.array([u.scale for u in flat], dtype=float)
        self.argscale = np.array([u.argscale for u in flat], dtype=float)
        self.floor = np.array([u.floor for u in flat], dtype=float)
        base_lo = np.where(self.kind == EXPONENTIAL, -np.inf, 0.0)
        base_lo = np.where((self.kind == TERMINAL_WEALTH) | (self.kind == AFFINE_ZERO), self.floor, base_lo)
        self.dom_lo = base_lo / self.argscale
        # closed domain: the utility is finite at dom_lo
        self.closed = (
            (self.kind == TERMINAL_WEALTH)
            | (self.kind == AFFINE_ZERO)
            | ((self.kind == POWER) & (self.p < 1))
        )
        self.kinked = (self.kind == TERMINAL_WEALTH) | (self.kind == AFFINE_ZERO)

    @classmethod
    def consumption(cls, tree: ScenarioTree, base: Utility, discount=None) -> "UtilityProcess":
        """``u_t = D_t * base`` at every atom; ``discount`` is a per-time sequence."""
        D = np.ones(tree.horizon + 1) if discount is None else np.asarray(discount, dtype=float)
        if D.shape != (tree.horizon + 1,) or np.any(D <= 0):
            raise MarketError("discount factors must be positive, one per time")
        return cls(tree, [
            [Utility(base.kind, base.p, base.scale * D[t], base.argscale, base.floor)] * int(m)
            for t, m in enumerate(tree.sizes)
        ])

    @classmethod
    def terminal_wealth(cls, tree: ScenarioTree, base: Utility) -> "UtilityProcess":
        """Utility from terminal wealth only: indicator of ``[0, inf)`` before ``T``."""
        ind = Utility("terminal_wealth_indicator")
        levels = [[ind] * int(m) for m in tree.sizes[:-1]]
        levels.append([base] * int(tree.sizes[-1]))
        return cls(tree, levels)

    def levels(self) -> list[list[Utility]]:
        o = self.tree.offsets
        return [list(self.items[o[t]:o[t + 1]]) for t in range(self.tree.horizon + 1)]

    def rescaled(self, factor) -> "UtilityProcess":
        """Utility process ``x -> u(factor * x)`` (``factor`` flat, positive)."""
        factor = np.broadcast_to(np.asarray(factor, dtype=float), (self.tree.n_atoms,))
        new = [
            Utility(u.kind, u.p, u.scale, u.argscale * k, u.floor)
            for u, k in zip(self.items, factor)
        ]
        o = self.tree.offsets
        return UtilityProcess(self.tree, [new[o[t]:o[t + 1]] for t in range(self.tree.horizon + 1)])

    def _y(self, c):
        return self.argscale * np.asarray(c, dtype=float)

    def value(self, c) -> np.ndarray:
        y = self._y(c)
        out = np.full(y.shape, -np.inf)
        k, p = self.kind, self.p
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            m = (k == LOG) & (y > 0)
            out[m] = np.log(y[m])
            m = (k == POWER) & ((y > 0) | ((y == 0) & (p < 1)))
            out[m] = y[m] ** (1 - p[m]) / (1 - p[m])
            m = k == EXPONENTIAL
            out[m] = -np.exp(-p[m] * y[m]) / p[m]
            m = ((k == TERMINAL_WEALTH) | (k == AFFINE_ZERO)) & (y >= self.floor)
            out[m] = 0.0
        fin = np.isfinite(out)
        out[fin] *= self.scale[fin]
        return out

    def value_at(self, slot: int, x: float) -> float:
        """Scalar ``u`` of a single atom (no array overhead)."""
        y = self.argscale[slot] * x
        kind, p = self.kind[slot], self.p[slot]
        if kind == LOG:
            v = math.log(y) if y > 0 else -math.inf
        elif kind == POWER:
            if y > 0 or (y == 0 and p < 1):
                v = y ** (1 - p) / (1 - p)
            else:
                v = -math.inf
        elif kind == EXPONENTIAL:
            v = -math.exp(min(-p * y, 700.0)) / p
        else:
            v = 0.0 if y >= self.floor[slot] else -math.inf
        return self.scale[slot] * v if math.isfinite(v) else v

    def derivative(self, c) -> np.ndarray:
        """``u'`` where differentiable; 0 on the flat part of indicators."""
        y = self._y(c)
        k, p = self.kind, self.p
        out = np.full(y.shape, np.nan)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            m = k == LOG
            out[m] = 1.0 / y[m]
            m = k == POWER
            out[m] = y[m] ** (-p[m])
            m = k == EXPONENTIAL
            out[m] = np.exp(-p[m] * y[m])
            m = (k == TERMINAL_WEALTH) | (k == AFFINE_ZERO)
            out[m] = 0.0
        return out * self.scale * self.argscale

    def second_derivative(self, c) -> np.ndarray:
        y = self._y(c)
        k, p = self.kind, self.p
        out = np.zeros(y.shape)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            m = k == LOG
            out[m] = -1.0 / y[m] ** 2
            m = k == POWER
            out[m] = -p[m] * y[m] ** (-p[m] - 1)
            m = k == EXPONENTIAL
            out[m] = -p[m] * np.exp(-p[m] * y[m])
        return out * self.scale * self.argscale**2

    def supergradient(self, c) -> tuple[np.ndarray, np.ndarray]:
        """Supergradient interval ``[lo, hi]`` of each ``u_t^j`` at ``c``.

        Empty intervals (``c`` outside the domain, or a vertical tangent at the
        boundary) are returned as ``(nan, nan)`` resp. ``(inf, inf)``.
        """
        c = np.asarray(c, dtype=float)
        g = self.derivative(c)
        lo, hi = g.copy(), g.copy()
        inside = np.isfinite(self.value(c))
        at_kink = self.kinked & (c <= self.dom_lo)
        hi[at_kink & inside] = np.inf
        lo[~inside] = np.nan
        hi[~inside] = np.nan
        return lo, hi


def _as_flat(tree: ScenarioTree, x, dim: int | None = None) -> np.ndarray:
    """Flat view of ``x``: a vector when ``dim`` is None, else ``(n, dim)``."""
    if isinstance(x, AdaptedProcess):
        x = x.flat()
    x = np.asarray(x, dtype=float)
    if x.shape[0] != tree.n_atoms:
        raise ShapeMismatch(f"expected {tree.n_atoms} atoms, got {x.shape[0]}")
    if dim is None:
        return x.reshape(tree.n_atoms)
    return x.reshape(tree.n_atoms, dim)


class MarketSpec:
    """Bid/ask market with bank account, endowment and utility process.

    Parameters
    ----------
    tree : ScenarioTree
    bid, ask : AdaptedProcess or array, shape (n_atoms, d)
        Discounted bid/ask prices (undiscounted if ``numeraire`` is given).
    eta0 : float
        Initial bank holding.
    eta : array, shape (d,)
        Initial share holdings.
    utility : UtilityProcess
    numeraire : AdaptedProcess, PredictableProcess or array, optional
        Bank-account price ``S^0_t`` on every level-``t`` atom; ``None`` means
        the market is already discounted.
    """

    def __init__(self, tree, bid, ask, eta0, eta, utility, numeraire=None):
        self.tree = tree
        bid = bid.flat() if isinstance(bid, AdaptedProcess) else np.asarray(bid, dtype=float)
        ask = ask.flat() if isinstance(ask, AdaptedProcess) else np.asarray(ask, dtype=float)
        if bid.ndim == 1:
            bid = bid.reshape(tree.n_atoms, -1) if bid.size else bid.reshape(tree.n_atoms, 0)
        if ask.ndim == 1:
            ask = ask.reshape(tree.n_atoms, -1) if ask.size else ask.reshape(tree.n_atoms, 0)
        if bid.shape != ask.shape or bid.shape[0] != tree.n_atoms:
            raise ShapeMismatch(f"bid {bid.shape} / ask {ask.shape} do not match the tree")
        if not np.all(bid > 0):
            raise MarketError("bid prices must be strictly positive")
        if not np.all(ask >= bid):
            raise MarketError("ask prices must not be below bid prices")
        self.d = bid.shape[1]
        eta = np.zeros(self.d) if eta is None else np.atleast_1d(np.asarray(eta, dtype=float))
        if eta.shape != (self.d,):
            raise ShapeMismatch(f"endowment has {eta.size} assets, market has {self.d}")
        if eta0 < 0 or np.any(eta < 0):
            raise MarketError("initial endowment must be nonnegative")
        if not isinstance(utility, UtilityProcess) or utility.tree is not tree:
            raise ShapeMismatch("utility process must live on the market tree")
        self.bid = bid
        self.ask = ask
        self.eta0 = float(eta0)
        self.eta = eta
        self.utility = utility
        self.numeraire = None if numeraire is None else _numeraire_flat(tree, numeraire)

    @property
    def discounted(self) -> bool:
        return self.numeraire is None

    def bank_price(self) -> np.ndarray:
        return np.ones(self.tree.n_atoms) if self.numeraire is None else self.numeraire

    def pinched(self, tol: float = 0.0) -> np.ndarray:
        """Slots ``(atom, asset)`` where bid and ask coincide."""
        return (self.ask - self.bid) <= tol

    def with_prices(self, bid, ask) -> "MarketSpec":
        return MarketSpec(self.tree, bid, ask, self.eta0, self.eta, self.utility, self.numeraire)

    def frictionless(self, price) -> "MarketSpec":
        return self.with_prices(price, price)

    def normalized(self) -> "MarketSpec":
        if self.numeraire is None:
            return self
        return discount_normalize(
            self.tree, self.numeraire, self.bid, self.ask, self.utility, self.eta0, self.eta
        )


def _numeraire_flat(tree, S0) -> np.ndarray:
    if isinstance(S0, PredictableProcess):
        if not all(np.all(v > 0) for v in S0.values):
            raise NonpositiveNumeraire("bank-account price must be strictly positive")
        flat = np.concatenate([S0.on_level(t, t)[:, 0] for t in range(tree.horizon + 1)])
    else:
        flat = _as_flat(tree, S0)
    if not np.all(flat > 0):
        raise NonpositiveNumeraire("bank-account price must be strictly positive")
    return flat


@dataclass
class PortfolioConsumptionPair:
    """Bank holdings, share holdings (both predictable) and consumption (adapted)."""

    bank: PredictableProcess
    stock: PredictableProcess
    consumption: AdaptedProcess

    def check_shapes(self, market: MarketSpec):
        tree = market.tree
        if not (self.bank.tree is tree and self.stock.tree is tree and self.consumption.tree is tree):
            raise ShapeMismatch("pair lives on a different tree")
        if self.bank.dim != 1 or self.consumption.dim != 1 or self.stock.dim != market.d:
            raise ShapeMismatch("pair dimensions do not match the market")


def from_mid_price(tree: ScenarioTree, mid, eps_ask: float, eps_bid: float):
    """Bid/ask processes ``((1-eps_bid) S, (1+eps_ask) S)`` from a mid price."""
    eps_ask = np.asarray(eps_ask, dtype=float)
    eps_bid = np.asarray(eps_bid, dtype=float)
    if np.any(eps_ask < 0) or np.any(np.isnan(eps_ask)):
        raise InvalidCostRate(f"ask cost rate must be >= 0, got {eps_ask}")
    if np.any(eps_bid < 0) or np.any(eps_bid >= 1) or np.any(np.isnan(eps_bid)):
        raise InvalidCostRate(f"bid cost rate must lie in [0, 1), got {eps_bid}")
    S = mid.flat() if isinstance(mid, AdaptedProcess) else np.asarray(mid, dtype=float)
    S = S.reshape(tree.n_atoms, -1)
    if not np.all(S > 0):
        raise MarketError("mid price must be strictly positive")
    return (
        AdaptedProcess.from_flat(tree, (1 - eps_bid) * S),
        AdaptedProcess.from_flat(tree, (1 + eps_ask) * S),
    )


def split_trades(phi: PredictableProcess):
    """Split share holdings into purchases and sales.

    Returns ``(d_up, d_down, up, down)``, all predictable processes on times
    ``0..T+1``: ``d_up_t = (phi_t - phi_{t-1})^+``, ``d_down_t`` the negative
    part (both zero at time 0), and the cumulative ``up_t = phi_0^+ + sum d_up``,
    ``down_t = phi_0^- + sum d_down``.  ``up - down == phi`` at every time.
    """
    tree = phi.tree
    T = tree.horizon
    d_up = [np.zeros_like(phi[0])]
    d_down = [np.zeros_like(phi[0])]
    up = [np.maximum(phi[0], 0.0)]
    down = [np.maximum(-phi[0], 0.0)]
    for t in range(1, T + 2):
        base = max(t - 1, 0)
        prev_level = max(t - 2, 0)
        anc = tree.ancestor(base, prev_level)
        delta = phi[t] - phi[t - 1][anc]
        d_up.append(np.maximum(delta, 0.0))
        d_down.append(np.maximum(-delta, 0.0))
        up.append(up[-1][anc] + d_up[-1])
        down.append(down[-1][anc] + d_down[-1])
    return tuple(PredictableProcess(tree, v) for v in (d_up, d_down, up, down))


def self_financing_residual(market: MarketSpec, pair: PortfolioConsumptionPair) -> AdaptedProcess:
    """Bookkeeping residual ``S0_t dphi0_{t+1} - (bid' d_down - ask' d_up - c_t)`` per atom."""
    pair.check_shapes(market)
    tree = market.tree
    d_bank = pair.bank.increments()[:, 0]
    dphi = pair.stock.increments()
    d_up, d_down = np.maximum(dphi, 0.0), np.maximum(-dphi, 0.0)
    c = pair.consumption.flat()[:, 0]
    proceeds = np.sum(market.bid * d_down, axis=1) - np.sum(market.ask * d_up, axis=1)
    res = market.bank_price() * d_bank - (proceeds - c)
    return AdaptedProcess.from_flat(tree, res)


def is_self_financing(market: MarketSpec, pair: PortfolioConsumptionPair) -> AdaptedProcess:
    """Residual of the self-financing identity; the pair is self-financing iff
    its max-norm is at most ``SELF_FINANCING_TOL``."""
    return self_financing_residual(market, pair)


@dataclass
class AdmissibilityReport:
    admissible: bool
    reasons: list[str] = field(default_factory=list)
    max_residual: float = 0.0

    def __bool__(self):
        return self.admissible


def is_admissible(market: MarketSpec, pair: PortfolioConsumptionPair, tol: float = SELF_FINANCING_TOL) -> AdmissibilityReport:
    pair.check_shapes(market)
    reasons = []
    res = float(np.max(np.abs(self_financing_residual(market, pair).flat())))
    if res > tol:
        reasons.append("NotSelfFinancing")
    start = np.concatenate([pair.bank[0][0], pair.stock[0][0]])
    if np.max(np.abs(start - np.concatenate([[market.eta0], market.eta]))) > tol:
        reasons.append("InitialEndowmentMismatch")
    T1 = market.tree.horizon + 1
    if np.max(np.abs(pair.bank[T1]), initial=0.0) > tol:
        reasons.append("TerminalBankNonzero")
    if np.max(np.abs(pair.stock[T1]), initial=0.0) > tol:
        reasons.append("TerminalPositionNonzero")
    return AdmissibilityReport(not reasons, reasons, res)


def expected_utility(market: MarketSpec, c) -> float:
    """``sum_t sum_j P(F_t^j) u_t^j(c_t^j)``; ``-inf`` outside the utility domain."""
    c = _as_flat(market.tree, c)
    u = market.utility.value(c)
    if not np.all(np.isfinite(u)):
        return -np.inf
    return float(np.dot(market.tree.flat_probs(), u))


def plan_from_trades(market: MarketSpec, net_trades, consumption) -> PortfolioConsumptionPair:
    """Assemble the pair generated by net trades and consumption.

    ``net_trades`` has one row per atom (flat layout): the change of holdings
    decided on that atom.  The bank account is derived from the self-financing
    identity, so the result is self-financing by construction; it is admissible
    iff the trades liquidate every position and the terminal consumption
    exhausts the bank account.
    """
    tree = market.tree
    T = tree.horizon
    o = tree.offsets
    net = _as_flat(tree, net_trades, dim=market.d)
    c = _as_flat(tree, consumption)
    up, down = np.maximum(net, 0.0), np.maximum(-net, 0.0)
    flow = (np.sum(market.bid * down, axis=1) - np.sum(market.ask * up, axis=1) - c) / market.bank_price()
    stock = [market.eta.reshape(1, -1)]
    bank = [np.array([[market.eta0]])]
    for t in range(T + 1):
        prev = stock[-1][tree.ancestor(t, max(t - 1, 0))]
        stock.append(prev + net[o[t]:o[t + 1]])
        prevb = bank[-1][tree.ancestor(t, max(t - 1, 0))]
        bank.append(prevb + flow[o[t]:o[t + 1], None])
    return PortfolioConsumptionPair(
        PredictableProcess(tree, bank),
        PredictableProcess(tree, stock),
        AdaptedProcess.from_flat(tree, c),
    )


def liquidating_plan(market: MarketSpec, positions: PredictableProcess, consumption) -> PortfolioConsumptionPair:
    """Admissible pair holding ``positions[1..T]`` with the given consumption
    before ``T``; the position is sold off at ``T`` and the terminal consumption
    is whatever the bank account then holds.

    ``positions[0]`` must equal the endowment; ``positions[T+1]`` is ignored.
    """
    tree = market.tree
    T = tree.horizon
    o = tree.offsets
    hold = [np.asarray(positions[t]) for t in range(T + 1)] + [np.zeros((tree.sizes[T], market.d))]
    phi = PredictableProcess(tree, hold)
    net = phi.increments()
    c = _as_flat(tree, consumption).copy()
    c[o[T]:] = 0.0
    draft = plan_from_trades(market, net, c)
    c[o[T]:] = draft.bank[T + 1][:, 0] * market.bank_price()[o[T]:]
    return plan_from_trades(market, net, c)


def discount_normalize(tree: ScenarioTree, numeraire, bid, ask, utility: UtilityProcess,
                       eta0: float = 0.0, eta=None) -> MarketSpec:
    """Express an undiscounted market in units of the bank account.

    Prices are divided by ``S^0`` and the utility is replaced by
    ``x -> u_t(S^0_t x)``, so ``c`` and ``c / S^0`` give the same expected utility.
    """
    S0 = _numeraire_flat(tree, numeraire)
    bid = bid.flat() if isinstance(bid, AdaptedProcess) else np.asarray(bid, dtype=float).reshape(tree.n_atoms, -1)
    ask = ask.flat() if isinstance(ask, AdaptedProcess) else np.asarray(ask, dtype=float).reshape(tree.n_atoms, -1)
    return MarketSpec(
        tree, bid / S0[:, None], ask / S0[:, None], eta0, eta, utility.rescaled(S0)
    )
