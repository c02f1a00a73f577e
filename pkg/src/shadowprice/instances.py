"""Random markets and the two binomial fixtures used throughout the tests.

Mid prices are generated as martingales under a random measure, so the
frictionless mid-price market and hence every bid/ask market around it is
free of arbitrage and the utility maximisation has a solution.
"""

from __future__ import annotations

import numpy as np

from .market import MarketSpec, Utility, UtilityProcess, from_mid_price
from .tree import AdaptedProcess, PredictableProcess, ScenarioTree, build_tree

UTILITY_CHOICES = (
    Utility("log"),
    Utility("power", p=0.5),
    Utility("power", p=2.0),
    Utility("exponential", p=1.0),
)


def binomial_fixture(bid0: float, ask0: float, up: float = 1.5, down: float = 0.5,
                     eta0: float = 1.0) -> MarketSpec:
    """One-period, two-state market with log utility of terminal wealth.

    The time-1 prices are ``(up, down)`` with equal probability and no spread.
    """
    tree = build_tree([[(None, 1.0)], [(0, 0.5), (0, 0.5)]])
    bid = AdaptedProcess(tree, [[bid0], [up, down]])
    ask = AdaptedProcess(tree, [[ask0], [up, down]])
    return MarketSpec(tree, bid, ask, eta0, [0.0], UtilityProcess.terminal_wealth(tree, Utility("log")))


def fixture_b1() -> MarketSpec:
    return binomial_fixture(0.9, 1.1)


def fixture_b2() -> MarketSpec:
    return binomial_fixture(0.6, 0.7)


def random_tree(rng: np.random.Generator, T: int, max_children: int = 3,
                min_children: int = 1) -> ScenarioTree:
    spec = [[(None, 1.0)]]
    probs = [1.0]
    for _ in range(T):
        level = []
        for j, pj in enumerate(probs):
            k = int(rng.integers(min_children, max_children + 1))
            w = rng.uniform(0.2, 1.0, size=k)
            level.extend((j, pj * wi / w.sum()) for wi in w)
        spec.append(level)
        probs = [q for _, q in level]
    return build_tree(spec)


def random_mid_price(rng: np.random.Generator, tree: ScenarioTree, d: int,
                     vol: float = 0.4) -> np.ndarray:
    """Flat ``(n, d)`` price that is a martingale under a random equivalent measure."""
    T = tree.horizon
    levels = [rng.uniform(0.5, 2.0, size=(1, d))]
    for t in range(1, T + 1):
        par = tree.parents[t]
        S = np.empty((tree.sizes[t], d))
        for j in range(tree.sizes[t - 1]):
            kids = np.flatnonzero(par == j)
            q = rng.dirichlet(np.ones(kids.size))
            r = rng.uniform(-vol, vol, size=(kids.size, d))
            r -= q @ r
            r *= min(1.0, 0.9 / max(1e-12, float(np.max(-r, initial=0.0))))
            S[kids] = levels[-1][j] * (1.0 + r)
        levels.append(S)
    return np.concatenate(levels, axis=0)


def random_market(rng: np.random.Generator, T_max: int = 4, d_max: int = 2, max_children: int = 3,
                  eps_max: float = 0.3, utilities=UTILITY_CHOICES, d: int | None = None,
                  T: int | None = None, terminal_wealth: bool | None = None,
                  min_children: int = 1) -> MarketSpec:
    """Random bid/ask market around a martingale mid price.

    Cost rates are drawn per atom and asset from ``[0, eps_max]``; the utility
    is either one of ``utilities`` on consumption at every date (with a
    geometric discount) or the same function of terminal wealth.
    """
    T = int(rng.integers(1, T_max + 1)) if T is None else T
    d = int(rng.integers(1, d_max + 1)) if d is None else d
    tree = random_tree(rng, T, max_children, min_children)
    mid = random_mid_price(rng, tree, d)
    eps_ask = rng.uniform(0, eps_max, size=mid.shape)
    eps_bid = rng.uniform(0, min(eps_max, 0.99), size=mid.shape)
    bid, ask = from_mid_price(tree, mid, eps_ask, eps_bid)
    eta0 = float(rng.uniform(0.5, 2.0))
    eta = rng.uniform(0, 1, size=d) * (rng.random(d) < 0.5)
    base = utilities[int(rng.integers(len(utilities)))]
    if terminal_wealth is None:
        terminal_wealth = bool(rng.random() < 0.4)
    if terminal_wealth:
        util = UtilityProcess.terminal_wealth(tree, base)
    else:
        beta = float(rng.uniform(0.8, 1.0))
        util = UtilityProcess.consumption(tree, base, beta ** np.arange(T + 1))
    return MarketSpec(tree, bid, ask, eta0, eta, util)


def random_numeraire(rng: np.random.Generator, tree: ScenarioTree, r_max: float = 0.1) -> PredictableProcess:
    """Bank-account price ``prod (1 + r_s)`` with rates fixed one period ahead."""
    T = tree.horizon
    vals = [np.ones((1, 1)), np.ones((1, 1))]
    for t in range(2, T + 2):
        prev = vals[-1][tree.ancestor(t - 1, t - 2)]
        rate = rng.uniform(0.0, r_max, size=(tree.sizes[t - 1], 1))
        vals.append(prev * (1 + rate))
    return PredictableProcess(tree, vals)


def undiscounted_market(rng: np.random.Generator, **kwargs) -> MarketSpec:
    """Random market expressed in currency units with a stochastic bank account."""
    m = random_market(rng, **kwargs)
    S0 = random_numeraire(rng, m.tree)
    flat = np.concatenate([S0.on_level(t, t) for t in range(m.tree.horizon + 1)])
    return MarketSpec(m.tree, m.bid * flat, m.ask * flat, m.eta0, m.eta, m.utility, numeraire=S0)
