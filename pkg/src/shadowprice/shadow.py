"""Shadow prices from the Lagrange multipliers of the transaction-cost program.

On every atom ``F_t^j`` the purchase and sale stationarity conditions read::

    lam_up   = sum mu - (sum nu) * ask >= 0
    lam_down = (sum nu) * bid - sum mu >= 0

with sums over the terminal atoms below ``F_t^j``.  Since ``sum nu < 0`` both
collapse into ``bid <= sum mu / sum nu <= ask``; that ratio is the shadow price.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsViolation, MarketError, NegativeLambda, NonnegativeNu
from .market import MarketSpec
from .program import KktSolution
from .tree import AdaptedProcess, ScenarioTree

ACTIVITY_THRESHOLD = 1e-7
CLAMP_TOL = 1e-8

FORCED_ASK, FORCED_BID, INTERIOR, PINCHED = "forced_ask", "forced_bid", "interior", "pinched"


@dataclass
class ShadowPrice:
    """Shadow price ``S~`` (flat ``(n, d)``) with per-slot provenance.

    ``nu`` and ``mu`` are the multipliers carried over unchanged; the bound
    multipliers of the frictionless program at ``S~`` are identically zero.
    """

    tree: ScenarioTree
    values: np.ndarray
    provenance: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    unique: bool = True
    max_overshoot: float = 0.0

    @property
    def process(self) -> AdaptedProcess:
        return AdaptedProcess.from_flat(self.tree, self.values)

    @property
    def lam_up(self) -> np.ndarray:
        return np.zeros_like(self.values)

    @property
    def lam_down(self) -> np.ndarray:
        return np.zeros_like(self.values)

    def at(self, t: int) -> np.ndarray:
        o = self.tree.offsets
        return self.values[o[t]:o[t + 1]]


def _require_discounted(market: MarketSpec):
    if not market.discounted:
        raise MarketError("normalise the market (discount_normalize) before extracting shadow prices")


def multiplier_sums(tree: ScenarioTree, nu, mu):
    """``(sum nu, sum mu)`` over the terminal atoms below every atom, flat layout."""
    T = tree.horizon
    nu = np.asarray(nu, dtype=float)
    mu = np.asarray(mu, dtype=float).reshape(tree.n_terminal, -1)
    snu = np.concatenate([tree.sum_to_level(nu, T, t) for t in range(T + 1)])
    smu = np.concatenate([tree.sum_to_level(mu, T, t) for t in range(T + 1)], axis=0)
    return snu, smu


def extract_shadow_price(market: MarketSpec, solution: KktSolution,
                         activity: float = ACTIVITY_THRESHOLD,
                         clamp_tol: float = CLAMP_TOL) -> ShadowPrice:
    """Shadow price ``sum mu / sum nu`` on every atom, clamped into the spread.

    Raises
    ------
    NonnegativeNu
        Some ``nu`` is not strictly negative.
    BoundsViolation
        The ratio leaves ``[bid, ask]`` by more than ``clamp_tol``.
    """
    _require_discounted(market)
    tree = market.tree
    if np.any(solution.nu >= 0):
        k = int(np.argmax(solution.nu))
        raise NonnegativeNu(f"nu[{k}] = {solution.nu[k]:g} is not negative")
    snu, smu = multiplier_sums(tree, solution.nu, solution.mu)
    ratio = smu / snu[:, None]
    over = np.maximum(market.bid - ratio, ratio - market.ask)
    worst = float(np.max(over, initial=0.0))
    if worst > clamp_tol:
        n, i = np.unravel_index(int(np.argmax(over)), over.shape)
        t = int(np.searchsorted(tree.offsets, n, side="right") - 1)
        raise BoundsViolation(
            f"shadow price leaves the spread by {worst:.3g} at t={t}, atom {n - tree.offsets[t]}, asset {i}"
        )
    values = np.clip(ratio, market.bid, market.ask)

    prov = np.full(values.shape, INTERIOR, dtype=object)
    prov[solution.down > activity] = FORCED_BID
    prov[solution.up > activity] = FORCED_ASK
    prov[market.pinched()] = PINCHED
    return ShadowPrice(
        tree, values, prov.astype(str), solution.nu.copy(), solution.mu.copy(),
        unique=not solution.degenerate_duals, max_overshoot=max(worst, 0.0),
    )


@dataclass
class ComplementarityReport:
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def check_complementarity(market: MarketSpec, solution: KktSolution, shadow: ShadowPrice,
                          tol: float = ACTIVITY_THRESHOLD) -> ComplementarityReport:
    """Purchases must happen at ``S~ = ask``, sales at ``S~ = bid``.

    Each violation is ``(t, j, i, side, gap)``.
    """
    tree = market.tree
    S = shadow.values
    levels = tree.flat_levels()
    out = []
    for side, traded, ref in (("buy", solution.up, market.ask), ("sell", solution.down, market.bid)):
        gap = np.abs(S - ref)
        for n, i in zip(*np.nonzero((traded > tol) & (gap > tol))):
            t = int(levels[n])
            out.append((t, int(n - tree.offsets[t]), int(i), side, float(gap[n, i])))
    return ComplementarityReport(out)


def implied_lambdas(market: MarketSpec, solution: KktSolution, tol: float = CLAMP_TOL):
    """Bound multipliers recomputed from ``nu`` and ``mu`` alone.

    Returns ``(lam_up, lam_down)`` in the flat ``(n, d)`` layout.
    """
    _require_discounted(market)
    if np.any(solution.nu >= 0):
        raise NonnegativeNu("implied multipliers need nu < 0")
    snu, smu = multiplier_sums(market.tree, solution.nu, solution.mu)
    lam_up = smu - snu[:, None] * market.ask
    lam_down = snu[:, None] * market.bid - smu
    low = min(lam_up.min(initial=0.0), lam_down.min(initial=0.0))
    if low < -tol:
        raise NegativeLambda(f"implied bound multiplier {low:.3g} is negative")
    return lam_up, lam_down
