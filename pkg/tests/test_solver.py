import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shadowprice.errors import DomainEmpty, MaxIterations, Unbounded
from shadowprice.instances import binomial_fixture, random_market
from shadowprice.market import MarketSpec, Utility, UtilityProcess
from shadowprice.program import assemble, kkt_residual
from shadowprice.solver import SolverOptions, solve, solve_frictionless
from shadowprice.tree import uniform_tree

B2_VALUE = 0.5 * math.log(2.5) + 0.5 * math.log(0.625)


def test_b1_no_trade(b1):
    sol = solve(b1)
    assert np.max(np.abs(sol.net[0])) < 1e-9
    assert sol.c[1:] == pytest.approx([1.0, 1.0], abs=1e-9)
    assert sol.value == pytest.approx(0.0, abs=1e-9)
    # nu is -P u'(c_T) = -(0.5, 0.5); mu carries the terminal prices
    assert sol.nu == pytest.approx([-0.5, -0.5], abs=1e-9)
    assert sol.mu[:, 0] == pytest.approx([-0.75, -0.25], abs=1e-9)
    assert sol.lam_up[0, 0] == pytest.approx(0.1, abs=1e-9)
    assert sol.lam_down[0, 0] == pytest.approx(0.1, abs=1e-9)


def test_b2_buys_at_the_ask(b2):
    sol = solve(b2)
    assert sol.up[0, 0] == pytest.approx(1.875, abs=1e-9)
    assert sol.down[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert sol.c[1:] == pytest.approx([2.5, 0.625], abs=1e-9)
    assert sol.value == pytest.approx(B2_VALUE, abs=1e-12)
    assert sol.residuals.max() <= 1e-9


def test_indifference_price_means_no_trade():
    sol = solve(binomial_fixture(1.0, 1.0))
    assert sol.net[0, 0] == pytest.approx(0.0, abs=1e-9)
    assert sol.value == pytest.approx(0.0, abs=1e-12)


def test_consumption_floor_out_of_reach():
    tree = uniform_tree([2])
    floor = Utility("affine_zero", floor=10.0)
    util = UtilityProcess(tree, [[floor], [Utility("log")] * 2])
    m = MarketSpec(tree, [[0.9], [1.5], [0.5]], [[1.1], [1.5], [0.5]], 1.0, [0.0], util)
    with pytest.raises(DomainEmpty):
        solve(m)


def test_arbitrage_is_unbounded():
    # the stock can be bought for 0.4 and always sells for at least 0.5
    with pytest.raises(Unbounded):
        solve(binomial_fixture(0.3, 0.4))


def test_iteration_cap(b2):
    with pytest.raises(MaxIterations):
        solve(b2, SolverOptions(max_iter=2))


@pytest.mark.parametrize("kw", [{"tol": 0.0}, {"reduction": 1.0}, {"boundary": 1.0}])
def test_bad_options(kw):
    with pytest.raises(ValueError):
        SolverOptions(**kw)


def test_frictionless_at_shadow_price(b2):
    price = np.array([[0.7], [1.5], [0.5]])
    assert solve_frictionless(b2, price).value == pytest.approx(B2_VALUE, abs=1e-12)


def test_frictionless_at_mid_price(b1):
    sol = solve_frictionless(b1, np.array([[1.0], [1.5], [0.5]]))
    assert sol.value == pytest.approx(0.0, abs=1e-12)
    assert sol.net[0, 0] == pytest.approx(0.0, abs=1e-9)


def test_bank_only_consumption_schedule():
    tree = uniform_tree([2])
    disc = [1.0, 0.5]
    m = MarketSpec(tree, np.zeros((3, 0)), np.zeros((3, 0)), 3.0, None,
                   UtilityProcess.consumption(tree, Utility("log"), disc))
    sol = solve(m)
    # maximise log c0 + 0.5 log c1 with c0 + c1 = 3: c0 = 2, c1 = 1
    assert sol.c == pytest.approx([2.0, 1.0, 1.0], abs=1e-9)
    assert sol.value == pytest.approx(math.log(2.0), abs=1e-12)


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_random_solves_are_self_certified(seed):
    m = random_market(np.random.default_rng(seed), T_max=3)
    sol = solve(m)
    assert kkt_residual(assemble(m), sol).max() <= 1e-9
    assert np.all(sol.up >= 0) and np.all(sol.down >= 0)
    assert np.all(sol.nu < 0)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1))
def test_relabelling_atoms_leaves_value_unchanged(seed):
    """Reversing the children of every atom is a relabelling of the same market."""
    from shadowprice.tree import build_tree
    rng = np.random.default_rng(seed)
    m = random_market(rng, T_max=2, d=1)
    tree = m.tree
    T = tree.horizon
    perm = [np.array([0])]
    spec = [[(None, 1.0)]]
    for t in range(1, T + 1):
        par = tree.parents[t]
        order = []
        for j_new, j_old in enumerate(perm[-1]):
            order.extend(np.flatnonzero(par == j_old)[::-1])
        order = np.array(order)
        inv = np.empty_like(perm[-1])
        inv[perm[-1]] = np.arange(perm[-1].size)
        spec.append([(int(inv[par[k]]), float(tree.probs[t][k])) for k in order])
        perm.append(order)
    new_tree = build_tree(spec)
    flat = np.concatenate([tree.offsets[t] + perm[t] for t in range(T + 1)])
    util = UtilityProcess(new_tree, [
        [m.utility.items[i] for i in flat[new_tree.offsets[t]:new_tree.offsets[t + 1]]] for t in range(T + 1)
    ])
    m2 = MarketSpec(new_tree, m.bid[flat], m.ask[flat], m.eta0, m.eta, util)
    assert solve(m2).value == pytest.approx(solve(m).value, abs=1e-9)


def test_log_utility_scales_with_wealth(b2):
    """Doubling the endowment adds log 2 to the log-utility value."""
    tree = b2.tree
    double = MarketSpec(tree, b2.bid, b2.ask, 2.0, [0.0], b2.utility)
    assert solve(double).value == pytest.approx(solve(b2).value + math.log(2.0), abs=1e-10)
