import math

import numpy as np
import pytest

from shadowprice.cps import (
    brute_force_value,
    budget_constraint,
    build_cps,
    certify,
    check_marginal_utility,
    check_martingale,
    lift_to_frictionless,
    solution_pair,
)
from shadowprice.errors import InstanceTooLarge
from shadowprice.instances import binomial_fixture, random_market
from shadowprice.market import MarketSpec, Utility, UtilityProcess, plan_from_trades
from shadowprice.shadow import extract_shadow_price
from shadowprice.solver import solve
from shadowprice.tree import build_tree, uniform_tree

B2_VALUE = 0.5 * math.log(2.5) + 0.5 * math.log(0.625)


def _cps(m):
    sol = solve(m)
    sh = extract_shadow_price(m, sol)
    return sol, sh, build_cps(m.tree, sol.nu, sh)


def test_b2_measure(b2):
    _, _, cps = _cps(b2)
    assert cps.Q == pytest.approx([0.2, 0.8], abs=1e-9)
    assert cps.Z_at(0)[0] == pytest.approx(1.0, abs=1e-12)
    assert cps.Z_at(1) == pytest.approx([0.4, 1.6], abs=1e-9)
    assert check_martingale(b2.tree, cps) <= 1e-12


def test_b1_measure(b1):
    _, _, cps = _cps(b1)
    assert cps.Q == pytest.approx([0.5, 0.5], abs=1e-9)
    assert cps.Z == pytest.approx(np.ones(3), abs=1e-9)
    assert check_martingale(b1.tree, cps) <= 1e-12


def test_single_atom_measure():
    tree = build_tree([[(None, 1.0)]])
    cps = build_cps(tree, [-0.3], np.zeros((1, 0)))
    assert cps.Q.tolist() == [1.0]
    assert cps.alpha == pytest.approx(0.3)
    assert cps.Z.tolist() == [1.0]


def test_constant_price_is_a_martingale():
    tree = uniform_tree([3, 2])
    nu = -np.random.default_rng(0).uniform(0.1, 1.0, tree.n_terminal)
    cps = build_cps(tree, nu, np.full((tree.n_atoms, 2), 1.7))
    assert check_martingale(tree, cps) <= 1e-14


def test_marginal_utility_membership(b2):
    sol, _, cps = _cps(b2)
    report = check_marginal_utility(b2, cps, sol.c)
    assert report.passed and report.max_violation <= 1e-9
    # at t = 0 consumption sits on the indicator kink: only the lower bound binds
    assert cps.Z_at(0)[0] == pytest.approx(1.0)
    bad = check_marginal_utility(b2, cps, sol.c, alpha=2 * cps.alpha)
    assert [v[:2] for v in bad.violations] == [(1, 0), (1, 1)]


def test_marginal_utility_detects_wrong_alpha_everywhere():
    m = random_market(np.random.default_rng(5), T=2, terminal_wealth=False,
                      utilities=(Utility("log"),))
    sol, _, cps = _cps(m)
    assert check_marginal_utility(m, cps, sol.c).passed
    bad = check_marginal_utility(m, cps, sol.c, alpha=2 * cps.alpha)
    assert len(bad.violations) == m.tree.n_atoms


def test_budget_examples(b1, b2):
    for m in (b1, b2):
        sol, sh, cps = _cps(m)
        assert budget_constraint(m.tree, solution_pair(m, sol), cps) <= 1e-12
    tree = b1.tree
    broke = MarketSpec(tree, b1.bid, b1.ask, 0.0, [0.0],
                       UtilityProcess.terminal_wealth(tree, Utility("exponential", p=1.0)))
    pair = plan_from_trades(broke, np.zeros((3, 1)), np.zeros(3))
    _, _, cps = _cps(b1)
    assert budget_constraint(tree, pair, cps) == 0.0


def test_lift_examples(b1, b2):
    sol, sh, _ = _cps(b2)
    pair = solution_pair(b2, sol)
    lifted = lift_to_frictionless(b2, pair, sh)
    assert lifted.consumption.flat() == pytest.approx(pair.consumption.flat(), abs=1e-12)

    idle = plan_from_trades(b1, np.zeros((3, 1)), [0.0, 1.0, 1.0])
    assert np.array_equal(lift_to_frictionless(b1, idle, np.ones((3, 1))).consumption.flat(),
                          idle.consumption.flat())

    # sell 1 share at the bid 0.6 where the shadow price is the ask 0.7
    clumsy = MarketSpec(b2.tree, b2.bid, b2.ask, 1.0, [1.0], b2.utility)
    pair = plan_from_trades(clumsy, [[-1.0], [0.0], [0.0]], [0.0, 1.6, 1.6])
    lifted = lift_to_frictionless(clumsy, pair, sh)
    gain = lifted.consumption.flat()[:, 0] - pair.consumption.flat()[:, 0]
    assert gain == pytest.approx([0.1, 0.0, 0.0], abs=1e-12)


def test_certify_fixtures(b1, b2):
    c1 = certify(b1)
    assert c1.valid and c1.value_costs == pytest.approx(0.0, abs=1e-9)
    assert c1.value_frictionless == pytest.approx(0.0, abs=1e-9)
    assert c1.shadow.values[0, 0] == pytest.approx(1.0, abs=1e-9)
    c2 = certify(b2)
    assert c2.valid, c2.failing
    assert c2.value_costs == pytest.approx(B2_VALUE, abs=1e-12)
    assert c2.value_frictionless == pytest.approx(B2_VALUE, abs=1e-9)
    assert c2.shadow.values[0, 0] == pytest.approx(0.7, abs=1e-9)


def test_certify_frictionless_market():
    m = random_market(np.random.default_rng(8), eps_max=0.0, T=2)
    cert = certify(m)
    assert cert.valid
    assert np.max(np.abs(cert.shadow.values - m.bid)) <= 1e-10
    assert cert.value_frictionless == pytest.approx(cert.value_costs, abs=1e-9)


def test_certificate_flags_failures(b2):
    cert = certify(b2)
    cert.checks["martingale"].passed = False
    assert not cert.valid and cert.failing == ["martingale"]


def test_oracle_fixtures(b1, b2):
    assert brute_force_value(b1, bound=3.0, step=1e-4).value == pytest.approx(0.0, abs=1e-4)
    res = brute_force_value(b2, bound=3.0, step=1e-4)
    assert res.value == pytest.approx(B2_VALUE, abs=1e-4)
    assert res.root_trade == pytest.approx(1.875, abs=1e-4)
    assert not res.bound_active


def test_oracle_bank_only():
    tree = uniform_tree([2])
    m = MarketSpec(tree, np.zeros((3, 0)), np.zeros((3, 0)), 3.0, None,
                   UtilityProcess.consumption(tree, Utility("log"), [1.0, 0.5]))
    assert brute_force_value(m, bound=3.0, step=1e-3).value == pytest.approx(math.log(2.0), abs=1e-5)


def test_oracle_refuses_large_instances():
    m = random_market(np.random.default_rng(0), T=3, d=1)
    with pytest.raises(InstanceTooLarge):
        brute_force_value(m)
    with pytest.raises(InstanceTooLarge):
        brute_force_value(random_market(np.random.default_rng(0), T=1, d=2))


def test_oracle_reports_active_bound():
    res = brute_force_value(binomial_fixture(0.6, 0.7), bound=1.0, step=1e-3)
    assert res.bound_active
    assert res.value < B2_VALUE
