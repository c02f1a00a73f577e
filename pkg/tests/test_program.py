import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shadowprice.errors import ShapeMismatch
from shadowprice.instances import random_market
from shadowprice.market import MarketSpec, Utility, UtilityProcess
from shadowprice.program import KktSolution, assemble, eval_program, kkt_residual
from shadowprice.tree import build_tree, uniform_tree

B2_VALUE = 0.5 * math.log(2.5) + 0.5 * math.log(0.625)


def b2_kkt_point():
    return KktSolution(
        up=np.array([[1.875], [0.0], [0.0]]),
        down=np.array([[0.0], [1.875], [1.875]]),
        c=np.array([0.0, 2.5, 0.625]),
        nu=np.array([-0.2, -0.8]),
        mu=np.array([[-0.3], [-0.4]]),
        lam_up=np.zeros((3, 1)),
        lam_down=np.array([[0.1], [0.0], [0.0]]),
    )


def test_layout_of_binomial(b1):
    lay = assemble(b1).layout()
    assert lay["trade_slots"] == 6
    assert lay["consumption_slots"] == 3
    assert lay["equalities"] == 4


def test_bank_only_market():
    tree = uniform_tree([2])
    m = MarketSpec(tree, np.zeros((3, 0)), np.zeros((3, 0)), 1.0, None,
                   UtilityProcess.consumption(tree, Utility("log")))
    prog = assemble(m)
    assert prog.layout() == {"trade_slots": 0, "consumption_slots": 3, "variables": 3,
                             "equalities": 2, "inequalities": 0}
    vals = eval_program(prog, np.array([0.5, 0.25, 0.5]))
    assert vals.h0.tolist() == [0.25, 0.0]
    assert vals.h.shape == (2, 0)


def test_single_period_tree(b1):
    tree = build_tree([[(None, 1.0)]])
    m = MarketSpec(tree, [[0.9]], [[1.1]], 1.0, [2.0], UtilityProcess(tree, [[Utility("log")]]))
    prog = assemble(m)
    assert prog.layout()["trade_slots"] == 2
    x = prog.pack([[0.0]], [[2.0]], [2.8])
    vals = eval_program(prog, x)
    assert vals.h0 == pytest.approx([0.0])
    assert vals.h.tolist() == [[0.0]]


def test_zero_point(b1):
    prog = assemble(b1)
    vals = eval_program(prog, np.zeros(prog.n_vars))
    assert vals.h0.tolist() == [1.0, 1.0]
    assert vals.h.tolist() == [[0.0], [0.0]]
    assert vals.f == math.inf  # log(0) at T


def test_zero_point_finite_utility():
    tree = uniform_tree([2])
    m = MarketSpec(tree, np.ones((3, 1)), np.ones((3, 1)), 1.0, [0.0],
                   UtilityProcess.consumption(tree, Utility("exponential", p=1.0)))
    prog = assemble(m)
    assert eval_program(prog, np.zeros(prog.n_vars)).f == pytest.approx(2.0)  # -sum P * (-1)


def test_no_trade_liquidation_is_feasible(b1):
    prog = assemble(b1)
    vals = eval_program(prog, prog.pack(np.zeros(3), np.zeros(3), [0.0, 1.0, 1.0]))
    assert not vals.h0.any() and not vals.h.any()
    assert vals.f == 0.0


def test_b2_optimum_values(b2):
    prog = assemble(b2)
    sol = b2_kkt_point()
    vals = eval_program(prog, prog.pack(sol.up, sol.down, sol.c))
    assert np.max(np.abs(vals.h0)) < 1e-15 and np.max(np.abs(vals.h)) < 1e-15
    assert vals.f == pytest.approx(-B2_VALUE, abs=1e-14)
    assert np.all(vals.g_up <= 0) and np.all(vals.g_down <= 0)


def test_analytic_kkt_point(b2):
    assert kkt_residual(assemble(b2), b2_kkt_point()).max() <= 1e-12


def test_zero_duals_leave_marginal_utility(b2):
    sol = b2_kkt_point()
    for name in ("nu", "mu", "lam_up", "lam_down"):
        setattr(sol, name, np.zeros_like(getattr(sol, name)))
    res = kkt_residual(assemble(b2), sol)
    assert res.feasibility < 1e-15
    assert res.stationarity == pytest.approx(0.5 / 0.625)


def test_infeasible_point(b1):
    sol = KktSolution(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(3), np.zeros(2),
                      np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((3, 1)))
    res = kkt_residual(assemble(b1), sol)
    assert res.feasibility == 1.0
    assert res.stationarity == math.inf  # log(0) has no supergradient


def test_shape_mismatch(b1):
    sol = b2_kkt_point()
    sol.nu = np.zeros(3)
    with pytest.raises(ShapeMismatch):
        kkt_residual(assemble(b1), sol)


def _feasible_point(prog, rng):
    """Random interior-ish feasible point: random trades, then consumption on
    the terminal atoms balancing the bank and the share constraints."""
    m = prog.market
    tree = m.tree
    o = tree.offsets
    T = tree.horizon
    up = rng.uniform(0, 0.2, size=(prog.n, prog.d))
    down = rng.uniform(0, 0.2, size=(prog.n, prog.d))
    c = rng.uniform(0.05, 0.1, size=prog.n)
    # close every position at T and consume the rest
    for k in range(tree.n_terminal):
        path = [o[t] + tree.terminal_ancestor(t)[k] for t in range(T)]
        net = m.eta + (up[path] - down[path]).sum(axis=0)
        slot = o[T] + k
        up[slot] = np.maximum(-net, 0) + 0.05
        down[slot] = np.maximum(net, 0) + 0.05
    c[o[T]:] = 0.0
    x = prog.pack(up, down, c)
    c[o[T]:] = prog.constraints(x)[:tree.n_terminal] * m.bank_price()[o[T]:]
    return prog.pack(up, down, c)


@given(st.integers(0, 2**32 - 1))
def test_objective_convex_and_constraints_affine(seed):
    rng = np.random.default_rng(seed)
    m = random_market(rng, T_max=3, eps_max=0.05, utilities=(Utility("exponential", p=1.0), Utility("log")))
    prog = assemble(m)
    x, y = _feasible_point(prog, rng), _feasible_point(prog, rng)
    hx, hy = prog.constraints(x), prog.constraints(y)
    assert np.max(np.abs(hx)) < 1e-12
    assert np.allclose(prog.constraints(0.3 * x + 0.7 * y), 0.3 * hx + 0.7 * hy, atol=1e-12)
    fx, fy, fm = prog.objective(x), prog.objective(y), prog.objective(0.5 * (x + y))
    if np.isfinite(fx) and np.isfinite(fy):
        assert fm <= 0.5 * (fx + fy) + 1e-12
