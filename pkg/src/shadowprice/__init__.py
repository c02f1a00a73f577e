"""Optimal investment with proportional transaction costs on scenario trees,
shadow prices read off the Lagrange multipliers, and checks that certify them."""

from .cps import (
    CheckResult,
    ConsistentPriceSystem,
    OracleResult,
    ShadowCertificate,
    brute_force_value,
    budget_constraint,
    build_cps,
    certify,
    check_marginal_utility,
    check_martingale,
    lift_to_frictionless,
)
from .errors import *  # noqa: F401,F403
from .market import (
    MarketSpec,
    PortfolioConsumptionPair,
    Utility,
    UtilityProcess,
    discount_normalize,
    expected_utility,
    from_mid_price,
    is_admissible,
    is_self_financing,
    liquidating_plan,
    plan_from_trades,
    self_financing_residual,
    split_trades,
)
from .marketfile import dump_market, load_market, parse_market
from .program import ConvexProgram, KktResiduals, KktSolution, assemble, eval_program, kkt_residual
from .shadow import ShadowPrice, check_complementarity, extract_shadow_price, implied_lambdas
from .solver import SolverOptions, solve, solve_frictionless
from .tree import (
    AdaptedProcess,
    PredictableProcess,
    ScenarioTree,
    build_tree,
    conditional_expectation,
    uniform_tree,
)

__version__ = "0.1.0"
