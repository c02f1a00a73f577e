"""Certificate reports: a human-readable text form and a JSON document.

The JSON document carries numbers to 12 significant digits, writes
non-finite numbers as the strings ``"inf"``, ``"-inf"`` and ``"nan"``, and
parses back to an equal :class:`Report`.  Wall time is only shown in the
text form so that structured output is byte-for-byte reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cps import ShadowCertificate

FORMAT = "shadowprice-certificate/1"
DIGITS = 12


def _num(x) -> float:
    x = float(x)
    if not math.isfinite(x):
        return x
    return float(f"{x:.{DIGITS}g}") + 0.0  # + 0.0 folds -0.0 into 0.0


def _arr(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return _num(a)
    return [_arr(x) for x in a]


def _decode(v):
    if isinstance(v, str) and v in ("inf", "-inf", "nan"):
        return float(v)
    if isinstance(v, list):
        return [_decode(x) for x in v]
    if isinstance(v, dict):
        return {k: _decode(x) for k, x in v.items()}
    return v


def _levels(tree, flat):
    o = tree.offsets
    return [_arr(flat[o[t]:o[t + 1]]) for t in range(tree.horizon + 1)]


@dataclass
class Report:
    """Everything a certificate run produced, per level of the tree.

    Per-atom quantities are nested lists ``[level][atom]`` (and ``[asset]``
    where the quantity is a vector).
    """

    input_sha256: str
    valid: bool
    exit_code: int
    tolerance: float
    sizes: list
    assets: int
    value_costs: object
    value_frictionless: object
    trades_up: list = field(default_factory=list)
    trades_down: list = field(default_factory=list)
    consumption: list = field(default_factory=list)
    shadow_price: list = field(default_factory=list)
    provenance: list = field(default_factory=list)
    Q: list = field(default_factory=list)
    Z: list = field(default_factory=list)
    alpha: object = None
    nu: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    lam_up: list = field(default_factory=list)
    lam_down: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    iterations: int = 0
    frictionless_iterations: int = 0
    oracle: dict | None = None
    error: str | None = None
    wall_time: float = field(default=0.0, compare=False)

    def __eq__(self, other):
        if not isinstance(other, Report):
            return NotImplemented
        return all(
            _same(getattr(self, f.name), getattr(other, f.name)) for f in fields(self) if f.compare
        )


def _same(a, b):
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    return a == b


def build_report(cert: ShadowCertificate, input_sha256: str, tolerance: float, exit_code: int) -> Report:
    market = cert.market
    tree = market.tree
    sol = cert.solution
    rep = Report(
        input_sha256=input_sha256,
        valid=cert.valid,
        exit_code=exit_code,
        tolerance=_num(tolerance),
        sizes=[int(m) for m in tree.sizes],
        assets=int(market.d),
        value_costs=_num(cert.value_costs),
        value_frictionless=_num(cert.value_frictionless),
        wall_time=cert.wall_time,
    )
    rep.trades_up = _levels(tree, sol.up)
    rep.trades_down = _levels(tree, sol.down)
    rep.consumption = _levels(tree, sol.c)
    rep.nu = _arr(sol.nu)
    rep.mu = _arr(sol.mu)
    rep.lam_up = _levels(tree, sol.lam_up)
    rep.lam_down = _levels(tree, sol.lam_down)
    rep.iterations = int(sol.iterations)
    if cert.shadow is not None:
        rep.shadow_price = _levels(tree, cert.shadow.values)
        o = tree.offsets
        rep.provenance = [
            [list(map(str, row)) for row in cert.shadow.provenance[o[t]:o[t + 1]]]
            for t in range(tree.horizon + 1)
        ]
    if cert.cps is not None:
        rep.Q = _arr(cert.cps.Q)
        rep.Z = _levels(tree, cert.cps.Z)
        rep.alpha = _num(cert.cps.alpha)
    if cert.frictionless is not None:
        rep.frictionless_iterations = int(cert.frictionless.iterations)
    rep.checks = {
        name: {"passed": bool(c.passed), "residual": _num(c.residual), "tol": _num(c.tol), "detail": c.detail}
        for name, c in cert.checks.items()
    }
    rep.flags = list(cert.flags)
    if cert.oracle is not None:
        o = cert.oracle
        rep.oracle = {
            "value": _num(o.value), "root_trade": _num(o.root_trade), "step": _num(o.step),
            "bound": _num(o.bound), "bound_active": bool(o.bound_active), "evaluations": int(o.evaluations),
        }
    return rep


def error_report(input_sha256: str, tolerance: float, exit_code: int, message: str) -> Report:
    """Report for a run that stopped before a certificate existed."""
    nan = float("nan")
    return Report(input_sha256, False, exit_code, _num(tolerance), [], 0, nan, nan, error=message)


def _encode(v):
    if isinstance(v, float):
        return _num(v) if math.isfinite(v) else str(v)
    if isinstance(v, list):
        return [_encode(x) for x in v]
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    return v


def report_document(rep: Report) -> dict:
    data = {k: _encode(v) for k, v in asdict(rep).items() if k != "wall_time"}
    return {"format": FORMAT, **data}


def render_structured(rep: Report) -> str:
    return json.dumps(report_document(rep), indent=2, sort_keys=True, allow_nan=False) + "\n"


def parse_report(text: str) -> Report:
    data = json.loads(text)
    if isinstance(data, dict) and data.get("format") == FORMAT:
        data = dict(data)
        del data["format"]
        return Report(**{k: _decode(v) for k, v in data.items()})
    raise ValueError("not a certificate document")


def _fmt(x) -> str:
    return f"{x:.6g}" if isinstance(x, (int, float)) else str(x)


def render_text(rep: Report, name: str = "") -> str:
    lines = []
    head = f"certificate {name}".rstrip()
    if rep.error is not None:
        lines.append(f"{head}: ERROR (exit {rep.exit_code})")
        lines.append(f"  {rep.error}")
        return "\n".join(lines) + "\n"
    lines.append(f"{head}: {'VALID' if rep.valid else 'INVALID'} (exit {rep.exit_code})")
    lines.append(f"  tree sizes {rep.sizes}, {rep.assets} asset(s), input sha256 {rep.input_sha256[:16]}")
    lines.append(f"  value with costs        {_fmt(rep.value_costs)}")
    lines.append(f"  value frictionless (S~) {_fmt(rep.value_frictionless)}")
    if rep.alpha is not None:
        lines.append(f"  alpha {_fmt(rep.alpha)}   Q = [{', '.join(_fmt(q) for q in rep.Q)}]")
    lines.append("  t  atom  net trade        consumption  shadow price     provenance")
    for t, level in enumerate(rep.consumption):
        for j, c in enumerate(level):
            up, down = np.atleast_1d(rep.trades_up[t][j]), np.atleast_1d(rep.trades_down[t][j])
            net = " ".join(f"{u - d:+.6g}" for u, d in zip(up, down))
            sp = " ".join(_fmt(x) for x in np.atleast_1d(rep.shadow_price[t][j])) if rep.shadow_price else "-"
            prov = " ".join(rep.provenance[t][j]) if rep.provenance else "-"
            lines.append(f"  {t:<2} {j:<5} {net:<16} {_fmt(c):<12} {sp:<16} {prov}")
    lines.append("  checks:")
    for name_, c in rep.checks.items():
        mark = "pass" if c["passed"] else "FAIL"
        extra = f"  {c['detail']}" if c["detail"] else ""
        lines.append(f"    {mark}  {name_:<20} residual {_fmt(c['residual']):<12} tol {_fmt(c['tol'])}{extra}")
    if rep.oracle is not None:
        lines.append(f"  oracle value {_fmt(rep.oracle['value'])} (grid step {_fmt(rep.oracle['step'])})")
    if rep.flags:
        lines.append(f"  flags: {', '.join(rep.flags)}")
    lines.append(f"  iterations {rep.iterations} + {rep.frictionless_iterations}, wall time {rep.wall_time:.3f} s")
    return "\n".join(lines) + "\n"
