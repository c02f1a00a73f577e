"""Reading market description files (YAML or JSON; JSON is valid YAML).

See the README for the grammar.  Every error raised here is a
:class:`MarketFileError` naming the offending field and, when the document
could be parsed, the line it sits on.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import yaml

from .errors import MarketFileError, ShadowPriceError
from .market import KINDS, MarketSpec, Utility, UtilityProcess
from .tree import ScenarioTree, build_tree, uniform_tree

SECTIONS = ("tree", "assets", "endowment", "utility", "numeraire")


class _Doc:
    """Parsed mapping plus a node index for locating fields by path."""

    def __init__(self, text: str):
        try:
            self.node = yaml.compose(text, Loader=yaml.SafeLoader)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}" if mark is not None else "document"
            raise MarketFileError(where, f"syntax error: {getattr(exc, 'problem', exc)}") from None
        if not isinstance(self.data, dict):
            raise MarketFileError("document", "top level must be a mapping")

    def line(self, path: str) -> int | None:
        node = self.node
        for part in path.split("."):
            if isinstance(node, yaml.MappingNode):
                nxt = [v for k, v in node.value if k.value == part]
                if not nxt:
                    break
                node = nxt[0]
            elif isinstance(node, yaml.SequenceNode) and part.isdigit() and int(part) < len(node.value):
                node = node.value[int(part)]
            else:
                break
        return node.start_mark.line + 1 if node is not None else None

    def error(self, path: str, message: str) -> MarketFileError:
        ln = self.line(path)
        return MarketFileError(f"{path} (line {ln})" if ln else path, message)


def _number(doc: _Doc, value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise doc.error(path, f"expected a number, got {value!r}")
    return float(value)


def _section(doc: _Doc, name: str, required: bool = True):
    sec = doc.data.get(name)
    if sec is None:
        if required:
            raise MarketFileError(name, "missing section")
        return None
    return sec


def _parse_tree(doc: _Doc) -> ScenarioTree:
    sec = _section(doc, "tree")
    if not isinstance(sec, dict):
        raise doc.error("tree", "expected a mapping with 'levels' or 'branching'")
    if "branching" in sec:
        br = sec["branching"]
        if not isinstance(br, list) or not all(isinstance(b, int) and b >= 1 for b in br):
            raise doc.error("tree.branching", "expected a list of positive integers")
        return uniform_tree(br)
    levels = sec.get("levels")
    if not isinstance(levels, list) or not levels:
        raise doc.error("tree.levels", "expected a non-empty list of levels")
    spec = []
    for t, level in enumerate(levels):
        path = f"tree.levels.{t}"
        if not isinstance(level, list):
            raise doc.error(path, "expected a list of [parent, probability] entries")
        entries = []
        for j, atom in enumerate(level):
            ap = f"{path}.{j}"
            if isinstance(atom, dict):
                parent, prob = atom.get("parent"), atom.get("prob")
            elif isinstance(atom, list) and len(atom) == 2:
                parent, prob = atom
            else:
                raise doc.error(ap, "expected [parent, probability] or {parent, prob}")
            if t > 0 and not (isinstance(parent, int) and not isinstance(parent, bool)):
                raise doc.error(ap, f"parent must be an integer index, got {parent!r}")
            entries.append((parent if t > 0 else None, _number(doc, prob, ap)))
        spec.append(entries)
    try:
        return build_tree(spec)
    except ShadowPriceError as exc:
        raise doc.error("tree.levels", str(exc)) from None


def _per_atom(doc: _Doc, value, tree: ScenarioTree, d: int | None, path: str) -> np.ndarray:
    """Flat ``(n, d)`` array from a scalar, or per-level lists of scalars / d-lists."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.full((tree.n_atoms, d or 1), float(value))
    if not isinstance(value, list) or len(value) != tree.horizon + 1:
        raise doc.error(path, f"expected a number or {tree.horizon + 1} per-level lists")
    rows = []
    for t, level in enumerate(value):
        lp = f"{path}.{t}"
        if not isinstance(level, list) or len(level) != tree.sizes[t]:
            raise doc.error(lp, f"expected {tree.sizes[t]} entries at level {t}")
        for j, atom in enumerate(level):
            vec = atom if isinstance(atom, list) else [atom]
            rows.append([_number(doc, x, f"{lp}.{j}") for x in vec])
    widths = {len(r) for r in rows}
    if len(widths) != 1 or (d is not None and widths != {d}):
        raise doc.error(path, "every atom needs the same number of assets")
    return np.array(rows)


def _parse_prices(doc: _Doc, tree: ScenarioTree):
    sec = _section(doc, "assets")
    if not isinstance(sec, dict):
        raise doc.error("assets", "expected a mapping")
    d = sec.get("count")
    if d is not None and not (isinstance(d, int) and d >= 1):
        raise doc.error("assets.count", "expected a positive integer")
    if "mid" in sec:
        mid = _per_atom(doc, sec["mid"], tree, d, "assets.mid")
        if np.any(mid <= 0):
            raise doc.error("assets.mid", "mid prices must be positive")
        d = mid.shape[1]
        eps_ask = _per_atom(doc, sec.get("eps_ask", 0.0), tree, d, "assets.eps_ask")
        eps_bid = _per_atom(doc, sec.get("eps_bid", 0.0), tree, d, "assets.eps_bid")
        if np.any(eps_ask < 0):
            raise doc.error("assets.eps_ask", "cost rate must be nonnegative")
        if np.any((eps_bid < 0) | (eps_bid >= 1)):
            raise doc.error("assets.eps_bid", "cost rate must lie in [0, 1)")
        return mid * (1 - eps_bid), mid * (1 + eps_ask)
    if "bid" not in sec or "ask" not in sec:
        raise doc.error("assets", "give either 'bid' and 'ask' or 'mid' with cost rates")
    bid = _per_atom(doc, sec["bid"], tree, d, "assets.bid")
    ask = _per_atom(doc, sec["ask"], tree, bid.shape[1], "assets.ask")
    if np.any(bid <= 0):
        raise doc.error("assets.bid", "bid prices must be positive")
    if np.any(ask < bid):
        raise doc.error("assets.ask", "ask prices must not be below bid prices")
    return bid, ask


def _parse_utility_item(doc: _Doc, item, path: str) -> Utility:
    if not isinstance(item, dict):
        raise doc.error(path, "expected a mapping with 'kind'")
    kind = item.get("kind")
    if kind not in KINDS:
        raise doc.error(f"{path}.kind", f"unknown utility kind {kind!r}; one of {sorted(KINDS)}")
    kw = {}
    for key in ("p", "scale", "floor"):
        if key in item:
            kw[key] = _number(doc, item[key], f"{path}.{key}")
    try:
        return Utility(kind, **kw)
    except ShadowPriceError as exc:
        raise doc.error(path, str(exc)) from None


def _parse_utility(doc: _Doc, tree: ScenarioTree) -> UtilityProcess:
    sec = _section(doc, "utility")
    if not isinstance(sec, dict):
        raise doc.error("utility", "expected a mapping")
    T = tree.horizon
    try:
        if "per_time" in sec:
            items = sec["per_time"]
            if not isinstance(items, list) or len(items) != T + 1:
                raise doc.error("utility.per_time", f"expected {T + 1} entries, one per time")
            us = [_parse_utility_item(doc, it, f"utility.per_time.{t}") for t, it in enumerate(items)]
            return UtilityProcess(tree, [[u] * int(m) for u, m in zip(us, tree.sizes)])
        base = _parse_utility_item(doc, sec, "utility")
        mode = sec.get("mode", "consumption")
        if mode == "terminal_wealth":
            return UtilityProcess.terminal_wealth(tree, base)
        if mode != "consumption":
            raise doc.error("utility.mode", f"expected 'consumption' or 'terminal_wealth', got {mode!r}")
        disc = sec.get("discount")
        if disc is None:
            D = None
        elif isinstance(disc, list):
            D = [_number(doc, x, f"utility.discount.{t}") for t, x in enumerate(disc)]
        else:
            beta = _number(doc, disc, "utility.discount")
            D = beta ** np.arange(T + 1)
        return UtilityProcess.consumption(tree, base, D)
    except MarketFileError:
        raise
    except ShadowPriceError as exc:
        raise doc.error("utility", str(exc)) from None


def _parse_endowment(doc: _Doc, d: int):
    sec = _section(doc, "endowment")
    if not isinstance(sec, dict):
        raise doc.error("endowment", "expected a mapping with 'bank' and 'stock'")
    eta0 = _number(doc, sec.get("bank", 0.0), "endowment.bank")
    stock = sec.get("stock", [0.0] * d)
    if not isinstance(stock, list):
        stock = [stock]
    if len(stock) != d:
        raise doc.error("endowment.stock", f"expected {d} holdings")
    eta = np.array([_number(doc, x, f"endowment.stock.{i}") for i, x in enumerate(stock)])
    if eta0 < 0:
        raise doc.error("endowment.bank", "endowment must be nonnegative")
    if np.any(eta < 0):
        raise doc.error("endowment.stock", "endowment must be nonnegative")
    return eta0, eta


def parse_market(text: str) -> MarketSpec:
    """Market described by ``text``; raises :class:`MarketFileError`."""
    doc = _Doc(text)
    unknown = sorted(set(doc.data) - set(SECTIONS))
    if unknown:
        raise doc.error(unknown[0], "unknown section")
    tree = _parse_tree(doc)
    bid, ask = _parse_prices(doc, tree)
    eta0, eta = _parse_endowment(doc, bid.shape[1])
    utility = _parse_utility(doc, tree)
    numeraire = None
    if doc.data.get("numeraire") is not None:
        numeraire = _per_atom(doc, doc.data["numeraire"], tree, 1, "numeraire")[:, 0]
        if np.any(numeraire <= 0):
            raise doc.error("numeraire", "bank-account prices must be positive")
    try:
        return MarketSpec(tree, bid, ask, eta0, eta, utility, numeraire=numeraire)
    except ShadowPriceError as exc:
        raise MarketFileError("document", str(exc)) from None


def load_market(path) -> tuple[MarketSpec, str]:
    """Market and SHA-256 of the raw file bytes."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise MarketFileError(str(path), f"cannot read file: {exc.strerror}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise MarketFileError(str(path), "file is not UTF-8 text") from None
    return parse_market(text), hashlib.sha256(raw).hexdigest()


def _levels(tree: ScenarioTree, flat: np.ndarray) -> list:
    o = tree.offsets
    out = []
    for t in range(tree.horizon + 1):
        block = flat[o[t]:o[t + 1]]
        out.append([float(r[0]) if r.size == 1 else [float(x) for x in r] for r in block])
    return out


def dump_market(market: MarketSpec) -> str:
    """YAML text that :func:`parse_market` reads back to an equal market.

    Utilities are written per time, so the market must use one utility per
    level (all markets built from files do).
    """
    tree = market.tree
    levels = [[[None, 1.0]]] + [
        [[int(p), float(q)] for p, q in zip(tree.parents[t], tree.probs[t])]
        for t in range(1, tree.horizon + 1)
    ]
    per_time = []
    for level in market.utility.levels():
        u = level[0]
        if any(v != u for v in level) or u.argscale != 1.0:
            raise ValueError("only one rescaling-free utility per time can be written")
        item = {"kind": u.kind, "p": float(u.p), "scale": float(u.scale)}
        if u.kind == "affine_zero":
            item["floor"] = float(u.floor)
        per_time.append(item)
    data = {
        "tree": {"levels": levels},
        "assets": {"count": market.d, "bid": _levels(tree, market.bid), "ask": _levels(tree, market.ask)},
        "endowment": {"bank": float(market.eta0), "stock": [float(x) for x in market.eta]},
        "utility": {"per_time": per_time},
    }
    if market.numeraire is not None:
        data["numeraire"] = _levels(tree, market.numeraire.reshape(-1, 1))
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)
