"""Finite filtrations stored as rooted trees of atoms.

Atoms of level ``t`` are the cells ``F_t^j`` of the partition generating the
time-``t`` sigma-field.  They are numbered ``0..m_t-1`` per level and laid out
breadth first, so a process on the whole tree can be flattened into one array
of length ``n = sum(m_t)``.  The terminal atoms double as the elementary
outcomes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ChildSumMismatch, LevelMismatch, NonpositiveProbability, OrphanAtom

ADDITIVITY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Validated scenario tree.

    Use :func:`build_tree` rather than the constructor.

    Attributes
    ----------
    parents : tuple of ndarray
        ``parents[t][j]`` is the level ``t-1`` index of atom ``j`` of level
        ``t``; ``parents[0] == [-1]``.
    probs : tuple of ndarray
        Unconditional atom probabilities per level.
    """

    parents: tuple
    probs: tuple

    def __post_init__(self):
        T = len(self.parents) - 1
        sizes = np.array([len(p) for p in self.parents])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        # ancestors[s][t]: level-t ancestor of every level-s atom (t <= s)
        ancestors = []
        for s in range(T + 1):
            row = [None] * (s + 1)
            row[s] = np.arange(sizes[s])
            for t in range(s - 1, -1, -1):
                row[t] = self.parents[t + 1][row[t + 1]]
            ancestors.append(tuple(row))
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "_ancestors", tuple(ancestors))

    @property
    def horizon(self) -> int:
        return len(self.parents) - 1

    @property
    def n_atoms(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_terminal(self) -> int:
        return int(self.sizes[-1])

    def ancestor(self, s: int, t: int) -> np.ndarray:
        """Level-``t`` ancestor index of every level-``s`` atom."""
        if not 0 <= t <= s <= self.horizon:
            raise LevelMismatch(f"need 0 <= t <= s <= T, got t={t}, s={s}")
        return self._ancestors[s][t]

    def terminal_ancestor(self, t: int) -> np.ndarray:
        return self._ancestors[self.horizon][t]

    def children(self, t: int, j: int) -> np.ndarray:
        return np.flatnonzero(self.parents[t + 1] == j)

    def flat_probs(self) -> np.ndarray:
        return np.concatenate(self.probs)

    def flat_levels(self) -> np.ndarray:
        """Level of every atom in breadth-first order."""
        return np.repeat(np.arange(self.horizon + 1), self.sizes)

    def flat_index(self, t: int, j) -> np.ndarray:
        return self.offsets[t] + np.asarray(j)

    def sum_to_level(self, values: np.ndarray, s: int, t: int) -> np.ndarray:
        """Sum level-``s`` values over the descendants of each level-``t`` atom.

        ``values`` may carry trailing dimensions.
        """
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.sizes[s]:
            raise LevelMismatch(
                f"expected {self.sizes[s]} level-{s} values, got {values.shape[0]}"
            )
        out = np.zeros((self.sizes[t],) + values.shape[1:])
        np.add.at(out, self.ancestor(s, t), values)
        return out

    def __repr__(self):
        return f"ScenarioTree(T={self.horizon}, sizes={self.sizes.tolist()})"


def build_tree(level_spec: Sequence[Sequence[tuple]]) -> ScenarioTree:
    """Build and validate a tree from per-level ``(parent, probability)`` pairs.

    Level 0 must hold a single entry; its parent field is ignored.  Children
    probabilities must add up to the parent's within ``1e-12``; they are then
    rescaled to match it exactly.

    >>> build_tree([[(None, 1.0)], [(0, 0.5), (0, 0.5)]]).sizes.tolist()
    [1, 2]
    """
    if len(level_spec) == 0 or len(level_spec[0]) != 1:
        raise OrphanAtom("level 0 must contain exactly one atom")
    root_p = float(level_spec[0][0][1])
    if not root_p > 0:
        raise NonpositiveProbability(f"root probability {root_p} is not positive")
    if abs(root_p - 1.0) > ADDITIVITY_TOL:
        raise ChildSumMismatch(f"root probability {root_p} != 1")

    parents = [np.array([-1])]
    probs = [np.array([1.0])]
    for t, level in enumerate(level_spec[1:], start=1):
        if len(level) == 0:
            raise OrphanAtom(f"level {t} is empty")
        par = np.array([int(p) if p is not None else -1 for p, _ in level])
        pr = np.array([float(q) for _, q in level])
        bad = np.flatnonzero(~(pr > 0))
        if bad.size:
            j = int(bad[0])
            raise NonpositiveProbability(f"atom {j} of level {t} has probability {pr[j]}")
        orphan = np.flatnonzero((par < 0) | (par >= len(probs[-1])))
        if orphan.size:
            j = int(orphan[0])
            raise OrphanAtom(f"atom {j} of level {t} has invalid parent {par[j]}")
        child_sum = np.bincount(par, weights=pr, minlength=len(probs[-1]))
        gap = np.abs(child_sum - probs[-1])
        if gap.max() > ADDITIVITY_TOL:
            j = int(np.argmax(gap))
            raise ChildSumMismatch(
                f"children of atom {j} at level {t - 1} sum to {child_sum[j]!r}, "
                f"parent has {probs[-1][j]!r}"
            )
        pr = pr * (probs[-1] / child_sum)[par]
        parents.append(par)
        probs.append(pr)
    return ScenarioTree(tuple(parents), tuple(probs))


def uniform_tree(branching: Sequence[int]) -> ScenarioTree:
    """Tree where every level-``t`` atom has ``branching[t]`` equally likely children."""
    spec = [[(None, 1.0)]]
    p = [1.0]
    for b in branching:
        level = [(j, pj / b) for j, pj in enumerate(p) for _ in range(b)]
        spec.append(level)
        p = [q for _, q in level]
    return build_tree(spec)


def _rows(v, m: int, where: str) -> np.ndarray:
    a = np.array(v, dtype=float)
    if a.ndim <= 1:
        if a.size % m or (a.size == 0 and m):
            raise LevelMismatch(f"{where}: expected {m} atoms, got {a.size} values")
        a = a.reshape(m, -1)
    if a.shape[0] != m:
        raise LevelMismatch(f"{where}: expected {m} atoms, got {a.shape[0]}")
    return a


class AdaptedProcess:
    """One ``dim``-vector per atom per time ``0..T``.

    ``X[t]`` is an array of shape ``(m_t, dim)``.
    """

    def __init__(self, tree: ScenarioTree, values: Sequence, dim: int | None = None):
        if len(values) != tree.horizon + 1:
            raise LevelMismatch(f"expected {tree.horizon + 1} levels, got {len(values)}")
        vals = []
        for t, v in enumerate(values):
            a = _rows(v, tree.sizes[t], f"level {t}")
            vals.append(a)
        dims = {a.shape[1] for a in vals}
        if len(dims) != 1 or (dim is not None and dims != {dim}):
            raise LevelMismatch(f"inconsistent process dimension {sorted(dims)}")
        self.tree = tree
        self.values = tuple(vals)
        self.dim = dims.pop()

    @classmethod
    def zeros(cls, tree: ScenarioTree, dim: int = 1) -> "AdaptedProcess":
        return cls(tree, [np.zeros((m, dim)) for m in tree.sizes])

    @classmethod
    def constant(cls, tree: ScenarioTree, value) -> "AdaptedProcess":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(tree, [np.tile(value, (m, 1)) for m in tree.sizes])

    @classmethod
    def from_flat(cls, tree: ScenarioTree, flat) -> "AdaptedProcess":
        flat = np.asarray(flat, dtype=float)
        if flat.shape[0] != tree.n_atoms:
            raise LevelMismatch(f"expected {tree.n_atoms} rows, got {flat.shape[0]}")
        o = tree.offsets
        return cls(tree, [flat[o[t]:o[t + 1]] for t in range(tree.horizon + 1)])

    def flat(self) -> np.ndarray:
        return np.concatenate(self.values, axis=0)

    def __getitem__(self, t: int) -> np.ndarray:
        return self.values[t]

    def __repr__(self):
        return f"AdaptedProcess(dim={self.dim}, T={self.tree.horizon})"


class PredictableProcess:
    """One ``dim``-vector per time ``0..T+1``, measurable one step ahead.

    ``X[t]`` has shape ``(m_{max(t-1,0)}, dim)``: the value held over
    ``(t-1, t]`` is fixed on the atoms of level ``t-1``.
    """

    def __init__(self, tree: ScenarioTree, values: Sequence, dim: int | None = None):
        T = tree.horizon
        if len(values) != T + 2:
            raise LevelMismatch(f"expected {T + 2} times, got {len(values)}")
        vals = []
        for t, v in enumerate(values):
            m = tree.sizes[max(t - 1, 0)]
            a = _rows(v, m, f"time {t}")
            vals.append(a)
        dims = {a.shape[1] for a in vals}
        if len(dims) != 1 or (dim is not None and dims != {dim}):
            raise LevelMismatch(f"inconsistent process dimension {sorted(dims)}")
        self.tree = tree
        self.values = tuple(vals)
        self.dim = dims.pop()

    @classmethod
    def zeros(cls, tree: ScenarioTree, dim: int = 1) -> "PredictableProcess":
        T = tree.horizon
        return cls(tree, [np.zeros((tree.sizes[max(t - 1, 0)], dim)) for t in range(T + 2)])

    def __getitem__(self, t: int) -> np.ndarray:
        return self.values[t]

    def on_level(self, t: int, level: int) -> np.ndarray:
        """Time-``t`` value broadcast onto the atoms of ``level >= t-1``."""
        base = max(t - 1, 0)
        return self.values[t][self.tree.ancestor(level, base)]

    def increments(self) -> np.ndarray:
        """``X_{t+1} - X_t`` for ``t = 0..T`` stacked on the flat atom layout.

        Row ``offsets[t] + j`` holds the change decided on level-``t`` atom ``j``.
        """
        T = self.tree.horizon
        return np.concatenate(
            [self.values[t + 1] - self.on_level(t, t) for t in range(T + 1)], axis=0
        )

    def __repr__(self):
        return f"PredictableProcess(dim={self.dim}, T={self.tree.horizon})"


def conditional_expectation(tree: ScenarioTree, X, s: int, t: int) -> np.ndarray:
    """``E(X | F_t)`` for a level-``s`` random variable ``X``, returned on level-``t`` atoms.

    ``X`` is an array with one row per level-``s`` atom (an :class:`AdaptedProcess`
    is accepted and its time-``s`` slice used).
    """
    if isinstance(X, AdaptedProcess):
        X = X[s]
    X = np.asarray(X, dtype=float)
    if t > s:
        raise LevelMismatch(f"cannot condition a time-{s} variable on F_{t}")
    if X.shape[0] != tree.sizes[s]:
        raise LevelMismatch(f"expected {tree.sizes[s]} level-{s} values, got {X.shape[0]}")
    p = tree.probs[s].reshape((-1,) + (1,) * (X.ndim - 1))
    num = tree.sum_to_level(p * X, s, t)
    return num / tree.probs[t].reshape((-1,) + (1,) * (X.ndim - 1))
