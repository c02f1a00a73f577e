import numpy as np
import pytest
from hypothesis import given, strategies as st

from shadowprice.errors import ChildSumMismatch, LevelMismatch, NonpositiveProbability, OrphanAtom
from shadowprice.instances import random_tree
from shadowprice.tree import (
    AdaptedProcess,
    PredictableProcess,
    build_tree,
    conditional_expectation,
    uniform_tree,
)


def test_single_atom_tree():
    tree = build_tree([[(None, 1.0)]])
    assert tree.horizon == 0
    assert tree.n_atoms == 1
    assert tree.n_terminal == 1


def test_binomial_tree():
    tree = build_tree([[(None, 1.0)], [(0, 0.5), (0, 0.5)]])
    assert tree.sizes.tolist() == [1, 2]
    assert np.allclose(tree.probs[1], [0.5, 0.5])
    assert tree.children(0, 0).tolist() == [0, 1]


def test_child_sum_mismatch():
    with pytest.raises(ChildSumMismatch):
        build_tree([[(None, 1.0)], [(0, 0.5), (0, 0.4)]])


def test_tiny_mismatch_is_rescaled():
    tree = build_tree([[(None, 1.0)], [(0, 0.5), (0, 0.5 + 5e-13)]])
    assert tree.probs[1].sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("spec, err", [
    ([[(None, 1.0)], [(0, 1.0), (0, 0.0)]], NonpositiveProbability),
    ([[(None, 1.0)], [(1, 1.0)]], OrphanAtom),
    ([[(None, 1.0)], []], OrphanAtom),
    ([], OrphanAtom),
    ([[(None, 0.5)]], ChildSumMismatch),
])
def test_invalid_trees(spec, err):
    with pytest.raises(err):
        build_tree(spec)


def test_uniform_tree_probabilities():
    tree = uniform_tree([2, 3])
    assert tree.sizes.tolist() == [1, 2, 6]
    assert np.allclose(tree.probs[2], 1 / 6)
    assert tree.ancestor(2, 0).tolist() == [0] * 6
    assert tree.ancestor(2, 1).tolist() == [0, 0, 0, 1, 1, 1]


def test_conditional_expectation_of_constant():
    tree = uniform_tree([2, 3])
    X = AdaptedProcess.constant(tree, 4.2)
    for t in range(3):
        assert np.allclose(conditional_expectation(tree, X, 2, t), 4.2)


def test_conditional_expectation_binomial():
    tree = uniform_tree([2])
    assert conditional_expectation(tree, np.array([1.5, 0.5]), 1, 0) == pytest.approx([1.0])


def test_conditioning_on_the_future_is_rejected():
    tree = uniform_tree([2])
    with pytest.raises(LevelMismatch):
        conditional_expectation(tree, np.ones(1), 0, 1)


@given(st.integers(0, 2**32 - 1))
def test_tower_property(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 3)
    X = rng.normal(size=(tree.sizes[3], 2))
    inner = conditional_expectation(tree, X, 3, 2)
    assert np.allclose(conditional_expectation(tree, inner, 2, 1),
                       conditional_expectation(tree, X, 3, 1), atol=1e-12)
    assert np.allclose(conditional_expectation(tree, X, 3, 0),
                       tree.probs[3] @ X, atol=1e-12)


def test_adapted_process_shapes():
    tree = uniform_tree([2])
    with pytest.raises(LevelMismatch):
        AdaptedProcess(tree, [[1.0]])
    with pytest.raises(LevelMismatch):
        AdaptedProcess(tree, [[1.0], [1.0, 2.0, 3.0]])
    X = AdaptedProcess(tree, [[1.0], [2.0, 3.0]])
    assert X.flat().ravel().tolist() == [1.0, 2.0, 3.0]
    assert AdaptedProcess.from_flat(tree, X.flat()).flat().tolist() == X.flat().tolist()


def test_predictable_increments():
    tree = uniform_tree([2])
    phi = PredictableProcess(tree, [[1.0], [3.0], [4.0, 0.0]])
    assert phi.increments().ravel().tolist() == [2.0, 1.0, -3.0]
    assert phi.on_level(1, 1).ravel().tolist() == [3.0, 3.0]
    with pytest.raises(LevelMismatch):
        PredictableProcess(tree, [[1.0], [3.0], [4.0]])
