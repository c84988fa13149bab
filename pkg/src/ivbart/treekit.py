"""Regression trees.

Binary decision trees over a fixed cutpoint grid, the depth-decaying structure
prior and the grow/prune/change Metropolis-Hastings proposals shared by every
ensemble of the package.

Nodes are addressed by heap index: the root is node 0 and the children of node i
are 2i + 1 (left) and 2i + 2 (right). A split sends ``value < cutpoint`` left and
``value >= cutpoint`` right.
"""

import json
import math
from enum import Enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ivbart.exceptions import InputError, InvariantViolation

_GENOTYPE_CODES = {0.0, 1.0, 2.0}

Payload = float | tuple[float, float]


def _validate_probability_field(field_name: str, val: float, low_open: bool = True, high_open: bool = True):
    low_ok = val > 0.0 if low_open else val >= 0.0
    high_ok = val < 1.0 if high_open else val <= 1.0
    if not (low_ok and high_ok):
        raise ValueError(f"{field_name} must lie in {'(' if low_open else '['}0, 1{')' if high_open else ']'}, got {val}")


def depth_of(node: int) -> int:
    return (node + 1).bit_length() - 1


def parent_of(node: int) -> int:
    return (node - 1) // 2


def left_child(node: int) -> int:
    return 2 * node + 1


def right_child(node: int) -> int:
    return 2 * node + 2


class Move(str, Enum):
    """Structural proposal types."""
    def __new__(cls, value, description):
        obj = str.__new__(cls, value)
        obj._value_ = value
        obj.description = description
        return obj

    GROW = ("grow", "Split a leaf into two leaves")
    PRUNE = ("prune", "Collapse an internal node whose children are leaves")
    CHANGE = ("change", "Redraw the rule of an internal node")

    def __str__(self):
        return self.description


@dataclass(frozen=True, slots=True)
class SplitRule:
    """Split on predictor ``predictor_index`` at grid cutpoint ``cutpoint_index``."""
    predictor_index: int
    cutpoint_index: int
    cutpoint: float


@dataclass(frozen=True, slots=True)
class TreePriorConfig:
    """Structure prior and proposal mixture.

    A node at depth d is internal with probability base * (1 + d) ** -power.
    """
    base: float = 0.95
    power: float = 2.0
    move_probs: tuple[float, float, float] = (0.4, 0.4, 0.2)

    def __post_init__(self):
        _validate_probability_field("base", self.base)
        if not self.power >= 0.0:
            raise ValueError(f"power must be nonnegative, got {self.power}")
        if len(self.move_probs) != 3 or any(p < 0.0 for p in self.move_probs):
            raise ValueError("move_probs must be three nonnegative probabilities (grow, prune, change)")
        if not math.isclose(sum(self.move_probs), 1.0, abs_tol=1e-12):
            raise ValueError(f"move_probs must sum to 1, got {sum(self.move_probs)}")

    def split_probability(self, depth: int) -> float:
        return self.base * (1.0 + depth) ** (-self.power)


class CutpointGrid:
    """Candidate cut values, one strictly increasing vector per predictor."""

    def __init__(self, cutpoints: Sequence[Sequence[float]]):
        """Create a cutpoint grid.

        Arguments:
            cutpoints -- per predictor, the candidate cut values (may be empty for
                constant predictors, which are then never split on)
        """
        self._cuts = tuple(np.asarray(c, dtype=float) for c in cutpoints)
        for j, cuts in enumerate(self._cuts):
            if cuts.ndim != 1:
                raise ValueError(f"Cutpoints of predictor {j} must be a vector")
            if cuts.size > 1 and not np.all(np.diff(cuts) > 0):
                raise ValueError(f"Cutpoints of predictor {j} must be strictly increasing")

    def __len__(self):
        return len(self._cuts)

    def __getitem__(self, predictor: int) -> np.ndarray:
        return self._cuts[predictor]

    def __eq__(self, other):
        if not isinstance(other, CutpointGrid) or len(other) != len(self):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self._cuts, other._cuts))

    def __hash__(self):
        return hash(tuple(c.tobytes() for c in self._cuts))

    def n_cuts(self, predictor: int) -> int:
        return self._cuts[predictor].size

    def rule(self, predictor: int, cutpoint_index: int) -> SplitRule:
        if not 0 <= cutpoint_index < self.n_cuts(predictor):
            raise InvariantViolation(f"Cutpoint {cutpoint_index} outside the grid of predictor {predictor}")
        return SplitRule(predictor, cutpoint_index, float(self._cuts[predictor][cutpoint_index]))

    @classmethod
    def from_data(cls, X: np.ndarray, n_cutpoints: int = 100) -> "CutpointGrid":
        """Build a grid from observed predictor values.

        Continuous predictors get ``n_cutpoints`` equidistant interior points of the
        observed range. Predictors whose values are a subset of {0, 1, 2} (genotype
        counts and dummies) get the midpoints between their observed codes.

        Arguments:
            X -- n x p design matrix

        Keyword Arguments:
            n_cutpoints -- cutpoints per continuous predictor (default: {100})

        Returns:
            cutpoint grid
        """
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise InputError("Design matrix must be two-dimensional")
        if n_cutpoints < 1:
            raise ValueError("n_cutpoints must be positive")
        cuts = []
        for j in range(X.shape[1]):
            values = np.unique(X[:, j])
            if values.size < 2:
                cuts.append(np.empty(0))
            elif set(values.tolist()) <= _GENOTYPE_CODES:
                cuts.append((values[:-1] + values[1:]) / 2.0)
            else:
                low, high = values[0], values[-1]
                steps = np.arange(1, n_cutpoints + 1) / (n_cutpoints + 1)
                cuts.append(np.unique(low + (high - low) * steps))
        return cls(cuts)


@dataclass(frozen=True, slots=True, eq=False)
class RegressionTree:
    """A regression tree with scalar or line-valued leaves.

    Trees are values: every structural or payload change returns a new tree.
    """
    rules: Mapping[int, SplitRule] = field(default_factory=dict)
    leaves: Mapping[int, Payload] = field(default_factory=lambda: {0: 0.0})

    @classmethod
    def stump(cls, value: Payload = 0.0) -> "RegressionTree":
        return cls({}, {0: value})

    def __len__(self):
        return len(self.leaves)

    def __str__(self):
        lines = []
        for node in sorted([*self.rules, *self.leaves]):
            indent = "  " * depth_of(node)
            if node in self.rules:
                rule = self.rules[node]
                lines.append(f"{indent}[{node}] x{rule.predictor_index} < {rule.cutpoint:.6g}")
            else:
                lines.append(f"{indent}[{node}] {self.leaves[node]}")
        return "\n".join(lines)

    @property
    def is_linear(self) -> bool:
        return isinstance(next(iter(self.leaves.values())), tuple)

    @property
    def internal_nodes(self) -> list[int]:
        return sorted(self.rules)

    @property
    def leaf_nodes(self) -> list[int]:
        return sorted(self.leaves)

    @property
    def nog_nodes(self) -> list[int]:
        """Internal nodes whose two children are leaves."""
        return [node for node in sorted(self.rules) if left_child(node) in self.leaves and right_child(node) in self.leaves]

    @property
    def depth(self) -> int:
        return max(depth_of(node) for node in self.leaves)

    def structure_key(self) -> tuple:
        """Hashable description of the structure, ignoring leaf payloads."""
        return tuple(sorted((node, rule.predictor_index, rule.cutpoint_index) for node, rule in self.rules.items()))

    def cut_range(self, node: int, predictor: int, grid: CutpointGrid) -> tuple[int, int]:
        """Exclusive bounds (lo, hi) of the cutpoint indices of ``predictor`` still
        available at ``node`` given the rules of its ancestors.
        """
        lo, hi = -1, grid.n_cuts(predictor)
        child = node
        while child > 0:
            parent = parent_of(child)
            rule = self.rules[parent]
            if rule.predictor_index == predictor:
                if child == left_child(parent):
                    hi = min(hi, rule.cutpoint_index)
                else:
                    lo = max(lo, rule.cutpoint_index)
            child = parent
        return lo, hi

    def available_predictors(self, node: int, grid: CutpointGrid) -> list[int]:
        available = []
        for j in range(len(grid)):
            lo, hi = self.cut_range(node, j, grid)
            if hi - lo > 1:
                available.append(j)
        return available

    def growable_leaves(self, grid: CutpointGrid) -> list[int]:
        return [node for node in sorted(self.leaves) if self.available_predictors(node, grid)]

    def is_valid(self, grid: CutpointGrid) -> bool:
        """Check that every rule lies strictly inside its available cutpoint range."""
        for node, rule in self.rules.items():
            if not 0 <= rule.predictor_index < len(grid):
                return False
            lo, hi = self.cut_range(node, rule.predictor_index, grid)
            if not lo < rule.cutpoint_index < hi:
                return False
        return True

    def grow(self, node: int, rule: SplitRule, left: Payload = 0.0, right: Payload = 0.0) -> "RegressionTree":
        if node not in self.leaves:
            raise InvariantViolation(f"Node {node} is not a leaf")
        leaves = dict(self.leaves)
        del leaves[node]
        leaves[left_child(node)] = left
        leaves[right_child(node)] = right
        return RegressionTree({**self.rules, node: rule}, leaves)

    def prune(self, node: int, value: Payload = 0.0) -> "RegressionTree":
        if left_child(node) not in self.leaves or right_child(node) not in self.leaves:
            raise InvariantViolation(f"Node {node} does not have two leaf children")
        rules = dict(self.rules)
        del rules[node]
        leaves = dict(self.leaves)
        del leaves[left_child(node)]
        del leaves[right_child(node)]
        leaves[node] = value
        return RegressionTree(rules, leaves)

    def change(self, node: int, rule: SplitRule) -> "RegressionTree":
        if node not in self.rules:
            raise InvariantViolation(f"Node {node} is not internal")
        return RegressionTree({**self.rules, node: rule}, self.leaves)

    def with_leaf_values(self, values: Mapping[int, Payload]) -> "RegressionTree":
        if set(values) != set(self.leaves):
            raise InvariantViolation("Leaf values must cover exactly the leaves of the tree")
        return RegressionTree(self.rules, dict(values))

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        """Return the leaf reached by every row of ``X``."""
        ids = np.zeros(X.shape[0], dtype=np.int64)
        for node in sorted(self.rules):
            at = ids == node
            if not at.any():
                continue
            rule = self.rules[node]
            right = X[at, rule.predictor_index] >= rule.cutpoint
            ids[at] = np.where(right, right_child(node), left_child(node))
        return ids

    def predict(self, X: np.ndarray, exposure: np.ndarray | None = None) -> np.ndarray:
        """Evaluate the tree on every row of ``X``.

        Arguments:
            X -- n x p design matrix

        Keyword Arguments:
            exposure -- exposure values, required for line-valued leaves (default: {None})

        Returns:
            vector of leaf outputs
        """
        ids = self.leaf_index(X)
        nodes = np.fromiter(self.leaves.keys(), dtype=np.int64)
        order = np.argsort(nodes)
        positions = order[np.searchsorted(nodes[order], ids)]
        if self.is_linear:
            if exposure is None:
                raise InputError("Line-valued leaves require exposure values")
            lines = np.array(list(self.leaves.values()), dtype=float)
            return lines[positions, 0] + lines[positions, 1] * np.asarray(exposure, dtype=float)
        if exposure is not None:
            raise InputError("Scalar leaves take no exposure values")
        values = np.fromiter(self.leaves.values(), dtype=float)
        return values[positions]

    def serialize(self) -> dict:
        """Serialize to the compact node-list format.

        Returns:
            dictionary with a ``nodes`` list; each node carries its id, parent link and
            either a split ``[predictor, cutpoint index, cutpoint]`` or a value
        """
        nodes = []
        for node in sorted([*self.rules, *self.leaves]):
            entry = {"id": node, "parent": parent_of(node) if node > 0 else None}
            if node in self.rules:
                rule = self.rules[node]
                entry["split"] = [rule.predictor_index, rule.cutpoint_index, rule.cutpoint]
            else:
                payload = self.leaves[node]
                entry["value"] = list(payload) if isinstance(payload, tuple) else payload
            nodes.append(entry)
        return {"nodes": nodes}

    def to_json(self) -> str:
        return json.dumps(self.serialize(), separators=(",", ":"))

    @classmethod
    def deserialize(cls, obj: dict | str) -> "RegressionTree":
        """Deserialize a tree from its node-list format.

        Arguments:
            obj -- serialized tree, as a dictionary or a JSON string

        Returns:
            tree
        """
        if isinstance(obj, str):
            obj = json.loads(obj)
        rules, leaves = {}, {}
        for entry in obj["nodes"]:
            node, parent = entry["id"], entry["parent"]
            if (node == 0) != (parent is None) or (node > 0 and parent != parent_of(node)):
                raise InvariantViolation(f"Inconsistent parent link for node {node}")
            if "split" in entry:
                predictor, index, cut = entry["split"]
                rules[node] = SplitRule(int(predictor), int(index), float(cut))
            else:
                value = entry["value"]
                leaves[node] = (float(value[0]), float(value[1])) if isinstance(value, list) else float(value)
        for node in rules:
            if left_child(node) not in rules and left_child(node) not in leaves:
                raise InvariantViolation(f"Internal node {node} lacks a left child")
            if right_child(node) not in rules and right_child(node) not in leaves:
                raise InvariantViolation(f"Internal node {node} lacks a right child")
        return cls(rules, leaves)


def evaluate_tree(tree: RegressionTree, row: Sequence[float], exposure: float | None = None) -> float:
    """Evaluate a tree on a single covariate row.

    Arguments:
        tree -- regression tree
        row -- covariate vector

    Keyword Arguments:
        exposure -- exposure value, supplied iff the leaves are lines (default: {None})

    Raises:
        InputError: if a predictor used on the path is missing

    Returns:
        output of the leaf reached by the row
    """
    node = 0
    while node in tree.rules:
        rule = tree.rules[node]
        if rule.predictor_index >= len(row) or row[rule.predictor_index] is None or math.isnan(row[rule.predictor_index]):
            raise InputError(f"Missing value for predictor {rule.predictor_index}")
        node = right_child(node) if row[rule.predictor_index] >= rule.cutpoint else left_child(node)
    payload = tree.leaves[node]
    if isinstance(payload, tuple):
        if exposure is None:
            raise InputError("Line-valued leaves require an exposure value")
        return payload[0] + payload[1] * exposure
    if exposure is not None:
        raise InputError("Scalar leaves take no exposure value")
    return payload


def log_tree_structure_prior(tree: RegressionTree, cfg: TreePriorConfig, grid: CutpointGrid) -> float:
    """Log prior probability of the tree structure.

    Every node contributes its split or no-split probability; internal nodes add the
    uniform choice of predictor among those with available cutpoints and the uniform
    choice of cutpoint. Leaves without any available cutpoint cannot split and
    contribute nothing.
    """
    total = 0.0
    for node, rule in tree.rules.items():
        p_split = cfg.split_probability(depth_of(node))
        if p_split <= 0.0:
            return -math.inf
        predictors = tree.available_predictors(node, grid)
        lo, hi = tree.cut_range(node, rule.predictor_index, grid)
        if rule.predictor_index not in predictors or not lo < rule.cutpoint_index < hi:
            raise InvariantViolation(f"Rule at node {node} is not available given its ancestors")
        total += math.log(p_split) - math.log(len(predictors)) - math.log(hi - lo - 1)
    for node in tree.leaves:
        if not tree.available_predictors(node, grid):
            continue
        p_split = cfg.split_probability(depth_of(node))
        if p_split >= 1.0:
            return -math.inf
        total += math.log1p(-p_split)
    return total


@dataclass(frozen=True, slots=True)
class Proposal:
    """Outcome of a structural proposal.

    ``valid`` is false when the proposal was rejected at proposal time (empty leaf,
    descendant rule made unavailable, or no move possible); ``tree`` is then the
    current tree.
    """
    tree: RegressionTree
    log_transition_ratio: float
    move: Move
    valid: bool = True


def move_probabilities(tree: RegressionTree, cfg: TreePriorConfig, grid: CutpointGrid) -> np.ndarray:
    """Move-type probabilities renormalized over the moves available on ``tree``."""
    available = np.array([
        bool(tree.growable_leaves(grid)),
        bool(tree.nog_nodes),
        bool(tree.rules),
    ])
    probs = np.asarray(cfg.move_probs, dtype=float) * available
    total = probs.sum()
    return probs / total if total > 0 else probs


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def leaf_counter(X: np.ndarray) -> Callable[[RegressionTree], Mapping[int, int]]:
    """Return a callable counting the rows of ``X`` in every leaf of a tree."""
    def counts(tree: RegressionTree) -> Mapping[int, int]:
        ids = tree.leaf_index(X)
        found = np.bincount(ids, minlength=max(tree.leaves) + 1)
        return {node: int(found[node]) for node in tree.leaves}
    return counts


def propose_move(tree: RegressionTree, cfg: TreePriorConfig, grid: CutpointGrid,
                 node_data_counts: Callable[[RegressionTree], Mapping[int, int]] | None,
                 rng: np.random.Generator) -> Proposal:
    """Draw a grow, prune or change proposal.

    Move types unavailable on the current tree are excluded before drawing, which
    amounts to redrawing the move type until a legal one comes up.

    Arguments:
        tree -- current tree
        cfg -- structure prior and move mixture
        grid -- cutpoint grid
        node_data_counts -- callable returning the data count of every leaf of a
            proposed tree; proposals with an empty leaf are rejected (None disables
            the check)
        rng -- random generator

    Returns:
        proposal with log q(old | new) / q(new | old)
    """
    probs = move_probabilities(tree, cfg, grid)
    if probs.sum() == 0:
        return Proposal(tree, 0.0, Move.GROW, valid=False)
    move = (Move.GROW, Move.PRUNE, Move.CHANGE)[rng.choice(3, p=probs)]
    zero = (0.0, 0.0) if tree.is_linear else 0.0

    if move is Move.GROW:
        growable = tree.growable_leaves(grid)
        node = growable[rng.integers(len(growable))]
        predictors = tree.available_predictors(node, grid)
        predictor = predictors[rng.integers(len(predictors))]
        lo, hi = tree.cut_range(node, predictor, grid)
        proposed = tree.grow(node, grid.rule(predictor, int(rng.integers(lo + 1, hi))), zero, zero)
        reverse = move_probabilities(proposed, cfg, grid)[1]
        log_ratio = (_log(reverse) - math.log(len(proposed.nog_nodes))
                     - math.log(probs[0]) + math.log(len(growable))
                     + math.log(len(predictors)) + math.log(hi - lo - 1))
    elif move is Move.PRUNE:
        nogs = tree.nog_nodes
        node = nogs[rng.integers(len(nogs))]
        rule = tree.rules[node]
        proposed = tree.prune(node, zero)
        reverse = move_probabilities(proposed, cfg, grid)[0]
        predictors = proposed.available_predictors(node, grid)
        lo, hi = proposed.cut_range(node, rule.predictor_index, grid)
        log_ratio = (_log(reverse) - math.log(len(proposed.growable_leaves(grid)))
                     - math.log(len(predictors)) - math.log(hi - lo - 1)
                     - math.log(probs[1]) + math.log(len(nogs)))
    else:
        internal = tree.internal_nodes
        node = internal[rng.integers(len(internal))]
        predictors = tree.available_predictors(node, grid)
        predictor = predictors[rng.integers(len(predictors))]
        lo, hi = tree.cut_range(node, predictor, grid)
        proposed = tree.change(node, grid.rule(predictor, int(rng.integers(lo + 1, hi))))
        if not proposed.is_valid(grid):
            return Proposal(tree, 0.0, move, valid=False)
        log_ratio = _log(move_probabilities(proposed, cfg, grid)[2]) - math.log(probs[2])

    if node_data_counts is not None and min(node_data_counts(proposed).values()) == 0:
        return Proposal(tree, 0.0, move, valid=False)
    return Proposal(proposed, log_ratio, move)
