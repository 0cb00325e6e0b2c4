"""Prefix-code trees over a finite source.

A tree is stored as nested tuples: a leaf is the integer index of a source
item and an internal node is a tuple of 2..C children.  Depth is counted from
the root, which sits at depth 0, so an item's code length equals its leaf
depth.

Besides Huffman construction this module evaluates the uniform-router tree
loss ``L(T) = sum_j p(j) * l(j) * H(j)`` over internal nodes ``j`` (subtree
mass, depth, binary split entropy in bits), its per-depth profile, and
searches for trees that minimise either that loss or the expected length.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .exceptions import PreconditionError, SearchSizeError, UnsupportedArityError, ValidationError
from .source import DiscreteSource, entropy, geometric_source

Node = Union[int, tuple]

EXHAUSTIVE_MAX_ITEMS = 8
IMPROVE_TOL = 1e-12


class Objective(str, Enum):
    UNIFORM_LOSS = "uniform_loss"
    EXPECTED_LENGTH = "expected_length"


class SearchMode(str, Enum):
    EXHAUSTIVE = "exhaustive"
    LIFT = "lift"


def _leaves(node: Node):
    if isinstance(node, tuple):
        for child in node:
            yield from _leaves(child)
    else:
        yield node


def _to_node(obj) -> Node:
    if isinstance(obj, (list, tuple)):
        return tuple(_to_node(c) for c in obj)
    if isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        return int(obj)
    raise ValidationError(f"tree entries must be item indices or nested sequences, got {obj!r}")


@dataclass(frozen=True)
class CodeTree:
    arity: int
    root: Node

    def __post_init__(self):
        if self.arity < 2:
            raise ValidationError("arity must be >= 2")
        root = _to_node(self.root)
        object.__setattr__(self, "root", root)
        if not isinstance(root, tuple):
            raise ValidationError("the root must be an internal node")
        stack = [root]
        while stack:
            node = stack.pop()
            if isinstance(node, tuple):
                if not 2 <= len(node) <= self.arity:
                    raise ValidationError(f"internal node with {len(node)} children (arity {self.arity})")
                stack.extend(node)
        items = list(_leaves(root))
        if sorted(items) != list(range(len(items))):
            raise ValidationError("leaves must label items 0..n-1 exactly once")

    @property
    def n_items(self) -> int:
        return sum(1 for _ in _leaves(self.root))

    def depths(self) -> np.ndarray:
        """Code length (leaf depth) of every item, indexed by item."""
        out = np.zeros(self.n_items, dtype=np.int64)
        stack = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            if isinstance(node, tuple):
                stack.extend((c, d + 1) for c in node)
            else:
                out[node] = d
        return out

    def kraft_sum(self) -> float:
        return math.fsum(float(self.arity) ** -int(d) for d in self.depths())

    def to_list(self):
        def conv(node):
            return [conv(c) for c in node] if isinstance(node, tuple) else node
        return conv(self.root)

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    @classmethod
    def from_json(cls, text: str, arity: int = 2) -> "CodeTree":
        return cls(arity, _to_node(json.loads(text)))

    def canonical(self) -> str:
        return canonical_encoding(self.root)


def canonical_encoding(node: Node) -> str:
    """Order-independent string for a tree; used to break ties deterministically."""
    if isinstance(node, tuple):
        return "(" + ",".join(sorted(canonical_encoding(c) for c in node)) + ")"
    return f"{node:03d}"


@dataclass(frozen=True)
class DepthProfile:
    f: tuple[float, ...]

    def total(self) -> float:
        return math.fsum(self.f)

    def weighted(self) -> float:
        return math.fsum(d * fd for d, fd in enumerate(self.f))


def _check_cover(tree: CodeTree, src: DiscreteSource) -> None:
    if tree.n_items != len(src):
        raise ValidationError(f"tree has {tree.n_items} leaves but the source has {len(src)} items")


def _split_entropy(masses: Sequence[float]) -> float:
    total = math.fsum(masses)
    return -math.fsum(m / total * math.log2(m / total) for m in masses if m > 0)


class _Evaluator:
    """Memoised subtree statistics for one fixed source.

    For a subtree rooted at relative depth 0 it stores
    (mass, sum of p*H over internal nodes, sum of p*depth*H, sum of p*depth over leaves).
    """

    def __init__(self, probs: Sequence[float]):
        self.probs = probs
        self.cache: dict = {}

    def stats(self, node: Node):
        if not isinstance(node, tuple):
            return (self.probs[node], 0.0, 0.0, 0.0)
        hit = self.cache.get(node)
        if hit is not None:
            return hit
        kids = [self.stats(c) for c in node]
        mass = sum(k[0] for k in kids)
        h = _split_entropy([k[0] for k in kids])
        a = mass * h + sum(k[1] for k in kids)
        b = sum(k[2] + k[1] for k in kids)
        e = sum(k[3] + k[0] for k in kids)
        out = (mass, a, b, e)
        self.cache[node] = out
        return out

    def objective(self, node: Node, objective: Objective) -> float:
        s = self.stats(node)
        return s[2] if objective is Objective.UNIFORM_LOSS else s[3]


def huffman(src: DiscreteSource, arity: int = 2) -> CodeTree:
    """C-ary Huffman tree; zero-mass dummies pad the first merge when C > 2."""
    if arity < 2:
        raise ValidationError("arity must be >= 2")
    n = len(src)
    n_dummy = (-(n - 1)) % (arity - 1) if arity > 2 else 0
    counter = itertools.count()
    heap = [(p, next(counter), i) for i, p in enumerate(src.probs)]
    heap += [(0.0, next(counter), None) for _ in range(n_dummy)]
    heapq.heapify(heap)
    while len(heap) > 1:
        group = [heapq.heappop(heap) for _ in range(min(arity, len(heap)))]
        children = tuple(node for _, _, node in group if node is not None)
        mass = math.fsum(p for p, _, _ in group)
        heapq.heappush(heap, (mass, next(counter), children if len(children) > 1 else children[0]))
    return CodeTree(arity, heap[0][2])


def expected_length(tree: CodeTree, src: DiscreteSource) -> float:
    _check_cover(tree, src)
    return math.fsum(p * int(d) for p, d in zip(src.probs, tree.depths()))


def _require_binary(tree: CodeTree) -> None:
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if isinstance(node, tuple):
            if len(node) != 2:
                raise UnsupportedArityError("the tree loss is defined for binary trees only")
            stack.extend(node)


def depth_profile(tree: CodeTree, src: DiscreteSource) -> DepthProfile:
    """f_d = sum over internal nodes at depth d of p(j) * H(j)."""
    _require_binary(tree)
    _check_cover(tree, src)
    f: dict[int, list[float]] = {}

    def visit(node, d):
        if not isinstance(node, tuple):
            return src.probs[node]
        masses = [visit(c, d + 1) for c in node]
        mass = math.fsum(masses)
        f.setdefault(d, []).append(mass * _split_entropy(masses))
        return mass

    visit(tree.root, 0)
    depth_max = max(f)
    return DepthProfile(tuple(math.fsum(f.get(d, [])) for d in range(depth_max + 1)))


def tree_loss(tree: CodeTree, src: DiscreteSource) -> float:
    """Uniform-router reconstruction loss of a binary code tree, in bits."""
    return depth_profile(tree, src).weighted()


# -- search -------------------------------------------------------------------

def _insert_everywhere(node: Node, item: int):
    yield (node, item)
    if isinstance(node, tuple):
        for i, child in enumerate(node):
            for new in _insert_everywhere(child, item):
                yield node[:i] + (new,) + node[i + 1:]


def enumerate_binary_trees(n: int):
    """Every full binary tree on leaves 0..n-1, each unordered tree exactly once.

    Yields (2n-3)!! trees: leaf k is grafted onto every edge of every tree on
    the first k leaves.
    """
    if n < 2:
        raise ValidationError("need at least 2 leaves")
    level = [(0, 1)]
    for item in range(2, n):
        level = [t for tree in level for t in _insert_everywhere(tree, item)]
    return level


def _exhaustive(src: DiscreteSource, objective: Objective) -> Node:
    if len(src) > EXHAUSTIVE_MAX_ITEMS:
        raise SearchSizeError(f"exhaustive search supports at most {EXHAUSTIVE_MAX_ITEMS} items")
    ev = _Evaluator(src.probs)
    best_val = math.inf
    best: list[Node] = []
    for tree in enumerate_binary_trees(len(src)):
        val = ev.objective(tree, objective)
        if val < best_val - IMPROVE_TOL:
            best_val, best = val, [tree]
        elif val <= best_val + IMPROVE_TOL:
            best.append(tree)
    return min(best, key=canonical_encoding)


def _remove_leaf(node: Node, item: int) -> Node:
    if not isinstance(node, tuple):
        return node
    if item in node:
        rest = tuple(c for c in node if c != item)
        return rest[0] if len(rest) == 1 else rest
    return tuple(_remove_leaf(c, item) for c in node)


def _attach_beside(node: Node, target: int, item: int) -> Node:
    if not isinstance(node, tuple):
        return (node, item) if node == target else node
    return tuple(_attach_beside(c, target, item) for c in node)


def relocate(root: Node, item: int, target: int) -> Node:
    """Detach leaf ``item`` (its sibling takes the parent's place) and re-hang it
    as the sibling of leaf ``target``, which moves one level down."""
    if item == target:
        raise ValidationError("cannot relocate a leaf beside itself")
    return _attach_beside(_remove_leaf(root, item), target, item)


def swap_leaves(root: Node, a: int, b: int) -> Node:
    if isinstance(root, tuple):
        return tuple(swap_leaves(c, a, b) for c in root)
    return b if root == a else a if root == b else root


def _fast_objective(node: Node, probs: Sequence[float], objective: Objective) -> float:
    """Objective of a binary tree without memoisation.

    Uses L(T) = sum_leaves (l_i - 1) psi(p_i) - sum_{internal, non-root} psi(m_k)
    with psi(x) = -x log2 x, which avoids the per-node split entropies.
    """
    leaf_term = 0.0
    inner_term = 0.0
    stack = [(node, 0)]
    if objective is Objective.EXPECTED_LENGTH:
        total = 0.0
        while stack:
            n, d = stack.pop()
            if isinstance(n, tuple):
                stack.extend((c, d + 1) for c in n)
            else:
                total += probs[n] * d
        return total

    def visit(n, d):
        nonlocal leaf_term, inner_term
        if not isinstance(n, tuple):
            p = probs[n]
            leaf_term += (d - 1) * -p * math.log2(p)
            return p
        m = visit(n[0], d + 1) + visit(n[1], d + 1)
        if d > 0:
            inner_term += -m * math.log2(m)
        return m

    visit(node, 0)
    return leaf_term - inner_term


def lift_search(src: DiscreteSource, objective: Objective, start: Node | None = None,
                trace: list | None = None) -> Node:
    """Cyclic first-improvement local search starting from the binary Huffman tree.

    Moves, in order: relocating a leaf beside another leaf (leaves tried in
    ascending probability, targets in descending probability, so lifting a rare
    deep leaf next to a frequent shallow one comes first, and the reverse push
    is also covered), then exchanging two leaves.  A move is taken only if it
    lowers the objective by more than ``IMPROVE_TOL``; ``trace`` receives the
    objective after each accepted move.
    """
    objective = Objective(objective)
    probs = src.probs
    current = huffman(src, 2).root if start is None else start
    value = _fast_objective(current, probs, objective)
    order = sorted(range(len(src)), key=lambda i: (probs[i], i))
    targets = order[::-1]

    moves = [(relocate, item, target) for item in order for target in targets if target != item]
    moves += [(swap_leaves, a, b) for i, a in enumerate(order) for b in order[i + 1:]
              if probs[a] != probs[b]]
    # cyclic first improvement: resume scanning after the last accepted move
    idx, since_improvement = 0, 0
    while since_improvement < len(moves):
        op, a, b = moves[idx]
        cand = op(current, a, b)
        val = _fast_objective(cand, probs, objective)
        if val < value - IMPROVE_TOL:
            current, value, since_improvement = cand, val, 0
            if trace is not None:
                trace.append(val)
        else:
            since_improvement += 1
        idx = (idx + 1) % len(moves)
    return current


def search_optimal_tree(src: DiscreteSource, objective: Objective | str = Objective.UNIFORM_LOSS,
                        mode: SearchMode | str = SearchMode.EXHAUSTIVE) -> CodeTree:
    objective, mode = Objective(objective), SearchMode(mode)
    if mode is SearchMode.EXHAUSTIVE:
        return CodeTree(2, _exhaustive(src, objective))
    return CodeTree(2, lift_search(src, objective))


def objective_value(tree: CodeTree, src: DiscreteSource, objective: Objective | str) -> float:
    objective = Objective(objective)
    if objective is Objective.UNIFORM_LOSS:
        return tree_loss(tree, src)
    return expected_length(tree, src)


# -- theorem checks -------------------------------------------------------------

@dataclass(frozen=True)
class GapRow:
    m: int
    entropy: float
    expected_depth: float
    ratio: float
    huffman_length: float
    heuristic: bool


def theorem2_gap(m_max: int, exhaustive_max: int = 3, m_min: int = 1) -> list[GapRow]:
    """Expected depth of the uniform-loss minimiser versus entropy on the
    geometric sources ``geometric_source(M)`` for M = m_min..m_max.

    Rows above ``exhaustive_max`` come from lift search and are flagged as
    heuristic (upper bounds on the optimum loss, not certified minimisers).
    """
    if m_max < m_min or m_min < 1:
        raise ValidationError("need 1 <= m_min <= m_max")
    if exhaustive_max > 3:
        raise ValidationError("exhaustive rows are limited to M <= 3")
    if m_max > 6:
        raise ValidationError("theorem2_gap supports M <= 6")
    rows = []
    for m in range(m_min, m_max + 1):
        src = geometric_source(m)
        heuristic = m > exhaustive_max
        tree = search_optimal_tree(src, Objective.UNIFORM_LOSS,
                                   SearchMode.LIFT if heuristic else SearchMode.EXHAUSTIVE)
        h2 = entropy(src, 2)
        e_depth = expected_length(tree, src)
        rows.append(GapRow(m, h2, e_depth, e_depth / h2, expected_length(huffman(src, 2), src), heuristic))
    return rows


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    passed: bool
    surrogate_mean: float
    slack: float
    min_beta: float


def check_theorem3_bound(src: DiscreteSource, beta: float, elbo_gap: Sequence[float] | None = None,
                         arity: int = 2) -> BoundCheck:
    """Evaluate the ELBO-router length bound on a finite source.

    The per-item surrogate is ``s = -log_C p + gap``; the router assigns
    ``beta * s / E[s]`` tokens.  ``lhs`` is the router's expected length,
    ``rhs = H_C + beta - E[-log_C p]``.  ``slack = rhs - E[s]`` is the room
    left by choosing beta above the admissible minimum ``E[s]``.
    """
    if arity < 2:
        raise ValidationError("arity must be >= 2")
    p = src.as_array()
    gap = np.zeros_like(p) if elbo_gap is None else np.asarray(elbo_gap, dtype=np.float64)
    if gap.shape != p.shape:
        raise ValidationError("elbo_gap needs one entry per item")
    if np.any(gap < 0) or not np.all(np.isfinite(gap)):
        raise ValidationError("elbo_gap entries must be finite and nonnegative")
    nll = -np.log(p) / math.log(arity)
    surrogate = nll + gap
    s_mean = math.fsum(p * surrogate)
    if beta < s_mean - 1e-12:
        raise PreconditionError(f"beta={beta!r} is below the minimum admissible value {s_mean!r}")
    lengths = beta * surrogate / s_mean
    lhs = math.fsum(p * lengths)
    h_c = entropy(src, arity)
    rhs = h_c + beta - math.fsum(p * nll)
    return BoundCheck(lhs, rhs, lhs <= rhs + 1e-9, s_mean, rhs - s_mean, s_mean)
