"""Constituency trees: bracketed-file IO, binarization, statistics, and a
weighted-CFG sampler for generating synthetic treebanks.

Trees are immutable. A tree is either a ``Leaf`` carrying a token or a
``Node`` carrying an optional label and an ordered tuple of children.
Files hold one S-expression per line, e.g.::

    (S (NP (DT the) (NN cat)) (VP (VBD sat)))

Part-of-speech preterminals are dropped at read time: the innermost
``(TAG token)`` pairs become bare leaves.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

# Labels invented during binarization end with this mark so labeled
# scoring can map them back to the base label.
BINARIZE_MARK = "|"

# Placeholder written for nodes that carry no label.
UNLABELED = "X"


class TreeParseError(ValueError):
    """Malformed bracketed input; carries the 1-based line number."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Leaf:
    token: str


@dataclass(frozen=True)
class Node:
    label: Optional[str]
    children: tuple


Tree = Union[Leaf, Node]


@dataclass
class Treebank:
    sentences: list
    source: str = ""

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]


@dataclass(frozen=True)
class TreeStats:
    length: int
    depth: int


def leaves(t: Tree) -> list[str]:
    """Leaf tokens in left-to-right order."""
    if isinstance(t, Leaf):
        return [t.token]
    out: list[str] = []
    for c in t.children:
        out.extend(leaves(c))
    return out


def leaf_count(t: Tree) -> int:
    if isinstance(t, Leaf):
        return 1
    return sum(leaf_count(c) for c in t.children)


def tree_depth(t: Tree) -> int:
    """Longest root-to-leaf path, counted in edges."""
    if isinstance(t, Leaf):
        return 0
    return 1 + max(tree_depth(c) for c in t.children)


def is_binary(t: Tree) -> bool:
    if isinstance(t, Leaf):
        return True
    return len(t.children) == 2 and all(is_binary(c) for c in t.children)


def tree_stats(t: Tree) -> TreeStats:
    return TreeStats(length=leaf_count(t), depth=tree_depth(t))


def base_label(label: Optional[str]) -> Optional[str]:
    """Strip the binarization mark; artificial labels map to their base."""
    if label is None:
        return None
    stripped = label.rstrip(BINARIZE_MARK)
    return stripped if stripped else None


# ---------------------------------------------------------------------------
# Bracketed-text reading and writing


_TOKEN_PAT = re.compile(r"\(|\)|[^()\s]+")


def parse_tree(line: str, lineno: Optional[int] = None,
               labeled: bool = True) -> Tree:
    """Parse one S-expression tree.

    Two notations exist and they are genuinely ambiguous, so the caller
    must pick.  In labeled notation the first atom inside a group is the
    node's label and a (TAG token) preterminal collapses to a bare leaf.
    With ``labeled=False`` every atom is a word: ``(a (b c))`` is the
    two-word subtree reading, nodes carry no labels, and one-child
    groups collapse to their child.
    """
    toks = _TOKEN_PAT.findall(line)
    if not toks:
        raise TreeParseError("empty input", lineno)
    pos = 0

    def parse_expr() -> Tree:
        nonlocal pos
        if toks[pos] != "(":
            tok = toks[pos]
            pos += 1
            return Leaf(tok)
        pos += 1  # consume "("
        if pos >= len(toks):
            raise TreeParseError("unbalanced parentheses", lineno)
        label = None
        if labeled:
            if toks[pos] in ("(", ")"):
                raise TreeParseError("node without a label", lineno)
            label = toks[pos]
            pos += 1
        children: list[Tree] = []
        bare: list[bool] = []
        while pos < len(toks) and toks[pos] != ")":
            bare.append(toks[pos] != "(")
            children.append(parse_expr())
        if pos >= len(toks):
            raise TreeParseError("unbalanced parentheses", lineno)
        pos += 1  # consume ")"
        if not children:
            raise TreeParseError("empty node", lineno)
        if len(children) == 1 and (not labeled or bare[0]):
            # (TAG token) preterminal, or a redundant unlabeled wrap
            return children[0]
        return Node(label, tuple(children))

    tree = parse_expr()
    if pos != len(toks):
        raise TreeParseError("unbalanced parentheses", lineno)
    return tree


def read_trees(stream: Union[str, Iterable[str]], source: str = "",
               labeled: bool = True) -> Treebank:
    """Read a treebank, one S-expression per non-empty line."""
    if isinstance(stream, str):
        stream = stream.splitlines()
    sentences = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        sentences.append(parse_tree(line, lineno, labeled))
    if not sentences:
        raise TreeParseError("no trees in input")
    return Treebank(sentences, source=source)


def load_trees(path, labeled: bool = True) -> Treebank:
    with open(path, encoding="utf-8") as fh:
        return read_trees(fh, source=str(path), labeled=labeled)


def format_tree(t: Tree) -> str:
    """Serialize a tree to one line; leaves are written bare."""
    if isinstance(t, Leaf):
        # a bare token is not a tree expression on its own
        return f"({UNLABELED} {t.token})"
    return _format(t)


def _format(t: Tree) -> str:
    if isinstance(t, Leaf):
        return t.token
    label = t.label if t.label is not None else UNLABELED
    return "(" + label + " " + " ".join(_format(c) for c in t.children) + ")"


def write_trees(tb: Treebank, stream) -> None:
    if not tb.sentences:
        raise ValueError("refusing to write an empty treebank")
    for t in tb.sentences:
        stream.write(format_tree(t) + "\n")


def dump_trees(tb: Treebank, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_trees(tb, fh)


# ---------------------------------------------------------------------------
# Binarization


def binarize(t: Tree, direction: str = "right") -> Tree:
    """Collapse unary chains and binarize n-ary nodes.

    ``right`` rebrackets children c1..ck as (c1, (c2, ... ck)); ``left``
    as ((c1 ... c_{k-1}), ck).  Artificial nodes reuse the parent label
    with a trailing mark.  A unary chain keeps its outermost label; a
    chain ending directly in a leaf reduces to that leaf.
    """
    if direction not in ("right", "left"):
        raise ValueError(f"unknown binarize direction: {direction!r}")
    if isinstance(t, Leaf):
        return t
    label, children = t.label, t.children
    while len(children) == 1:
        only = children[0]
        if isinstance(only, Leaf):
            return only
        children = only.children
    if len(children) == 2:
        return Node(label, (binarize(children[0], direction),
                            binarize(children[1], direction)))
    art = _artificial_label(label)
    if direction == "right":
        rest = Node(art, children[1:])
        return Node(label, (binarize(children[0], direction),
                            binarize(rest, direction)))
    rest = Node(art, children[:-1])
    return Node(label, (binarize(rest, direction),
                        binarize(children[-1], direction)))


def _artificial_label(label: Optional[str]) -> str:
    if label is None:
        return BINARIZE_MARK
    if label.endswith(BINARIZE_MARK):
        return label
    return label + BINARIZE_MARK


# ---------------------------------------------------------------------------
# Baseline tree builders


def right_branching(tokens: Sequence[str]) -> Tree:
    if not tokens:
        raise ValueError("cannot build a tree over zero tokens")
    if len(tokens) == 1:
        return Leaf(tokens[0])
    return Node(None, (Leaf(tokens[0]), right_branching(tokens[1:])))


def left_branching(tokens: Sequence[str]) -> Tree:
    if not tokens:
        raise ValueError("cannot build a tree over zero tokens")
    if len(tokens) == 1:
        return Leaf(tokens[-1])
    return Node(None, (left_branching(tokens[:-1]), Leaf(tokens[-1])))


def random_binary(tokens: Sequence[str], rng: random.Random) -> Tree:
    """Uniformly random split point at every level."""
    if not tokens:
        raise ValueError("cannot build a tree over zero tokens")
    if len(tokens) == 1:
        return Leaf(tokens[0])
    k = rng.randrange(1, len(tokens))
    return Node(None, (random_binary(tokens[:k], rng),
                       random_binary(tokens[k:], rng)))


# ---------------------------------------------------------------------------
# Synthetic treebank generation from a weighted CFG


@dataclass
class Grammar:
    start: str
    rules: dict  # lhs -> list of (rhs tuple, weight)


def parse_grammar(text: str) -> Grammar:
    """Parse rules of the form ``LHS -> RHS1 RHS2 : weight``.

    ``#`` starts a comment.  The start symbol is the first rule's LHS.
    Symbols never appearing on a left-hand side are terminals and must be
    lowercase.
    """
    rules: dict = {}
    start = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" not in line or ":" not in line:
            raise ValueError(f"grammar line {lineno}: expected 'LHS -> RHS : weight'")
        head, tail = line.split("->", 1)
        body, weight_s = tail.rsplit(":", 1)
        lhs = head.strip()
        rhs = tuple(body.split())
        if not lhs or not rhs:
            raise ValueError(f"grammar line {lineno}: empty rule side")
        try:
            weight = float(weight_s)
        except ValueError:
            raise ValueError(f"grammar line {lineno}: bad weight {weight_s.strip()!r}")
        if not weight > 0:
            raise ValueError(f"grammar line {lineno}: weights must be positive")
        rules.setdefault(lhs, []).append((rhs, weight))
        if start is None:
            start = lhs
    if start is None:
        raise ValueError("grammar has no rules")
    for lhs, expansions in rules.items():
        for rhs, _ in expansions:
            for sym in rhs:
                if sym not in rules and sym.lower() != sym:
                    raise ValueError(
                        f"symbol {sym!r} has no rules and is not a lowercase terminal")
    return Grammar(start=start, rules=rules)


# Resampling bound: a grammar that cannot produce an admissible sentence
# within this many attempts is treated as non-terminating.
_MAX_ATTEMPTS = 10000


def gen_synthetic(grammar: Union[str, Grammar], n: int, seed: int,
                  max_len: int = 40) -> Treebank:
    """Sample ``n`` trees top-down; deterministic for a fixed seed.

    Sentences longer than ``max_len`` words are rejected and resampled.
    """
    if isinstance(grammar, str):
        grammar = parse_grammar(grammar)
    if n < 1:
        raise ValueError("need n >= 1")
    rng = random.Random(seed)
    budget_cap = max(50, 20 * max_len)
    sentences = []
    for _ in range(n):
        tree = None
        for _attempt in range(_MAX_ATTEMPTS):
            tree = _sample(grammar, grammar.start, rng, [budget_cap])
            if tree is not None and leaf_count(tree) <= max_len:
                break
            tree = None
        if tree is None:
            raise ValueError(
                f"grammar produced no derivation within {max_len} words "
                f"after {_MAX_ATTEMPTS} attempts")
        sentences.append(tree)
    return Treebank(sentences, source=f"synthetic(seed={seed})")


def _sample(grammar: Grammar, symbol: str, rng: random.Random,
            budget: list) -> Optional[Tree]:
    if symbol not in grammar.rules:
        return Leaf(symbol)
    if budget[0] <= 0:
        return None  # runaway derivation; abort this attempt
    budget[0] -= 1
    expansions = grammar.rules[symbol]
    weights = [w for _, w in expansions]
    rhs, _ = rng.choices(expansions, weights=weights, k=1)[0]
    children = []
    for sym in rhs:
        child = _sample(grammar, sym, rng, budget)
        if child is None:
            return None
        children.append(child)
    return Node(symbol, tuple(children))
