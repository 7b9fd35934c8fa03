"""Conversions between binary trees and syntactic distances.

Two encodings are supported, both reading a binary tree off the relative
ranking of real values (larger value = higher split):

* latent distances ("dl"): one value per word; the value at word k marks
  how high the constituent opened by word k attaches.  Word 0 is fixed
  at 1 and every split boundary receives ``max_depth`` minus its
  recursion depth.
* gap distances ("dg"): one value per adjacent-word gap, equal to the
  height of the lowest common ancestor of the two words.

Decoding splits a span at its maximal interior value and recurses; ties
break leftmost by default.  The module also defines the JSON-lines record
format used to store distance supervision on disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

from .treebank import Leaf, Node, Tree, leaf_count, tree_depth

DEFAULT_MAX_DEPTH = 100


class RecordFormatError(ValueError):
    """Malformed distance-record line; carries the 1-based line number."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


def _require_binary(t: Tree) -> None:
    if isinstance(t, Node) and len(t.children) != 2:
        raise ValueError(
            f"tree is not binary: node with {len(t.children)} children")


def tree_to_latent(t: Tree, max_depth: int = DEFAULT_MAX_DEPTH) -> list[float]:
    """Per-word latent distances of a binary tree.

    Position 0 is initialized to 1.  Each internal node, visited with
    value m (the root sees ``max_depth``), writes m at the first word of
    its right subtree; both children recurse with m - 1.
    """
    depth = tree_depth(t)
    if depth >= max_depth:
        raise ValueError(f"tree depth {depth} >= max_depth {max_depth}")
    d = [1.0] * leaf_count(t)

    def assign(node: Tree, base: int, m: int) -> None:
        if isinstance(node, Leaf):
            return
        _require_binary(node)
        left, right = node.children
        n_left = leaf_count(left)
        d[base + n_left] = float(m)
        assign(left, base, m - 1)
        assign(right, base + n_left, m - 1)

    assign(t, 0, max_depth)
    return d


def tree_to_gaps(t: Tree) -> list[float]:
    """Per-gap distances: gap value = height of the two words' lowest
    common ancestor.  Built as dist(left) ++ [height] ++ dist(right)."""
    out: list[float] = []

    def walk(node: Tree) -> int:
        if isinstance(node, Leaf):
            return 0
        _require_binary(node)
        left, right = node.children
        h_left = walk(left)
        mark = len(out)
        out.append(0.0)  # placeholder until both heights are known
        h_right = walk(right)
        height = max(h_left, h_right) + 1
        out[mark] = float(height)
        return height

    walk(t)
    return out


def _argmax(values: Sequence[float], lo: int, hi: int, ties: str) -> int:
    """Index of the maximum of values[lo:hi]; ties break per policy."""
    if ties not in ("left", "right"):
        raise ValueError(f"unknown tie policy: {ties!r}")
    best = lo
    for i in range(lo + 1, hi):
        if values[i] > values[best] or (ties == "right" and values[i] == values[best]):
            best = i
    return best


def latent_to_tree(d: Sequence[float], tokens: Sequence[str],
                   ties: str = "left") -> Tree:
    """Decode per-word distances: split where the interior maximum opens
    the right subtree, then recurse on both sides."""
    if len(d) != len(tokens):
        raise ValueError(f"got {len(d)} distances for {len(tokens)} tokens")
    if not tokens:
        raise ValueError("cannot decode an empty sentence")

    def build(i: int, j: int) -> Tree:
        if j - i == 1:
            return Leaf(tokens[i])
        k = _argmax(d, i + 1, j, ties)
        return Node(None, (build(i, k), build(k, j)))

    return build(0, len(tokens))


def gaps_to_tree(d: Sequence[float], tokens: Sequence[str],
                 ties: str = "left") -> Tree:
    """Decode per-gap distances: split at the maximal gap, recurse."""
    if len(d) != len(tokens) - 1:
        raise ValueError(f"got {len(d)} gap distances for {len(tokens)} tokens")
    if not tokens:
        raise ValueError("cannot decode an empty sentence")

    def build(i: int, j: int) -> Tree:
        if j - i == 1:
            return Leaf(tokens[i])
        g = _argmax(d, i, j - 1, ties)
        return Node(None, (build(i, g + 1), build(g + 1, j)))

    return build(0, len(tokens))


# ---------------------------------------------------------------------------
# Distance records (JSON lines)


@dataclass(frozen=True)
class DistanceRecord:
    """One sentence with both distance vectors and an optional count of
    ensemble members that agreed on its parse."""

    tokens: tuple
    dl: tuple
    dg: tuple
    agreement: Optional[int] = None

    def __post_init__(self):
        if len(self.dl) != len(self.tokens):
            raise ValueError("dl length must equal token count")
        if len(self.dg) != len(self.tokens) - 1:
            raise ValueError("dg length must equal token count - 1")


def record_from_tree(t: Tree, max_depth: int = DEFAULT_MAX_DEPTH,
                     agreement: Optional[int] = None) -> DistanceRecord:
    from .treebank import leaves
    return DistanceRecord(
        tokens=tuple(leaves(t)),
        dl=tuple(tree_to_latent(t, max_depth)),
        dg=tuple(tree_to_gaps(t)),
        agreement=agreement,
    )


def write_records(records: Iterable[DistanceRecord], stream) -> None:
    for rec in records:
        obj = {"tokens": list(rec.tokens), "dl": list(rec.dl), "dg": list(rec.dg)}
        if rec.agreement is not None:
            obj["agreement"] = rec.agreement
        stream.write(json.dumps(obj) + "\n")


def read_records(stream: Union[str, Iterable[str]]) -> list[DistanceRecord]:
    if isinstance(stream, str):
        stream = stream.splitlines()
    records = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"bad JSON: {exc}", lineno)
        if not isinstance(obj, dict):
            raise RecordFormatError("record must be a JSON object", lineno)
        for field in ("tokens", "dl", "dg"):
            if field not in obj:
                raise RecordFormatError(f"missing field {field!r}", lineno)
            if not isinstance(obj[field], list):
                raise RecordFormatError(f"field {field!r} must be an array", lineno)
        tokens = obj["tokens"]
        if not all(isinstance(tok, str) for tok in tokens):
            raise RecordFormatError("tokens must be strings", lineno)
        try:
            dl = tuple(float(x) for x in obj["dl"])
            dg = tuple(float(x) for x in obj["dg"])
        except (TypeError, ValueError):
            raise RecordFormatError("distances must be numbers", lineno)
        agreement = obj.get("agreement")
        if agreement is not None and not isinstance(agreement, int):
            raise RecordFormatError("agreement must be an integer", lineno)
        try:
            rec = DistanceRecord(tuple(tokens), dl, dg, agreement)
        except ValueError as exc:
            raise RecordFormatError(str(exc), lineno)
        records.append(rec)
    return records


def load_records(path) -> list[DistanceRecord]:
    with open(path, encoding="utf-8") as fh:
        return read_records(fh)


def dump_records(records: Iterable[DistanceRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_records(records, fh)
