"""Dependency-tree ingestion from CoNLL-U and traversal primitives.

Trees are immutable after construction; every function here is pure, so
concurrent readers are safe.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

N_CONLLU_COLS = 10


class ParseError(ValueError):
    """Raised for malformed CoNLL-U input or structurally invalid sentences."""


@dataclass(frozen=True)
class Token:
    """One word of a parsed sentence. ``head == 0`` marks the root token."""

    index: int
    form: str
    head: int
    deprel: str | None = None

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"token index must be >= 1, got {self.index}")
        if self.head < 0:
            raise ValueError(f"token head must be >= 0, got {self.head}")
        if self.head == self.index:
            raise ValueError(f"token {self.index} cannot be its own head")


@dataclass(frozen=True)
class DependencyTree:
    """An ordered sentence of tokens linked by head indices."""

    tokens: tuple[Token, ...] = field(default_factory=tuple)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def root(self) -> int:
        """Index of the unique token attached to the virtual root."""
        roots = [t.index for t in self.tokens if t.head == 0]
        if len(roots) != 1:
            raise ValueError(f"tree has {len(roots)} roots, expected exactly 1")
        return roots[0]

    def token(self, index: int) -> Token:
        if not 1 <= index <= len(self.tokens):
            raise IndexError(f"token index {index} out of range 1..{len(self.tokens)}")
        return self.tokens[index - 1]

    def forms(self) -> tuple[str, ...]:
        return tuple(t.form for t in self.tokens)


def validate(tree: DependencyTree) -> list[str]:
    """Check tree invariants; returns a list of violations (empty means ok).

    Violations are data, not exceptions: invalid trees are representable so
    they can be inspected and reported.
    """
    violations = []
    n = len(tree.tokens)
    if n == 0:
        return ["empty tree"]
    for pos, tok in enumerate(tree.tokens, start=1):
        if tok.index != pos:
            violations.append(f"index gap: token at position {pos} has index {tok.index}")
    roots = [t.index for t in tree.tokens if t.head == 0]
    if len(roots) == 0:
        violations.append("no root")
    elif len(roots) > 1:
        violations.append(f"multiple roots: tokens {roots}")
    for tok in tree.tokens:
        if tok.head > n:
            violations.append(f"dangling head: token {tok.index} points to {tok.head}")
    if violations:
        return violations
    # Head links are in range; every token must now reach the root.
    for tok in tree.tokens:
        seen = set()
        cur = tok.index
        while cur != 0:
            if cur in seen:
                cycle = sorted(seen)
                violations.append(f"cycle through tokens {cycle}")
                return violations
            seen.add(cur)
            cur = tree.tokens[cur - 1].head
    return violations


def children(tree: DependencyTree, node: int) -> list[int]:
    """Indices whose head is ``node``, in ascending surface order."""
    if not 1 <= node <= len(tree.tokens):
        raise IndexError(f"node {node} out of range 1..{len(tree.tokens)}")
    return [t.index for t in tree.tokens if t.head == node]


def parse_conllu(text: str, drop_punct: bool = False) -> list[DependencyTree]:
    """Parse CoNLL-U text into one validated DependencyTree per sentence.

    Comment lines are ignored; multiword ranges (``1-2``) and empty nodes
    (``1.1``) are skipped with a warning. With ``drop_punct``, tokens whose
    deprel is ``punct`` are removed (they must be leaves) and the remaining
    tokens are reindexed.
    """
    trees = []
    sentence: list[Token] = []
    sentence_start = None

    def finish(at_line: int):
        nonlocal sentence, sentence_start
        if not sentence:
            return
        tree = _build_tree(sentence, sentence_start)
        if drop_punct:
            tree = _drop_punct(tree, sentence_start)
        trees.append(tree)
        sentence = []
        sentence_start = None

    lineno = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\n")
        if not line.strip():
            finish(lineno)
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != N_CONLLU_COLS:
            raise ParseError(f"line {lineno}: expected {N_CONLLU_COLS} columns, got {len(cols)}")
        tok_id = cols[0]
        if "-" in tok_id:
            log.warning("line %d: skipping multiword range %s", lineno, tok_id)
            continue
        if "." in tok_id:
            log.warning("line %d: skipping empty node %s", lineno, tok_id)
            continue
        try:
            index = int(tok_id)
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer token id {tok_id!r}") from None
        try:
            head = int(cols[6])
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer head {cols[6]!r}") from None
        if sentence_start is None:
            sentence_start = lineno
        if any(t.index == index for t in sentence):
            raise ParseError(f"line {lineno}: duplicate token index {index}")
        deprel = cols[7] if cols[7] != "_" else None
        try:
            sentence.append(Token(index=index, form=cols[1], head=head, deprel=deprel))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    finish(lineno)
    return trees


def to_conllu(tree: DependencyTree) -> str:
    """Serialize a tree back to CoNLL-U (10 columns, ``_`` placeholders)."""
    lines = []
    for t in tree.tokens:
        deprel = t.deprel if t.deprel is not None else "_"
        cols = [str(t.index), t.form, "_", "_", "_", "_", str(t.head), deprel, "_", "_"]
        lines.append("\t".join(cols))
    return "\n".join(lines) + "\n"


def _build_tree(tokens: list[Token], start_line: int | None) -> DependencyTree:
    tree = DependencyTree(tokens=tuple(tokens))
    violations = validate(tree)
    if violations:
        where = f"sentence at line {start_line}" if start_line else "sentence"
        raise ParseError(f"{where}: " + "; ".join(violations))
    return tree


def _drop_punct(tree: DependencyTree, start_line: int | None) -> DependencyTree:
    keep = list(tree.tokens)
    # Punctuation must detach leaf-first; anything still holding a
    # non-punctuation child cannot be dropped.
    changed = True
    while changed:
        changed = False
        for tok in list(keep):
            if tok.deprel == "punct" and not any(t.head == tok.index for t in keep):
                keep.remove(tok)
                changed = True
    stuck = [t.index for t in keep if t.deprel == "punct"]
    if stuck:
        where = f"sentence at line {start_line}" if start_line else "sentence"
        raise ParseError(f"{where}: punctuation tokens {stuck} have non-punctuation children")
    if len(keep) == len(tree.tokens):
        return tree
    if not keep:
        where = f"sentence at line {start_line}" if start_line else "sentence"
        raise ParseError(f"{where}: sentence is all punctuation")
    remap = {t.index: i + 1 for i, t in enumerate(keep)}
    remap[0] = 0
    rebuilt = [
        Token(index=remap[t.index], form=t.form, head=remap[t.head], deprel=t.deprel)
        for t in keep
    ]
    return _build_tree(rebuilt, start_line)
