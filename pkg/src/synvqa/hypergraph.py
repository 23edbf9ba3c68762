"""Subtree enumeration and syntactic hypergraph construction.

Word compositions are the connected subtrees of the dependency tree: every
leaf on its own, every branch node joined with one child's full subtree, and
every branch node's full subtree. Each composition becomes one hyperedge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deptree import DependencyTree, children, validate


@dataclass(frozen=True)
class SyntacticHypergraph:
    """Node/hyperedge incidence structure for one question.

    ``incidence`` is the 0/1 node-by-edge matrix H; ``edge_degree`` (D_e) its
    column sums, ``node_degree`` (D_v) its row sums.
    """

    n_nodes: int
    edges: tuple[frozenset[int], ...]
    incidence: np.ndarray
    edge_degree: np.ndarray
    node_degree: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def get_subtree(tree: DependencyTree, node: int) -> frozenset[int]:
    """All descendants of ``node`` including itself; singleton for a leaf."""
    if not 1 <= node <= tree.n_tokens:
        raise IndexError(f"node {node} out of range 1..{tree.n_tokens}")
    out = {node}
    stack = [node]
    while stack:
        for c in children(tree, stack.pop()):
            out.add(c)
            stack.append(c)
    return frozenset(out)


def subtree_gen(tree: DependencyTree) -> set[frozenset[int]]:
    """Enumerate the word compositions of a validated tree.

    Leaves contribute their singleton; each branch node contributes itself
    joined with every single child subtree, plus its own full subtree.
    Duplicate node sets collapse (a single-child branch produces its full
    subtree twice).
    """
    bad = validate(tree)
    if bad:
        raise ValueError("invalid tree: " + "; ".join(bad))
    out: set[frozenset[int]] = set()
    for tok in tree.tokens:
        kids = children(tree, tok.index)
        if not kids:
            out.add(frozenset([tok.index]))
        else:
            for c in kids:
                out.add(frozenset([tok.index]) | get_subtree(tree, c))
            out.add(get_subtree(tree, tok.index))
    return out


def build_hypergraph(tree: DependencyTree) -> SyntacticHypergraph:
    """Build the hypergraph of a tree with a canonical edge ordering.

    Edges are sorted by (size, sorted member indices) so the incidence
    matrix layout is reproducible regardless of traversal order.
    """
    edge_sets = subtree_gen(tree)
    edges = tuple(sorted(edge_sets, key=lambda e: (len(e), sorted(e))))
    n = tree.n_tokens
    H = np.zeros((n, len(edges)), dtype=np.float64)
    for j, edge in enumerate(edges):
        for i in edge:
            H[i - 1, j] = 1.0
    return SyntacticHypergraph(
        n_nodes=n,
        edges=edges,
        incidence=H,
        edge_degree=H.sum(axis=0),
        node_degree=H.sum(axis=1),
    )


def identity_hypergraph(n_nodes: int) -> SyntacticHypergraph:
    """Word-level degenerate hypergraph: one singleton edge per word."""
    if n_nodes < 1:
        raise ValueError("need at least one node")
    edges = tuple(frozenset([i]) for i in range(1, n_nodes + 1))
    H = np.eye(n_nodes, dtype=np.float64)
    return SyntacticHypergraph(
        n_nodes=n_nodes,
        edges=edges,
        incidence=H,
        edge_degree=H.sum(axis=0),
        node_degree=H.sum(axis=1),
    )


def hypergraph_to_dict(graph: SyntacticHypergraph) -> dict:
    """JSON-friendly view: node count, edge member lists, dense 0/1 rows."""
    return {
        "n_nodes": graph.n_nodes,
        "edges": [sorted(e) for e in graph.edges],
        "H": [[int(v) for v in row] for row in graph.incidence],
    }


def incidence_csv(graph: SyntacticHypergraph) -> str:
    """CSV dump of H with a header row naming edges by member indices."""
    header = ["node"] + ["e" + "+".join(str(i) for i in sorted(e)) for e in graph.edges]
    lines = [",".join(header)]
    for i in range(graph.n_nodes):
        lines.append(",".join([str(i + 1)] + [str(int(v)) for v in graph.incidence[i]]))
    return "\n".join(lines) + "\n"
