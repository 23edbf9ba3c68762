import pytest

from synvqa.deptree import DependencyTree, Token, parse_conllu

# Five-token phrase whose parse has two chains hanging off the root:
# girl -> in -> green and girl -> sitting -> on. Small enough to enumerate
# every subtree by hand, rich enough to exercise branch nodes.
PHRASE_CONLLU = """\
1\tgirl\t_\t_\t_\t_\t0\troot\t_\t_
2\tin\t_\t_\t_\t_\t1\tcase\t_\t_
3\tgreen\t_\t_\t_\t_\t2\tobl\t_\t_
4\tsitting\t_\t_\t_\t_\t1\tacl\t_\t_
5\ton\t_\t_\t_\t_\t4\tcase\t_\t_
"""

# Hand-enumerated word compositions of the phrase above.
PHRASE_EDGES = [
    {3},
    {5},
    {2, 3},
    {4, 5},
    {1, 2, 3},
    {1, 4, 5},
    {1, 2, 3, 4, 5},
]


@pytest.fixture
def phrase_tree() -> DependencyTree:
    (tree,) = parse_conllu(PHRASE_CONLLU)
    return tree


def chain_tree(n: int) -> DependencyTree:
    """1 <- 2 <- ... <- n, every token the head of the next."""
    return DependencyTree(
        tokens=tuple(Token(index=i, form=f"w{i}", head=i - 1) for i in range(1, n + 1))
    )


def star_tree(k: int) -> DependencyTree:
    """Root with k leaf children."""
    toks = [Token(index=1, form="root", head=0)]
    toks += [Token(index=i, form=f"w{i}", head=1) for i in range(2, k + 2)]
    return DependencyTree(tokens=tuple(toks))
