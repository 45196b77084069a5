import numpy as np
import pytest

from astcl.tree import AstGraph, AstNode


def tree_from_parents(parents, types=None):
    """Build a graph from a parent list (``None`` marks the root); ids are list positions."""
    nodes = [AstNode(id=i, node_type=(types[i] if types else f"T{i}"), text=f"t{i}",
                     start_line=1, end_line=1, parent=p)
             for i, p in enumerate(parents)]
    for i, p in enumerate(parents):
        if p is not None:
            nodes[p].children.append(i)
    return AstGraph.from_nodes(nodes)


@pytest.fixture
def chain4():
    return tree_from_parents([None, 0, 1, 2])


@pytest.fixture
def binary7():
    return tree_from_parents([None, 0, 0, 1, 1, 2, 2])


@pytest.fixture
def figure1():
    """Root, one level-1 node, A/B/C at level 2, D under A, E under D."""
    # ids: 0 root, 1 mid, 2 A, 3 B, 4 C, 5 D, 6 E
    return tree_from_parents([None, 0, 1, 1, 1, 2, 5],
                             types=["R", "M", "A", "B", "C", "D", "E"])


def random_tree(rng, n):
    parents = [None] + [int(rng.integers(0, i)) for i in range(1, n)]
    return tree_from_parents(parents)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary -----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one ``A<n> PASS|FAIL ...`` line; all lines are echoed after the run."""
    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
