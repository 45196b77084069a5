"""Random demo-language programs for pretraining corpora and toy downstream tasks.

Generators track the level each emitted construct will occupy in the parsed
tree, so every program stays within ``max_depth`` by construction. Nested
binary operands are always parenthesized so that the parse matches the
generated shape.
"""

from __future__ import annotations

import numpy as np

from .demo_lang import parse_demo_source
from .tree import AstGraph

NAMES = ("a", "b", "c", "i", "j", "n", "x", "y", "k", "acc", "total", "count", "tmp", "idx")
FUNCS = ("main", "step", "helper", "compute", "update", "run", "scan", "solve")
CALLEES = ("print", "emit", "push", "log", "check")

# fn body statements sit at level 3: CompilationUnit > FunctionDecl > Block > stmt
BODY_LEVEL = 3


class _Gen:
    def __init__(self, rng: np.random.Generator, max_depth: int, weights: dict[str, float]):
        self.rng = rng
        self.max_depth = max_depth
        kinds = list(weights)
        w = np.array([weights[k] for k in kinds], dtype=float)
        self.kinds = kinds
        self.probs = w / w.sum()

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def leaf(self) -> str:
        if self.rng.random() < 0.5:
            return self.pick(NAMES)
        return str(int(self.rng.integers(0, 20)))

    def expr(self, level: int, ops=("+", "-", "*", "<", "=="), p_bin: float = 0.5) -> str:
        if level + 1 <= self.max_depth and self.rng.random() < p_bin:
            lhs = self.expr(level + 1, ops, p_bin * 0.6)
            rhs = self.expr(level + 1, ops, p_bin * 0.6)
            lhs = f"({lhs})" if " " in lhs else lhs
            rhs = f"({rhs})" if " " in rhs else rhs
            return f"{lhs} {self.pick(ops)} {rhs}"
        return self.leaf()

    def cond(self, level: int) -> str:
        lhs = self.pick(NAMES)
        if level + 1 > self.max_depth:
            return lhs
        op = "<" if self.rng.random() < 0.5 else "=="
        return f"{lhs} {op} {self.leaf()}"

    def feasible(self, kind: str, level: int) -> bool:
        need = {"assign": 1, "call": 0, "return": 0, "if": 2, "while": 2}[kind]
        return level + need <= self.max_depth

    def stmt(self, level: int, indent: str) -> list[str]:
        while True:
            kind = self.kinds[int(self.rng.choice(len(self.kinds), p=self.probs))]
            if self.feasible(kind, level):
                break
        if kind == "assign":
            return [f"{indent}{self.pick(NAMES)} = {self.expr(level + 1)};"]
        if kind == "call":
            if level + 1 > self.max_depth:
                return [f"{indent}{self.pick(CALLEES)}();"]
            nargs = int(self.rng.integers(0, 3))
            args = ", ".join(self.expr(level + 1, p_bin=0.3) for _ in range(nargs))
            return [f"{indent}{self.pick(CALLEES)}({args});"]
        if kind == "return":
            if level + 1 > self.max_depth or self.rng.random() < 0.2:
                return [f"{indent}return;"]
            return [f"{indent}return {self.expr(level + 1)};"]
        head = "while" if kind == "while" else "if"
        lines = [f"{indent}{head} ({self.cond(level + 1)}) {{"]
        lines += self.block(level + 2, indent + "  ", int(self.rng.integers(1, 4)))
        if kind == "if" and self.rng.random() < 0.4:
            lines.append(f"{indent}}} else {{")
            lines += self.block(level + 2, indent + "  ", int(self.rng.integers(1, 3)))
        lines.append(f"{indent}}}")
        return lines

    def block(self, level: int, indent: str, count: int) -> list[str]:
        out: list[str] = []
        for _ in range(count):
            out += self.stmt(level, indent)
        return out

    def function(self, n_stmts: int) -> list[str]:
        params = list(self.rng.choice(NAMES, size=int(self.rng.integers(0, 3)), replace=False))
        lines = [f"fn {self.pick(FUNCS)}({', '.join(params)}) {{"]
        lines += self.block(BODY_LEVEL, "  ", n_stmts)
        lines.append("}")
        return lines

    def program(self, n_funcs: int, stmt_range: tuple[int, int]) -> str:
        lines: list[str] = []
        for _ in range(n_funcs):
            lines += self.function(int(self.rng.integers(stmt_range[0], stmt_range[1] + 1)))
        return "\n".join(lines) + "\n"


MIXED = {"assign": 3.0, "call": 1.5, "return": 1.0, "if": 1.5, "while": 1.5}
LOOP_HEAVY = {"assign": 2.0, "call": 0.5, "while": 4.0}
BRANCH_HEAVY = {"assign": 1.0, "return": 1.5, "if": 4.0}


def random_program(rng: np.random.Generator, max_depth: int = 6,
                   weights: dict[str, float] = MIXED) -> str:
    gen = _Gen(rng, max_depth, weights)
    return gen.program(int(rng.integers(2, 5)), (4, 8))


def random_corpus(count: int, seed: int, max_depth: int = 6) -> list[AstGraph]:
    """``count`` parsed random programs, each of depth at most ``max_depth``."""
    rng = np.random.default_rng(seed)
    return [parse_demo_source(random_program(rng, max_depth)) for _ in range(count)]


def family_sources(count: int, seed: int, max_depth: int = 6) -> tuple[list[str], list[int]]:
    """Loop-heavy (label 0) and branch-heavy (label 1) programs, interleaved."""
    rng = np.random.default_rng(seed)
    sources, labels = [], []
    for i in range(2 * count):
        label = i % 2
        weights = LOOP_HEAVY if label == 0 else BRANCH_HEAVY
        gen = _Gen(rng, max_depth, weights)
        sources.append(gen.program(1, (3, 6)))
        labels.append(label)
    return sources, labels
