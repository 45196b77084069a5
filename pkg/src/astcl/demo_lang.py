"""Recursive-descent parser for the small demo language.

Grammar (EBNF)::

    program    := fn_decl+
    fn_decl    := "fn" IDENT "(" [IDENT {"," IDENT}] ")" block
    block      := "{" {stmt} "}"
    stmt       := assign | if | while | call ";" | return
    assign     := IDENT "=" expr ";"
    if         := "if" "(" expr ")" block ["else" block]
    while      := "while" "(" expr ")" block
    return     := "return" [expr] ";"
    expr       := sum [("<" | "==") sum]
    sum        := term {("+" | "-") term}
    term       := atom {"*" atom}
    atom       := INT | IDENT | call | "(" expr ")"
    call       := IDENT "(" [expr {"," expr}] ")"

Node mapping (one node per production; the function name and the callee
name are not separate nodes, they only appear in the covered text):

    program   -> CompilationUnit(FunctionDecl+)
    fn_decl   -> FunctionDecl(Param*, Block)
    block     -> Block(stmt*)
    assign    -> Assign(Identifier, expr)
    if        -> If(expr, Block[, Block])
    while     -> While(expr, Block)
    call      -> Call(expr*)
    return    -> Return([expr])
    binary op -> BinaryOp(lhs, rhs)
    IDENT     -> Identifier;  INT -> IntLiteral

Nodes are numbered in depth-first preorder.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .tree import MAX_DEPTH, MAX_NODES, MAX_PATHS, AstError, AstGraph, AstNode

NODE_TYPES = (
    "CompilationUnit", "FunctionDecl", "Param", "Block", "Assign", "If", "While",
    "Call", "Return", "BinaryOp", "Identifier", "IntLiteral",
)

KEYWORDS = {"fn", "if", "else", "while", "return"}

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|[-+*<=(){},;])
""", re.VERBOSE)


class ParseError(AstError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int
    start: int
    end: int


@dataclass
class _Syn:
    node_type: str
    start: int
    end: int
    children: list["_Syn"] = field(default_factory=list)


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        if kind == "ws":
            nl = text.count("\n")
            if nl:
                line += nl
                line_start = pos + text.rindex("\n") + 1
        else:
            if kind == "ident" and text in KEYWORDS:
                kind = "kw"
            toks.append(_Tok(kind, text, line, pos - line_start + 1, pos, m.end()))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1, pos, pos))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _peek(self, k: int = 1) -> _Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def _fail(self, expected: str):
        t = self.tok
        found = "end of input" if t.kind == "eof" else repr(t.text)
        raise ParseError(f"expected {expected}, found {found}", t.line, t.col)

    def _accept(self, text: str) -> _Tok | None:
        if self.tok.text == text and self.tok.kind in ("op", "kw"):
            t = self.tok
            self.i += 1
            return t
        return None

    def _expect(self, text: str) -> _Tok:
        t = self._accept(text)
        if t is None:
            self._fail(repr(text))
        return t

    def _ident(self) -> _Tok:
        if self.tok.kind != "ident":
            self._fail("identifier")
        t = self.tok
        self.i += 1
        return t

    def program(self) -> _Syn:
        if self.tok.kind == "eof":
            self._fail("'fn' (a program needs at least one function)")
        fns = []
        while self.tok.kind != "eof":
            fns.append(self.fn_decl())
        return _Syn("CompilationUnit", fns[0].start, fns[-1].end, fns)

    def fn_decl(self) -> _Syn:
        start = self._expect("fn").start
        self._ident()
        self._expect("(")
        params = []
        if not self._accept(")"):
            while True:
                t = self._ident()
                params.append(_Syn("Param", t.start, t.end))
                if self._accept(")"):
                    break
                self._expect(",")
        body = self.block()
        return _Syn("FunctionDecl", start, body.end, params + [body])

    def block(self) -> _Syn:
        start = self._expect("{").start
        stmts = []
        while not (self.tok.kind == "op" and self.tok.text == "}"):
            if self.tok.kind == "eof":
                self._fail("'}'")
            stmts.append(self.stmt())
        end = self._expect("}").end
        return _Syn("Block", start, end, stmts)

    def stmt(self) -> _Syn:
        t = self.tok
        if t.kind == "kw" and t.text == "if":
            self.i += 1
            self._expect("(")
            cond = self.expr()
            self._expect(")")
            kids = [cond, self.block()]
            if self._accept("else"):
                kids.append(self.block())
            return _Syn("If", t.start, kids[-1].end, kids)
        if t.kind == "kw" and t.text == "while":
            self.i += 1
            self._expect("(")
            cond = self.expr()
            self._expect(")")
            body = self.block()
            return _Syn("While", t.start, body.end, [cond, body])
        if t.kind == "kw" and t.text == "return":
            self.i += 1
            kids = [] if self.tok.text == ";" else [self.expr()]
            end = self._expect(";").end
            return _Syn("Return", t.start, end, kids)
        if t.kind == "ident" and self._peek().text == "=":
            self.i += 2
            target = _Syn("Identifier", t.start, t.end)
            value = self.expr()
            end = self._expect(";").end
            return _Syn("Assign", t.start, end, [target, value])
        if t.kind == "ident" and self._peek().text == "(":
            call = self.call()
            self._expect(";")
            return call
        self._fail("statement")

    def call(self) -> _Syn:
        name = self._ident()
        self._expect("(")
        args = []
        if self.tok.text != ")":
            args.append(self.expr())
            while self._accept(","):
                args.append(self.expr())
        end = self._expect(")").end
        return _Syn("Call", name.start, end, args)

    def expr(self) -> _Syn:
        lhs = self.sum()
        if self.tok.kind == "op" and self.tok.text in ("<", "=="):
            self.i += 1
            rhs = self.sum()
            return _Syn("BinaryOp", lhs.start, rhs.end, [lhs, rhs])
        return lhs

    def sum(self) -> _Syn:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in ("+", "-"):
            self.i += 1
            rhs = self.term()
            node = _Syn("BinaryOp", node.start, rhs.end, [node, rhs])
        return node

    def term(self) -> _Syn:
        node = self.atom()
        while self._accept("*"):
            rhs = self.atom()
            node = _Syn("BinaryOp", node.start, rhs.end, [node, rhs])
        return node

    def atom(self) -> _Syn:
        t = self.tok
        if t.kind == "int":
            self.i += 1
            return _Syn("IntLiteral", t.start, t.end)
        if t.kind == "ident":
            if self._peek().text == "(":
                return self.call()
            self.i += 1
            return _Syn("Identifier", t.start, t.end)
        if self._accept("("):
            inner = self.expr()
            self._expect(")")
            return inner
        self._fail("expression")


def _line_of(src: str, offset: int) -> int:
    return src.count("\n", 0, offset) + 1


def _flatten(src: str, root: _Syn) -> list[AstNode]:
    nodes: list[AstNode] = []
    stack: list[tuple[_Syn, int | None]] = [(root, None)]
    while stack:
        syn, parent = stack.pop()
        nid = len(nodes)
        nodes.append(AstNode(
            id=nid, node_type=syn.node_type, text=src[syn.start:syn.end],
            start_line=_line_of(src, syn.start), end_line=_line_of(src, max(syn.end - 1, syn.start)),
            parent=parent))
        if parent is not None:
            nodes[parent].children.append(nid)
        for child in reversed(syn.children):
            stack.append((child, nid))
    return nodes


def parse_demo_source(text: str, max_depth: int = MAX_DEPTH, max_nodes: int = MAX_NODES,
                      max_paths: int = MAX_PATHS) -> AstGraph:
    """Parse demo-language source into an ``AstGraph``.

    Raises ``ParseError`` (with line/column) on bad syntax and ``CapError`` when
    the tree is deeper or larger than the caps.
    """
    root = _Parser(text).program()
    return AstGraph.from_nodes(_flatten(text, root), max_depth=max_depth,
                               max_nodes=max_nodes, max_paths=max_paths)
