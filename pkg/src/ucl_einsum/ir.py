"""EinSum program representation, parsing and graph utilities.

A program is a list of source tensor declarations plus a DAG of unary or
binary extended EinSum statements::

    tensor U[4,4]; tensor V[4,4]
    W[i,k] = sum[j] U[i,j] * V[j,k]

Labels are case-insensitive; the case used in the surface text is kept as a
promotion hint (upper case = handled relationally).
"""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

COMBINE_OPS = ("multiply", "add", "subtract", "divide")
COMBINE_SYMBOLS = {"*": "multiply", "+": "add", "-": "subtract", "/": "divide"}
SYMBOL_OF = {v: k for k, v in COMBINE_SYMBOLS.items()}
AGGREGATE_OPS = ("sum", "max")
UNARY_OPS = ("identity", "relu", "exp", "scale", "square")

_LABEL_RE = re.compile(r"^[A-Za-z][A-Za-z0-9]*$")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_KEYWORDS = {"tensor", "sum", "max"} | set(UNARY_OPS)


class EinsumError(Exception):
    """Base class for program errors."""


class ParseError(EinsumError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ValidationError(EinsumError):
    pass


class CycleError(ValidationError):
    pass


def canonical_label(name: str) -> str:
    if not _LABEL_RE.match(name):
        raise ValidationError(f"invalid label {name!r}")
    return name.lower()


# =============================================================================
# Core types
# =============================================================================


@dataclass(frozen=True)
class TensorDecl:
    name: str
    bound: tuple[int, ...]

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValidationError(f"invalid tensor name {self.name!r}")
        if any(int(b) < 1 for b in self.bound):
            raise ValidationError(f"tensor {self.name}: bounds must be >= 1, got {list(self.bound)}")
        object.__setattr__(self, "bound", tuple(int(b) for b in self.bound))

    @property
    def rank(self) -> int:
        return len(self.bound)

    @property
    def size(self) -> int:
        return math.prod(self.bound)


@dataclass(frozen=True)
class OpSpec:
    """Aggregation and combine operators of an extended EinSum node.

    ``combine`` is ``None`` for single-input nodes.  ``scale`` is the constant
    of the ``scale`` unary function and ignored otherwise.
    """

    aggregate: str = "sum"
    combine: str | None = "multiply"
    unary: str = "identity"
    scale: float = 1.0

    def __post_init__(self):
        if self.aggregate not in AGGREGATE_OPS:
            raise ValidationError(f"unknown aggregate {self.aggregate!r}")
        if self.combine is not None and self.combine not in COMBINE_OPS:
            raise ValidationError(f"unknown combine op {self.combine!r}")
        if self.unary not in UNARY_OPS:
            raise ValidationError(f"unknown unary function {self.unary!r}")

    @property
    def zero(self) -> float:
        """Identity element of the aggregate."""
        return 0.0 if self.aggregate == "sum" else -math.inf

    @property
    def semiring(self) -> bool:
        return self.aggregate == "sum" and self.combine in ("multiply", None)

    @property
    def prunable(self) -> bool:
        """True when all-zero blocks may be dropped without changing results.

        Needs the (sum, multiply) semiring and a unary function mapping 0 to 0.
        """
        return self.semiring and self.apply_unary(0.0) == 0.0

    def apply_unary(self, x: float) -> float:
        u = self.unary
        if u == "identity":
            return x
        if u == "relu":
            return x if x > 0.0 else 0.0
        if u == "exp":
            return math.exp(x)
        if u == "square":
            return x * x
        return self.scale * x


@dataclass(frozen=True)
class TensorUse:
    """A tensor reference inside a statement, with its label list.

    ``promoted_hint`` holds the labels that were written in upper case.
    """

    tensor: str
    labels: tuple[str, ...]
    promoted_hint: frozenset[str] = frozenset()

    def hint_axes(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.labels) if l in self.promoted_hint)


@dataclass(frozen=True)
class EinsumNode:
    id: str
    output: TensorDecl
    out_labels: tuple[str, ...]
    inputs: tuple[TensorUse, ...]
    op: OpSpec
    out_hint: frozenset[str] = frozenset()

    @property
    def is_unary(self) -> bool:
        return len(self.inputs) == 1

    @property
    def left(self) -> TensorUse:
        return self.inputs[0]

    @property
    def right(self) -> TensorUse | None:
        return self.inputs[1] if len(self.inputs) == 2 else None

    @property
    def input_labels(self) -> tuple[str, ...]:
        """Concatenated input label lists."""
        return tuple(l for use in self.inputs for l in use.labels)

    @property
    def agg_labels(self) -> tuple[str, ...]:
        """Labels in the inputs but not in the output, first-occurrence order."""
        out = set(self.out_labels)
        return tuple(dict.fromkeys(l for l in self.input_labels if l not in out))

    @property
    def all_labels(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.input_labels))

    @property
    def shared_labels(self) -> tuple[str, ...]:
        if self.is_unary:
            return ()
        right = set(self.inputs[1].labels)
        return tuple(l for l in dict.fromkeys(self.inputs[0].labels) if l in right)

    def label_bounds(self, program: EinsumProgram) -> dict[str, int]:
        bounds: dict[str, int] = {}
        for use in self.inputs:
            for l, b in zip(use.labels, program.decl(use.tensor).bound):
                bounds.setdefault(l, b)
        return bounds


@dataclass(frozen=True)
class EinsumProgram:
    tensors: tuple[TensorDecl, ...]
    nodes: tuple[EinsumNode, ...]
    _decls: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        decls = {t.name: t for t in self.tensors}
        for n in self.nodes:
            decls[n.id] = n.output
        object.__setattr__(self, "_decls", decls)

    def decl(self, name: str) -> TensorDecl:
        try:
            return self._decls[name]
        except KeyError:
            raise ValidationError(f"undeclared tensor {name!r}") from None

    @property
    def source_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tensors)

    def node(self, node_id: str) -> EinsumNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producer(self, tensor: str) -> EinsumNode | None:
        for n in self.nodes:
            if n.id == tensor:
                return n
        return None

    def is_source(self, name: str) -> bool:
        return any(t.name == name for t in self.tensors)

    @property
    def edges(self) -> list[tuple[str, str, str]]:
        """(producer vertex, consumer vertex, slot) triples."""
        out = []
        for n in self.nodes:
            if n.is_unary:
                out.append((n.inputs[0].tensor, n.id, "only"))
            else:
                out.append((n.inputs[0].tensor, n.id, "left"))
                out.append((n.inputs[1].tensor, n.id, "right"))
        return out

    def consumers(self, tensor: str) -> list[str]:
        return [c for p, c, _ in self.edges if p == tensor]

    @property
    def sinks(self) -> list[str]:
        used = {p for p, _, _ in self.edges}
        return [n.id for n in self.nodes if n.id not in used]


@dataclass(frozen=True)
class Decomposition:
    """Split of a tensor's axes into promoted (relational) and demoted (dense) ones.

    Axes are positional so that one decomposition can be viewed through the
    label lists of different statements.
    """

    labels: tuple[str, ...]
    promoted_axes: tuple[int, ...]

    def __post_init__(self):
        axes = tuple(sorted(set(self.promoted_axes)))
        if any(a < 0 or a >= len(self.labels) for a in axes):
            raise ValidationError(f"promoted axes {axes} out of range for {self.labels}")
        object.__setattr__(self, "promoted_axes", axes)

    @classmethod
    def from_labels(cls, labels: Sequence[str], promoted: Iterable[str]) -> Decomposition:
        labels = tuple(labels)
        promoted = set(promoted)
        unknown = promoted - set(labels)
        if unknown:
            raise ValidationError(f"labels {sorted(unknown)} not in {list(labels)}")
        return cls(labels, tuple(i for i, l in enumerate(labels) if l in promoted))

    @property
    def demoted_axes(self) -> tuple[int, ...]:
        p = set(self.promoted_axes)
        return tuple(i for i in range(len(self.labels)) if i not in p)

    @property
    def promoted(self) -> tuple[str, ...]:
        return tuple(self.labels[i] for i in self.promoted_axes)

    @property
    def demoted(self) -> tuple[str, ...]:
        return tuple(self.labels[i] for i in self.demoted_axes)

    def relabel(self, labels: Sequence[str]) -> Decomposition:
        labels = tuple(labels)
        if len(labels) != len(self.labels):
            raise ValidationError("relabel with a label list of different rank")
        return Decomposition(labels, self.promoted_axes)

    def promoted_bound(self, bound: Sequence[int]) -> tuple[int, ...]:
        return tuple(bound[i] for i in self.promoted_axes)

    def demoted_bound(self, bound: Sequence[int]) -> tuple[int, ...]:
        return project_bound(bound, self.demoted, self.labels)

    def render(self) -> str:
        p = set(self.promoted_axes)
        return ",".join(l.upper() if i in p else l for i, l in enumerate(self.labels))


# =============================================================================
# Bound projection
# =============================================================================


def project_bound(b: Sequence[int], target: Sequence[str], source: Sequence[str]) -> tuple[int, ...]:
    """Projection and permutation ``b[target; source]`` of a bound vector."""
    if len(b) != len(source):
        raise ValidationError(f"bound {list(b)} does not match labels {list(source)}")
    first: dict[str, int] = {}
    for j, l in enumerate(source):
        first.setdefault(l, j)
    out = []
    for l in target:
        if l not in first:
            raise ValidationError(f"label {l!r} not in {list(source)}")
        out.append(b[first[l]])
    return tuple(out)


# =============================================================================
# Parsing
# =============================================================================

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<nl>\n)
  | (?P<number>-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[\[\],;=()*+\-/^])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            tokens.append(_Token("sep", "\n", line, col))
            line += 1
            line_start = m.end()
        elif kind == "op" and m.group() == ";":
            tokens.append(_Token("sep", ";", line, col))
        elif kind not in ("ws", "comment"):
            tokens.append(_Token(kind, m.group(), line, col))
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


@dataclass
class _Statement:
    out: str
    out_labels: list[str]
    out_hint: set[str]
    aggregate: str
    agg_labels: list[str] | None
    inputs: list[TensorUse]
    combine: str | None
    unary: str
    scale: float
    line: int
    col: int


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.toks[self.i]

    def error(self, msg: str, tok: _Token | None = None):
        tok = tok or self.tok
        raise ParseError(msg, tok.line, tok.col)

    def advance(self) -> _Token:
        t = self.tok
        self.i += 1
        return t

    def expect(self, text: str) -> _Token:
        if self.tok.text != text or self.tok.kind in ("name", "number"):
            found = self.tok.text if self.tok.kind != "eof" else "end of input"
            self.error(f"expected {text!r}, found {found!r}")
        return self.advance()

    def expect_name(self) -> _Token:
        if self.tok.kind != "name":
            self.error(f"expected a name, found {self.tok.text!r}")
        return self.advance()

    def parse(self) -> tuple[list[TensorDecl], list[_Statement]]:
        decls: list[TensorDecl] = []
        stmts: list[_Statement] = []
        while self.tok.kind != "eof":
            if self.tok.kind == "sep":
                self.advance()
                continue
            if self.tok.kind == "name" and self.tok.text == "tensor":
                decls.append(self.declaration())
            else:
                stmts.append(self.statement())
            if self.tok.kind not in ("sep", "eof"):
                self.error(f"expected end of statement, found {self.tok.text!r}")
        return decls, stmts

    def declaration(self) -> TensorDecl:
        self.advance()
        name = self.expect_name()
        self.expect("[")
        bounds = []
        while self.tok.text != "]":
            t = self.tok
            if t.kind != "number" or not re.fullmatch(r"\d+", t.text):
                self.error(f"expected a positive integer bound, found {t.text!r}")
            self.advance()
            if int(t.text) < 1:
                self.error("bounds must be >= 1", t)
            bounds.append(int(t.text))
            if self.tok.text == ",":
                self.advance()
            elif self.tok.text != "]":
                self.error(f"expected ',' or ']', found {self.tok.text!r}")
        self.expect("]")
        try:
            return TensorDecl(name.text, tuple(bounds))
        except ValidationError as e:
            self.error(str(e), name)

    def label_list(self) -> tuple[list[str], set[str]]:
        self.expect("[")
        labels, hint = [], set()
        while self.tok.text != "]":
            t = self.tok
            if t.kind != "name" or not _LABEL_RE.match(t.text):
                self.error(f"expected a label, found {t.text!r}")
            self.advance()
            lab = t.text.lower()
            labels.append(lab)
            if t.text[0].isupper():
                hint.add(lab)
            if self.tok.text == ",":
                self.advance()
            elif self.tok.text != "]":
                self.error(f"expected ',' or ']', found {self.tok.text!r}")
        self.expect("]")
        return labels, hint

    def tensor_ref(self) -> TensorUse:
        name = self.expect_name()
        if name.text in _KEYWORDS:
            self.error(f"expected a tensor reference, found keyword {name.text!r}", name)
        if self.tok.text != "[":
            self.error(f"expected '[' after tensor name {name.text!r}")
        labels, hint = self.label_list()
        return TensorUse(name.text, tuple(labels), frozenset(hint))

    def body(self) -> tuple[list[TensorUse], str | None]:
        """``A[...]`` or ``A[...] OP B[...]``."""
        left = self.tensor_ref()
        if self.tok.kind == "op" and self.tok.text in COMBINE_SYMBOLS:
            op = COMBINE_SYMBOLS[self.advance().text]
            right = self.tensor_ref()
            return [left, right], op
        return [left], None

    def statement(self) -> _Statement:
        start = self.tok
        out = self.expect_name()
        if out.text in _KEYWORDS:
            self.error(f"unexpected keyword {out.text!r}", out)
        out_labels, out_hint = self.label_list()
        self.expect("=")
        agg_tok = self.expect_name()
        if agg_tok.text not in AGGREGATE_OPS:
            self.error(f"expected 'sum' or 'max', found {agg_tok.text!r}", agg_tok)
        agg_labels = None
        if self.tok.text == "[":
            agg_labels, _ = self.label_list()
        unary, scale = "identity", 1.0
        t = self.tok
        if t.kind == "name" and t.text in UNARY_OPS:
            self.advance()
            unary = t.text
            self.expect("(")
            if unary == "scale":
                num = self.tok
                if num.kind != "number":
                    self.error("scale expects a numeric constant first")
                self.advance()
                scale = float(num.text)
                self.expect(",")
            inputs, combine = self.body()
            self.expect(")")
        elif t.text == "(":
            self.advance()
            inputs, combine = self.body()
            self.expect(")")
            self.expect("^")
            two = self.tok
            if two.text != "2":
                self.error("only the exponent 2 is supported")
            self.advance()
            unary = "square"
        else:
            inputs, combine = self.body()
        return _Statement(
            out.text, out_labels, out_hint, agg_tok.text, agg_labels, inputs,
            combine, unary, scale, start.line, start.col,
        )


def parse_program(text: str, allow_repeated_labels: bool = False) -> EinsumProgram:
    """Parse and validate program text into an :class:`EinsumProgram`."""
    decls, stmts = _Parser(text).parse()
    names: dict[str, TensorDecl] = {}
    for d in decls:
        if d.name in names:
            raise ValidationError(f"tensor {d.name!r} declared twice")
        names[d.name] = d
    defined: dict[str, _Statement] = {}
    for s in stmts:
        if s.out in names or s.out in defined:
            raise ValidationError(f"line {s.line}: tensor {s.out!r} is assigned more than once")
        defined[s.out] = s
    for s in stmts:
        for use in s.inputs:
            if use.tensor not in names and use.tensor not in defined:
                raise ValidationError(f"line {s.line}: undeclared tensor {use.tensor!r}")

    # resolve statements in dependency order so output bounds can be inferred
    order = _statement_order(stmts, set(names))
    nodes: dict[str, EinsumNode] = {}
    for s in order:
        nodes[s.out] = _build_node(s, names, nodes, allow_repeated_labels)
    return EinsumProgram(tuple(decls), tuple(nodes[s.out] for s in stmts))


def _statement_order(stmts: list[_Statement], sources: set[str]) -> list[_Statement]:
    by_name = {s.out: s for s in stmts}
    state: dict[str, int] = {}
    order: list[_Statement] = []

    def visit(name: str, path: list[str]):
        if name in sources:
            return
        st = state.get(name)
        if st == 2:
            return
        if st == 1:
            cycle = path[path.index(name):] + [name]
            raise CycleError("cyclic graph: " + " -> ".join(cycle))
        state[name] = 1
        for use in by_name[name].inputs:
            visit(use.tensor, path + [name])
        state[name] = 2
        order.append(by_name[name])

    for s in stmts:
        visit(s.out, [])
    return order


def _build_node(s: _Statement, decls: dict[str, TensorDecl], nodes: dict[str, EinsumNode],
                allow_repeated: bool) -> EinsumNode:
    where = f"line {s.line}"
    bounds: dict[str, int] = {}
    for use in s.inputs:
        decl = decls.get(use.tensor) or nodes[use.tensor].output
        if len(use.labels) != decl.rank:
            raise ValidationError(
                f"{where}: {use.tensor} has rank {decl.rank} but is indexed with {len(use.labels)} labels")
        if not allow_repeated and len(set(use.labels)) != len(use.labels):
            raise ValidationError(f"{where}: repeated label in {use.tensor}[{','.join(use.labels)}]")
        for l, b in zip(use.labels, decl.bound):
            if bounds.setdefault(l, b) != b:
                raise ValidationError(f"{where}: bound mismatch for label {l!r}: {bounds[l]} vs {b}")
    if not allow_repeated and len(set(s.out_labels)) != len(s.out_labels):
        raise ValidationError(f"{where}: repeated label in output {s.out}")
    for l in s.out_labels:
        if l not in bounds:
            raise ValidationError(f"{where}: output label {l!r} does not appear in any input")
    combine = s.combine if len(s.inputs) == 2 else None
    op = OpSpec(s.aggregate, combine, s.unary, s.scale)
    node = EinsumNode(
        id=s.out,
        output=TensorDecl(s.out, tuple(bounds[l] for l in s.out_labels)),
        out_labels=tuple(s.out_labels),
        inputs=tuple(s.inputs),
        op=op,
        out_hint=frozenset(s.out_hint),
    )
    if s.agg_labels is not None and set(s.agg_labels) != set(node.agg_labels):
        raise ValidationError(
            f"{where}: aggregation labels {s.agg_labels} do not match derived {list(node.agg_labels)}")
    return node


# =============================================================================
# Pretty printing
# =============================================================================


def _fmt_labels(labels: Sequence[str], promoted: Iterable[str]) -> str:
    p = set(promoted)
    return "[" + ",".join(l.upper() if l in p else l for l in labels) + "]"


def format_statement(node: EinsumNode, out_promoted: Iterable[str] | None = None,
                     in_promoted: Sequence[Iterable[str]] | None = None) -> str:
    """Render a statement, upper-casing promoted labels.

    Without explicit promoted sets the parsed hints are used.
    """
    out_p = set(node.out_hint if out_promoted is None else out_promoted)
    ins_p = [set(u.promoted_hint) for u in node.inputs] if in_promoted is None else [set(p) for p in in_promoted]
    refs = [f"{u.tensor}{_fmt_labels(u.labels, p)}" for u, p in zip(node.inputs, ins_p)]
    body = refs[0] if node.is_unary else f"{refs[0]} {SYMBOL_OF[node.op.combine]} {refs[1]}"
    op = node.op
    if op.unary == "scale":
        body = f"scale({op.scale!r}, {body})"
    elif op.unary != "identity":
        body = f"{op.unary}({body})"
    agg_p = set().union(*ins_p) if ins_p else set()
    agg = f"{op.aggregate}{_fmt_labels(node.agg_labels, agg_p)}"
    return f"{node.id}{_fmt_labels(node.out_labels, out_p)} = {agg} {body}"


def format_program(p: EinsumProgram) -> str:
    lines = [f"tensor {t.name}[{','.join(map(str, t.bound))}];" for t in p.tensors]
    lines += [format_statement(n) + ";" for n in p.nodes]
    return "\n".join(lines) + "\n"


# =============================================================================
# Graph utilities
# =============================================================================


def topo_sort(p: EinsumProgram) -> list[str]:
    """Vertices (source tensors and nodes) with producers before consumers.

    Ties are broken by declaration order, sources before statements.
    """
    rank = {t.name: (0, i) for i, t in enumerate(p.tensors)}
    rank.update({n.id: (1, i) for i, n in enumerate(p.nodes)})
    indeg = {v: 0 for v in rank}
    succ: dict[str, list[str]] = {v: [] for v in rank}
    for prod_, cons, _ in p.edges:
        if prod_ not in rank:
            raise ValidationError(f"undeclared tensor {prod_!r}")
        indeg[cons] += 1
        succ[prod_].append(cons)
    heap = [(rank[v], v) for v, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, v = heapq.heappop(heap)
        order.append(v)
        for c in succ[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, (rank[c], c))
    if len(order) != len(rank):
        stuck = sorted(v for v, d in indeg.items() if d > 0)
        raise CycleError(f"cyclic graph involving {stuck}")
    return order


@dataclass(frozen=True)
class Tree:
    """A subgraph in which every non-frozen tensor is consumed at most once.

    ``frozen`` lists tensors whose decomposition was fixed by an earlier tree.
    """

    nodes: tuple[str, ...]
    frozen: frozenset[str]

    @property
    def root(self) -> str:
        return self.nodes[-1]


def split_into_trees(p: EinsumProgram) -> list[Tree]:
    """Greedy maximal decomposition into trees, in topological order."""
    order = [v for v in topo_sort(p) if not p.is_source(v)]
    for v in order:
        ins = [u.tensor for u in p.node(v).inputs]
        if len(ins) == 2 and ins[0] == ins[1]:
            raise ValidationError(f"{v}: both inputs read tensor {ins[0]!r}; bind a copy to a new name first")
    remaining = list(order)
    frozen: set[str] = set()
    trees: list[Tree] = []
    while remaining:
        in_tree: list[str] = []
        consumed: set[str] = set()
        for v in remaining:
            node = p.node(v)
            ok = True
            local: set[str] = set()
            for use in node.inputs:
                t = use.tensor
                available = t in frozen or p.is_source(t) or t in in_tree
                if not available:
                    ok = False
                    break
                if t not in frozen and (t in consumed or t in local):
                    ok = False
                    break
                local.add(t)
            if ok:
                in_tree.append(v)
                consumed |= {t for t in local if t not in frozen}
        if not in_tree:  # defensive: cannot happen for a DAG
            raise ValidationError("tree extraction made no progress")
        trees.append(Tree(tuple(in_tree), frozenset(frozen)))
        frozen |= consumed | set(in_tree)
        remaining = [v for v in remaining if v not in in_tree]
    return trees
