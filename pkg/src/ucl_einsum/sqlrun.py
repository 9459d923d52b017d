"""A small interpreter for the SQL dialect produced by :mod:`ucl_einsum.codegen`.

It understands exactly the statement shapes the emitter writes (``CREATE
TABLE``, ``CREATE VIEW ... AS SELECT`` and ``INSERT INTO ... SELECT`` with
explicit ``WHERE`` predicates) and evaluates kernel calls from the manifest.
It exists to check that a script computes the same relations as the plan.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .codegen import Script
from .executor import TensorRelation, decompose_tensor
from .ir import Decomposition, EinsumProgram, OpSpec
from .kernels import KernelPlan, run_kernel
from .optimizer import Plan
from .stats import SparseTensor


class ScriptError(Exception):
    """Raised for statements outside the supported dialect."""


@dataclass
class Table:
    """Rows of ``(key, block)`` with one named, bounded key column per key position."""

    name: str
    columns: tuple[str, ...]
    bounds: tuple[int, ...]
    rows: list[tuple[tuple[int, ...], np.ndarray]] = field(default_factory=list)

    def as_dict(self) -> dict[tuple[int, ...], np.ndarray]:
        return dict(sorted(self.rows, key=lambda r: r[0]))


# =============================================================================
# Lexing helpers
# =============================================================================


def _split_top(text: str, sep: str = ",") -> list[str]:
    """Split on ``sep`` outside parentheses and brackets."""
    out, depth, cur = [], 0, []
    for ch in text:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == sep and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        out.append("".join(cur).strip())
    return out


def _statements(sql: str) -> list[str]:
    lines = [l for l in sql.splitlines() if not l.strip().startswith("--")]
    text = " ".join(lines)
    return [" ".join(s.split()) for s in text.split(";") if s.strip()]


_SELECT = re.compile(r"^SELECT (?P<sel>.*?) FROM (?P<frm>.*?)(?: WHERE (?P<where>.*?))?(?: GROUP BY (?P<grp>.*))?$")
_CALL = re.compile(r"^(?P<fn>\w+) \((?P<args>.*)\)$")
_COL = re.compile(r"^(?P<rel>\w+)\.(?P<col>\w+)$")
_SLICE = re.compile(r"^(?P<rel>\w+)\.(?P<col>\w+)\[(?P<idx>.*)\]$")
_AS = re.compile(r"^(?P<expr>.*) AS (?P<name>\w+)$")


# =============================================================================
# Interpreter
# =============================================================================


class Interpreter:
    """Holds the relations of one script run."""

    def __init__(self, manifest: Sequence[Mapping[str, Any]]):
        self.kernels = {k["name"]: k for k in manifest}
        self.tables: dict[str, Table] = {}
        self.prunable: dict[str, bool] = {}
        for k in manifest:
            self.prunable[k["node"]] = self._op(k).prunable

    @staticmethod
    def _op(k: Mapping[str, Any]) -> OpSpec:
        o = k["op"]
        return OpSpec(o["aggregate"], o["combine"], o["unary"], float(o["scale"]))

    # -- statements -----------------------------------------------------------

    def execute(self, sql: str) -> None:
        for stmt in _statements(sql):
            self.statement(stmt)

    def statement(self, stmt: str) -> None:
        if stmt.startswith("CREATE TABLE "):
            if stmt.split()[2] not in self.tables:
                raise ScriptError(f"no data loaded for table in: {stmt}")
            return
        m = re.match(r"^CREATE VIEW (\w+) \(([^)]*)\) AS (SELECT .*)$", stmt)
        if m:
            cols = [c.strip() for c in m.group(2).split(",")]
            cols, bounds, rows = self.select(m.group(3), cols[:-1])
            self.tables[m.group(1)] = Table(m.group(1), tuple(cols), tuple(bounds), rows)
            return
        m = re.match(r"^INSERT INTO (\w+) (SELECT .*)$", stmt)
        if m:
            name = m.group(1)
            target = self.tables.get(name)
            if target is None:
                raise ScriptError(f"INSERT into undeclared table {name}")
            _, _, rows = self.select(m.group(2), list(target.columns))
            if self.prunable.get(name, True):
                rows = [(k, b) for k, b in rows if b.any()]
            target.rows = rows
            return
        raise ScriptError(f"unsupported statement: {stmt}")

    # -- SELECT ---------------------------------------------------------------

    def _from(self, frm: str) -> list[tuple[str, Table]]:
        items = []
        for item in _split_top(frm):
            m = re.match(r"^ALLINTS \((\d+), (\d+)\) AS (\w+)$", item)
            if m:
                lo, hi = int(m.group(1)), int(m.group(2))
                rows = [((i,), np.array(0.0)) for i in range(lo, hi)]
                items.append((m.group(3), Table("ALLINTS", ("index",), (hi,), rows)))
                continue
            m = re.match(r"^COMPLETE \((\w+)\) AS (\w+)$", item)
            if m:
                items.append((m.group(2), self._complete(self.tables[m.group(1)])))
                continue
            if item not in self.tables:
                raise ScriptError(f"unknown relation {item}")
            items.append((item, self.tables[item]))
        return items

    def _complete(self, t: Table) -> Table:
        have = dict(t.rows)
        if not have and not t.columns:
            raise ScriptError(f"cannot complete empty keyless relation {t.name}")
        shape = next(iter(have.values())).shape if have else None
        rows = []
        for key in np.ndindex(*t.bounds):
            key = tuple(int(k) for k in key)
            if key in have:
                rows.append((key, have[key]))
            else:
                if shape is None:
                    raise ScriptError(f"cannot infer block shape of {t.name}")
                rows.append((key, np.zeros(shape)))
        return Table(t.name, t.columns, t.bounds, rows)

    def select(self, text: str, out_cols: list[str]) -> tuple[list[str], list[int], list]:
        m = _SELECT.match(text)
        if not m:
            raise ScriptError(f"unsupported SELECT: {text}")
        items = _split_top(m.group("sel"))
        sources = self._from(m.group("frm"))
        preds = []
        if m.group("where"):
            for p in m.group("where").split(" AND "):
                lhs, rhs = (s.strip() for s in p.split("="))
                preds.append((lhs, rhs))
        envs = self._product(sources, preds)
        exprs = []
        for it in items:
            a = _AS.match(it)
            exprs.append(a.group("expr") if a else it)
        value_expr, key_exprs = exprs[-1], exprs[:-1]
        if len(key_exprs) != len(out_cols):
            raise ScriptError(f"SELECT produces {len(key_exprs)} keys, target has {len(out_cols)}")
        bounds = [self._bound(e, dict(sources)) for e in key_exprs]
        grouped = m.group("grp") is not None or self._is_aggregate(value_expr)
        if not grouped:
            rows = [(tuple(self._key(e, env) for e in key_exprs), self._value(value_expr, env)) for env in envs]
            return out_cols, bounds, rows
        groups: dict[tuple[int, ...], list] = {}
        for env in envs:
            groups.setdefault(tuple(self._key(e, env) for e in key_exprs), []).append(env)
        rows = [(k, self._aggregate(value_expr, g)) for k, g in sorted(groups.items())]
        return out_cols, bounds, rows

    def _product(self, sources: list[tuple[str, Table]], preds: list[tuple[str, str]]) -> list[dict]:
        envs: list[dict] = [{}]
        for alias, table in sources:
            nxt = []
            for env in envs:
                for key, block in sorted(table.rows, key=lambda r: r[0]):
                    row = dict(zip(table.columns, key))
                    e = {**env, alias: (row, block)}
                    if all(self._ready(p, e) for p in preds):
                        nxt.append(e)
            envs = nxt
        return envs

    def _ready(self, pred: tuple[str, str], env: dict) -> bool:
        """A predicate holds, or cannot be evaluated yet because a side is unbound."""
        vals = []
        for side in pred:
            c = _COL.match(side)
            if c.group("rel") not in env:
                return True
            vals.append(env[c.group("rel")][0][c.group("col")])
        return vals[0] == vals[1]

    # -- expressions ----------------------------------------------------------

    def _bound(self, expr: str, sources: dict[str, Table]) -> int:
        c = _COL.match(expr)
        if not c:
            raise ScriptError(f"key expression must be a column: {expr}")
        t = sources[c.group("rel")]
        return t.bounds[t.columns.index(c.group("col"))]

    def _key(self, expr: str, env: dict) -> int:
        c = _COL.match(expr)
        return int(env[c.group("rel")][0][c.group("col")])

    @staticmethod
    def _is_aggregate(expr: str) -> bool:
        c = _CALL.match(expr)
        return bool(c) and c.group("fn") in ("SUM", "MAX", "STACK")

    def _value(self, expr: str, env: dict) -> np.ndarray:
        s = _SLICE.match(expr)
        if s:
            block = env[s.group("rel")][1]
            idx = []
            for part in _split_top(s.group("idx")):
                idx.append(slice(None) if part == ":" else self._key(part, env))
            return np.array(block[tuple(idx)], dtype=np.float64)
        c = _COL.match(expr)
        if c and c.group("col").startswith("val"):
            return env[c.group("rel")][1]
        call = _CALL.match(expr)
        if call and call.group("fn") in self.kernels:
            args = [self._value(a, env) for a in _split_top(call.group("args"))]
            return self._kernel(self.kernels[call.group("fn")], args)
        raise ScriptError(f"unsupported value expression: {expr}")

    def _kernel(self, k: Mapping[str, Any], args: list[np.ndarray]) -> np.ndarray:
        bounds: dict[str, int] = {}
        for spec in [*k["inputs"], k["output"]]:
            bounds.update(zip(spec["labels"], spec["bound"]))
        ins = [tuple(s["labels"]) for s in k["inputs"]]
        kp = KernelPlan.build(ins[0], ins[1] if len(ins) > 1 else None, tuple(k["output"]["labels"]),
                              bounds, self._op(k))
        block, _ = run_kernel(kp, args[0], args[1] if len(args) > 1 else None)
        return block

    def _aggregate(self, expr: str, envs: list[dict]) -> np.ndarray:
        call = _CALL.match(expr)
        fn = call.group("fn")
        args = _split_top(call.group("args"))
        if fn in ("SUM", "MAX"):
            acc = None
            for env in envs:
                v = self._value(args[0], env)
                acc = v if acc is None else (acc + v if fn == "SUM" else np.maximum(acc, v))
            return acc
        value, pos, dim, size = args
        dim, size = int(dim), int(size)
        out = None
        for env in envs:
            v = self._value(value, env)
            if out is None:
                shape = list(v.shape)
                shape.insert(dim, size)
                out = np.zeros(shape)
            idx = [slice(None)] * out.ndim
            idx[dim] = self._key(pos, env)
            out[tuple(idx)] = v
        return out


# =============================================================================
# Entry point
# =============================================================================


def load_sources(program: EinsumProgram, plan: Plan, inputs: Mapping[str, SparseTensor]) -> dict[str, Table]:
    """Source and output tables keyed by the plan's layouts."""
    tables = {}
    layouts = plan.layouts()
    for t in program.tensors:
        axes = layouts.get(t.name, ())
        d = Decomposition(tuple(f"a{i}" for i in range(t.rank)), axes)
        rel = decompose_tensor(inputs[t.name], d)
        tables[t.name] = Table(t.name, (), tuple(t.bound[a] for a in axes), list(rel.sorted_items()))
    for n in program.nodes:
        axes = layouts[n.id]
        tables[n.id] = Table(n.id, (), tuple(n.output.bound[a] for a in axes))
    return tables


def _columns(sql: str) -> dict[str, tuple[str, ...]]:
    cols = {}
    for stmt in _statements(sql):
        m = re.match(r"^CREATE TABLE (\w+) \((.*)\)$", stmt)
        if m:
            cols[m.group(1)] = tuple(c.split()[0] for c in _split_top(m.group(2))[:-1])
    return cols


def run_script(script: Script, program: EinsumProgram, plan: Plan,
               inputs: Mapping[str, SparseTensor]) -> dict[str, TensorRelation]:
    """Interpret ``script`` over ``inputs``; returns one relation per table."""
    interp = Interpreter([k.to_dict() for k in script.kernels])
    tables = load_sources(program, plan, inputs)
    for name, cols in _columns(script.sql).items():
        tables[name].columns = cols
    interp.tables.update(tables)
    interp.execute(script.sql)
    layouts = plan.layouts()
    out = {}
    for name in [*program.source_names, *(n.id for n in program.nodes)]:
        decl = program.decl(name)
        d = Decomposition(tuple(f"a{i}" for i in range(decl.rank)), layouts.get(name, ()))
        rows = interp.tables[name].as_dict()
        out[name] = TensorRelation(decl, d, rows, pruned=interp.prunable.get(name, True))
    return out
