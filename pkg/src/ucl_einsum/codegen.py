"""Tensor-relational SQL for a plan: schemas, node queries and repartition views.

The dialect has ``TENSOR[b, ...]`` value columns, an ``ALLINTS (lo, hi)``
table function over ``[lo, hi)``, a ``STACK (value, position, dim, size)``
aggregate, and ``COMPLETE (R)``, which adds a zero block for every missing
key of ``R`` (needed by operators for which zero blocks cannot be skipped).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .ir import EinsumNode, EinsumProgram, topo_sort
from .optimizer import Plan, PlanValidationError, validate_plan

Axes = tuple[int, ...]


@dataclass(frozen=True)
class RelationRef:
    """A relation in the script: name, value column, and key column per axis."""

    name: str
    tensor: str
    columns: tuple[str | None, ...]

    @property
    def value(self) -> str:
        return f"val{self.tensor}"

    def col(self, axis: int) -> str:
        c = self.columns[axis]
        assert c is not None
        return c


@dataclass(frozen=True)
class KernelSpec:
    name: str
    node: str
    einsum: str
    inputs: tuple[tuple[str, tuple[str, ...], tuple[int, ...]], ...]
    output: tuple[str, tuple[str, ...], tuple[int, ...]]
    op: dict = field(hash=False)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "node": self.node,
            "einsum": self.einsum,
            "inputs": [{"tensor": t, "labels": list(l), "bound": list(b)} for t, l, b in self.inputs],
            "output": {"tensor": self.output[0], "labels": list(self.output[1]), "bound": list(self.output[2])},
            "op": dict(self.op),
        }


@dataclass(frozen=True)
class Script:
    sql: str
    natural_sql: str
    kernels: tuple[KernelSpec, ...]

    def manifest_json(self) -> str:
        return json.dumps([k.to_dict() for k in self.kernels], indent=2)

    def write(self, out_dir: str | Path, stem: str = "plan") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.sql", out / f"{stem}.natural.sql", out / f"{stem}.kernels.json"]
        paths[0].write_text(self.sql)
        paths[1].write_text(self.natural_sql)
        paths[2].write_text(self.manifest_json() + "\n")
        return paths


# =============================================================================
# Schemas
# =============================================================================


def _tensor_type(shape: Sequence[int]) -> str:
    return "DOUBLE" if not shape else f"TENSOR[{', '.join(map(str, shape))}]"


def stored_relation(name: str, labels: Sequence[str], axes: Axes) -> RelationRef:
    axes = set(axes)
    return RelationRef(name, name, tuple(l.upper() if i in axes else None for i, l in enumerate(labels)))


def emit_schema(name: str, labels: Sequence[str], bound: Sequence[int], axes: Axes) -> str:
    """``CREATE TABLE`` with one INT column per promoted axis and a value column."""
    axes = set(axes)
    cols = [f"{l.upper()} INT" for i, l in enumerate(labels) if i in axes]
    shape = [b for i, b in enumerate(bound) if i not in axes]
    cols.append(f"val{name} {_tensor_type(shape)}")
    return f"CREATE TABLE {name} ({', '.join(cols)});"


# =============================================================================
# Kernels
# =============================================================================


def _fmt(labels: Sequence[str]) -> str:
    return "[" + ",".join(labels) + "]"


def kernel_spec(node: EinsumNode, program: EinsumProgram, in_axes: Sequence[Axes], out_axes: Axes) -> KernelSpec:
    """The dense part of ``node``: an EinSum over its demoted labels only."""
    bounds = node.label_bounds(program)
    ins = []
    refs = []
    for use, axes in zip(node.inputs, in_axes):
        dem = tuple(l for i, l in enumerate(use.labels) if i not in set(axes))
        ins.append((use.tensor, dem, tuple(bounds[l] for l in dem)))
        refs.append(f"{use.tensor}{_fmt(dem)}")
    out_dem = tuple(l for i, l in enumerate(node.out_labels) if i not in set(out_axes))
    op = node.op
    symbol = {"multiply": "*", "add": "+", "subtract": "-", "divide": "/"}
    body = refs[0] if len(refs) == 1 else f"{refs[0]} {symbol[op.combine]} {refs[1]}"
    if op.unary == "scale":
        body = f"scale({op.scale!r}, {body})"
    elif op.unary != "identity":
        body = f"{op.unary}({body})"
    up = set().union(*(set(use.labels[a] for a in axes) for use, axes in zip(node.inputs, in_axes)))
    agg = [l for l in node.agg_labels if l not in up]
    einsum = f"{node.id}{_fmt(out_dem)} = {op.aggregate}{_fmt(agg)} {body}"
    output = (node.id, out_dem, tuple(bounds[l] for l in out_dem))
    digest = hashlib.sha1(repr((einsum, tuple(ins), output)).encode()).hexdigest()[:8]
    opd = {"aggregate": op.aggregate, "combine": op.combine, "unary": op.unary, "scale": op.scale}
    return KernelSpec(f"k_{node.id.lower()}_{digest}", node.id, einsum, tuple(ins), output, opd)


# =============================================================================
# Node queries
# =============================================================================


def emit_node_sql(node: EinsumNode, program: EinsumProgram, inputs: Sequence[RelationRef],
                  in_axes: Sequence[Axes], out_axes: Axes, natural: bool = False) -> tuple[str, KernelSpec]:
    """SELECT-FROM-WHERE-GROUP BY for one node over relations holding its inputs."""
    ups = [set(use.labels[a] for a in axes) for use, axes in zip(node.inputs, in_axes)]
    if len(ups) == 2:
        for l in node.shared_labels:
            if (l in ups[0]) != (l in ups[1]):
                raise PlanValidationError(f"{node.id}: shared label {l!r} promoted on one side only")
    up_all = set().union(*ups)
    expect = tuple(i for i, l in enumerate(node.out_labels) if l in up_all)
    if tuple(out_axes) != expect:
        raise PlanValidationError(f"{node.id}: output layout {tuple(out_axes)} inconsistent with inputs")
    ks = kernel_spec(node, program, in_axes, out_axes)

    def where_is(label: str) -> tuple[RelationRef, int]:
        for rel, use, up in zip(inputs, node.inputs, ups):
            if label in up:
                return rel, use.labels.index(label)
        raise PlanValidationError(f"{node.id}: label {label!r} is not promoted in any input")

    keys = []
    for a in out_axes:
        l = node.out_labels[a]
        rel, ax = where_is(l)
        col = rel.col(ax)
        if natural:
            keys.append(l.upper())
        else:
            keys.append(f"{rel.name}.{col}" + ("" if col == l.upper() else f" AS {l.upper()}"))
    args = ", ".join(r.value if natural else f"{r.name}.{r.value}" for r in inputs)
    call = f"{ks.name} ({args})"
    aggregating = any(l in up_all for l in node.agg_labels)
    if aggregating:
        call = f"{node.op.aggregate.upper()} ({call})"
    select = ", ".join([*keys, f"{call} AS val{node.id}"])

    prunable = node.op.prunable
    if natural:
        srcs = [f"COMPLETE ({r.name}) AS {r.name}" if not prunable else r.name for r in inputs]
        lines = [f"SELECT {select}", "FROM " + " NATURAL JOIN ".join(srcs)]
        if aggregating and out_axes:
            lines.append("GROUP BY " + ", ".join(node.out_labels[a].upper() for a in out_axes))
        return "\n".join(lines), ks

    srcs = [f"COMPLETE ({r.name}) AS {r.name}" if not prunable else r.name for r in inputs]
    lines = [f"SELECT {select}", "FROM " + ", ".join(srcs)]
    if len(inputs) == 2:
        preds = []
        for l in node.shared_labels:
            if l in ups[0]:
                a0 = node.inputs[0].labels.index(l)
                a1 = node.inputs[1].labels.index(l)
                preds.append(f"{inputs[0].name}.{inputs[0].col(a0)} = {inputs[1].name}.{inputs[1].col(a1)}")
        if preds:
            lines.append("WHERE " + " AND ".join(preds))
    if aggregating and out_axes:
        group = []
        for a in out_axes:
            rel, ax = where_is(node.out_labels[a])
            group.append(f"{rel.name}.{rel.col(ax)}")
        lines.append("GROUP BY " + ", ".join(group))
    return "\n".join(lines), ks


# =============================================================================
# Repartition
# =============================================================================


def emit_repartition_sql(rel: RelationRef, labels: Sequence[str], bound: Sequence[int],
                         up_in: Axes, up_out: Axes, target: str) -> tuple[list[str], RelationRef]:
    """Views re-keying ``rel`` from ``up_in`` to ``up_out``.

    ``labels`` name the view columns.  Returns no statement when the layouts
    agree, a decompose view when only splitting is needed, STACK views when
    only merging is needed, and both otherwise.  The last view is ``target``.
    """
    p_in, p_out = set(up_in), set(up_out)
    if p_in == p_out:
        return [], rel
    union = sorted(p_in | p_out)
    split = [a for a in range(len(labels)) if a not in p_in and a in p_out]
    stack = [a for a in union if a not in p_out]
    stmts: list[str] = []
    cur = rel
    val = rel.value

    if split:
        name = target if not stack else f"{target}_int"
        aliases = {a: chr(ord("A") + i) for i, a in enumerate(split)}
        cols = [labels[a].upper() for a in union]
        sel = [f"{cur.name}.{cur.col(a)}" if a in p_in else f"{aliases[a]}.index" for a in union]
        demoted_in = [a for a in range(len(labels)) if a not in p_in]
        idx = ", ".join(f"{aliases[a]}.index" if a in aliases else ":" for a in demoted_in)
        sel.append(f"{cur.name}.{val}[{idx}]")
        frm = [f"ALLINTS (0, {bound[a]}) AS {aliases[a]}" for a in split] + [cur.name]
        stmts.append(f"CREATE VIEW {name} ({', '.join(cols + [val])}) AS\n"
                     f"SELECT {', '.join(sel)}\n"
                     f"FROM {', '.join(frm)};")
        cur = RelationRef(name, rel.tensor, tuple(labels[a].upper() if a in union else None
                                                  for a in range(len(labels))))

    keyed = set(union)
    for step, a in enumerate(stack):
        last = step == len(stack) - 1
        name = target if last else f"{target}_s{step + 1}"
        keyed.discard(a)
        block_axes = sorted([x for x in range(len(labels)) if x not in keyed])
        dim = block_axes.index(a)
        keys = [x for x in sorted(keyed)]
        sel = [f"{cur.name}.{cur.col(x)}" for x in keys]
        sel.append(f"STACK ({cur.name}.{val}, {cur.name}.{cur.col(a)}, {dim}, {bound[a]})")
        cols = [labels[x].upper() for x in keys] + [val]
        text = (f"CREATE VIEW {name} ({', '.join(cols)}) AS\n"
                f"SELECT {', '.join(sel)}\n"
                f"FROM {cur.name}")
        if keys:
            text += "\nGROUP BY " + ", ".join(f"{cur.name}.{cur.col(x)}" for x in keys)
        stmts.append(text + ";")
        cur = RelationRef(name, rel.tensor, tuple(labels[x].upper() if x in keyed else None
                                                  for x in range(len(labels))))
    return stmts, cur


# =============================================================================
# Whole programs
# =============================================================================


def _source_labels(program: EinsumProgram) -> dict[str, tuple[str, ...]]:
    first: dict[str, tuple[str, ...]] = {}
    for n in program.nodes:
        for u in n.inputs:
            first.setdefault(u.tensor, u.labels)
    return first


def emit_program(program: EinsumProgram, plan: Plan) -> Script:
    """DDL for every relation, then per node its repartition views and query."""
    validate_plan(program, plan)
    layouts = plan.layouts()
    first = _source_labels(program)
    names: dict[str, tuple[str, ...]] = {}
    for t in program.tensors:
        names[t.name] = first.get(t.name, tuple(f"a{i}" for i in range(t.rank)))
    for n in program.nodes:
        names[n.id] = n.out_labels

    ddl = ["-- relations"]
    for t in program.tensors:
        ddl.append(emit_schema(t.name, names[t.name], t.bound, layouts.get(t.name, ())))
    for n in program.nodes:
        ddl.append(emit_schema(n.id, n.out_labels, n.output.bound, layouts[n.id]))

    body, natural, kernels = [], [], []
    seen = set()
    for v in topo_sort(program):
        if program.is_source(v):
            continue
        node = program.node(v)
        e = plan.entry(v)
        body.append(f"\n-- {v}")
        natural.append(f"\n-- {v}")
        rels = []
        for use, src, dst in zip(node.inputs, e.src_axes, e.in_axes):
            base = stored_relation(use.tensor, names[use.tensor], src)
            stmts, ref = emit_repartition_sql(base, use.labels, program.decl(use.tensor).bound, src, dst,
                                              f"{use.tensor}_{v}")
            body.extend(stmts)
            natural.extend(stmts)
            rels.append(ref)
        q, ks = emit_node_sql(node, program, rels, e.in_axes, e.out_axes)
        qn, _ = emit_node_sql(node, program, rels, e.in_axes, e.out_axes, natural=True)
        body.append(f"INSERT INTO {v}\n{q};")
        natural.append(f"INSERT INTO {v}\n{qn};")
        if ks.name not in seen:
            seen.add(ks.name)
            kernels.append(ks)
    head = "\n".join(ddl)
    return Script(head + "\n" + "\n".join(body) + "\n", head + "\n" + "\n".join(natural) + "\n", tuple(kernels))
