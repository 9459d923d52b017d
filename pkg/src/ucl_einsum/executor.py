"""In-memory tensor-relational execution and the dense reference evaluator."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .ir import Decomposition, EinsumNode, EinsumProgram, OpSpec, TensorDecl, topo_sort
from .kernels import KernelPlan, run_kernel
from .stats import SparseTensor

if TYPE_CHECKING:
    from .optimizer import Plan


class ExecutionError(Exception):
    pass


@dataclass
class OpCounter:
    scalar_multiplies: int = 0
    scalar_adds: int = 0
    kernel_calls: int = 0
    tuples_produced: Counter = field(default_factory=Counter)

    def reset(self) -> None:
        self.scalar_multiplies = 0
        self.scalar_adds = 0
        self.kernel_calls = 0
        self.tuples_produced = Counter()

    def to_dict(self) -> dict:
        return {
            "scalar_multiplies": self.scalar_multiplies,
            "scalar_adds": self.scalar_adds,
            "kernel_calls": self.kernel_calls,
            "tuples_produced": dict(sorted(self.tuples_produced.items())),
        }

    def report(self) -> str:
        lines = [f"scalar_multiplies {self.scalar_multiplies}",
                 f"scalar_adds {self.scalar_adds}",
                 f"kernel_calls {self.kernel_calls}"]
        lines += [f"tuples_produced[{k}] {v}" for k, v in sorted(self.tuples_produced.items())]
        return "\n".join(lines)


@dataclass
class TensorRelation:
    """Promoted-key tuples mapped to dense blocks over the demoted axes.

    ``pruned`` relations omit all-zero blocks; a missing key then stands for
    a zero block.  Unpruned relations hold every key of the promoted grid.
    """

    decl: TensorDecl
    decomposition: Decomposition
    rows: dict[tuple[int, ...], np.ndarray]
    pruned: bool = True

    @property
    def name(self) -> str:
        return self.decl.name

    @property
    def promoted_axes(self) -> tuple[int, ...]:
        return self.decomposition.promoted_axes

    @property
    def block_shape(self) -> tuple[int, ...]:
        return tuple(self.decl.bound[a] for a in self.decomposition.demoted_axes)

    @property
    def key_bound(self) -> tuple[int, ...]:
        return tuple(self.decl.bound[a] for a in self.promoted_axes)

    def __len__(self) -> int:
        return len(self.rows)

    def sorted_items(self) -> list[tuple[tuple[int, ...], np.ndarray]]:
        return sorted(self.rows.items())

    def check(self) -> None:
        """Raise if a key or block shape violates the decomposition."""
        kb, shape = self.key_bound, self.block_shape
        for key, block in self.rows.items():
            if len(key) != len(kb) or any(k < 0 or k >= b for k, b in zip(key, kb)):
                raise ExecutionError(f"{self.name}: key {key} outside promoted bound {kb}")
            if block.shape != shape:
                raise ExecutionError(f"{self.name}: block of shape {block.shape}, expected {shape}")

    def equals(self, other: TensorRelation) -> bool:
        """Same decomposition, keys and bitwise-identical blocks."""
        if self.decomposition.promoted_axes != other.decomposition.promoted_axes:
            return False
        if self.rows.keys() != other.rows.keys():
            return False
        return all(np.array_equal(b, other.rows[k]) for k, b in self.rows.items())


# =============================================================================
# Building and reading relations
# =============================================================================


def _full_index(key: Sequence[int], d: Decomposition) -> tuple:
    """Numpy index selecting the block of ``key`` from the full dense tensor."""
    idx: list = [slice(None)] * len(d.labels)
    for a, k in zip(d.promoted_axes, key):
        idx[a] = k
    return tuple(idx)


def decompose_tensor(t: SparseTensor, d: Decomposition) -> TensorRelation:
    """Group the nonzeros of ``t`` by promoted coordinates into dense blocks."""
    if len(d.labels) != t.decl.rank:
        raise ExecutionError(f"{t.decl.name}: decomposition of rank {len(d.labels)} for rank {t.decl.rank}")
    shape = tuple(t.decl.bound[a] for a in d.demoted_axes)
    rows: dict[tuple[int, ...], np.ndarray] = {}
    pa, da = list(d.promoted_axes), list(d.demoted_axes)
    for c, v in zip(t.coords.tolist(), t.values.tolist()):
        key = tuple(c[a] for a in pa)
        block = rows.get(key)
        if block is None:
            block = rows[key] = np.zeros(shape)
        block[tuple(c[a] for a in da)] = v
    rows = {k: b for k, b in rows.items() if b.any()}
    return TensorRelation(t.decl, d, rows, pruned=True)


def relation_from_dense(decl: TensorDecl, array: np.ndarray, d: Decomposition,
                        prune: bool = True) -> TensorRelation:
    array = np.asarray(array, dtype=np.float64)
    if array.shape != decl.bound:
        raise ExecutionError(f"{decl.name}: array shape {array.shape} differs from bound {decl.bound}")
    rows = {}
    for key in itertools.product(*(range(decl.bound[a]) for a in d.promoted_axes)):
        block = np.array(array[_full_index(key, d)], dtype=np.float64)
        if not prune or block.any():
            rows[key] = block
    return TensorRelation(decl, d, rows, pruned=prune)


def densify(rel: TensorRelation) -> np.ndarray:
    out = np.zeros(rel.decl.bound)
    for key, block in rel.rows.items():
        out[_full_index(key, rel.decomposition)] = block
    return out


def lookup(rel: TensorRelation, index: Sequence[int]) -> float:
    """Element at a full coordinate; 0.0 when the key has no stored block."""
    index = tuple(int(i) for i in index)
    bound = rel.decl.bound
    if len(index) != len(bound) or any(i < 0 or i >= b for i, b in zip(index, bound)):
        raise IndexError(f"{rel.name}: index {list(index)} outside bound {list(bound)}")
    d = rel.decomposition
    block = rel.rows.get(tuple(index[a] for a in d.promoted_axes))
    if block is None:
        return 0.0
    return float(block[tuple(index[a] for a in d.demoted_axes)])


def _complete(rel: TensorRelation) -> dict[tuple[int, ...], np.ndarray]:
    """Rows over the full promoted grid, missing keys as zero blocks."""
    if not rel.pruned:
        return rel.rows
    zero = np.zeros(rel.block_shape)
    return {key: rel.rows.get(key, zero) for key in itertools.product(*(range(b) for b in rel.key_bound))}


# =============================================================================
# Node execution
# =============================================================================


def _use_layout(rel: TensorRelation, labels: Sequence[str]) -> tuple[list[str], list[str]]:
    d = rel.decomposition.relabel(labels)
    return list(d.promoted), list(d.demoted)


def exec_node(node: EinsumNode, rel_u: TensorRelation, rel_v: TensorRelation | None,
              counter: OpCounter | None = None, out_axes: Sequence[int] | None = None) -> TensorRelation:
    """Join, run the block kernel per pair, and aggregate by promoted output keys.

    The output is promoted exactly on the output labels promoted in an input.
    ``out_axes`` (optional) is checked against that.
    """
    counter = counter if counter is not None else OpCounter()
    op = node.op
    if node.is_unary != (rel_v is None):
        raise ExecutionError(f"{node.id}: expected {len(node.inputs)} input relation(s)")
    up_u, dn_u = _use_layout(rel_u, node.left.labels)
    if rel_v is not None:
        up_v, dn_v = _use_layout(rel_v, node.right.labels)
    else:
        up_v, dn_v = [], None
    upset = set(up_u) | set(up_v)
    for l in node.shared_labels:
        if (l in up_u) != (l in up_v):
            raise ExecutionError(f"{node.id}: shared label {l!r} promoted on one side only")
    out_d = Decomposition.from_labels(node.out_labels, upset & set(node.out_labels))
    if out_axes is not None and tuple(sorted(out_axes)) != out_d.promoted_axes:
        raise ExecutionError(f"{node.id}: plan output layout {tuple(out_axes)} is inconsistent "
                             f"with input layouts (gives {out_d.promoted_axes})")
    bounds = dict(zip(node.left.labels, rel_u.decl.bound))
    if rel_v is not None:
        for l, b in zip(node.right.labels, rel_v.decl.bound):
            bounds.setdefault(l, b)
    kp = KernelPlan.build(dn_u, dn_v, out_d.demoted, bounds, op)

    rows_u = rel_u.rows if op.prunable else _complete(rel_u)
    join = [l for l in up_u if l in set(up_v)]
    pos_u = {l: i for i, l in enumerate(up_u)}
    pos_v = {l: i for i, l in enumerate(up_v)}
    out_src = [("u", pos_u[l]) if l in pos_u else ("v", pos_v[l]) for l in out_d.promoted]

    groups: dict[tuple[int, ...], np.ndarray] = {}

    def emit(ku, kv, block):
        gk = tuple(ku[i] if side == "u" else kv[i] for side, i in out_src)
        prev = groups.get(gk)
        if prev is None:
            groups[gk] = block
        else:
            counter.scalar_adds += block.size
            groups[gk] = prev + block if op.aggregate == "sum" else np.maximum(prev, block)

    def count(n: int):
        counter.kernel_calls += 1
        if node.is_unary or op.combine != "multiply":
            counter.scalar_adds += n
        else:
            counter.scalar_multiplies += n

    if rel_v is None:
        for ku, bu in sorted(rows_u.items()):
            block, n = run_kernel(kp, bu)
            count(n)
            counter.tuples_produced[f"{node.id}.join"] += 1
            emit(ku, (), block)
    else:
        rows_v = rel_v.rows if op.prunable else _complete(rel_v)
        index: dict[tuple[int, ...], list] = {}
        for kv, bv in sorted(rows_v.items()):
            index.setdefault(tuple(kv[pos_v[l]] for l in join), []).append((kv, bv))
        for ku, bu in sorted(rows_u.items()):
            for kv, bv in index.get(tuple(ku[pos_u[l]] for l in join), ()):
                block, n = run_kernel(kp, bu, bv)
                count(n)
                counter.tuples_produced[f"{node.id}.join"] += 1
                emit(ku, kv, block)

    if op.prunable:
        groups = {k: b for k, b in groups.items() if b.any()}
    counter.tuples_produced[f"{node.id}.agg"] += len(groups)
    out = TensorRelation(node.output, out_d, dict(sorted(groups.items())), pruned=op.prunable)
    if not op.prunable:
        out.rows = _complete(out)
    out.check()
    return out


# =============================================================================
# Repartition
# =============================================================================


def exec_repartition(rel: TensorRelation, up_out: Sequence[int], counter: OpCounter | None = None,
                     ) -> TensorRelation:
    """Re-key ``rel`` so that axes ``up_out`` are promoted.

    Splits blocks along newly promoted axes, then stacks blocks along newly
    demoted ones.  Returns ``rel`` itself when nothing changes.
    """
    counter = counter if counter is not None else OpCounter()
    d_in = rel.decomposition
    d_out = Decomposition(d_in.labels, tuple(up_out))
    if d_out.promoted_axes == d_in.promoted_axes:
        return rel
    bound = rel.decl.bound
    p_in, p_out = set(d_in.promoted_axes), set(d_out.promoted_axes)
    union = tuple(sorted(p_in | p_out))

    # decompose: split each block along the axes promoted only in the target
    split = [a for a in d_in.demoted_axes if a in p_out]
    mid: dict[tuple[int, ...], np.ndarray] = {}
    for key, block in rel.sorted_items():
        full = dict(zip(d_in.promoted_axes, key))
        for sub in itertools.product(*(range(bound[a]) for a in split)):
            pos = dict(zip(split, sub))
            bidx = tuple(pos.get(a, slice(None)) for a in d_in.demoted_axes)
            piece = np.array(block[bidx], dtype=np.float64)
            if rel.pruned and not piece.any():
                continue
            full.update(pos)
            mid[tuple(full[a] for a in union)] = piece
    if split:
        counter.tuples_produced[f"{rel.name}.decompose"] += len(mid)

    # recompose: stack pieces along the axes promoted only in the source
    stack = [a for a in union if a not in p_out]
    if not stack:
        rows = mid
    else:
        shape = tuple(bound[a] for a in d_out.demoted_axes)
        rows = {}
        for mkey, piece in sorted(mid.items()):
            full = dict(zip(union, mkey))
            okey = tuple(full[a] for a in d_out.promoted_axes)
            block = rows.get(okey)
            if block is None:
                block = rows[okey] = np.zeros(shape)
            bidx = tuple(full[a] if a in full else slice(None) for a in d_out.demoted_axes)
            block[bidx] = piece
        counter.tuples_produced[f"{rel.name}.stack"] += len(rows)
    out = TensorRelation(rel.decl, d_out, dict(sorted(rows.items())), pruned=rel.pruned)
    if not rel.pruned:
        out.rows = _complete(TensorRelation(rel.decl, d_out, out.rows, pruned=True))
        out.pruned = False
    return out


# =============================================================================
# Whole plans
# =============================================================================


def exec_plan(program: EinsumProgram, plan: Plan, inputs: Mapping[str, SparseTensor],
              counter: OpCounter | None = None) -> dict[str, TensorRelation]:
    """Run every node of ``plan`` in topological order; returns all relations."""
    counter = counter if counter is not None else OpCounter()
    rels: dict[str, TensorRelation] = {}
    for name in program.source_names:
        if name not in inputs:
            raise ExecutionError(f"no input supplied for source tensor {name!r}")
        decl = program.decl(name)
        if inputs[name].decl.bound != decl.bound:
            raise ExecutionError(f"{name}: input bound {inputs[name].decl.bound} differs from {decl.bound}")
        axes = plan.source_layouts.get(name, ())
        rels[name] = decompose_tensor(inputs[name], Decomposition(tuple(f"a{i}" for i in range(decl.rank)), axes))
    by_node = {np_.node: np_ for np_ in plan.nodes}
    for v in topo_sort(program):
        if program.is_source(v):
            continue
        node = program.node(v)
        entry = by_node.get(v)
        if entry is None:
            raise ExecutionError(f"plan has no entry for node {v!r}")
        ins = []
        for use, axes in zip(node.inputs, entry.in_axes):
            ins.append(exec_repartition(rels[use.tensor], axes, counter))
        rels[v] = exec_node(node, ins[0], ins[1] if len(ins) > 1 else None, counter, entry.out_axes)
    return rels


# =============================================================================
# Dense reference evaluator
# =============================================================================

DENSE_LIMIT = 1 << 22


def _combine(op: OpSpec, a: float, b: float) -> float:
    c = op.combine
    if c == "multiply":
        return a * b
    if c == "add":
        return a + b
    if c == "subtract":
        return a - b
    return a / b if b != 0.0 else (math.copysign(math.inf, a) * math.copysign(1.0, b) if a != 0.0 else math.nan)


def dense_eval(program: EinsumProgram, inputs: Mapping[str, np.ndarray],
               counter: OpCounter | None = None) -> dict[str, np.ndarray]:
    """Evaluate every node by a scalar loop over the full label grid."""
    counter = counter if counter is not None else OpCounter()
    vals: dict[str, np.ndarray] = {}
    for name in program.source_names:
        arr = np.asarray(inputs[name], dtype=np.float64)
        if arr.shape != program.decl(name).bound:
            raise ExecutionError(f"{name}: array shape {arr.shape} differs from {program.decl(name).bound}")
        vals[name] = arr
    for v in topo_sort(program):
        if program.is_source(v):
            continue
        node = program.node(v)
        bounds = node.label_bounds(program)
        labels = node.all_labels
        grid = math.prod(bounds[l] for l in labels)
        if grid > DENSE_LIMIT or node.output.size > DENSE_LIMIT:
            raise ExecutionError(f"{v}: label grid of {grid} points is too large for the dense evaluator")
        op = node.op
        out = np.full(node.output.bound, op.zero)
        pos = {l: i for i, l in enumerate(labels)}
        u_arr = vals[node.left.tensor]
        u_pos = [pos[l] for l in node.left.labels]
        if node.right is not None:
            v_arr = vals[node.right.tensor]
            v_pos = [pos[l] for l in node.right.labels]
        o_pos = [pos[l] for l in node.out_labels]
        for idx in itertools.product(*(range(bounds[l]) for l in labels)):
            a = float(u_arr[tuple(idx[p] for p in u_pos)])
            if node.right is None:
                x = a
                counter.scalar_adds += 1
            else:
                b = float(v_arr[tuple(idx[p] for p in v_pos)])
                x = _combine(op, a, b)
                if op.combine == "multiply":
                    counter.scalar_multiplies += 1
                else:
                    counter.scalar_adds += 1
            x = op.apply_unary(x)
            o = tuple(idx[p] for p in o_pos)
            if op.aggregate == "sum":
                out[o] += x
            elif x > out[o]:
                out[o] = x
        vals[v] = out
    return vals


# =============================================================================
# Dumps
# =============================================================================


def dump_coo(rel: TensorRelation, path: str | Path) -> None:
    """Write the relation as scalar COO entries (nonzeros only)."""
    from .stats import write_coo
    write_coo(SparseTensor.from_dense(rel.name, densify(rel)), path)


def dump_blocks(rel: TensorRelation, path: str | Path) -> None:
    """One line per tuple: key values, then the row-major block."""
    head = (f"# {rel.name} promoted_axes={list(rel.promoted_axes)} "
            f"block_shape={list(rel.block_shape)} pruned={rel.pruned}")
    lines = [head]
    for key, block in rel.sorted_items():
        vals = " ".join(repr(float(x)) for x in block.reshape(-1))
        lines.append(" ".join(map(str, key)) + " | " + vals)
    Path(path).write_text("\n".join(lines) + "\n")
