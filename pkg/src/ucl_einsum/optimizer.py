"""Choice of promoted/demoted labels per tensor by dynamic programming over trees."""

from __future__ import annotations

import itertools
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .cost import (COST_CONSTANTS, CostBreakdown, CostParams, MemoryLimitExceeded, TupleEstimator,
                   node_breakdown, repart_cost)
from .ir import EinsumNode, EinsumProgram, Tree, ValidationError, format_statement, split_into_trees, topo_sort
from .stats import TensorStats, estimate_tuples, propagate_stats

REL_TOL = 1e-12

Axes = tuple[int, ...]


class InfeasiblePlan(Exception):
    """No decomposition satisfies the memory limit (or the annotations)."""


class PlanValidationError(Exception):
    pass


# =============================================================================
# Plans
# =============================================================================


@dataclass(frozen=True)
class NodePlan:
    """Decisions for one node.

    ``in_axes`` are the promoted axes each input is consumed with and
    ``src_axes`` the layout it arrives in; they differ when a repartition
    is needed.
    """

    node: str
    out_axes: Axes
    in_axes: tuple[Axes, ...]
    src_axes: tuple[Axes, ...]
    breakdown: CostBreakdown

    @property
    def repartitions(self) -> list[tuple[int, Axes, Axes]]:
        return [(i, s, t) for i, (s, t) in enumerate(zip(self.src_axes, self.in_axes)) if s != t]

    def decision(self) -> tuple:
        return (self.node, self.out_axes, self.in_axes, self.src_axes)

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "out_axes": list(self.out_axes),
            "in_axes": [list(a) for a in self.in_axes],
            "src_axes": [list(a) for a in self.src_axes],
            "breakdown": self.breakdown.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> NodePlan:
        b = dict(d["breakdown"])
        b.pop("total", None)
        return cls(d["node"], tuple(d["out_axes"]), tuple(tuple(a) for a in d["in_axes"]),
                   tuple(tuple(a) for a in d["src_axes"]), CostBreakdown(**b))


@dataclass(frozen=True)
class Plan:
    nodes: tuple[NodePlan, ...]
    source_layouts: Mapping[str, Axes] = field(hash=False)
    total: float = 0.0
    mode: str = "dp"

    def entry(self, node_id: str) -> NodePlan:
        for n in self.nodes:
            if n.node == node_id:
                return n
        raise KeyError(node_id)

    def layouts(self) -> dict[str, Axes]:
        """Stored layout of every tensor: sources and node outputs."""
        out = dict(self.source_layouts)
        out.update({n.node: n.out_axes for n in self.nodes})
        return out

    def decisions(self) -> tuple:
        return tuple(sorted(n.decision() for n in self.nodes)) + tuple(sorted(self.source_layouts.items()))

    def to_dict(self, program: EinsumProgram | None = None) -> dict:
        nodes = []
        for n in self.nodes:
            d = n.to_dict()
            if program is not None:
                d["einsum"] = render_node(program.node(n.node), n)
            nodes.append(d)
        return {"mode": self.mode, "total": self.total,
                "source_layouts": {k: list(v) for k, v in sorted(self.source_layouts.items())},
                "nodes": nodes}

    def to_json(self, program: EinsumProgram | None = None) -> str:
        return json.dumps(self.to_dict(program), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> Plan:
        try:
            return cls(tuple(NodePlan.from_dict(n) for n in d["nodes"]),
                       {k: tuple(v) for k, v in d["source_layouts"].items()},
                       float(d["total"]), d.get("mode", "dp"))
        except (KeyError, TypeError, ValueError) as e:
            raise PlanValidationError(f"malformed plan file: {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> Plan:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise PlanValidationError(f"{path}: not valid JSON: {e}") from None

    def report(self, program: EinsumProgram) -> str:
        lines = [f"plan ({self.mode}) total cost {self.total:.6g}"]
        for n in self.nodes:
            b = n.breakdown
            lines.append(f"  {render_node(program.node(n.node), n)}")
            for i, s, t in n.repartitions:
                use = program.node(n.node).inputs[i]
                lines.append(f"    repartition {use.tensor}: [{_render(use.labels, s)}] -> [{_render(use.labels, t)}]")
            lines.append(f"    t_join={b.t_join:.4g} c_join={b.c_join:.4g} t_agg={b.t_agg:.4g} "
                         f"c_agg={b.c_agg:.4g} c_repart={b.c_repart_left + b.c_repart_right:.4g} "
                         f"total={b.total:.4g}")
        return "\n".join(lines)


def _render(labels: Sequence[str], axes: Iterable[int]) -> str:
    axes = set(axes)
    return ",".join(l.upper() if i in axes else l for i, l in enumerate(labels))


def labels_at(labels: Sequence[str], axes: Iterable[int]) -> frozenset[str]:
    return frozenset(labels[a] for a in axes)


def axes_of(labels: Sequence[str], promoted: Iterable[str]) -> Axes:
    promoted = set(promoted)
    return tuple(i for i, l in enumerate(labels) if l in promoted)


def render_node(node: EinsumNode, entry: NodePlan) -> str:
    """Upper-case-lower-case form of a node under a plan entry."""
    ins = [labels_at(u.labels, a) for u, a in zip(node.inputs, entry.in_axes)]
    return format_statement(node, labels_at(node.out_labels, entry.out_axes), ins)


# =============================================================================
# Consistency
# =============================================================================


def is_consistent(upU: Iterable[str], upW: Iterable[str], lU: Sequence[str], lW: Sequence[str]) -> bool:
    """Every label common to both lists is promoted in both or in neither."""
    upU, upW = set(upU), set(upW)
    return all((l in upU) == (l in upW) for l in set(lU) & set(lW))


def _subsets(labels: Sequence[str]) -> Iterator[frozenset[str]]:
    distinct = list(dict.fromkeys(labels))
    for r in range(len(distinct) + 1):
        for combo in itertools.combinations(distinct, r):
            yield frozenset(combo)


@dataclass(frozen=True)
class Candidate:
    """A consistent (up U, up V, up W) triple for one node, as axes."""

    u_axes: Axes
    v_axes: Axes | None
    w_axes: Axes

    @property
    def key(self) -> tuple:
        n = len(self.u_axes) + len(self.v_axes or ())
        return (n, self.u_axes, self.v_axes or ())


def node_candidates(node: EinsumNode, respect: bool = False) -> list[Candidate]:
    """All input/output promotions allowed for ``node``.

    Inputs must be consistent with the output, and labels shared by both
    inputs are promoted on both sides or on neither.
    """
    out = []
    lU = node.left.labels
    lV = node.right.labels if node.right is not None else None
    shared = set(node.shared_labels)
    for upU in _subsets(lU):
        if respect and upU != node.left.promoted_hint:
            continue
        for upV in (_subsets(lV) if lV is not None else [None]):
            if upV is not None:
                if respect and upV != node.right.promoted_hint:
                    continue
                if any((l in upU) != (l in upV) for l in shared):
                    continue
            up = upU | (upV or frozenset())
            upW = frozenset(l for l in node.out_labels if l in up)
            if respect and upW != node.out_hint:
                continue
            if not is_consistent(upU, upW, lU, node.out_labels):
                continue
            if upV is not None and not is_consistent(upV, upW, lV, node.out_labels):
                continue
            out.append(Candidate(axes_of(lU, upU), None if upV is None else axes_of(lV, upV),
                                 axes_of(node.out_labels, upW)))
    return out


# =============================================================================
# Shared costing
# =============================================================================


class CostModel:
    """Node and repartition costs for one program under fixed stats and params."""

    def __init__(self, program: EinsumProgram, stats: Mapping[str, TensorStats], params: CostParams,
                 tuples: TupleEstimator = estimate_tuples):
        self.program = program
        self.params = params
        self.tuples = tuples
        missing = [t for t in (*program.source_names, *(n.id for n in program.nodes)) if t not in stats]
        if missing:
            src = {k: v for k, v in stats.items() if program.is_source(k)}
            stats = propagate_stats(program, src)
        self.stats = dict(stats)
        self._local: dict = {}
        self._repart: dict = {}

    def use_stats(self, tensor: str, labels: Sequence[str]) -> TensorStats:
        return self.stats[tensor].relabel(labels)

    def local(self, node: EinsumNode, c: Candidate) -> CostBreakdown | None:
        """Join plus aggregation cost, or None when over the memory limit."""
        key = (node.id, c.u_axes, c.v_axes)
        if key not in self._local:
            sU = self.use_stats(node.left.tensor, node.left.labels)
            upU = labels_at(node.left.labels, c.u_axes)
            if node.right is not None:
                sV = self.use_stats(node.right.tensor, node.right.labels)
                upV = labels_at(node.right.labels, c.v_axes)
            else:
                sV, upV = None, None
            try:
                self._local[key] = node_breakdown(node, upU, upV, sU, sV, self.params, tuples=self.tuples)
            except MemoryLimitExceeded:
                self._local[key] = None
        return self._local[key]

    def repart(self, tensor: str, src: Axes, dst: Axes) -> float:
        if src == dst:
            return 0.0
        key = (tensor, src, dst)
        if key not in self._repart:
            s = self.stats[tensor]
            self._repart[key] = repart_cost(labels_at(s.labels, src), labels_at(s.labels, dst), s,
                                            self.params, self.tuples)
        return self._repart[key]

    def node_plan(self, node: EinsumNode, c: Candidate, srcs: Sequence[Axes]) -> NodePlan | None:
        b = self.local(node, c)
        if b is None:
            return None
        ins = (c.u_axes,) if c.v_axes is None else (c.u_axes, c.v_axes)
        reparts = [self.repart(u.tensor, s, t) for u, s, t in zip(node.inputs, srcs, ins)]
        b = replace(b, c_repart_left=reparts[0], c_repart_right=reparts[1] if len(reparts) > 1 else 0.0)
        return NodePlan(node.id, c.w_axes, ins, tuple(srcs), b)


def _better(cost: float, key, best_cost: float | None, best_key) -> bool:
    """Cost comparison with a relative tolerance, then the tie-break key."""
    if best_cost is None:
        return True
    tol = REL_TOL * max(abs(cost), abs(best_cost))
    if cost < best_cost - tol:
        return True
    if cost > best_cost + tol:
        return False
    return key < best_key


# =============================================================================
# Dynamic program
# =============================================================================


@dataclass(frozen=True)
class TableEntry:
    cost: float
    choice: Candidate | None = None
    srcs: tuple[Axes, ...] = ()
    local: NodePlan | None = None


@dataclass
class CostTable:
    """C[v, up W]: least cost of the subtree producing v in layout up W."""

    entries: dict[tuple[str, Axes], TableEntry] = field(default_factory=dict)

    def cost(self, vertex: str, axes: Axes) -> float:
        e = self.entries.get((vertex, tuple(axes)))
        return math.inf if e is None else e.cost

    def for_vertex(self, vertex: str) -> dict[Axes, TableEntry]:
        return {a: e for (v, a), e in self.entries.items() if v == vertex}

    def __len__(self) -> int:
        return len(self.entries)


def _all_axes(rank: int) -> list[Axes]:
    return [c for r in range(rank + 1) for c in itertools.combinations(range(rank), r)]


class _TreeSolver:
    def __init__(self, model: CostModel, tree: Tree, frozen: Mapping[str, Axes], respect: bool,
                 fixed_out: Mapping[str, Axes] | None = None):
        self.model = model
        self.p = model.program
        self.tree = tree
        self.members = set(tree.nodes)
        self.frozen = frozen
        self.respect = respect
        self.fixed_out = dict(fixed_out or {})
        self.table = CostTable()

    def sources_for(self, tensor: str, target: Axes) -> list[tuple[Axes, float]]:
        """Layouts ``tensor`` can arrive in, with the cost of producing each."""
        if tensor in self.members:
            return [(a, e.cost) for a, e in self.table.for_vertex(tensor).items() if math.isfinite(e.cost)]
        if tensor in self.frozen:
            return [(self.frozen[tensor], 0.0)]
        # free source: stored in whatever layout its consumer reads
        return [(target, 0.0)]

    def best_input(self, tensor: str, target: Axes) -> tuple[float, Axes] | None:
        best = None
        for src, c in self.sources_for(tensor, target):
            total = c + self.model.repart(tensor, src, target)
            key = (src != target, len(src), src)
            if best is None or _better(total, key, best[0], best[2]):
                best = (total, src, key)
        return None if best is None else (best[0], best[1])

    def solve(self) -> None:
        for v in self.tree.nodes:
            node = self.p.node(v)
            best: dict[Axes, tuple[float, tuple, TableEntry]] = {}
            for c in node_candidates(node, self.respect):
                ins = (c.u_axes,) if c.v_axes is None else (c.u_axes, c.v_axes)
                acc, srcs, ok = 0.0, [], True
                for use, target in zip(node.inputs, ins):
                    r = self.best_input(use.tensor, target)
                    if r is None:
                        ok = False
                        break
                    acc += r[0]
                    srcs.append(r[1])
                if not ok:
                    continue
                np_ = self.model.node_plan(node, c, srcs)
                if np_ is None:
                    continue
                total = acc + np_.breakdown.c_join + np_.breakdown.c_agg
                prev = best.get(c.w_axes)
                if prev is None or _better(total, c.key, prev[0], prev[1]):
                    best[c.w_axes] = (total, c.key, TableEntry(total, c, tuple(srcs), np_))
            fixed = self.fixed_out.get(v)
            for w in _all_axes(node.output.rank):
                keep = w in best and (fixed is None or w == fixed)
                self.table.entries[(v, w)] = best[w][2] if keep else TableEntry(math.inf)

    def sinks(self) -> list[str]:
        used = {u.tensor for v in self.tree.nodes for u in self.p.node(v).inputs}
        return [v for v in self.tree.nodes if v not in used]

    def best_output(self, v: str) -> Axes:
        best = None
        for a, e in sorted(self.table.for_vertex(v).items()):
            if not math.isfinite(e.cost):
                continue
            key = (len(a), a)
            if best is None or _better(e.cost, key, best[1], best[2]):
                best = (a, e.cost, key)
        if best is None:
            raise InfeasiblePlan(f"{v}: no decomposition fits the memory limit")
        return best[0]

    def reconstruct(self, v: str, axes: Axes, out: dict[str, NodePlan],
                    override: TableEntry | None = None) -> None:
        e = override or self.table.entries[(v, axes)]
        if e.local is None:
            raise InfeasiblePlan(f"{v}: no feasible decomposition with promoted axes {axes}")
        out[v] = e.local
        for use, src in zip(self.p.node(v).inputs, e.srcs):
            if use.tensor in self.members:
                self.reconstruct(use.tensor, src, out)


def _layouts_after(p: EinsumProgram, tree: Tree, chosen: Mapping[str, NodePlan],
                   layouts: dict[str, Axes]) -> None:
    for v in tree.nodes:
        e = chosen[v]
        layouts[v] = e.out_axes
        for use, src in zip(p.node(v).inputs, e.src_axes):
            if p.is_source(use.tensor):
                layouts.setdefault(use.tensor, src)


def _finish(p: EinsumProgram, chosen: Mapping[str, NodePlan], layouts: Mapping[str, Axes], mode: str) -> Plan:
    order = [v for v in topo_sort(p) if not p.is_source(v)]
    nodes = tuple(chosen[v] for v in order)
    sources = {k: v for k, v in layouts.items() if p.is_source(k)}
    return Plan(nodes, sources, math.fsum(n.breakdown.total for n in nodes), mode)


def optimize_tree(model: CostModel, tree: Tree, frozen: Mapping[str, Axes] | None = None,
                  respect: bool = False, fixed_out: Mapping[str, Axes] | None = None,
                  ) -> tuple[CostTable, dict[str, NodePlan]]:
    """Fill the cost table for one tree and read back the cheapest decisions.

    ``frozen`` gives the stored layout of inputs fixed outside the tree and
    ``fixed_out`` pins the output layout of some of the tree's own nodes.
    """
    solver = _TreeSolver(model, tree, dict(frozen or {}), respect, fixed_out)
    solver.solve()
    chosen: dict[str, NodePlan] = {}
    for s in solver.sinks():
        solver.reconstruct(s, solver.best_output(s), chosen)
    return solver.table, chosen


def boundary_tensors(program: EinsumProgram, trees: Sequence[Tree]) -> list[str]:
    """Tensors read by more than one tree: sources in several trees, or
    intermediates read outside the tree producing them."""
    readers: dict[str, set[int]] = {}
    home: dict[str, int] = {}
    for i, tree in enumerate(trees):
        for v in tree.nodes:
            home[v] = i
            for use in program.node(v).inputs:
                readers.setdefault(use.tensor, set()).add(i)
    out = []
    for t, trs in readers.items():
        if (t in home and trs - {home[t]}) or (t not in home and len(trs) > 1):
            out.append(t)
    order = {v: i for i, v in enumerate(topo_sort(program))}
    return sorted(out, key=order.__getitem__)


def _solve_trees(model: CostModel, trees: Sequence[Tree], layouts: dict[str, Axes], respect: bool,
                 pinned: Mapping[str, Axes]) -> dict[str, NodePlan]:
    """Tree-by-tree DP; ``pinned`` fixes boundary layouts up front."""
    p = model.program
    layouts.update(pinned)
    chosen: dict[str, NodePlan] = {}
    for tree in trees:
        fixed_out = {v: a for v, a in pinned.items() if v in tree.nodes}
        frozen = {t: a for t, a in layouts.items() if t not in tree.nodes}
        _, got = optimize_tree(model, tree, frozen, respect, fixed_out)
        chosen.update(got)
        _layouts_after(p, tree, got, layouts)
    return chosen


MAX_BOUNDARY_COMBINATIONS = 4096


def _best_boundary(model: CostModel, trees: Sequence[Tree], base: Mapping[str, Axes], respect: bool,
                   max_combinations: int) -> dict[str, Axes]:
    """Boundary layouts giving the cheapest tree-by-tree plan.

    With every boundary layout fixed the trees no longer interact, so trying
    all combinations yields the global optimum.  Falls back to freezing in
    tree order (no pins) when there are too many combinations.
    """
    p = model.program
    bnd = [t for t in boundary_tensors(p, trees) if t not in base]
    if not bnd or math.prod(2 ** p.decl(t).rank for t in bnd) > max_combinations:
        return {}
    best = None
    for combo in itertools.product(*(_all_axes(p.decl(t).rank) for t in bnd)):
        pinned = dict(zip(bnd, combo))
        try:
            chosen = _solve_trees(model, trees, dict(base), respect, pinned)
        except InfeasiblePlan:
            continue
        total = math.fsum(n.breakdown.total for n in chosen.values())
        key = (sum(len(a) for a in combo), combo)
        if best is None or _better(total, key, best[0], best[1]):
            best = (total, key, pinned)
    if best is None:
        raise InfeasiblePlan("no boundary layout admits a feasible plan")
    return best[2]


def optimize_program(program: EinsumProgram, stats: Mapping[str, TensorStats], params: CostParams,
                     tuples: TupleEstimator = estimate_tuples, respect: bool = False,
                     source_layouts: Mapping[str, Axes] | None = None,
                     max_boundary_combinations: int = MAX_BOUNDARY_COMBINATIONS) -> Plan:
    """Optimize tree by tree with the layouts of tensors shared between trees fixed.

    Shared layouts are chosen by trying every combination (see
    :func:`_best_boundary`); with ``max_boundary_combinations=0`` they are
    instead frozen by the first tree that fixes them.  ``source_layouts``
    fixes the stored layout of some sources; consumers then pay for any
    repartition away from it.
    """
    model = stats if isinstance(stats, CostModel) else CostModel(program, stats, params, tuples)
    base: dict[str, Axes] = {k: tuple(v) for k, v in (source_layouts or {}).items()}
    trees = split_into_trees(program)
    pinned = _best_boundary(model, trees, base, respect, max_boundary_combinations)
    layouts = dict(base)
    chosen = _solve_trees(model, trees, layouts, respect, pinned)
    return _finish(program, chosen, layouts, "dp")


def top_k_plans(program: EinsumProgram, stats: Mapping[str, TensorStats], params: CostParams, k: int,
                tuples: TupleEstimator = estimate_tuples, respect: bool = False,
                source_layouts: Mapping[str, Axes] | None = None) -> list[Plan]:
    """The k cheapest plans that differ in the decisions at the final root.

    Earlier trees and the other subtrees keep their optimal choices.
    """
    if not 1 <= k <= 10:
        raise ValueError("k must be between 1 and 10")
    model = CostModel(program, stats, params, tuples)
    trees = split_into_trees(program)
    base: dict[str, Axes] = {k_: tuple(v) for k_, v in (source_layouts or {}).items()}
    pinned = _best_boundary(model, trees, base, respect, MAX_BOUNDARY_COMBINATIONS)
    layouts = dict(base)
    chosen = _solve_trees(model, trees[:-1], layouts, respect, pinned)
    last = trees[-1]
    layouts.update(pinned)
    solver = _TreeSolver(model, last, {t: a for t, a in layouts.items() if t not in last.nodes}, respect,
                         {v: a for v, a in pinned.items() if v in last.nodes})
    solver.solve()
    base: dict[str, NodePlan] = {}
    for s in solver.sinks():
        if s != last.root:
            solver.reconstruct(s, solver.best_output(s), base)
    root = program.node(last.root)
    best_axes = solver.best_output(last.root)
    best_entry = solver.table.entries[(last.root, best_axes)]

    # every root decision: candidate plus arrival layout of each input
    options = []
    for c in node_candidates(root, respect):
        ins = (c.u_axes,) if c.v_axes is None else (c.u_axes, c.v_axes)
        per_input = [[(s, cost + model.repart(u.tensor, s, t)) for s, cost in solver.sources_for(u.tensor, t)]
                     for u, t in zip(root.inputs, ins)]
        for combo in itertools.product(*per_input):
            srcs = tuple(s for s, _ in combo)
            np_ = model.node_plan(root, c, srcs)
            if np_ is None:
                continue
            total = sum(cst for _, cst in combo) + np_.breakdown.c_join + np_.breakdown.c_agg
            options.append((total, (len(c.w_axes), c.w_axes, c.key, srcs), TableEntry(total, c, srcs, np_)))
    options.sort(key=lambda o: (o[0], o[1]))

    def build(entry: TableEntry) -> Plan:
        got = dict(base)
        solver.reconstruct(root.id, entry.choice.w_axes, got, override=entry)
        allc = dict(chosen)
        allc.update(got)
        lay = dict(layouts)
        _layouts_after(program, last, got, lay)
        return _finish(program, allc, lay, "dp")

    plans = [build(best_entry)]
    seen = {plans[0].decisions()}
    for _, _, entry in options:
        if len(plans) >= k:
            break
        plan = build(entry)
        if plan.decisions() in seen:
            continue
        seen.add(plan.decisions())
        plans.append(plan)
    return plans


# =============================================================================
# Greedy baseline
# =============================================================================


def optimize_greedy(program: EinsumProgram, stats: Mapping[str, TensorStats], params: CostParams,
                    tuples: TupleEstimator = estimate_tuples, respect: bool = False,
                    source_layouts: Mapping[str, Axes] | None = None) -> Plan:
    """Cheapest local choice per node given the layouts already fixed upstream."""
    model = stats if isinstance(stats, CostModel) else CostModel(program, stats, params, tuples)
    layouts: dict[str, Axes] = {k: tuple(v) for k, v in (source_layouts or {}).items()}
    chosen: dict[str, NodePlan] = {}
    for v in topo_sort(program):
        if program.is_source(v):
            continue
        node = program.node(v)
        best = None
        for c in node_candidates(node, respect):
            ins = (c.u_axes,) if c.v_axes is None else (c.u_axes, c.v_axes)
            srcs = tuple(layouts.get(u.tensor, t) for u, t in zip(node.inputs, ins))
            np_ = model.node_plan(node, c, srcs)
            if np_ is None:
                continue
            key = (len(c.w_axes), c.w_axes, c.key)
            if best is None or _better(np_.breakdown.total, key, best[0], best[1]):
                best = (np_.breakdown.total, key, np_)
        if best is None:
            raise InfeasiblePlan(f"{v}: no decomposition fits the memory limit")
        chosen[v] = best[2]
        layouts[v] = best[2].out_axes
        for use, src in zip(node.inputs, best[2].src_axes):
            layouts.setdefault(use.tensor, src)
    return _finish(program, chosen, layouts, "greedy")


# =============================================================================
# Plan checking and re-costing
# =============================================================================


def validate_plan(program: EinsumProgram, plan: Plan, respect: bool = False) -> None:
    """Raise :class:`PlanValidationError` unless ``plan`` is executable for ``program``."""
    ids = [n.node for n in plan.nodes]
    if sorted(ids) != sorted(n.id for n in program.nodes) or len(set(ids)) != len(ids):
        raise PlanValidationError(f"plan covers nodes {sorted(ids)}, program has {sorted(n.id for n in program.nodes)}")
    for name, axes in plan.source_layouts.items():
        if not program.is_source(name):
            raise PlanValidationError(f"layout given for unknown source {name!r}")
        _check_axes(name, axes, program.decl(name).rank)
    layouts = plan.layouts()
    for e in plan.nodes:
        node = program.node(e.node)
        if len(e.in_axes) != len(node.inputs) or len(e.src_axes) != len(node.inputs):
            raise PlanValidationError(f"{e.node}: expected {len(node.inputs)} input layouts")
        _check_axes(e.node, e.out_axes, node.output.rank)
        ups = []
        for use, a, s in zip(node.inputs, e.in_axes, e.src_axes):
            rank = program.decl(use.tensor).rank
            _check_axes(e.node, a, rank)
            _check_axes(e.node, s, rank)
            stored = layouts.get(use.tensor)
            if stored is None or tuple(stored) != tuple(s):
                raise PlanValidationError(f"{e.node}: input {use.tensor} is stored as {stored}, "
                                          f"plan expects it as {s}")
            up = labels_at(use.labels, a)
            if axes_of(use.labels, up) != tuple(a):
                raise PlanValidationError(f"{e.node}: repeated label of {use.tensor} promoted on one axis only")
            ups.append(up)
        upW = labels_at(node.out_labels, e.out_axes)
        for use, up in zip(node.inputs, ups):
            if not is_consistent(up, upW, use.labels, node.out_labels):
                raise PlanValidationError(f"{e.node}: input {use.tensor}[{_render(use.labels, axes_of(use.labels, up))}] "
                                          f"is inconsistent with output [{_render(node.out_labels, e.out_axes)}]")
        if len(ups) == 2:
            for l in node.shared_labels:
                if (l in ups[0]) != (l in ups[1]):
                    raise PlanValidationError(f"{e.node}: shared label {l!r} promoted on one side only")
        if upW != frozenset(l for l in node.out_labels if l in set().union(*ups)):
            raise PlanValidationError(f"{e.node}: output layout does not follow from the input layouts")
        if respect:
            hints = [u.promoted_hint for u in node.inputs]
            if ups != hints or upW != node.out_hint:
                raise PlanValidationError(f"{e.node}: plan overrides the written annotations")


def _check_axes(where: str, axes: Sequence[int], rank: int) -> None:
    if any(not isinstance(a, int) or a < 0 or a >= rank for a in axes) or len(set(axes)) != len(axes) \
            or list(axes) != sorted(axes):
        raise PlanValidationError(f"{where}: invalid promoted axes {list(axes)} for rank {rank}")


def evaluate_plan(program: EinsumProgram, plan: Plan, stats: Mapping[str, TensorStats] | CostModel,
                  params: CostParams | None = None, tuples: TupleEstimator = estimate_tuples) -> Plan:
    """Re-cost the decisions of ``plan`` under the given model."""
    model = stats if isinstance(stats, CostModel) else CostModel(program, stats, params or CostParams(), tuples)
    chosen = {}
    for e in plan.nodes:
        node = program.node(e.node)
        c = Candidate(e.in_axes[0], e.in_axes[1] if len(e.in_axes) > 1 else None, e.out_axes)
        np_ = model.node_plan(node, c, e.src_axes)
        if np_ is None:
            raise InfeasiblePlan(f"{e.node}: decomposition exceeds the memory limit")
        chosen[e.node] = np_
    return _finish(program, chosen, plan.source_layouts, plan.mode)


# =============================================================================
# Perturbation
# =============================================================================


@dataclass(frozen=True)
class Perturbation:
    kind: str
    alpha: float = 1.0
    theta: float = 1.0
    constant: str = ""
    factor: float = 1.0

    def __post_init__(self):
        if self.kind == "gamma":
            if not (self.alpha > 0 and self.theta > 0):
                raise ValueError("gamma perturbation needs alpha > 0 and theta > 0")
            if abs(self.alpha * self.theta - 1.0) > 1e-9:
                raise ValueError(f"gamma perturbation must have mean 1 (alpha*theta = {self.alpha * self.theta:g})")
        elif self.kind == "const":
            if self.constant not in COST_CONSTANTS:
                raise ValueError(f"unknown cost constant {self.constant!r}; expected one of {COST_CONSTANTS}")
            if not self.factor > 0:
                raise ValueError("constant scale factor must be positive")
        else:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")

    @classmethod
    def parse(cls, spec: str) -> Perturbation:
        """``gamma:ALPHA,THETA`` or ``const:NAME,FACTOR``."""
        kind, _, rest = spec.partition(":")
        parts = [s.strip() for s in rest.split(",")]
        try:
            if kind == "gamma" and len(parts) == 2:
                return cls("gamma", alpha=float(parts[0]), theta=float(parts[1]))
            if kind == "const" and len(parts) == 2:
                return cls("const", constant=parts[0], factor=float(parts[1]))
        except ValueError:
            pass
        raise ValueError(f"bad perturbation {spec!r}; expected gamma:A,T or const:NAME,FACTOR")


def gamma_estimator(alpha: float, theta: float, seed: int,
                    base: TupleEstimator = estimate_tuples) -> TupleEstimator:
    """Tuple estimates times a Gamma draw fixed per (seed, tensor, promoted axes)."""
    cache: dict[tuple, float] = {}

    def estimate(promoted: Iterable[str], s: TensorStats) -> float:
        promoted = set(promoted)
        key = (s.name, axes_of(s.labels, promoted))
        if key not in cache:
            h = zlib.crc32(repr(key).encode())
            cache[key] = float(np.random.default_rng([seed, h]).gamma(alpha, theta))
        return base(promoted, s) * cache[key]

    return estimate


@dataclass(frozen=True)
class PerturbationResult:
    plan: Plan
    baseline: Plan
    cost_unperturbed: float
    regret: float


def perturb_costs(program: EinsumProgram, stats: Mapping[str, TensorStats], params: CostParams,
                  perturbation: Perturbation, seed: int = 0, mode: str = "dp",
                  respect: bool = False) -> PerturbationResult:
    """Plan under a perturbed model and score it under the unperturbed one."""
    search = optimize_program if mode == "dp" else optimize_greedy
    baseline = search(program, stats, params, respect=respect)
    if perturbation.kind == "gamma":
        tuples = gamma_estimator(perturbation.alpha, perturbation.theta, seed)
        plan = search(program, stats, params, tuples=tuples, respect=respect)
    else:
        plan = search(program, stats, params.with_constant(perturbation.constant, perturbation.factor),
                      respect=respect)
    rescored = evaluate_plan(program, plan, stats, params)
    return PerturbationResult(rescored, baseline, rescored.total, rescored.total - baseline.total)
