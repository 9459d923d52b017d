"""Sparsity statistics: exact counts for sources, estimates for intermediates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ir import EinsumNode, EinsumProgram, TensorDecl, ValidationError, topo_sort


class StatsError(Exception):
    pass


@dataclass(frozen=True)
class TensorStats:
    """Nonzero count T(U) and per-label nonzero slice counts V(l, U).

    Values are reals: exact integers for sources, estimates elsewhere.
    ``labels`` and ``bounds`` are positional; :meth:`relabel` views the same
    tensor through another label list.
    """

    name: str
    labels: tuple[str, ...]
    bounds: tuple[int, ...]
    nnz: float
    per_label: dict[str, float] = field(hash=False)

    def __post_init__(self):
        if len(self.labels) != len(self.bounds):
            raise StatsError(f"{self.name}: labels {self.labels} do not match bounds {self.bounds}")

    def V(self, label: str) -> float:
        try:
            return self.per_label[label]
        except KeyError:
            raise StatsError(f"label {label!r} is not a label of {self.name}{list(self.labels)}") from None

    def bound(self, label: str) -> int:
        return self.bounds[self.labels.index(label)]

    def relabel(self, labels: Sequence[str]) -> TensorStats:
        labels = tuple(labels)
        if len(labels) != len(self.labels):
            raise StatsError(f"{self.name}: cannot relabel rank {len(self.labels)} with {labels}")
        per_label: dict[str, float] = {}
        for new, old in zip(labels, self.labels):
            per_label.setdefault(new, self.per_label[old])
        return TensorStats(self.name, labels, self.bounds, self.nnz, per_label)


@dataclass
class SparseTensor:
    """COO tensor: one coordinate row and one value per nonzero."""

    decl: TensorDecl
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        coords = np.asarray(self.coords, dtype=np.int64)
        if coords.size != len(self.values) * self.decl.rank:
            raise StatsError(f"{self.decl.name}: coordinate array of size {coords.size} "
                             f"for {len(self.values)} rank-{self.decl.rank} entries")
        self.coords = coords.reshape(len(self.values), self.decl.rank)
        if len(self.values):
            bound = np.asarray(self.decl.bound, dtype=np.int64)
            if (self.coords < 0).any() or (self.coords >= bound).any():
                bad = self.coords[((self.coords < 0) | (self.coords >= bound)).any(axis=1)][0]
                raise StatsError(f"{self.decl.name}: coordinate {tuple(bad)} out of bounds {self.decl.bound}")
            if len({tuple(c) for c in self.coords.tolist()}) != len(self.coords):
                raise StatsError(f"{self.decl.name}: duplicate coordinates")
            if (self.values == 0.0).any():
                raise StatsError(f"{self.decl.name}: explicit zero entries are not allowed")

    @property
    def nnz(self) -> int:
        return len(self.values)

    @classmethod
    def from_dense(cls, name: str, array) -> SparseTensor:
        array = np.asarray(array, dtype=np.float64)
        flat = array.reshape(-1)
        idx = np.flatnonzero(flat)
        if array.ndim:
            coords = np.stack(np.unravel_index(idx, array.shape), axis=1)
        else:
            coords = np.zeros((len(idx), 0), dtype=np.int64)
        return cls(TensorDecl(name, array.shape), coords, flat[idx])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.decl.bound, dtype=np.float64)
        if self.decl.rank == 0:
            if self.nnz:
                out[()] = self.values[0]
            return out
        out[tuple(self.coords.T)] = self.values
        return out

    def entries(self) -> list[tuple[tuple[int, ...], float]]:
        return [(tuple(c), float(v)) for c, v in zip(self.coords.tolist(), self.values.tolist())]


# =============================================================================
# COO files
# =============================================================================


def read_coo(path: str | Path) -> SparseTensor:
    """Load ``NAME rank b0 b1 ...`` followed by ``i0 i1 ... value`` lines."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise StatsError(f"{path}: empty file, expected a header line")
    head = lines[0].split()
    try:
        name, rank = head[0], int(head[1])
        bound = tuple(int(b) for b in head[2:])
    except (IndexError, ValueError):
        raise StatsError(f"{path}: malformed header {lines[0]!r}") from None
    if len(bound) != rank:
        raise StatsError(f"{path}: header declares rank {rank} but lists {len(bound)} bounds")
    coords, values = [], []
    for n, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != rank + 1:
            raise StatsError(f"{path}:{n}: expected {rank} indices and a value")
        try:
            coords.append([int(x) for x in parts[:rank]])
            values.append(float(parts[rank]))
        except ValueError:
            raise StatsError(f"{path}:{n}: malformed entry {ln!r}") from None
    try:
        return SparseTensor(TensorDecl(name, bound), np.array(coords, dtype=np.int64), values)
    except (StatsError, ValidationError) as e:
        raise StatsError(f"{path}: {e}") from None


def write_coo(t: SparseTensor, path: str | Path) -> None:
    lines = [" ".join([t.decl.name, str(t.decl.rank), *map(str, t.decl.bound)])]
    for c, v in t.entries():
        lines.append(" ".join([*map(str, c), repr(v)]))
    Path(path).write_text("\n".join(lines) + "\n")


# =============================================================================
# Statistics
# =============================================================================


def exact_stats(t: SparseTensor, labels: Sequence[str]) -> TensorStats:
    labels = tuple(labels)
    if len(labels) != t.decl.rank:
        raise StatsError(f"{t.decl.name} has rank {t.decl.rank}, got labels {list(labels)}")
    per_label: dict[str, float] = {}
    for axis, l in enumerate(labels):
        n = len(np.unique(t.coords[:, axis])) if t.nnz else 0
        per_label.setdefault(l, n)
    return TensorStats(t.decl.name, labels, t.decl.bound, t.nnz, per_label)


def merge_partial_counts(name: str, labels: Sequence[str], bounds: Sequence[int],
                         shards: Iterable[SparseTensor]) -> TensorStats:
    """Exact stats over entries split across shards (order-independent)."""
    labels = tuple(labels)
    seen: list[set[int]] = [set() for _ in labels]
    nnz = 0
    for shard in shards:
        nnz += shard.nnz
        for axis in range(len(labels)):
            seen[axis].update(shard.coords[:, axis].tolist())
    per_label: dict[str, float] = {}
    for l, s in zip(labels, seen):
        per_label.setdefault(l, len(s))
    return TensorStats(name, labels, tuple(bounds), nnz, per_label)


def possible_tuples(promoted: Iterable[str], s: TensorStats) -> float:
    """n(up U): product of V(l, U) over promoted labels (1 when empty)."""
    return math.prod(s.V(l) for l in dict.fromkeys(promoted))


def estimate_tuples(promoted: Iterable[str], s: TensorStats) -> float:
    """T(up U) = n (1 - exp(-T(U) / n)): expected number of non-empty blocks."""
    if s.nnz <= 0:
        return 0.0
    n = possible_tuples(promoted, s)
    if n <= 0:
        return 0.0
    return -n * math.expm1(-s.nnz / n)


def _scalar_join(sU: TensorStats, sV: TensorStats) -> float:
    if sU.nnz <= 0 or sV.nnz <= 0:
        return 0.0
    denom = math.prod(max(sU.V(l), sV.V(l)) for l in dict.fromkeys(sU.labels) if l in sV.per_label)
    return sU.nnz * sV.nnz / denom if denom > 0 else 0.0


def node_output_stats(node: EinsumNode, inputs: Sequence[TensorStats]) -> TensorStats:
    """Estimated stats of a node's output from its (relabelled) input stats."""
    out_bounds = node.output.bound
    bound_of = dict(zip(node.out_labels, out_bounds))
    if not node.op.prunable:
        # the executor materialises every block of a non-prunable output
        dense = math.prod(out_bounds)
        return TensorStats(node.id, node.out_labels, out_bounds, float(dense),
                           {l: float(bound_of[l]) for l in node.out_labels})

    if node.is_unary:
        (sU,) = inputs
        join = float(sU.nnz)
    else:
        sU, sV = inputs
        join = _scalar_join(sU, sV)

    per_label: dict[str, float] = {}
    for l in node.out_labels:
        counts = [s.V(l) for s in inputs if l in s.per_label]
        per_label[l] = min(min(counts), float(bound_of[l]))

    if join <= 0:
        return TensorStats(node.id, node.out_labels, out_bounds, 0.0, {l: 0.0 for l in per_label})
    nnz = min(join, float(math.prod(out_bounds)))
    if node.agg_labels:
        nnz = min(nnz, math.prod(per_label[l] for l in dict.fromkeys(node.out_labels)))
    per_label = {l: min(v, nnz) for l, v in per_label.items()}
    return TensorStats(node.id, node.out_labels, out_bounds, nnz, per_label)


def propagate_stats(p: EinsumProgram, sources: Mapping[str, TensorStats]) -> dict[str, TensorStats]:
    """Stats for every tensor of the program: given sources plus estimates."""
    out: dict[str, TensorStats] = {}
    for name in p.source_names:
        if name not in sources:
            raise StatsError(f"missing statistics for source tensor {name!r}")
        out[name] = sources[name]
    for v in topo_sort(p):
        if p.is_source(v):
            continue
        node = p.node(v)
        ins = [out[u.tensor].relabel(u.labels) for u in node.inputs]
        out[v] = node_output_stats(node, ins)
    return out


def source_stats(p: EinsumProgram, tensors: Mapping[str, SparseTensor]) -> dict[str, TensorStats]:
    """Exact stats for every source, labelled by the tensor's first use."""
    first_use: dict[str, tuple[str, ...]] = {}
    for n in p.nodes:
        for u in n.inputs:
            first_use.setdefault(u.tensor, u.labels)
    out = {}
    for name in p.source_names:
        if name not in tensors:
            raise StatsError(f"no data supplied for source tensor {name!r}")
        t = tensors[name]
        decl = p.decl(name)
        if t.decl.bound != decl.bound:
            raise StatsError(f"{name}: data bounds {t.decl.bound} differ from declaration {decl.bound}")
        labels = first_use.get(name, tuple(f"a{i}" for i in range(decl.rank)))
        out[name] = exact_stats(t, labels)
    return out
