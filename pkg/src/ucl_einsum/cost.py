"""Join, aggregation and repartition cost formulas for tensor-relational plans."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .ir import EinsumNode
from .stats import TensorStats, estimate_tuples

TupleEstimator = Callable[[Iterable[str], TensorStats], float]

COST_CONSTANTS = ("c_xfer", "c_fixed", "c_kernel_flop", "c_add")


class MemoryLimitExceeded(Exception):
    """A kernel call's inputs plus output do not fit the memory limit."""


class CostConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    c_xfer: float = 1e-9
    c_fixed: float = 1e-6
    c_kernel_flop: float = 1e-10
    c_add: float = 1e-10
    element_bytes: int = 8
    key_bytes: int = 4
    memory_limit_bytes: float = math.inf

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or v < 0 or math.isnan(v):
                raise CostConfigError(f"{f.name} must be a non-negative number, got {v!r}")
        if self.element_bytes < 1 or self.key_bytes < 1:
            raise CostConfigError("element_bytes and key_bytes must be >= 1")

    def scaled(self, factor: float) -> CostParams:
        """All four cost constants multiplied by ``factor``."""
        return replace(self, **{k: getattr(self, k) * factor for k in COST_CONSTANTS})

    def with_constant(self, name: str, factor: float) -> CostParams:
        if name not in COST_CONSTANTS:
            raise CostConfigError(f"unknown cost constant {name!r}; expected one of {COST_CONSTANTS}")
        return replace(self, **{name: getattr(self, name) * factor})

    def to_dict(self) -> dict:
        return asdict(self)


def load_cost_config(path: str | Path, base: CostParams | None = None) -> CostParams:
    """Read ``key = value`` lines (``#`` comments allowed) over ``base``."""
    values: dict[str, float] = {}
    known = {f.name: f.type for f in fields(CostParams)}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CostConfigError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise CostConfigError(f"{path}:{n}: unknown cost parameter {key!r}")
        try:
            num = float(val)
        except ValueError:
            raise CostConfigError(f"{path}:{n}: {val!r} is not a number") from None
        values[key] = int(num) if key in ("element_bytes", "key_bytes") else num
    return replace(base or CostParams(), **values)


@dataclass(frozen=True)
class CostBreakdown:
    t_join: float = 0.0
    c_join: float = 0.0
    t_agg: float = 0.0
    c_agg: float = 0.0
    c_repart_left: float = 0.0
    c_repart_right: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.c_join + self.c_agg + self.c_repart_left + self.c_repart_right)

    def to_dict(self) -> dict:
        return asdict(self)


# =============================================================================
# Sizes
# =============================================================================


def tuple_bytes(promoted: Iterable[str], labels: Iterable[str], bounds: dict[str, int],
                params: CostParams) -> float:
    """Bytes of one tuple: integer keys plus the dense demoted block."""
    labels = list(labels)
    promoted = set(promoted)
    keys = sum(1 for l in labels if l in promoted)
    block = math.prod(bounds[l] for l in labels if l not in promoted)
    return params.key_bytes * keys + params.element_bytes * block


def _bounds_of(s: TensorStats) -> dict[str, int]:
    return dict(zip(s.labels, s.bounds))


def output_promoted(node: EinsumNode, upU: Iterable[str], upV: Iterable[str] | None) -> frozenset[str]:
    """Output labels promoted by a consistent input pair."""
    up = set(upU) | set(upV or ())
    return frozenset(l for l in node.out_labels if l in up)


# =============================================================================
# Join
# =============================================================================


def join_cardinality(upU: Iterable[str], upV: Iterable[str] | None, sU: TensorStats,
                     sV: TensorStats | None, tuples: TupleEstimator = estimate_tuples) -> float:
    """T_join: textbook join estimate over the shared promoted labels."""
    upU = set(upU)
    tU = tuples(upU, sU)
    if sV is None:
        return tU
    upV = set(upV)
    tV = tuples(upV, sV)
    if tU <= 0 or tV <= 0:
        return 0.0
    denom = 1.0
    for l in sorted(upU & upV):
        denom *= max(sU.V(l), sV.V(l))
    return tU * tV / denom if denom > 0 else 0.0


def kernel_flops(node: EinsumNode, upU: Iterable[str], upV: Iterable[str] | None,
                 bounds: dict[str, int]) -> float:
    """2 x the product of bounds of distinct demoted labels of both inputs."""
    up = set(upU) | set(upV or ())
    return 2.0 * math.prod(bounds[l] for l in node.all_labels if l not in up)


def join_cost(upU: Iterable[str], upV: Iterable[str] | None, sU: TensorStats, sV: TensorStats | None,
              node: EinsumNode, params: CostParams, tuples: TupleEstimator = estimate_tuples,
              t_join: Optional[float] = None) -> float:
    upU = set(upU)
    upV = None if upV is None else set(upV)
    bounds = _bounds_of(sU) | (_bounds_of(sV) if sV is not None else {})
    size_u = tuple_bytes(upU, sU.labels, bounds, params)
    size_v = tuple_bytes(upV, sV.labels, bounds, params) if sV is not None else 0.0
    size_w = tuple_bytes(output_promoted(node, upU, upV), node.out_labels, bounds, params)
    if size_u + size_v + size_w > params.memory_limit_bytes:
        raise MemoryLimitExceeded(
            f"{node.id}: kernel call needs {size_u + size_v + size_w:.0f} bytes, "
            f"limit is {params.memory_limit_bytes:.0f}")
    if t_join is None:
        t_join = join_cardinality(upU, upV, sU, sV, tuples)
    c_krnel = params.c_kernel_flop * kernel_flops(node, upU, upV, bounds)
    return t_join * ((size_u + size_v) * params.c_xfer + c_krnel + params.c_fixed)


# =============================================================================
# Aggregation
# =============================================================================


def _distinct(l: str, upU: set, upV: set, sU: TensorStats, sV: TensorStats | None) -> float:
    inU, inV = l in upU, sV is not None and l in upV
    if inU and inV:
        return min(sU.V(l), sV.V(l))
    if inU:
        return sU.V(l)
    return sV.V(l)


def agg_cardinality(upU: Iterable[str], upV: Iterable[str] | None, sU: TensorStats,
                    sV: TensorStats | None, node: EinsumNode, tuples: TupleEstimator = estimate_tuples,
                    t_join: Optional[float] = None) -> float:
    """T_agg: number of aggregation groups after the join.

    With promoted aggregation labels this is min(T_join / 2, prod over those
    labels).  Without any, there is nothing to merge relationally and the
    group count is the promoted output key product, capped at T_join.
    """
    upU = set(upU)
    upV = set(upV or ())
    if t_join is None:
        t_join = join_cardinality(upU, None if sV is None else upV, sU, sV, tuples)
    if t_join <= 0:
        return 0.0
    up = upU | upV
    up_agg = [l for l in node.agg_labels if l in up]
    if up_agg:
        prod = math.prod(_distinct(l, upU, upV, sU, sV) for l in up_agg)
        return min(0.5 * t_join, prod)
    up_out = [l for l in dict.fromkeys(node.out_labels) if l in up]
    prod = math.prod(_distinct(l, upU, upV, sU, sV) for l in up_out)
    return min(t_join, prod)


def agg_cost(t_join: float, t_agg: float, node: EinsumNode, up_w: Iterable[str],
             bounds: dict[str, int], params: CostParams) -> float:
    """(T_join - T_agg) moves-and-adds, each of one output tuple."""
    moved = max(0.0, t_join - t_agg)
    if moved == 0.0:
        return 0.0
    up_w = set(up_w)
    size_w = tuple_bytes(up_w, node.out_labels, bounds, params)
    volume = math.prod(bounds[l] for l in node.out_labels if l not in up_w)
    return moved * (size_w * params.c_xfer + params.c_add * volume + params.c_fixed)


# =============================================================================
# Repartition
# =============================================================================


def repart_cost(up_in: Iterable[str], up_out: Iterable[str], s: TensorStats, params: CostParams,
                tuples: TupleEstimator = estimate_tuples) -> float:
    """(2 T(in | out) - T(in) - T(out)) x per-tuple cost of the intermediate."""
    up_in, up_out = frozenset(up_in), frozenset(up_out)
    if up_in == up_out:
        return 0.0
    union = up_in | up_out
    t_union = tuples(union, s)
    moved = max(0.0, 2.0 * t_union - tuples(up_in, s) - tuples(up_out, s))
    size = tuple_bytes(union, s.labels, _bounds_of(s), params)
    return moved * (size * params.c_xfer + params.c_fixed)


# =============================================================================
# Whole-node evaluation
# =============================================================================


def node_breakdown(node: EinsumNode, upU: Iterable[str], upV: Iterable[str] | None, sU: TensorStats,
                   sV: TensorStats | None, params: CostParams, repart_left: float = 0.0,
                   repart_right: float = 0.0, tuples: TupleEstimator = estimate_tuples) -> CostBreakdown:
    """Join and aggregation cost of one node plus given input repartition costs.

    Raises :class:`MemoryLimitExceeded` for infeasible decompositions.
    """
    upU = set(upU)
    upV = None if upV is None else set(upV)
    t_join = join_cardinality(upU, upV, sU, sV, tuples)
    c_join = join_cost(upU, upV, sU, sV, node, params, tuples, t_join=t_join)
    t_agg = min(agg_cardinality(upU, upV, sU, sV, node, tuples, t_join=t_join), t_join)
    bounds = _bounds_of(sU) | (_bounds_of(sV) if sV is not None else {})
    c_agg = agg_cost(t_join, t_agg, node, output_promoted(node, upU, upV), bounds, params)
    return CostBreakdown(t_join, c_join, t_agg, c_agg, repart_left, repart_right)


# =============================================================================
# Calibration
# =============================================================================


def calibrate(repeats: int = 3) -> dict[str, float]:
    """Suggest cost constants (seconds) from micro-measurements on this machine.

    c_xfer: copying a large buffer, per byte.  c_kernel_flop: dense matmul,
    per flop.  c_fixed: building and aggregating a cross product of python
    tuples, per produced tuple.  c_add: elementwise vector add, per element.
    """

    def best(fn) -> float:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    buf = np.ones(1 << 22)
    t_copy = best(lambda: buf.copy())
    n = 256
    a, b = np.random.default_rng(0).random((2, n, n))
    t_mm = best(lambda: a @ b)
    left = [(i, float(i)) for i in range(300)]
    right = [(i % 17, float(i)) for i in range(300)]

    def cross_agg():
        groups: dict[int, float] = {}
        for k1, v1 in left:
            for k2, v2 in right:
                groups[k2] = groups.get(k2, 0.0) + v1 * v2

    t_cross = best(cross_agg)
    vec = np.ones(1 << 20)
    t_add = best(lambda: vec + vec)
    return {
        "c_xfer": t_copy / buf.nbytes,
        "c_kernel_flop": t_mm / (2.0 * n ** 3),
        "c_fixed": t_cross / (len(left) * len(right)),
        "c_add": t_add / vec.size,
    }
