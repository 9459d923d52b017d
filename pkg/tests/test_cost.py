from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import group_count
from ucl_einsum.cost import (COST_CONSTANTS, CostConfigError, CostParams, MemoryLimitExceeded, agg_cardinality,
                             agg_cost, calibrate, join_cardinality, join_cost, load_cost_config, node_breakdown,
                             repart_cost, tuple_bytes)
from ucl_einsum.fixtures import MATMUL_U, MATMUL_V
from ucl_einsum.ir import parse_program
from ucl_einsum.stats import SparseTensor, TensorStats, estimate_tuples, exact_stats

MATMUL = parse_program("tensor U[4,4]; tensor V[4,4]; W[i,k] = sum[j] U[i,j] * V[j,k]").nodes[0]
DOT = parse_program("tensor U[4]; tensor V[4]; W[] = sum[j] U[j] * V[j]").nodes[0]
SU = exact_stats(SparseTensor.from_dense("U", MATMUL_U), ["i", "j"])
SV = exact_stats(SparseTensor.from_dense("V", MATMUL_V), ["j", "k"])
DENSE = {"U": MATMUL_U, "V": MATMUL_V}


def exact_tuples(promoted, s: TensorStats) -> float:
    """Actual number of non-empty blocks, for checking the formulas on exact counts."""
    return float(group_count(DENSE[s.name], tuple(i for i, l in enumerate(s.labels) if l in set(promoted))))


def T(p, s):
    return estimate_tuples(p, s)


class TestJoin:
    def test_disjoint_promotion_exact_counts(self):
        assert join_cardinality({"i"}, {"k"}, SU, SV, exact_tuples) == 4

    def test_disjoint_promotion_estimated(self):
        got = join_cardinality({"i"}, {"k"}, SU, SV)
        assert got == pytest.approx(2 * (1 - math.exp(-2.5)) * 2 * (1 - math.exp(-3)), rel=1e-14)

    def test_shared_promotion_exact_counts(self):
        assert join_cardinality({"j"}, {"j"}, SU, SV, exact_tuples) == 4

    def test_shared_promotion_estimated(self):
        expect = 4 * (1 - math.exp(-5 / 4)) * 4 * (1 - math.exp(-6 / 4)) / 4
        assert join_cardinality({"j"}, {"j"}, SU, SV) == pytest.approx(expect, rel=1e-14)

    def test_empty_input(self):
        empty = TensorStats("U", ("i", "j"), (4, 4), 0, {"i": 0, "j": 0})
        assert join_cardinality({"i"}, {"k"}, empty, SV) == 0

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = TensorStats("A", ("x", "y"), (8, 8), float(rng.integers(1, 64)),
                            {"x": float(rng.integers(1, 9)), "y": float(rng.integers(1, 9))})
            b = TensorStats("B", ("y", "z"), (8, 8), float(rng.integers(1, 64)),
                            {"y": float(rng.integers(1, 9)), "z": float(rng.integers(1, 9))})
            for ua in ({"y"}, {"x", "y"}, set()):
                ub = {"y"} if "y" in ua else set()
                assert join_cardinality(ua, ub, a, b) == pytest.approx(join_cardinality(ub, ua, b, a), rel=1e-15)

    def test_scalar_tuples_cost(self):
        p = CostParams()
        t = join_cardinality({"i", "j"}, {"j", "k"}, SU, SV)
        got = join_cost({"i", "j"}, {"j", "k"}, SU, SV, MATMUL, p)
        per = (2 * 4 + 8 + 2 * 4 + 8) * p.c_xfer + 2 * p.c_kernel_flop + p.c_fixed
        assert got == pytest.approx(t * per, rel=1e-14)

    def test_whole_tensor_kernel(self):
        p = CostParams()
        got = join_cost(set(), set(), SU, SV, MATMUL, p)
        t = T(set(), SU) * T(set(), SV)
        per = (8 * 16 + 8 * 16) * p.c_xfer + p.c_kernel_flop * 2 * 4 * 4 * 4 + p.c_fixed
        assert got == pytest.approx(t * per, rel=1e-14)

    def test_memory_limit(self):
        p = replace(CostParams(), memory_limit_bytes=100)
        with pytest.raises(MemoryLimitExceeded):
            join_cost(set(), set(), SU, SV, MATMUL, p)
        join_cost({"i", "j"}, {"j", "k"}, SU, SV, MATMUL, p)


class TestAggregation:
    def test_shared_promoted_agg_label_exact_counts(self):
        t_join = join_cardinality({"j"}, {"j"}, SU, SV, exact_tuples)
        assert agg_cardinality({"j"}, {"j"}, SU, SV, MATMUL, exact_tuples) == min(t_join / 2, 4) == 2

    def test_no_promoted_agg_label_is_pass_through(self):
        t_join = join_cardinality({"i"}, {"k"}, SU, SV)
        assert agg_cardinality({"i"}, {"k"}, SU, SV, MATMUL) == pytest.approx(t_join, rel=1e-15)

    def test_zero_join(self):
        empty = TensorStats("U", ("i", "j"), (4, 4), 0, {"i": 0, "j": 0})
        assert agg_cardinality({"j"}, {"j"}, empty, SV, MATMUL) == 0

    def test_cost_nothing_to_merge(self):
        assert agg_cost(3.0, 3.0, MATMUL, {"i"}, {"i": 4, "j": 4, "k": 4}, CostParams()) == 0

    def test_cost_scalar_output(self):
        p = CostParams()
        got = agg_cost(4.0, 2.0, DOT, set(), {"j": 4}, p)
        assert got == pytest.approx(2 * (8 * p.c_xfer + p.c_add + p.c_fixed), rel=1e-15)

    def test_cost_half(self):
        p = CostParams()
        bounds = {"i": 4, "j": 4, "k": 4}
        bracket = (4 + 8 * 4) * p.c_xfer + p.c_add * 4 + p.c_fixed
        assert agg_cost(6.0, 3.0, MATMUL, {"i"}, bounds, p) == pytest.approx(3.0 * bracket, rel=1e-15)

    def test_never_exceeds_join(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            a = TensorStats("U", ("i", "j"), (8, 8), float(rng.integers(0, 64)),
                            {"i": float(rng.integers(1, 9)), "j": float(rng.integers(1, 9))})
            b = TensorStats("V", ("j", "k"), (8, 8), float(rng.integers(0, 64)),
                            {"j": float(rng.integers(1, 9)), "k": float(rng.integers(1, 9))})
            for ua, ub in (({"j"}, {"j"}), ({"i"}, {"k"}), ({"i", "j"}, {"j", "k"}), (set(), set())):
                assert agg_cardinality(ua, ub, a, b, MATMUL) <= join_cardinality(ua, ub, a, b) + 1e-12


class TestRepartition:
    def test_same_layout_is_free(self):
        assert repart_cost({"i"}, {"i"}, SU, CostParams()) == 0.0

    def test_both_steps(self):
        p = CostParams()
        moved = 2 * T({"i", "j"}, SU) - T({"i"}, SU) - T({"j"}, SU)
        got = repart_cost({"i"}, {"j"}, SU, p)
        assert got == pytest.approx(moved * ((2 * 4 + 8) * p.c_xfer + p.c_fixed), rel=1e-14)

    def test_decompose_only(self):
        p = CostParams()
        moved = T({"i"}, SU) - T(set(), SU)
        got = repart_cost(set(), {"i"}, SU, p)
        assert got == pytest.approx(moved * ((4 + 8 * 4) * p.c_xfer + p.c_fixed), rel=1e-14)

    def test_stack_only(self):
        p = CostParams()
        moved = T({"i", "j"}, SU) - T({"i"}, SU)
        got = repart_cost({"i", "j"}, {"i"}, SU, p)
        assert got == pytest.approx(moved * ((2 * 4 + 8) * p.c_xfer + p.c_fixed), rel=1e-14)

    def test_union_at_least_each_side(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            per = {l: float(rng.integers(1, 9)) for l in "abc"}
            s = TensorStats("S", ("a", "b", "c"), (8, 8, 8), float(rng.integers(1, 513)), per)
            x = {l for l in "abc" if rng.random() < 0.5}
            y = {l for l in "abc" if rng.random() < 0.5}
            assert T(x | y, s) >= max(T(x, s), T(y, s)) * (1 - 1e-15)
            assert repart_cost(x, y, s, CostParams()) >= 0


class TestBreakdown:
    def test_total_is_sum(self):
        b = node_breakdown(MATMUL, {"j"}, {"j"}, SU, SV, CostParams(), repart_left=1.0, repart_right=2.0)
        assert b.total == b.c_join + b.c_agg + 3.0
        assert min(b.t_join, b.c_join, b.t_agg, b.c_agg) >= 0

    def test_scaling(self):
        p = CostParams(c_fixed=3e-7)
        for ua, ub in (({"j"}, {"j"}), ({"i"}, {"k"}), (set(), set())):
            a = node_breakdown(MATMUL, ua, ub, SU, SV, p)
            b = node_breakdown(MATMUL, ua, ub, SU, SV, p.scaled(7.3))
            assert b.total == pytest.approx(7.3 * a.total, rel=1e-13)

    def test_tuple_bytes(self):
        p = CostParams()
        assert tuple_bytes({"i"}, ("i", "j"), {"i": 4, "j": 6}, p) == 4 + 8 * 6
        assert tuple_bytes(set(), (), {}, p) == 8


class TestParams:
    def test_validation(self):
        with pytest.raises(CostConfigError):
            CostParams(c_xfer=-1.0)
        with pytest.raises(CostConfigError):
            CostParams(element_bytes=0)

    def test_config_file(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("# tuned\nc_fixed = 2e-6\nelement_bytes = 4\n")
        p = load_cost_config(f)
        assert p.c_fixed == 2e-6 and p.element_bytes == 4 and p.c_xfer == CostParams().c_xfer

    @pytest.mark.parametrize("text", ["bogus = 1\n", "c_fixed 1\n", "c_fixed = x\n"])
    def test_config_errors(self, tmp_path, text):
        f = tmp_path / "c.cfg"
        f.write_text(text)
        with pytest.raises(CostConfigError):
            load_cost_config(f)

    def test_with_constant(self):
        p = CostParams().with_constant("c_xfer", 10)
        assert p.c_xfer == CostParams().c_xfer * 10
        with pytest.raises(CostConfigError):
            CostParams().with_constant("nope", 2)

    def test_calibrate(self):
        got = calibrate(repeats=1)
        assert set(got) == set(COST_CONSTANTS)
        assert all(v > 0 and math.isfinite(v) for v in got.values())
