"""Acceptance suite: one class per criterion, each recording PASS/FAIL.

The summary printed at the end of the pytest run lists every criterion.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, PARAM_SETS
from helpers import fixture_setup
from oracles import (abs_scale, brute_force_cost, loop_node, node_options, random_inputs, random_node_program,
                     random_tree_program)
from test_codegen import golden, matmul_query, normalize
from ucl_einsum.codegen import emit_repartition_sql, stored_relation
from ucl_einsum.executor import OpCounter, decompose_tensor, dense_eval, densify, exec_node, exec_repartition
from ucl_einsum.fixtures import FIXTURES, MATMUL_U, MATMUL_V
from ucl_einsum.ir import Decomposition, parse_program
from ucl_einsum.optimizer import (Perturbation, optimize_greedy, optimize_program, perturb_costs, top_k_plans,
                                  validate_plan)
from ucl_einsum.stats import SparseTensor, estimate_tuples, exact_stats, propagate_stats, source_stats


def record(k: int, ok: bool, detail: str) -> None:
    """AND ``ok`` into criterion ``k`` and append ``detail``."""
    prev_ok, prev = ACCEPTANCE.get(k, (True, ""))
    ACCEPTANCE[k] = (prev_ok and ok, f"{prev}; {detail}" if prev else detail)


def rel(t: SparseTensor, axes):
    return decompose_tensor(t, Decomposition(tuple(f"a{i}" for i in range(t.decl.rank)), tuple(axes)))


def random_trees(n: int = 50):
    rng = np.random.default_rng(2024)
    out = []
    for _ in range(n):
        program = random_tree_program(rng, max_nodes=4, max_rank=3)
        stats = propagate_stats(program, source_stats(program, random_inputs(program, rng)))
        out.append((program, stats))
    return out


TREES = random_trees()


class TestCriterion1MatmulReproduction:
    PROGRAM = parse_program("tensor U[4,4]; tensor V[4,4]; W[i,k] = sum[j] U[i,j] * V[j,k]")
    LITERAL = {(0, 0): 7.0, (0, 2): 7.55, (2, 0): 4.48, (2, 2): 3.14}

    def run(self):
        t0 = time.perf_counter()
        c = OpCounter()
        w = exec_node(self.PROGRAM.nodes[0], rel(SparseTensor.from_dense("U", MATMUL_U), (0,)),
                      rel(SparseTensor.from_dense("V", MATMUL_V), (1,)), c)
        cd = OpCounter()
        ref = dense_eval(self.PROGRAM, {"U": MATMUL_U, "V": MATMUL_V}, cd)["W"]
        return w, c, ref, cd, time.perf_counter() - t0

    def test_matches_dense_evaluator_bitwise(self):
        w, _, ref, _, _ = self.run()
        got = densify(w)
        ok = sorted(w.rows) == sorted(self.LITERAL) and np.array_equal(got, ref)
        record(1, ok, "relational == dense_eval bitwise" if ok else "relational differs from dense_eval")
        assert ok

    def test_multiply_counts(self):
        _, c, _, cd, _ = self.run()
        ok = c.scalar_multiplies == 16 and cd.scalar_multiplies == 64
        record(1, ok, f"multiplies {c.scalar_multiplies} vs dense {cd.scalar_multiplies}")
        assert ok

    def test_runtime(self):
        elapsed = self.run()[-1]
        record(1, elapsed < 1.0, f"{elapsed * 1e3:.1f} ms")
        assert elapsed < 1.0

    # 1.4*3.2 and 1.4*1.3 + 1.1*1.2 have no binary64 result equal to the
    # literals 4.48 and 3.14; any IEEE evaluation yields the neighbouring double
    @pytest.mark.xfail(strict=True, reason="4.48 and 3.14 are not reachable in binary64 arithmetic")
    def test_literal_values_bitwise(self):
        w, *_ = self.run()
        got = densify(w)
        diffs = {k: float(got[k]) for k, v in self.LITERAL.items() if float(got[k]) != v}
        record(1, not diffs, "literal values bitwise" if not diffs else
               "literal values not bitwise: " + ", ".join(f"W{list(k)}={v!r}" for k, v in diffs.items()))
        assert not diffs


class TestCriterion2OracleSweep:
    OPS = ("W[{w}] = sum[{agg}] U[{u}] * V[{v}]", "W[{w}] = max[{agg}] (U[{u}] - V[{v}])^2")

    def test_all_layouts_match_loop_oracle(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(77)
        worst, pairs, failures = 0.0, 0, []
        for k in range(100):
            program = random_node_program(rng, self.OPS[k % 2], max_rank=3, max_bound=8)
            node = program.nodes[0]
            inputs = random_inputs(program, rng, density=0.3)
            u, v = inputs["U"].to_dense(), inputs["V"].to_dense()
            bounds = node.label_bounds(program)
            ref = loop_node(node, bounds, u, v)
            scale = abs_scale(node, bounds, u, v)
            for ua, va, _ in node_options(node):
                got = densify(exec_node(node, rel(inputs["U"], ua), rel(inputs["V"], va)))
                pairs += 1
                if node.op.aggregate == "max":
                    if not np.array_equal(got, ref):
                        failures.append((k, ua, va))
                else:
                    err = np.abs(got - ref)
                    rel_err = float(np.max(np.where(scale > 0, err / np.where(scale > 0, scale, 1), err), initial=0))
                    worst = max(worst, rel_err)
                    if rel_err > 1e-12:
                        failures.append((k, ua, va))
        elapsed = time.perf_counter() - t0
        ok = not failures and elapsed < 120
        record(2, ok, f"{pairs} layout pairs, worst sum rel err {worst:.2g}, max exact, "
                      f"{len(failures)} failures, {elapsed:.1f} s")
        assert not failures, failures[:5]
        assert elapsed < 120


class TestCriterion3DPOptimality:
    def test_dp_equals_brute_force(self):
        t0 = time.perf_counter()
        worst = 0.0
        for program, stats in TREES:
            for params in PARAM_SETS.values():
                dp = optimize_program(program, stats, params).total
                bf = brute_force_cost(program, stats, params)
                worst = max(worst, 0.0 if dp == bf else abs(dp - bf) / max(abs(dp), abs(bf)))
        elapsed = time.perf_counter() - t0
        ok = worst <= 1e-9 and elapsed < 120
        record(3, ok, f"{len(TREES)} trees x {len(PARAM_SETS)} param sets, worst rel gap {worst:.2g}, "
                      f"{elapsed:.1f} s")
        assert worst <= 1e-9
        assert elapsed < 120


class TestCriterion4GreedyDominance:
    def test_greedy_never_cheaper(self):
        cases = list(TREES) + [fixture_setup(n)[::2] for n in ("gcn", "attention")]
        violations, strict = 0, 0
        for program, stats in cases:
            for params in PARAM_SETS.values():
                g = optimize_greedy(program, stats, params).total
                d = optimize_program(program, stats, params).total
                violations += g < d * (1 - 1e-12)
                strict += g > d * (1 + 1e-12)
        record(4, violations == 0, f"{len(cases) * len(PARAM_SETS)} cases, greedy strictly worse in {strict}, "
                                   f"{violations} violations")
        assert violations == 0


class TestCriterion5Estimator:
    def test_mean_relative_error(self):
        errs = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            dense = np.where(rng.random((50, 40, 20)) < 0.025, 1.0, 0.0)
            s = exact_stats(SparseTensor.from_dense("T", dense), ["a", "b", "c"])
            assert s.V("a") * s.V("b") >= 1000
            actual = np.count_nonzero(dense.any(axis=2))
            errs.append(abs(estimate_tuples({"a", "b"}, s) - actual) / actual)
        mean = float(np.mean(errs))
        record(5, mean <= 0.05, f"mean rel err {mean:.2%} over 20 trials")
        assert mean <= 0.05


class TestCriterion6RepartitionIdentity:
    def test_round_trips(self):
        rng = np.random.default_rng(6)
        bad, moved = 0, 0
        for _ in range(100):
            shape = tuple(int(x) for x in rng.integers(1, 7, rng.integers(1, 4)))
            dense = np.where(rng.random(shape) < 0.3, rng.uniform(-1, 1, shape), 0.0)
            t = SparseTensor.from_dense("T", dense)
            a = tuple(i for i in range(len(shape)) if rng.random() < 0.5)
            b = tuple(i for i in range(len(shape)) if rng.random() < 0.5)
            r = rel(t, a)
            back = exec_repartition(exec_repartition(r, b), a)
            bad += not back.equals(r)
            c = OpCounter()
            same = exec_repartition(r, a, c)
            moved += (same is not r) + sum(c.tuples_produced.values())
        record(6, bad == 0 and moved == 0, f"100 round trips, {bad} mismatches, {moved} tuples moved by a->a")
        assert bad == 0 and moved == 0


class TestCriterion7Goldens:
    def test_listings(self):
        results = {}
        results["outer product"] = matmul_query(
            "tensor U[8192,8192]; tensor V[8192,8192]; W[i,k] = sum[J] U[i,J] * V[J,k]") == golden("outer_product.sql")
        results["inner product"] = matmul_query(
            "tensor U[8192,8192]; tensor V[8192,8192]; W[I,K] = sum[j] U[I,j] * V[j,K]") == golden("inner_product.sql")
        stmts, _ = emit_repartition_sql(stored_relation("T", ("k", "i"), (0,)), ("i", "j"), (6, 8), (0,), (1,), "T_U")
        results["repartition"] = [normalize(s) for s in stmts] == golden(
            "repartition.sql", bound={0: 6, 1: 8}, rename={"t_in": "t", "t_int": "t_u_int", "t": "t_u"})
        ok = all(results.values())
        record(7, ok, ", ".join(f"{k} {'match' if v else 'DIFFER'}" for k, v in results.items()))
        assert ok


class TestCriterion8Perturbation:
    def test_gamma_on_gcn(self):
        program, _, stats = fixture_setup("gcn")
        runs, worst = 0, 0.0
        for params in PARAM_SETS.values():
            for seed in range(10):
                r = perturb_costs(program, stats, params, Perturbation("gamma", alpha=1.0, theta=1.0), seed=seed)
                validate_plan(program, r.plan)
                assert np.isfinite(r.plan.total)
                assert r.regret >= 0, (seed, r.regret)
                worst = max(worst, r.regret / r.baseline.total)
                runs += 1
        record(8, True, f"{runs} runs feasible, regret >= 0, max relative regret {worst:.2%}")


class TestCriterion9ScaleInvariance:
    def test_decisions_unchanged(self):
        checked, changed = 0, []
        for name in FIXTURES:
            program, _, stats = fixture_setup(name)
            for pname, params in PARAM_SETS.items():
                scaled = params.scaled(7.3)
                pairs = [(optimize_program(program, stats, params), optimize_program(program, stats, scaled)),
                         (optimize_greedy(program, stats, params), optimize_greedy(program, stats, scaled))]
                pairs += zip(top_k_plans(program, stats, params, 3), top_k_plans(program, stats, scaled, 3))
                for a, b in pairs:
                    checked += 1
                    if a.decisions() != b.decisions():
                        changed.append((name, pname))
        record(9, not changed, f"{checked} plans compared, {len(changed)} changed")
        assert not changed
