from __future__ import annotations

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import PARAM_SETS, RELATIONAL
from helpers import fixture_setup
from oracles import brute_force_cost, node_options, random_inputs, random_tree_program
from ucl_einsum.cost import CostParams
from ucl_einsum.fixtures import FIXTURES
from ucl_einsum.ir import parse_program, split_into_trees
from ucl_einsum.optimizer import (CostModel, InfeasiblePlan, Perturbation, Plan, PlanValidationError,
                                  evaluate_plan, is_consistent, node_candidates, optimize_greedy, optimize_program,
                                  optimize_tree, perturb_costs, top_k_plans, validate_plan)
from ucl_einsum.stats import propagate_stats, source_stats


def close(a: float, b: float, rel: float = 1e-9) -> bool:
    return a == b or abs(a - b) <= rel * max(abs(a), abs(b))


class TestConsistency:
    @pytest.mark.parametrize("upU, upW, lU, lW, ok", [
        ({"i"}, {"i"}, "ij", "ik", True),
        ({"i"}, set(), "ij", "ik", False),
        ({"j"}, set(), "ij", "ik", True),
        (set(), {"k"}, "ij", "ik", True),
        ({"i", "j"}, {"i", "k"}, "ij", "ik", True),
        (set(), set(), "", "", True),
    ])
    def test_examples(self, upU, upW, lU, lW, ok):
        assert is_consistent(upU, upW, list(lU), list(lW)) is ok

    def test_candidates_match_enumeration(self):
        for name in FIXTURES:
            program = fixture_setup(name)[0]
            for node in program.nodes:
                got = {(c.u_axes, c.v_axes, c.w_axes) for c in node_candidates(node)}
                assert got == set(node_options(node))

    def test_matmul_candidates(self):
        node = fixture_setup("matmul")[0].nodes[0]
        cands = node_candidates(node)
        # j shared: promoted on both or neither; i and k free
        assert len(cands) == 8
        assert {c.w_axes for c in cands} == {(), (0,), (1,), (0, 1)}


class TestCostTable:
    def test_matmul_entries(self, params):
        program, _, stats = fixture_setup("matmul")
        model = CostModel(program, stats, params)
        (tree,) = split_into_trees(program)
        table, chosen = optimize_tree(model, tree)
        assert len(table) == 4
        node = program.nodes[0]
        for w, entry in table.for_vertex("W").items():
            local = [model.local(node, c) for c in node_candidates(node) if c.w_axes == w]
            assert entry.cost == min(b.c_join + b.c_agg for b in local)
        best = min(e.cost for e in table.for_vertex("W").values())
        assert chosen["W"].breakdown.total == best

    def test_chain_entry_includes_repartition(self):
        program, _, stats = fixture_setup("chain")
        model = CostModel(program, stats, RELATIONAL)
        (tree,) = split_into_trees(program)
        table, _ = optimize_tree(model, tree)
        for w, entry in table.for_vertex("U").items():
            t_in = entry.srcs[0]
            expect = table.cost("T", t_in) + model.repart("T", t_in, entry.choice.u_axes) \
                + entry.local.breakdown.c_join + entry.local.breakdown.c_agg
            assert close(entry.cost, expect, 1e-12)


class TestExactness:
    @pytest.mark.parametrize("name", FIXTURES)
    def test_fixture_matches_brute_force(self, name, params):
        program, _, stats = fixture_setup(name)
        dp = optimize_program(program, stats, params)
        assert close(dp.total, brute_force_cost(program, stats, params))

    def test_random_trees(self, params):
        rng = np.random.default_rng(11)
        for _ in range(25):
            program = random_tree_program(rng)
            stats = propagate_stats(program, source_stats(program, random_inputs(program, rng)))
            assert close(optimize_program(program, stats, params).total, brute_force_cost(program, stats, params))

    def test_diamond_at_least_brute_force(self, params):
        program = parse_program("tensor S[6,4]; tensor Q[4,5];"
                                "A[i,k] = sum[j] S[i,j] * Q[j,k]; B[i,k] = sum[] relu(A[i,k]);"
                                "C[i,k] = sum[] exp(A[i,k]); D[i] = sum[k] B[i,k] * C[i,k]")
        rng = np.random.default_rng(3)
        stats = propagate_stats(program, source_stats(program, random_inputs(program, rng, 0.4)))
        bf = brute_force_cost(program, stats, params)
        frozen_first = optimize_program(program, stats, params, max_boundary_combinations=0).total
        assert frozen_first >= bf * (1 - 1e-12)
        assert close(optimize_program(program, stats, params).total, bf)

    def test_greedy_never_wins(self, params):
        rng = np.random.default_rng(12)
        programs = [fixture_setup(n)[::2] for n in FIXTURES]
        for _ in range(25):
            p = random_tree_program(rng)
            programs.append((p, propagate_stats(p, source_stats(p, random_inputs(p, rng)))))
        for program, stats in programs:
            g = optimize_greedy(program, stats, params)
            d = optimize_program(program, stats, params)
            assert g.total >= d.total * (1 - 1e-12)
            assert close(evaluate_plan(program, g, stats, params).total, g.total, 1e-12)


class TestPlans:
    def test_total_is_sum_of_nodes(self, params):
        program, _, stats = fixture_setup("gcn")
        plan = optimize_program(program, stats, params)
        assert close(plan.total, math.fsum(n.breakdown.total for n in plan.nodes), 1e-15)
        validate_plan(program, plan)

    def test_matmul_relational_choice(self):
        program, _, stats = fixture_setup("matmul")
        plan = optimize_program(program, stats, RELATIONAL)
        # the row-by-column join beats the whole-matrix kernel here
        assert plan.entry("W").in_axes != ((), ())
        assert optimize_program(program, stats, CostParams()).entry("W").in_axes == ((), ())

    def test_deterministic(self, params):
        program, _, stats = fixture_setup("attention")
        a = optimize_program(program, stats, params).to_json(program)
        b = optimize_program(program, stats, params).to_json(program)
        assert a == b

    def test_json_round_trip(self, tmp_path, params):
        program, _, stats = fixture_setup("mlp")
        plan = optimize_program(program, stats, params)
        path = tmp_path / "plan.json"
        path.write_text(plan.to_json(program))
        back = Plan.load(path)
        assert back.decisions() == plan.decisions()
        assert close(back.total, plan.total, 1e-15)

    def test_report_mentions_every_node(self):
        program, _, stats = fixture_setup("gcn")
        text = optimize_program(program, stats, RELATIONAL).report(program)
        assert all(n.id in text for n in program.nodes)

    def test_respect_mode_keeps_annotations(self):
        program, _, stats = fixture_setup("chain")
        plan = optimize_program(program, stats, CostParams(), respect=True)
        validate_plan(program, plan, respect=True)
        t = plan.entry("T")
        assert t.out_axes == (0,)
        assert plan.entry("U").in_axes[0] == (1,)
        assert plan.entry("U").repartitions == [(0, (0,), (1,))]
        free = optimize_program(program, stats, CostParams())
        assert free.total <= plan.total

    def test_respect_mode_rejects_unannotated_plan(self):
        program, _, stats = fixture_setup("chain")
        plan = optimize_program(program, stats, CostParams())
        with pytest.raises(PlanValidationError):
            validate_plan(program, plan, respect=True)

    def test_memory_limit_infeasible(self):
        program, _, stats = fixture_setup("matmul")
        with pytest.raises(InfeasiblePlan):
            optimize_program(program, stats, replace(CostParams(), memory_limit_bytes=10))
        with pytest.raises(InfeasiblePlan):
            optimize_greedy(program, stats, replace(CostParams(), memory_limit_bytes=10))

    def test_memory_limit_forces_blocking(self):
        program, _, stats = fixture_setup("quantum")
        plan = optimize_program(program, stats, replace(CostParams(), memory_limit_bytes=600))
        # a whole 8x8 gate plus both vectors is 640 bytes
        assert all(n.in_axes[0] != () for n in plan.nodes)

    @pytest.mark.parametrize("corrupt", [
        lambda d: d["nodes"].pop(),
        lambda d: d["nodes"][0].update(out_axes=[5]),
        lambda d: d["nodes"][0].update(in_axes=[[1], [0]], out_axes=[0, 1]),
        lambda d: d["source_layouts"].update(Q=[]),
    ])
    def test_validate_rejects(self, corrupt):
        program, _, stats = fixture_setup("matmul")
        d = json.loads(optimize_program(program, stats, RELATIONAL).to_json())
        corrupt(d)
        with pytest.raises(PlanValidationError):
            validate_plan(program, Plan.from_dict(d))

    def test_malformed_file(self):
        with pytest.raises(PlanValidationError):
            Plan.from_dict({"nodes": [{"node": "W"}]})


class TestTopK:
    def test_gcn_top3(self, params):
        program, _, stats = fixture_setup("gcn")
        plans = top_k_plans(program, stats, params, 3)
        assert len(plans) == 3
        assert len({p.decisions() for p in plans}) == 3
        totals = [p.total for p in plans]
        assert all(a <= b * (1 + 1e-12) for a, b in zip(totals, totals[1:]))
        for p in plans:
            validate_plan(program, p)
            assert close(evaluate_plan(program, p, stats, params).total, p.total, 1e-12)

    def test_first_is_optimum(self, params):
        for name in FIXTURES:
            program, _, stats = fixture_setup(name)
            (best,) = top_k_plans(program, stats, params, 1)
            assert best.decisions() == optimize_program(program, stats, params).decisions()

    @pytest.mark.parametrize("k", [0, 11])
    def test_k_range(self, k):
        program, _, stats = fixture_setup("matmul")
        with pytest.raises(ValueError):
            top_k_plans(program, stats, CostParams(), k)


class TestPerturbation:
    def test_parse(self):
        assert Perturbation.parse("gamma:2,0.5") == Perturbation("gamma", alpha=2.0, theta=0.5)
        assert Perturbation.parse("const:c_xfer,10") == Perturbation("const", constant="c_xfer", factor=10.0)
        for bad in ("gamma:2,2", "const:nope,2", "const:c_xfer,0", "other:1,1", "gamma:1"):
            with pytest.raises(ValueError):
                Perturbation.parse(bad)

    def test_gamma_regret(self, params):
        program, _, stats = fixture_setup("gcn")
        for seed in range(5):
            r = perturb_costs(program, stats, params, Perturbation("gamma"), seed=seed)
            validate_plan(program, r.plan)
            assert r.regret >= -1e-12 * r.baseline.total
            again = perturb_costs(program, stats, params, Perturbation("gamma"), seed=seed)
            assert again.plan.decisions() == r.plan.decisions()

    def test_const_scaling(self, params):
        program, _, stats = fixture_setup("attention")
        r = perturb_costs(program, stats, params, Perturbation("const", constant="c_xfer", factor=10.0))
        validate_plan(program, r.plan)
        assert r.regret >= -1e-12 * r.baseline.total

    def test_unit_factor_is_identity(self, params):
        program, _, stats = fixture_setup("gcn")
        r = perturb_costs(program, stats, params, Perturbation("const", constant="c_fixed", factor=1.0))
        assert r.plan.decisions() == r.baseline.decisions() and r.regret == 0

    def test_uniform_scaling_keeps_decisions(self):
        for name in FIXTURES:
            program, _, stats = fixture_setup(name)
            for params in PARAM_SETS.values():
                a = optimize_program(program, stats, params)
                b = optimize_program(program, stats, params.scaled(7.3))
                assert a.decisions() == b.decisions()
                assert close(b.total, 7.3 * a.total, 1e-12)
