"""Sparse EinSum programs compiled to tensor-relational plans and SQL."""

from .codegen import Script, emit_node_sql, emit_program, emit_repartition_sql, emit_schema
from .cost import CostBreakdown, CostParams, MemoryLimitExceeded, load_cost_config
from .executor import (OpCounter, TensorRelation, decompose_tensor, dense_eval, densify, exec_node, exec_plan,
                       exec_repartition, lookup)
from .ir import (Decomposition, EinsumNode, EinsumProgram, OpSpec, ParseError, TensorDecl, ValidationError,
                 parse_program, split_into_trees, topo_sort)
from .kernels import BACKEND
from .optimizer import (InfeasiblePlan, Plan, PlanValidationError, evaluate_plan, optimize_greedy,
                        optimize_program, optimize_tree, perturb_costs, top_k_plans, validate_plan)
from .stats import (SparseTensor, TensorStats, estimate_tuples, exact_stats, propagate_stats, read_coo,
                    source_stats, write_coo)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CostBreakdown", "CostParams", "Decomposition", "EinsumNode", "EinsumProgram",
    "InfeasiblePlan", "MemoryLimitExceeded", "OpCounter", "OpSpec", "ParseError", "Plan",
    "PlanValidationError", "Script", "SparseTensor", "TensorDecl", "TensorRelation", "TensorStats",
    "ValidationError", "decompose_tensor", "dense_eval", "densify", "emit_node_sql", "emit_program",
    "emit_repartition_sql", "emit_schema", "estimate_tuples", "evaluate_plan", "exact_stats", "exec_node",
    "exec_plan", "exec_repartition", "load_cost_config", "lookup", "optimize_greedy", "optimize_program",
    "optimize_tree", "parse_program", "perturb_costs", "propagate_stats", "read_coo", "source_stats",
    "split_into_trees", "top_k_plans", "topo_sort", "validate_plan", "write_coo",
]
