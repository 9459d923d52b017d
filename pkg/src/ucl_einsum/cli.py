"""Command-line front end: stats, optimize, compile, run, verify, calibrate, fixture."""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fixtures
from .codegen import emit_program
from .cost import COST_CONSTANTS, CostConfigError, CostParams, MemoryLimitExceeded, calibrate, load_cost_config
from .executor import ExecutionError, OpCounter, dense_eval, densify, dump_blocks, dump_coo, exec_plan
from .ir import EinsumError, EinsumProgram, ParseError, parse_program
from .optimizer import (InfeasiblePlan, Perturbation, Plan, PlanValidationError, evaluate_plan, optimize_greedy,
                        perturb_costs, top_k_plans, validate_plan)
from .stats import SparseTensor, StatsError, propagate_stats, read_coo, source_stats

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4
EXIT_MISMATCH = 5
EXIT_PLAN = 6

VERIFY_RTOL = 1e-9


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Everything a command needs, resolved from the argument namespace."""

    program: Path | None = None
    data_dir: Path | None = None
    tensors: dict[str, Path] = field(default_factory=dict)
    cost_config: Path | None = None
    mode: str = "dp"
    top_k: int = 1
    seed: int | None = None
    perturb: str | None = None
    mem_limit: float | None = None
    respect: bool = False
    plan: Path | None = None
    out: Path | None = None
    overrides: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.top_k < 1 or self.top_k > 10:
            raise CliError("--top-k must be between 1 and 10", EXIT_PARSE)
        if self.perturb is not None and self.seed is None:
            raise CliError("--seed is required with --perturb", EXIT_PARSE)
        if self.mode not in ("dp", "greedy"):
            raise CliError(f"unknown mode {self.mode!r}", EXIT_PARSE)

    @classmethod
    def from_args(cls, a: argparse.Namespace) -> RunConfig:
        tensors = {}
        for spec in getattr(a, "tensor", None) or []:
            name, sep, path = spec.partition("=")
            if not sep:
                raise CliError(f"--tensor expects NAME=PATH, got {spec!r}", EXIT_PARSE)
            tensors[name] = Path(path)
        overrides = {c: getattr(a, c) for c in COST_CONSTANTS if getattr(a, c, None) is not None}
        return cls(program=Path(a.program) if getattr(a, "program", None) else None,
                   data_dir=Path(a.data) if getattr(a, "data", None) else None,
                   tensors=tensors,
                   cost_config=Path(a.cost_config) if getattr(a, "cost_config", None) else None,
                   mode=getattr(a, "mode", "dp"),
                   top_k=getattr(a, "top_k", 1),
                   seed=getattr(a, "seed", None),
                   perturb=getattr(a, "perturb", None),
                   mem_limit=getattr(a, "mem_limit", None),
                   respect=getattr(a, "respect_annotations", False),
                   plan=Path(a.plan) if getattr(a, "plan", None) else None,
                   out=Path(a.out) if getattr(a, "out", None) else None,
                   overrides=overrides)


# =============================================================================
# Loading
# =============================================================================


def load_program(cfg: RunConfig) -> EinsumProgram:
    try:
        text = cfg.program.read_text()
    except OSError as e:
        raise CliError(f"cannot read program: {e}", EXIT_PARSE) from None
    return parse_program(text)


def load_inputs(cfg: RunConfig, program: EinsumProgram) -> dict[str, SparseTensor]:
    """One COO file per source: ``--tensor`` wins over ``<data>/<NAME>.coo``."""
    out = {}
    for name in program.source_names:
        path = cfg.tensors.get(name)
        if path is None and cfg.data_dir is not None:
            path = cfg.data_dir / f"{name}.coo"
        if path is None:
            raise CliError(f"no data for source tensor {name!r} (use --data or --tensor)", EXIT_DATA)
        try:
            t = read_coo(path)
        except OSError as e:
            raise CliError(f"cannot read {path}: {e}", EXIT_DATA) from None
        if t.decl.bound != program.decl(name).bound:
            raise CliError(f"{path}: bound {t.decl.bound} differs from declared {program.decl(name).bound}",
                           EXIT_DATA)
        out[name] = SparseTensor(program.decl(name), t.coords, t.values)
    return out


def load_params(cfg: RunConfig) -> CostParams:
    params = load_cost_config(cfg.cost_config) if cfg.cost_config else CostParams()
    params = replace(params, **cfg.overrides)
    if cfg.mem_limit is not None:
        params = replace(params, memory_limit_bytes=cfg.mem_limit)
    return params


def _stats(program, inputs):
    return propagate_stats(program, source_stats(program, inputs))


def plan_for(cfg: RunConfig, program: EinsumProgram, inputs) -> Plan:
    """The plan from ``--plan`` (validated and re-costed) or the optimizer's best."""
    params = load_params(cfg)
    stats = _stats(program, inputs)
    if cfg.plan is not None:
        plan = Plan.load(cfg.plan)
        validate_plan(program, plan, cfg.respect)
        return evaluate_plan(program, plan, stats, params)
    if cfg.mode == "greedy":
        return optimize_greedy(program, stats, params, respect=cfg.respect)
    return top_k_plans(program, stats, params, 1, respect=cfg.respect)[0]


# =============================================================================
# Commands
# =============================================================================


def cmd_stats(cfg: RunConfig) -> int:
    program = load_program(cfg)
    inputs = load_inputs(cfg, program)
    stats = _stats(program, inputs)
    for name in [*program.source_names, *(n.id for n in program.nodes)]:
        s = stats[name]
        kind = "source" if program.is_source(name) else "estimate"
        per = " ".join(f"V({l})={s.V(l):.6g}" for l in dict.fromkeys(s.labels))
        print(f"{name} [{kind}] nnz({name})={s.nnz:.6g} {per}")
    return EXIT_OK


def cmd_optimize(cfg: RunConfig) -> int:
    program = load_program(cfg)
    inputs = load_inputs(cfg, program)
    stats = _stats(program, inputs)
    params = load_params(cfg)
    if cfg.perturb is not None:
        try:
            pert = Perturbation.parse(cfg.perturb)
        except ValueError as e:
            raise CliError(str(e), EXIT_PARSE) from None
        res = perturb_costs(program, stats, params, pert, seed=cfg.seed, mode=cfg.mode, respect=cfg.respect)
        print(f"perturbation {cfg.perturb} seed {cfg.seed}")
        print(res.plan.report(program))
        print(f"unperturbed cost of chosen plan {res.cost_unperturbed:.6g}")
        print(f"unperturbed optimum {res.baseline.total:.6g}")
        print(f"regret {res.regret:.6g}")
        plans = [res.plan]
    elif cfg.mode == "greedy":
        plans = [optimize_greedy(program, stats, params, respect=cfg.respect)]
        print(plans[0].report(program))
    else:
        plans = top_k_plans(program, stats, params, cfg.top_k, respect=cfg.respect)
        for rank, plan in enumerate(plans, start=1):
            print(f"# rank {rank}")
            print(plan.report(program))
    if cfg.out is not None:
        cfg.out.mkdir(parents=True, exist_ok=True)
        for rank, plan in enumerate(plans, start=1):
            path = cfg.out / ("plan.json" if rank == 1 else f"plan.{rank}.json")
            path.write_text(plan.to_json(program) + "\n")
            print(f"wrote {path}")
    return EXIT_OK


def cmd_compile(cfg: RunConfig) -> int:
    program = load_program(cfg)
    inputs = load_inputs(cfg, program)
    plan = plan_for(cfg, program, inputs)
    script = emit_program(program, plan)
    if cfg.out is None:
        print(script.sql, end="")
        return EXIT_OK
    for p in script.write(cfg.out):
        print(p)
    return EXIT_OK


def cmd_run(cfg: RunConfig) -> int:
    program = load_program(cfg)
    inputs = load_inputs(cfg, program)
    plan = plan_for(cfg, program, inputs)
    counter = OpCounter()
    rels = exec_plan(program, plan, inputs, counter)
    if cfg.out is not None:
        cfg.out.mkdir(parents=True, exist_ok=True)
        for n in program.nodes:
            dump_coo(rels[n.id], cfg.out / f"{n.id}.coo")
            dump_blocks(rels[n.id], cfg.out / f"{n.id}.blocks")
        (cfg.out / "counters.json").write_text(json.dumps(counter.to_dict(), indent=2) + "\n")
    for name in program.sinks:
        r = rels[name]
        print(f"{name}: {len(r)} tuples, {np.count_nonzero(densify(r))} nonzeros")
    print(counter.report())
    return EXIT_OK


def compare(expected: np.ndarray, actual: np.ndarray, rtol: float = VERIFY_RTOL) -> tuple[float, list]:
    """Largest relative deviation and the entries beyond ``rtol``."""
    bad = []
    worst = 0.0
    for idx in np.ndindex(*expected.shape):
        e, a = float(expected[idx]), float(actual[idx])
        if e == a or (math.isnan(e) and math.isnan(a)):
            continue
        dev = abs(e - a) / max(abs(e), abs(a)) if math.isfinite(e) and math.isfinite(a) else math.inf
        worst = max(worst, dev)
        if dev > rtol:
            bad.append((idx, e, a))
    return worst, bad


def cmd_verify(cfg: RunConfig) -> int:
    program = load_program(cfg)
    inputs = load_inputs(cfg, program)
    plan = plan_for(cfg, program, inputs)
    rels = exec_plan(program, plan, inputs)
    dense = dense_eval(program, {k: v.to_dense() for k, v in inputs.items()})
    worst, failures = 0.0, []
    for n in program.nodes:
        w, bad = compare(dense[n.id], densify(rels[n.id]))
        worst = max(worst, w)
        failures.extend((n.id, *b) for b in bad)
    print(f"max relative deviation {worst:.3g}")
    if failures:
        for name, idx, e, a in failures[:50]:
            print(f"  {name}{list(idx)}: expected {e!r} got {a!r}")
        print(f"FAIL: {len(failures)} entries differ beyond {VERIFY_RTOL:g}")
        return EXIT_MISMATCH
    print("PASS")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig) -> int:
    for k, v in calibrate().items():
        print(f"{k} = {v:.4g}")
    return EXIT_OK


def cmd_fixture(args: argparse.Namespace) -> int:
    for p in fixtures.write_fixture(args.name, args.out, args.seed or 0):
        print(p)
    return EXIT_OK


# =============================================================================
# Argument parsing
# =============================================================================


def _common(p: argparse.ArgumentParser, plan: bool = True) -> None:
    p.add_argument("program", help="EinSum program file")
    p.add_argument("--data", metavar="DIR", help="directory with one <NAME>.coo file per source tensor")
    p.add_argument("--tensor", action="append", metavar="NAME=PATH", help="COO file for one source tensor")
    p.add_argument("--cost-config", metavar="PATH", help="key = value file of cost parameters")
    p.add_argument("--mem-limit", type=float, metavar="BYTES", help="per-tuple memory limit")
    p.add_argument("--respect-annotations", action="store_true", help="treat label case as a fixed decision")
    p.add_argument("--mode", choices=("dp", "greedy"), default="dp")
    p.add_argument("--out", metavar="DIR")
    for c in COST_CONSTANTS:
        p.add_argument(f"--{c.replace('_', '-')}", dest=c, type=float, metavar="X", help=f"override {c}")
    if plan:
        p.add_argument("--plan", metavar="PATH", help="plan JSON from 'optimize --out'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ucl-einsum", description="Sparse EinSum to tensor-relational SQL.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("stats", help="print source statistics and propagated estimates")
    _common(p, plan=False)
    p = sub.add_parser("optimize", help="choose decompositions and print the plan report")
    _common(p, plan=False)
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--perturb", metavar="SPEC", help="gamma:ALPHA,THETA or const:NAME,FACTOR")
    for name in ("compile", "run", "verify"):
        _common(sub.add_parser(name, help=f"{name} a plan"))
    sub.add_parser("calibrate", help="suggest cost constants for this machine")
    p = sub.add_parser("fixture", help="write a bundled program and generated inputs")
    p.add_argument("name", choices=fixtures.FIXTURES)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {"stats": cmd_stats, "optimize": cmd_optimize, "compile": cmd_compile,
            "run": cmd_run, "verify": cmd_verify, "calibrate": cmd_calibrate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_PARSE
    try:
        if args.command == "fixture":
            return cmd_fixture(args)
        return COMMANDS[args.command](RunConfig.from_args(args))
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except PlanValidationError as e:
        print(f"invalid plan: {e}", file=sys.stderr)
        return EXIT_PLAN
    except EinsumError as e:
        print(f"invalid program: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (StatsError, CostConfigError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (InfeasiblePlan, MemoryLimitExceeded) as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ExecutionError as e:
        print(f"execution error: {e}", file=sys.stderr)
        return EXIT_PLAN


if __name__ == "__main__":
    sys.exit(main())
