from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ucl_einsum.cost import CostParams  # noqa: E402

# at toy sizes the default per-tuple cost makes fully demoted plans win
# everywhere; this set favours relational work so plans are nontrivial
RELATIONAL = CostParams(c_fixed=1e-9, c_kernel_flop=1e-8)
PARAM_SETS = {"default": CostParams(), "relational": RELATIONAL}

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(params=list(PARAM_SETS), ids=list(PARAM_SETS))
def params(request) -> CostParams:
    return PARAM_SETS[request.param]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
