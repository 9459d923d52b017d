"""Shared setup for fixture programs."""

from __future__ import annotations

from functools import lru_cache

from ucl_einsum.fixtures import fixture_inputs, load_fixture
from ucl_einsum.stats import propagate_stats, source_stats


@lru_cache(maxsize=None)
def fixture_setup(name: str):
    """(program, inputs, stats) for a bundled fixture at seed 0."""
    program = load_fixture(name)
    inputs = fixture_inputs(name)
    return program, inputs, propagate_stats(program, source_stats(program, inputs))
