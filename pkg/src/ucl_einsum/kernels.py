"""Dense block kernels over demoted labels.

The compiled loop nest from ``_ckernels`` is used when it was built; otherwise
a numpy implementation is selected.  Setting ``UCL_EINSUM_PURE_PYTHON=1``
forces the numpy path.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _pykernels
from .ir import OpSpec

COMBINE_CODES = {"multiply": 0, "add": 1, "subtract": 2, "divide": 3, None: 4}
UNARY_CODES = {"identity": 0, "relu": 1, "exp": 2, "scale": 3, "square": 4}
AGGREGATE_CODES = {"sum": 0, "max": 1}

_compiled = None
if os.environ.get("UCL_EINSUM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


@dataclass(frozen=True)
class KernelPlan:
    """Loop nest of one block kernel.

    ``loop_labels`` are the distinct demoted labels of both inputs.  Each
    ``*_axes`` entry maps a block dimension to its loop position.
    """

    loop_labels: tuple[str, ...]
    extents: tuple[int, ...]
    u_axes: tuple[int, ...]
    v_axes: tuple[int, ...]
    out_axes: tuple[int, ...]
    op: OpSpec
    binary: bool

    @classmethod
    def build(cls, u_labels: Sequence[str], v_labels: Sequence[str] | None, out_labels: Sequence[str],
              bounds: dict[str, int], op: OpSpec) -> KernelPlan:
        """Kernel for blocks labelled ``u_labels`` (and ``v_labels``) producing ``out_labels``."""
        loop = list(dict.fromkeys([*u_labels, *(v_labels or ())]))
        missing = [l for l in out_labels if l not in loop]
        if missing:
            raise ValueError(f"output block labels {missing} are not demoted in any input")
        pos = {l: i for i, l in enumerate(loop)}
        return cls(
            loop_labels=tuple(loop),
            extents=tuple(bounds[l] for l in loop),
            u_axes=tuple(pos[l] for l in u_labels),
            v_axes=tuple(pos[l] for l in (v_labels or ())),
            out_axes=tuple(pos[l] for l in out_labels),
            op=op,
            binary=v_labels is not None,
        )

    @property
    def out_shape(self) -> tuple[int, ...]:
        return tuple(self.extents[a] for a in self.out_axes)

    @property
    def nest_size(self) -> int:
        return math.prod(self.extents)

    @property
    def u_shape(self) -> tuple[int, ...]:
        return tuple(self.extents[a] for a in self.u_axes)

    @property
    def v_shape(self) -> tuple[int, ...]:
        return tuple(self.extents[a] for a in self.v_axes)


def _strides(shape: tuple[int, ...], axes: tuple[int, ...], nl: int) -> np.ndarray:
    """Element strides per loop position for a C-contiguous block."""
    out = np.zeros(nl, dtype=np.int64)
    step = 1
    for ext, a in zip(reversed(shape), reversed(axes)):
        out[a] += step
        step *= ext
    return out


def run_kernel(kp: KernelPlan, u: np.ndarray, v: np.ndarray | None = None,
               backend: str | None = None) -> tuple[np.ndarray, int]:
    """Evaluate the kernel on one block pair; returns (block, loop iterations)."""
    backend = backend or BACKEND
    u = np.asarray(u, dtype=np.float64)
    if u.shape != kp.u_shape:
        raise ValueError(f"left block has shape {u.shape}, kernel expects {kp.u_shape}")
    if kp.binary:
        if v is None:
            raise ValueError("binary kernel called without a right block")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != kp.v_shape:
            raise ValueError(f"right block has shape {v.shape}, kernel expects {kp.v_shape}")
    op = kp.op
    combine = COMBINE_CODES[op.combine if kp.binary else None]
    aggregate = AGGREGATE_CODES[op.aggregate]
    unary = UNARY_CODES[op.unary]
    if backend == "python" or _compiled is None:
        return _pykernels.contract(u, v, kp.u_axes, kp.v_axes, kp.out_axes, kp.extents,
                                   combine, aggregate, unary, float(op.scale))
    nl = len(kp.extents)
    out = np.full(kp.out_shape, op.zero, dtype=np.float64)
    uf = np.ascontiguousarray(u).reshape(-1)
    su = _strides(u.shape, kp.u_axes, nl)
    if kp.binary:
        vf = np.ascontiguousarray(v).reshape(-1)
        sv = _strides(v.shape, kp.v_axes, nl)
    else:
        vf = np.ones(1)
        sv = np.zeros(nl, dtype=np.int64)
    so = _strides(kp.out_shape, kp.out_axes, nl)
    n = _compiled.contract(uf, vf, out.reshape(-1), np.asarray(kp.extents, dtype=np.int64),
                           su, sv, so, combine, aggregate, unary, float(op.scale))
    return out, int(n)
