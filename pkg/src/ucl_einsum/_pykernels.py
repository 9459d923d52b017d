"""Pure-Python (numpy) fallback for the block contraction kernel."""

from __future__ import annotations

import numpy as np

MULTIPLY, ADD, SUBTRACT, DIVIDE, LEFT_ONLY = range(5)
IDENTITY, RELU, EXP, SCALE, SQUARE = range(5)


def _expand(block: np.ndarray, axes: tuple[int, ...], nl: int) -> np.ndarray:
    """View ``block`` (axes = loop positions of its dims) as an nl-dim array."""
    uniq = sorted(set(axes))
    # einsum takes diagonals of repeated labels and sorts dims by loop position
    arr = np.einsum(block, list(axes), uniq) if block.ndim else block
    shape = [1] * nl
    for pos, ext in zip(uniq, arr.shape):
        shape[pos] = ext
    return arr.reshape(shape)


def contract(u: np.ndarray, v: np.ndarray | None, u_axes: tuple[int, ...], v_axes: tuple[int, ...],
             out_axes: tuple[int, ...], extents: tuple[int, ...], combine: int, aggregate: int,
             unary: int, scale: float) -> tuple[np.ndarray, int]:
    nl = len(extents)
    total = int(np.prod(extents, dtype=np.int64)) if nl else 1
    a = _expand(u, u_axes, nl)
    if combine == LEFT_ONLY or v is None:
        x = np.broadcast_to(a, extents).astype(np.float64, copy=True)
    else:
        b = _expand(v, v_axes, nl)
        with np.errstate(divide="ignore", invalid="ignore"):
            if combine == MULTIPLY:
                x = a * b
            elif combine == ADD:
                x = a + b
            elif combine == SUBTRACT:
                x = a - b
            else:
                x = a / b
        x = np.broadcast_to(x, extents)
    if unary == RELU:
        x = np.maximum(x, 0.0)
    elif unary == EXP:
        x = np.exp(x)
    elif unary == SCALE:
        x = scale * x
    elif unary == SQUARE:
        x = x * x
    red = tuple(i for i in range(nl) if i not in out_axes)
    if aggregate == 0:
        r = x.sum(axis=red) if red else np.array(x, dtype=np.float64)
    else:
        r = x.max(axis=red, initial=-np.inf) if red else np.array(x, dtype=np.float64)
    # remaining dims are in loop order; put them in output order
    kept = sorted(out_axes)
    perm = [kept.index(a) for a in out_axes]
    r = np.asarray(r, dtype=np.float64)
    return (r.transpose(perm) if perm else r).copy(), total
