"""Bundled toy-scale programs and generators for their input tensors."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .ir import EinsumProgram, TensorDecl, parse_program
from .stats import SparseTensor, write_coo

FIXTURES = ("matmul", "chain", "mlp", "gcn", "attention", "quantum")

MATMUL_U = np.array([
    [1.4, 2.2, 0.0, 2.1],
    [0.0, 0.0, 0.0, 0.0],
    [1.4, 0.0, 1.1, 0.0],
    [0.0, 0.0, 0.0, 0.0],
])
MATMUL_V = np.array([
    [3.2, 0.0, 1.3, 0.0],
    [0.0, 0.0, 0.6, 0.0],
    [0.0, 0.0, 1.2, 0.0],
    [1.2, 0.0, 2.1, 0.0],
])


def fixture_text(name: str) -> str:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; available: {', '.join(FIXTURES)}")
    return resources.files("ucl_einsum").joinpath("fixtures", f"{name}.ein").read_text()


def load_fixture(name: str) -> EinsumProgram:
    return parse_program(fixture_text(name))


def random_sparse(decl: TensorDecl, density: float, rng: np.random.Generator,
                  low: float = -1.0, high: float = 1.0) -> SparseTensor:
    """Each entry nonzero with probability ``density``, values uniform in [low, high)."""
    mask = rng.random(decl.bound) < density
    vals = rng.uniform(low, high, decl.bound)
    vals[vals == 0.0] = high / 2
    return SparseTensor.from_dense(decl.name, np.where(mask, vals, 0.0))


def _adjacency(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    a = (rng.random((n, n)) < p).astype(float)
    a = np.triu(a, 1)
    return a + a.T


def _gates() -> dict[str, np.ndarray]:
    h = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)
    cnot = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=float)
    return {"h": h, "i": np.eye(2), "x": np.array([[0.0, 1.0], [1.0, 0.0]]), "cnot": cnot}


def fixture_inputs(name: str, seed: int = 0) -> dict[str, SparseTensor]:
    """Input tensors for a fixture; deterministic in ``seed``."""
    p = load_fixture(name)
    rng = np.random.default_rng(seed)
    dense: dict[str, np.ndarray] = {}
    if name == "matmul":
        dense = {"U": MATMUL_U, "V": MATMUL_V}
    elif name == "chain":
        return {t.name: random_sparse(t, 0.3, rng) for t in p.tensors}
    elif name == "mlp":
        dense = {t.name: rng.uniform(-1.0, 1.0, t.bound) for t in p.tensors}
    elif name == "gcn":
        n = p.decl("Ah").bound[0]
        ah = _adjacency(n, 0.3, rng) + np.eye(n)
        dh = np.diag(1.0 / np.sqrt(ah.sum(axis=1)))
        dense = {"Dh": dh, "Ah": ah,
                 "H": rng.uniform(-1.0, 1.0, p.decl("H").bound),
                 "Wt": rng.uniform(-1.0, 1.0, p.decl("Wt").bound)}
    elif name == "attention":
        n = p.decl("A").bound[0]
        dense = {"X": rng.uniform(-1.0, 1.0, p.decl("X").bound),
                 "WQ": rng.uniform(-1.0, 1.0, p.decl("WQ").bound),
                 "WK": rng.uniform(-1.0, 1.0, p.decl("WK").bound),
                 "A": _adjacency(n, 0.3, rng) + np.eye(n)}
    elif name == "quantum":
        g = _gates()
        psi = np.zeros(8)
        psi[0] = 1.0
        dense = {"psi": psi,
                 "U1": np.kron(np.kron(g["h"], g["i"]), g["i"]),
                 "U2": np.kron(g["cnot"], g["i"]),
                 "U3": np.kron(g["i"], g["cnot"])}
    else:
        raise KeyError(name)
    return {k: SparseTensor.from_dense(k, v) for k, v in dense.items()}


def write_fixture(name: str, out_dir: str | Path, seed: int = 0) -> list[Path]:
    """Write ``<name>.ein`` and one COO file per source into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{name}.ein"]
    paths[0].write_text(fixture_text(name))
    for tname, t in fixture_inputs(name, seed).items():
        path = out / f"{tname}.coo"
        write_coo(t, path)
        paths.append(path)
    return paths
