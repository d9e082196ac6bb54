"""Synthetic task matrices and transformer-shaped checkpoint sets.

Task subspaces are built from a shared block ``S`` and private blocks ``P_i``
taken from one orthonormal basis: ``U_i = sqrt(c) S + sqrt(1 - c) P_i``.
All principal cosines between two tasks' subspaces then equal ``c`` (the
``overlap`` argument) whenever the ambient dimension leaves room for
disjoint private blocks.
"""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

from stfmerge.tensor_store import MemoryStore, TensorRecord, write_checkpoint


def random_orthonormal(rng: np.random.Generator, dim: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, k)))
    return q * np.sign(np.diag(r))


def overlapping_bases(rng: np.random.Generator, dim: int, ranks: Sequence[int], overlap: float) -> list[np.ndarray]:
    """One ``dim x r_i`` orthonormal basis per task with controlled overlap."""
    if not 0.0 <= overlap <= 1.0:
        raise ValueError(f"overlap must lie in [0, 1], got {overlap}")
    rmax = max(ranks)
    if rmax > dim:
        raise ValueError(f"rank {rmax} exceeds dimension {dim}")
    n_shared = rmax if overlap > 0 else 0
    width = min(dim, n_shared + sum(ranks))
    basis = random_orthonormal(rng, dim, width)
    shared = basis[:, :rmax] if n_shared else np.zeros((dim, rmax))
    col = n_shared
    out = []
    for r in ranks:
        if col + r <= width:
            # disjoint private block: the mix is already orthonormal
            private = basis[:, col:col + r]
            col += r
            out.append(np.sqrt(overlap) * shared[:, :r] + np.sqrt(1.0 - overlap) * private)
            continue
        g = rng.standard_normal((dim, r))
        if n_shared and dim - rmax >= r:
            g -= shared @ (shared.T @ g)
        private = np.linalg.qr(g)[0]
        mixed = np.sqrt(overlap) * shared[:, :r] + np.sqrt(1.0 - overlap) * private
        out.append(np.linalg.qr(mixed)[0])
    return out


def spectrum(rng: np.random.Generator, rank: int, kind: str = "uniform", decay: float = 0.85, scale: float = 1.0):
    if kind == "uniform":
        s = np.sort(rng.uniform(0.5, 2.0, size=rank))[::-1]
    elif kind == "geometric":
        s = decay ** np.arange(rank) * rng.uniform(0.9, 1.1, size=rank)
        s = np.sort(s)[::-1]
    else:
        raise ValueError(f"unknown spectrum kind {kind!r}")
    return scale * s


def task_matrices(
    rng: np.random.Generator,
    m: int,
    n: int,
    ranks: Sequence[int],
    overlap: float = 0.5,
    kind: str = "uniform",
    decay: float = 0.85,
    scale: float = 1.0,
) -> list[np.ndarray]:
    """Low-rank task matrices whose row and column spaces overlap by ``overlap``."""
    lefts = overlapping_bases(rng, m, ranks, overlap)
    rights = overlapping_bases(rng, n, ranks, overlap)
    mats = []
    for u, v, r in zip(lefts, rights, ranks):
        s = spectrum(rng, r, kind, decay, scale)
        mats.append((u * s) @ v.T)
    return mats


def transformer_names(n_layers: int, hidden: int, vocab: int = 128, ctx: int = 16) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embed_tokens.weight": (vocab, hidden)}
    for i in range(n_layers):
        p = f"layers.{i}"
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes[f"{p}.attn.{proj}.weight"] = (hidden, hidden)
            shapes[f"{p}.attn.{proj}.bias"] = (hidden,)
        shapes[f"{p}.attn.bias"] = (ctx, ctx)  # causal-mask buffer
        shapes[f"{p}.mlp.fc1.weight"] = (4 * hidden, hidden)
        shapes[f"{p}.mlp.fc1.bias"] = (4 * hidden,)
        shapes[f"{p}.mlp.fc2.weight"] = (hidden, 4 * hidden)
        shapes[f"{p}.mlp.fc2.bias"] = (hidden,)
        for ln in ("ln_1", "ln_2"):
            shapes[f"{p}.{ln}.weight"] = (hidden,)
            shapes[f"{p}.{ln}.bias"] = (hidden,)
    shapes["final_norm.weight"] = (hidden,)
    shapes["final_norm.bias"] = (hidden,)
    return shapes


def transformer_checkpoints(
    n_tasks: int = 2,
    n_layers: int = 12,
    hidden: int = 64,
    seed: int = 0,
    delta_rank: int = 4,
    overlap: float = 0.5,
    noise: float = 1e-3,
    dtype: str = "F32",
) -> tuple[MemoryStore, list[MemoryStore]]:
    """A pre-trained store and ``n_tasks`` fine-tuned stores sharing its names."""
    rng = np.random.default_rng(seed)
    shapes = transformer_names(n_layers, hidden)
    base: dict[str, np.ndarray] = {}
    tasks: list[dict[str, np.ndarray]] = [{} for _ in range(n_tasks)]
    for name, shape in shapes.items():
        if name.endswith(".attn.bias"):
            values = np.tril(np.ones(shape, dtype=np.float32))
            base[name] = values
            for t in tasks:
                t[name] = values
            continue
        if "norm" in name or ".ln_" in name:
            values = (np.ones(shape) if name.endswith("weight") else np.zeros(shape)).astype(np.float32)
        else:
            values = (rng.standard_normal(shape) * 0.02).astype(np.float32)
        base[name] = values
        if len(shape) == 2:
            deltas = task_matrices(rng, shape[0], shape[1], [delta_rank] * n_tasks, overlap, scale=0.01)
        for i, t in enumerate(tasks):
            if len(shape) == 2:
                d = deltas[i] + noise * 0.1 * rng.standard_normal(shape)
            else:
                d = noise * rng.standard_normal(shape)
            t[name] = (values + d).astype(np.float32)
    return (
        MemoryStore.from_arrays(base, dtype),
        [MemoryStore.from_arrays(t, dtype) for t in tasks],
    )


def write_transformer_checkpoints(directory, n_tasks: int = 2, **kwargs) -> tuple[str, list[str]]:
    """Write a synthetic set to ``directory``; returns ``(base_path, task_paths)``."""
    os.makedirs(directory, exist_ok=True)
    base, tasks = transformer_checkpoints(n_tasks=n_tasks, **kwargs)
    base_path = os.path.join(directory, "base.safetensors")
    write_checkpoint(base_path, base.records())
    paths = []
    for i, store in enumerate(tasks):
        path = os.path.join(directory, f"task{i}.safetensors")
        write_checkpoint(path, store.records())
        paths.append(path)
    return base_path, paths


def stores_from_layers(
    layers: dict[str, tuple[np.ndarray, Sequence[np.ndarray]]],
) -> tuple[MemoryStore, list[MemoryStore]]:
    """Build stores from ``{name: (base_array, [task_array, ...])}``."""
    n_tasks = len(next(iter(layers.values()))[1])
    base = MemoryStore(TensorRecord.from_array(k, v[0]) for k, v in layers.items())
    tasks = [MemoryStore(TensorRecord.from_array(k, v[1][i]) for k, v in layers.items()) for i in range(n_tasks)]
    return base, tasks
