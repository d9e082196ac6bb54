"""Merging the task matrices of one layer by superposing their singular features.

Each task matrix is decomposed as ``M_i = sum_k s_ik u_ik v_ik^T``. The merged
matrix reuses those rank-one directions with new weights,
``M = sum_{i,k} a_ik u_ik v_ik^T``, and the weights are chosen so that for
every triplet the merged output on ``v_ik`` has the same component along
``u_ik`` as the task's own output::

    <s_ik u_ik, M v_ik - s_ik u_ik> = 0

Substituting ``M`` gives the symmetric system ``(U o V) a = s`` with
``U = Ubar^T Ubar`` and ``V = Vbar^T Vbar`` over all retained vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from stfmerge.errors import ShapeError
from stfmerge.linalg import (
    DEFAULT_RANK_TOL,
    DEFAULT_SOLVER_TOL,
    MergeSystem,
    SvdBundle,
    gram,
    hadamard,
    solve_sym,
    truncated_svd,
)


@dataclass
class TaskMatrix:
    task_id: str
    layer_name: str
    delta: np.ndarray


@dataclass
class MergedTaskMatrix:
    layer_name: str
    delta: np.ndarray
    system: MergeSystem
    bundles: list[SvdBundle] = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        return self.system.weights


def _check_bundles(bundles: Sequence[SvdBundle]) -> tuple[int, int]:
    if not bundles:
        raise ShapeError("need at least one task matrix")
    shapes = {tuple(b.source_shape) for b in bundles}
    if len(shapes) != 1:
        raise ShapeError(f"task matrices have different shapes: {sorted(shapes)}")
    return shapes.pop()


def assemble_system(bundles: Sequence[SvdBundle]) -> MergeSystem:
    """Build ``(U o V)`` and ``sigma``: tasks in input order, ``k`` ascending within a task."""
    index_map = [(b.task_id, k) for b in bundles for k in range(b.rank)]
    u_gram = gram([b.left for b in bundles])
    v_gram = gram([b.right for b in bundles])
    coeff = hadamard(u_gram, v_gram)
    rhs = np.concatenate([b.sigmas for b in bundles]) if bundles else np.zeros(0)
    return MergeSystem(coeff=coeff, rhs=rhs, index_map=index_map)


def recompose(bundles: Sequence[SvdBundle], weights: np.ndarray) -> np.ndarray:
    """``sum_{i,k} weights_ik u_ik v_ik^T`` for the concatenated triplets."""
    m, n = _check_bundles(bundles)
    r = sum(b.rank for b in bundles)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (r,):
        raise ShapeError(f"expected {r} weights, got shape {weights.shape}")
    if r == 0:
        return np.zeros((m, n))
    left = np.concatenate([b.left for b in bundles], axis=1)
    right = np.concatenate([b.right for b in bundles], axis=1)
    return (left * weights) @ right.T


def stf_merge_bundles(
    bundles: Sequence[SvdBundle], solver_tol: float = DEFAULT_SOLVER_TOL, layer_name: str = ""
) -> MergedTaskMatrix:
    """Merge already-decomposed task matrices."""
    m, n = _check_bundles(bundles)
    system = assemble_system(bundles)
    if system.size == 0:
        return MergedTaskMatrix(layer_name, np.zeros((m, n)), system, list(bundles))
    system.weights, system.residual_norm = solve_sym(system.coeff, system.rhs, solver_tol)
    delta = recompose(bundles, system.weights)
    return MergedTaskMatrix(layer_name, delta, system, list(bundles))


def stf_merge(
    matrices: Sequence[TaskMatrix],
    rank_tol: float = DEFAULT_RANK_TOL,
    solver_tol: float = DEFAULT_SOLVER_TOL,
) -> MergedTaskMatrix:
    """Merge the task matrices of a single layer."""
    if not matrices:
        raise ShapeError("need at least one task matrix")
    layers = {tm.layer_name for tm in matrices}
    if len(layers) != 1:
        raise ShapeError(f"task matrices come from different layers: {sorted(layers)}")
    shapes = {np.shape(tm.delta) for tm in matrices}
    if len(shapes) != 1:
        raise ShapeError(f"task matrices have different shapes: {sorted(shapes)}", tensor=layers.pop())
    bundles = [truncated_svd(tm.delta, rank_tol, task_id=tm.task_id) for tm in matrices]
    return stf_merge_bundles(bundles, solver_tol, layer_name=matrices[0].layer_name)


def feature_projections(delta: np.ndarray, bundle: SvdBundle) -> tuple[np.ndarray, np.ndarray]:
    """For each triplet: ``<s u, M v - s u>`` and ``||M v - s u||_2``."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != tuple(bundle.source_shape):
        raise ShapeError(f"merged matrix shape {delta.shape} != task matrix shape {tuple(bundle.source_shape)}")
    outputs = delta @ bundle.right
    gaps = outputs - bundle.left * bundle.sigmas
    inner = bundle.sigmas * np.einsum("ij,ij->j", bundle.left, gaps)
    return inner, np.linalg.norm(gaps, axis=0)


def superposition_residuals(merged, bundles: Sequence[SvdBundle]) -> list[tuple[str, int, float]]:
    """``(task_id, k, <s u, M v - s u>)`` for every retained triplet."""
    delta = merged.delta if isinstance(merged, MergedTaskMatrix) else merged
    out = []
    for b in bundles:
        inner, _ = feature_projections(delta, b)
        out.extend((b.task_id, k, float(v)) for k, v in enumerate(inner))
    return out


def oracle_check(matrices: Sequence[TaskMatrix], weights, rank_tol: float = DEFAULT_RANK_TOL) -> float:
    """Brute-force check that ``weights`` satisfy the superposition objective.

    Builds the merged matrix as an explicit sum of outer products and evaluates
    every objective term with a plain matrix-vector product; no Gram matrices
    are involved. Returns the largest absolute residual.
    """
    bundles = [truncated_svd(tm.delta, rank_tol, task_id=tm.task_id) for tm in matrices]
    triplets = [(b.sigmas[k], b.left[:, k], b.right[:, k]) for b in bundles for k in range(b.rank)]
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != len(triplets):
        raise ShapeError(f"expected {len(triplets)} weights, got {weights.shape[0]}")
    if not triplets:
        return 0.0
    merged = np.zeros(bundles[0].source_shape)
    for w, (_, u, v) in zip(weights, triplets):
        merged += w * np.outer(u, v)
    worst = 0.0
    for s, u, v in triplets:
        feature = s * u
        worst = max(worst, abs(float(np.dot(feature, merged.dot(v) - feature))))
    return worst
