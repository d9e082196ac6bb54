"""Full-checkpoint merging.

Linear matrices go through the singular-feature merge; normalization deltas
are averaged; bias and embedding deltas are summed and scaled. Every merged
delta is added back onto the pre-trained values.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from stfmerge import kernels
from stfmerge.errors import ConfigError, NumericError, ShapeError
from stfmerge.linalg import DEFAULT_RANK_TOL, DEFAULT_SOLVER_TOL, SvdBundle, truncated_svd
from stfmerge.stf import feature_projections, stf_merge_bundles
from stfmerge.tensor_store import CheckpointSet, MemoryStore, ParamRole, RoleRules, TensorRecord, classify

log = logging.getLogger(__name__)


class MergeMode(str, enum.Enum):
    TASK_MATRIX = "task-matrix"
    FINE_TUNED_MATRIX = "fine-tuned-matrix"


class Baseline(str, enum.Enum):
    NONE = "none"
    AVERAGE = "average"
    TASK_ARITHMETIC = "ta"


@dataclass
class MergeConfig:
    eta: float = 0.2
    gamma: float = 0.8
    rank_tol: float = DEFAULT_RANK_TOL
    solver_tol: float = DEFAULT_SOLVER_TOL
    mode: MergeMode = MergeMode.TASK_MATRIX
    role_rules: RoleRules = field(default_factory=RoleRules)
    baseline: Baseline = Baseline.NONE
    threads: int = 1
    narrow: bool = False

    def __post_init__(self):
        self.mode = MergeMode(self.mode)
        self.baseline = Baseline(self.baseline)
        self.validate()

    def validate(self):
        if not (0.0 < self.eta <= 1.0):
            raise ConfigError(f"eta must lie in (0, 1], got {self.eta}")
        if not (self.gamma >= 0.0 and math.isfinite(self.gamma)):
            raise ConfigError(f"gamma must be a finite non-negative number, got {self.gamma}")
        if not (0.0 <= self.rank_tol < 1.0):
            raise ConfigError(f"rank_tol must lie in [0, 1), got {self.rank_tol}")
        if not (0.0 <= self.solver_tol < 1.0):
            raise ConfigError(f"solver_tol must lie in [0, 1), got {self.solver_tol}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def echo(self) -> dict:
        return {
            "eta": self.eta,
            "gamma": self.gamma,
            "rank_tol": self.rank_tol,
            "solver_tol": self.solver_tol,
            "mode": self.mode.value,
            "baseline": self.baseline.value,
            "narrow": self.narrow,
            "role_rules": {
                "patterns": [[p, ParamRole(r).value] for p, r in self.role_rules.patterns],
                "default_2d": self.role_rules.default_2d.value,
                "default_other": self.role_rules.default_other.value,
            },
        }


# Hyperparameters reported for each fine-tuning regime.
PRESETS = {
    "full": {"eta": 0.2, "gamma": 0.8},
    "adapter": {"eta": 0.3, "gamma": 0.5},
    "large": {"eta": 1.0, "gamma": 0.8},
}


@dataclass
class LayerReport:
    name: str
    role: str
    rank: int | None = None
    solve_residual: float | None = None
    superposition_max_residual: float | None = None
    # residual of the unscaled merged task matrix against the task-matrix
    # features; differs from superposition_max_residual only in fine-tuned-matrix mode
    task_feature_max_residual: float | None = None


@dataclass
class MergeReport:
    layers: list[LayerReport]
    config: dict
    layers_merged: int = 0
    parameters_touched: int = 0
    wall_time_s: float = 0.0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "totals": {
                "layers_merged": self.layers_merged,
                "parameters_touched": self.parameters_touched,
                "wall_time_s": self.wall_time_s,
            },
            "layers": [asdict(layer) for layer in self.layers],
            "notes": self.notes,
        }


NOTES = [
    "non-linear task vectors are merged as deltas and added back onto the pre-trained values",
    "gamma scales linear, bias and embedding deltas; the normalization mean is unscaled",
]


def keep_count(size: int, eta: float) -> int:
    # round first so that e.g. 0.2 * 5 does not ceil to 2
    return min(size, math.ceil(round(eta * size, 9)))


def trim(delta, eta: float) -> np.ndarray:
    """Zero all but the ``ceil(eta * size)`` largest-magnitude entries.

    Ties at the cutoff keep the lower flat index. Kept values are not rescaled.
    """
    arr = np.asarray(delta)
    if not 0.0 < eta <= 1.0:
        raise ConfigError(f"eta must lie in (0, 1], got {eta}")
    if eta == 1.0:
        return arr.copy()
    mask = kernels.topk_magnitude_mask(arr.ravel(), keep_count(arr.size, eta))
    return np.where(mask.reshape(arr.shape), arr, np.zeros((), dtype=arr.dtype))


def _task_deltas(cset: CheckpointSet, name: str, base: np.ndarray, relative: bool = True):
    """Yield ``(task_id, delta)`` in float64, reading one task tensor at a time."""
    for tid, store in zip(cset.task_ids, cset.tasks):
        values = store.read(name)
        if values.shape != base.shape:
            raise ShapeError(f"shape {values.shape} in task {tid!r} != base shape {base.shape}", tensor=name)
        delta = values.astype(np.float64) - base if relative else values.astype(np.float64)
        if not np.all(np.isfinite(delta)):
            raise NumericError(f"non-finite values in task {tid!r}", tensor=name)
        yield tid, delta


def _decompose(name, tid, matrix, eta, rank_tol) -> SvdBundle:
    try:
        return truncated_svd(trim(matrix, eta), rank_tol, task_id=tid)
    except NumericError as exc:
        raise NumericError(str(exc), tensor=name) from exc


def merge_linear_layer(cset: CheckpointSet, name: str, base: np.ndarray, config: MergeConfig):
    """Merged weight (float64) and report entry for one linear matrix."""
    relative = config.mode is MergeMode.TASK_MATRIX
    bundles = [
        _decompose(name, tid, delta, config.eta, config.rank_tol)
        for tid, delta in _task_deltas(cset, name, base, relative=relative)
    ]
    merged = stf_merge_bundles(bundles, config.solver_tol, layer_name=name)
    residual = _max_abs_residual(merged.delta, bundles)
    if relative:
        out = base + config.gamma * merged.delta
        task_residual = residual
    else:
        out = config.gamma * merged.delta
        task_bundles = [
            _decompose(name, tid, delta, config.eta, config.rank_tol)
            for tid, delta in _task_deltas(cset, name, base, relative=True)
        ]
        task_residual = _max_abs_residual(merged.delta - base, task_bundles)
    entry = LayerReport(
        name=name,
        role=ParamRole.LINEAR.value,
        rank=merged.system.size,
        solve_residual=merged.system.residual_norm,
        superposition_max_residual=residual,
        task_feature_max_residual=task_residual,
    )
    return out, entry, merged


def _max_abs_residual(delta, bundles) -> float:
    worst = 0.0
    for b in bundles:
        if b.rank:
            inner, _ = feature_projections(delta, b)
            worst = max(worst, float(np.abs(inner).max()))
    return worst


def merge_vector(cset: CheckpointSet, name: str, base: np.ndarray, role: ParamRole, config: MergeConfig) -> np.ndarray:
    total = np.zeros_like(base)
    for _, delta in _task_deltas(cset, name, base):
        total += trim(delta, config.eta)
    if role is ParamRole.NORMALIZATION:
        return base + total / len(cset.tasks)
    return base + config.gamma * total


def _output_record(name: str, values: np.ndarray, base_dtype: str, config: MergeConfig) -> TensorRecord:
    dtype = base_dtype if config.narrow else "F32"
    return TensorRecord.from_array(name, values.astype(np.float32), dtype)


def _run_layers(names, work, threads: int):
    if threads <= 1:
        return [work(name) for name in names]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, names))


def merge_checkpoints(cset: CheckpointSet, config: MergeConfig) -> tuple[MemoryStore, MergeReport]:
    """Merge a checkpoint set; dispatches to :func:`merge_baseline` when configured."""
    if config.baseline is not Baseline.NONE:
        return merge_baseline(cset, config, with_report=True)
    start = time.perf_counter()
    roles = classify(cset.base, config.role_rules)
    cset.validate(roles)
    names = cset.base.names()

    def work(name):
        role = roles[name]
        if role is ParamRole.IGNORE:
            return cset.base.read_raw(name), LayerReport(name=name, role=role.value)
        base = cset.base.read(name).astype(np.float64)
        if role is ParamRole.LINEAR:
            values, entry, _ = merge_linear_layer(cset, name, base, config)
        else:
            values = merge_vector(cset, name, base, role, config)
            entry = LayerReport(name=name, role=role.value)
        log.debug("merged %s (%s)", name, role.value)
        return _output_record(name, values, cset.base.dtype(name), config), entry

    results = _run_layers(names, work, config.threads)
    out = MemoryStore(rec for rec, _ in results)
    entries = [entry for _, entry in results]
    report = MergeReport(
        layers=[e for e in entries if e.role != ParamRole.IGNORE.value],
        config=config.echo(),
        layers_merged=sum(e.role == ParamRole.LINEAR.value for e in entries),
        parameters_touched=sum(
            math.prod(cset.base.shape(e.name)) for e in entries if e.role != ParamRole.IGNORE.value
        ),
        wall_time_s=time.perf_counter() - start,
        notes=list(NOTES),
    )
    return out, report


def merge_baseline(cset: CheckpointSet, config: MergeConfig, with_report: bool = False):
    """Parameter averaging or task arithmetic over every non-ignored tensor."""
    if config.baseline is Baseline.NONE:
        raise ConfigError("merge_baseline needs baseline 'average' or 'ta'")
    start = time.perf_counter()
    roles = classify(cset.base, config.role_rules)
    cset.validate(roles)

    def work(name):
        role = roles[name]
        if role is ParamRole.IGNORE:
            return cset.base.read_raw(name)
        base = cset.base.read(name).astype(np.float64)
        total = np.zeros_like(base)
        for _, delta in _task_deltas(cset, name, base):
            total += delta
        if config.baseline is Baseline.AVERAGE:
            values = base + total / len(cset.tasks)
        else:
            values = base + config.gamma * total
        return _output_record(name, values, cset.base.dtype(name), config)

    names = cset.base.names()
    out = MemoryStore(_run_layers(names, work, config.threads))
    if not with_report:
        return out
    layers = [LayerReport(name=n, role=roles[n].value) for n in names if roles[n] is not ParamRole.IGNORE]
    report = MergeReport(
        layers=layers,
        config=config.echo(),
        layers_merged=0,
        parameters_touched=sum(math.prod(cset.base.shape(e.name)) for e in layers),
        wall_time_s=time.perf_counter() - start,
        notes=[f"baseline {config.baseline.value}: no trimming applied"],
    )
    return out, report


def unscaled_merged_delta(cset: CheckpointSet, name: str, config: MergeConfig) -> np.ndarray:
    """The merged task matrix of one linear layer before ``gamma`` is applied."""
    base = cset.base.read(name).astype(np.float64)
    if config.baseline is Baseline.AVERAGE:
        return sum(d for _, d in _task_deltas(cset, name, base)) / len(cset.tasks)
    if config.baseline is Baseline.TASK_ARITHMETIC:
        return sum(d for _, d in _task_deltas(cset, name, base))
    values, _, _ = merge_linear_layer(cset, name, base, replace(config, gamma=1.0))
    return values - base
