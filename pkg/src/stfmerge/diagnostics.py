"""Feature-preservation measurements and the singular-triplet removal ablation.

Preservation of a triplet ``(s, u, v)`` by a merged task matrix ``M`` is
``|<s u, M v - s u>|``; zero means the merged output on ``v`` keeps the full
task feature ``s u`` along its own direction. ``M`` is always taken before
the scaling factor is applied.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from stfmerge.errors import ConfigError
from stfmerge.linalg import SvdBundle, truncated_svd
from stfmerge.pipeline import Baseline, MergeConfig, trim, unscaled_merged_delta
from stfmerge.stf import feature_projections, stf_merge_bundles
from stfmerge.tensor_store import CheckpointSet, ParamRole, classify

CSV_COLUMNS = ["method", "layer", "task", "mean_abs_preservation", "mean_full_gap"]

METHOD_ALIASES = {
    "stf": Baseline.NONE,
    "average": Baseline.AVERAGE,
    "avg": Baseline.AVERAGE,
    "ta": Baseline.TASK_ARITHMETIC,
    "task-arithmetic": Baseline.TASK_ARITHMETIC,
}

CANONICAL = {Baseline.NONE: "stf", Baseline.AVERAGE: "average", Baseline.TASK_ARITHMETIC: "ta"}


@dataclass
class PreservationRecord:
    method: str
    layer_name: str
    task_id: str
    mean_abs_preservation: float
    mean_full_gap: float
    triplet_count: int


class AblationTarget(str, enum.Enum):
    SMALLEST = "smallest"
    LARGEST = "largest"


@dataclass(frozen=True)
class AblationSpec:
    target: AblationTarget
    remove_fraction: float

    def __post_init__(self):
        object.__setattr__(self, "target", AblationTarget(self.target))
        if not 0.0 <= self.remove_fraction < 1.0:
            raise ConfigError(f"remove fraction must lie in [0, 1), got {self.remove_fraction}")


def preservation(merged_delta, bundles: Sequence[SvdBundle], method: str, layer_name: str = "") -> list[PreservationRecord]:
    """One record per task bundle, averaged over its retained triplets."""
    records = []
    for b in bundles:
        if b.rank == 0:
            records.append(PreservationRecord(method, layer_name, b.task_id, 0.0, 0.0, 0))
            continue
        inner, gaps = feature_projections(merged_delta, b)
        records.append(
            PreservationRecord(
                method=method,
                layer_name=layer_name,
                task_id=b.task_id,
                mean_abs_preservation=float(np.mean(np.abs(inner))),
                mean_full_gap=float(np.mean(gaps)),
                triplet_count=b.rank,
            )
        )
    return records


def ablate_singulars(bundle: SvdBundle, spec: AblationSpec) -> SvdBundle:
    drop = math.floor(spec.remove_fraction * bundle.rank)
    if drop == 0:
        return bundle
    if spec.target is AblationTarget.SMALLEST:
        return bundle.take(slice(0, bundle.rank - drop))
    return bundle.take(slice(drop, bundle.rank))


def _linear_layers(cset: CheckpointSet, config: MergeConfig) -> list[str]:
    roles = classify(cset.base, config.role_rules)
    cset.validate(roles)
    return [name for name in cset.base.names() if roles[name] is ParamRole.LINEAR]


def reference_bundles(cset: CheckpointSet, name: str, eta: float = 1.0, rank_tol: float = 1e-5) -> list[SvdBundle]:
    """Singular triplets of each task matrix of a layer (the features to preserve)."""
    base = cset.base.read(name).astype(np.float64)
    return [
        truncated_svd(trim(store.read(name).astype(np.float64) - base, eta), rank_tol, task_id=tid)
        for tid, store in zip(cset.task_ids, cset.tasks)
    ]


def parse_methods(names: Sequence[str], base_config: MergeConfig) -> list[tuple[str, MergeConfig]]:
    if not names:
        raise ConfigError("at least one method is required")
    out = []
    for name in names:
        key = name.strip().lower()
        if key not in METHOD_ALIASES:
            raise ConfigError(f"unknown method {name!r} (expected stf, average or ta)")
        baseline = METHOD_ALIASES[key]
        out.append((CANONICAL[baseline], replace(base_config, baseline=baseline)))
    return out


def preservation_report(
    cset: CheckpointSet,
    configs: Sequence[tuple[str, MergeConfig]],
    reference_eta: float = 1.0,
) -> dict:
    """Run each method without scaling and measure preservation per layer and task.

    Features are the triplets of the task matrices trimmed at ``reference_eta``
    (untrimmed by default).
    """
    if not configs:
        raise ConfigError("at least one method is required")
    first = configs[0][1]
    records: list[PreservationRecord] = []
    for name in _linear_layers(cset, first):
        bundles = reference_bundles(cset, name, reference_eta, first.rank_tol)
        for method, config in configs:
            merged = unscaled_merged_delta(cset, name, config)
            records.extend(preservation(merged, bundles, method, name))

    methods = {}
    for method, config in configs:
        rows = [r for r in records if r.method == method]
        methods[method] = {
            "mean_abs_preservation": float(np.mean([r.mean_abs_preservation for r in rows])) if rows else 0.0,
            "mean_full_gap": float(np.mean([r.mean_full_gap for r in rows])) if rows else 0.0,
            "records": len(rows),
            "config": config.echo(),
        }
    return {
        "reference_eta": reference_eta,
        "methods": methods,
        "records": [asdict(r) for r in records],
    }


def preservation_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report["records"]:
        writer.writerow([r["method"], r["layer_name"], r["task_id"], repr(r["mean_abs_preservation"]), repr(r["mean_full_gap"])])
    return buf.getvalue()


def ablation_layer(bundles: Sequence[SvdBundle], spec: AblationSpec, solver_tol: float = 1e-8) -> tuple[float, float]:
    """Relative change of the merged matrix after ablation, and its preservation.

    Returns ``(||M_ablated - M_full||_F / ||M_full||_F, mean |<s u, M_ablated v - s u>|)``
    with preservation measured against the full, unablated triplets.
    """
    full = stf_merge_bundles(bundles, solver_tol).delta
    ablated = stf_merge_bundles([ablate_singulars(b, spec) for b in bundles], solver_tol).delta
    norm = np.linalg.norm(full)
    err = float(np.linalg.norm(ablated - full) / norm) if norm > 0 else 0.0
    pres = preservation(ablated, bundles, "ablated")
    scores = [p.mean_abs_preservation for p in pres if p.triplet_count]
    return err, float(np.mean(scores)) if scores else 0.0


def ablation_report(cset: CheckpointSet, config: MergeConfig, specs: Sequence[AblationSpec]) -> dict:
    """One row per ablation spec, averaged over all linear layers."""
    if not specs:
        raise ConfigError("at least one ablation fraction is required")
    layer_rows = []
    for name in _linear_layers(cset, config):
        bundles = reference_bundles(cset, name, config.eta, config.rank_tol)
        for spec in specs:
            err, pres = ablation_layer(bundles, spec, config.solver_tol)
            layer_rows.append((spec, name, err, pres))
    rows = []
    for spec in specs:
        mine = [r for r in layer_rows if r[0] == spec]
        rows.append({
            "target": spec.target.value,
            "fraction": spec.remove_fraction,
            "layers": len(mine),
            "mean_reconstruction_error": float(np.mean([r[2] for r in mine])) if mine else 0.0,
            "mean_abs_preservation": float(np.mean([r[3] for r in mine])) if mine else 0.0,
        })
    return {
        "config": config.echo(),
        "rows": rows,
        "layers": [
            {"target": s.target.value, "fraction": s.remove_fraction, "layer": n,
             "reconstruction_error": e, "mean_abs_preservation": p}
            for s, n, e, p in layer_rows
        ],
    }


def ablation_csv(report: dict) -> str:
    buf = io.StringIO()
    cols = ["target", "fraction", "layers", "mean_reconstruction_error", "mean_abs_preservation"]
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for row in report["rows"]:
        writer.writerow(row)
    return buf.getvalue()


def dump_json(report: dict, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
