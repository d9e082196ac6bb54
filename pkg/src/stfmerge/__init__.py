"""Training-free merging of fine-tuned checkpoints by superposing the
singular features of their task matrices."""

from stfmerge.errors import (
    ConfigError,
    DtypeError,
    FormatError,
    MergeError,
    NumericError,
    SchemaError,
    ShapeError,
    StoreIOError,
)
from stfmerge.linalg import MergeSystem, SvdBundle, gram, hadamard, solve_sym, truncated_svd
from stfmerge.pipeline import Baseline, MergeConfig, MergeMode, MergeReport, merge_baseline, merge_checkpoints, trim
from stfmerge.stf import MergedTaskMatrix, TaskMatrix, oracle_check, stf_merge, stf_merge_bundles, superposition_residuals
from stfmerge.tensor_store import (
    CheckpointSet,
    CheckpointStore,
    MemoryStore,
    ParamRole,
    RoleRules,
    TensorRecord,
    classify,
    materialize_lora_delta,
    open_checkpoint,
    write_checkpoint,
)

__version__ = "0.1.0"
