"""Command-line interface: ``stfmerge {merge,inspect,preserve-report,ablate}``.

Options can come from an INI config file (``--config``); command-line flags
win over the file. Exit status: 0 success, 1 configuration error, 2 checkpoint
format/schema/IO error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass, field

from stfmerge.diagnostics import (
    AblationSpec,
    AblationTarget,
    ablation_csv,
    ablation_report,
    dump_json,
    parse_methods,
    preservation_csv,
    preservation_report,
)
from stfmerge.errors import ConfigError, MergeError, NumericError
from stfmerge.pipeline import PRESETS, MergeConfig
from stfmerge.tensor_store import (
    DEFAULT_PATTERNS,
    CheckpointSet,
    LoraTaskStore,
    ParamRole,
    RoleRules,
    classify,
    open_checkpoint,
    write_checkpoint,
)

log = logging.getLogger("stfmerge")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "STFMERGE_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


@dataclass
class CliConfig:
    base: str | None = None
    tasks: list[str] = field(default_factory=list)
    task_ids: list[str] = field(default_factory=list)
    out: str | None = None
    report: str | None = None
    merge: dict = field(default_factory=dict)
    role_rules: RoleRules = field(default_factory=RoleRules)
    threads: int = 1
    lora: bool = False
    lora_scales: list[float] = field(default_factory=list)
    section: dict = field(default_factory=dict)


_FLOAT_KEYS = ("eta", "gamma", "rank_tol", "solver_tol")


def _read_config_file(path: str) -> CliConfig:
    parser = configparser.ConfigParser(delimiters=("=",), interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None
    root = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(root, p)

    cfg = CliConfig()
    merge = dict(parser["merge"]) if parser.has_section("merge") else {}
    if "base" in merge:
        cfg.base = resolve(merge.pop("base"))
    if "out" in merge:
        cfg.out = resolve(merge.pop("out"))
    if "report" in merge:
        cfg.report = resolve(merge.pop("report"))
    if "threads" in merge:
        cfg.threads = _to_int("threads", merge.pop("threads"))
    if "lora" in merge:
        cfg.lora = _to_bool("lora", merge.pop("lora"))
    if "preset" in merge:
        cfg.merge.update(_preset(merge.pop("preset")))
    for key in _FLOAT_KEYS:
        if key in merge:
            cfg.merge[key] = _to_float(key, merge.pop(key))
    for key in ("mode", "baseline"):
        if key in merge:
            cfg.merge[key] = merge.pop(key)
    if "narrow" in merge:
        cfg.merge["narrow"] = _to_bool("narrow", merge.pop("narrow"))
    if merge:
        raise ConfigError(f"unknown key(s) in [merge]: {', '.join(sorted(merge))}")

    if parser.has_section("tasks"):
        for tid, p in parser["tasks"].items():
            cfg.task_ids.append(tid)
            cfg.tasks.append(resolve(p))
    if parser.has_section("lora_scale"):
        scales = dict(parser["lora_scale"])
        cfg.lora_scales = [_to_float(f"lora_scale.{t}", scales.get(t, "1.0")) for t in cfg.task_ids]

    patterns = [(pat, ParamRole.parse(role)) for pat, role in parser["roles"].items()] if parser.has_section("roles") else []
    defaults = dict(parser["role_defaults"]) if parser.has_section("role_defaults") else {}
    inherit = _to_bool("inherit", defaults.get("inherit", "true"))
    cfg.role_rules = RoleRules(
        patterns=patterns + (list(DEFAULT_PATTERNS) if inherit else []),
        default_2d=ParamRole.parse(defaults.get("default_2d", "linear")),
        default_other=ParamRole.parse(defaults.get("default_other", "bias")),
    )
    if parser.has_section("diagnostics"):
        cfg.section = {k: v for k, v in parser["diagnostics"].items()}
        for key in ("json", "csv"):
            if key in cfg.section:
                cfg.section[key] = resolve(cfg.section[key])
    return cfg


def _to_float(key, value) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a number, got {value!r}") from None


def _to_int(key, value) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {value!r}") from None


def _to_bool(key, value) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {value!r}")


def _preset(name: str) -> dict:
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r} (expected {', '.join(PRESETS)})") from None


def _add_common(p: argparse.ArgumentParser, merge_flags: bool = True):
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--base", help="pre-trained checkpoint")
    p.add_argument("--task", action="append", default=None, help="fine-tuned checkpoint (repeatable, ordered)")
    p.add_argument("--task-id", action="append", default=None, help="id for the matching --task")
    p.add_argument("--preset", choices=sorted(PRESETS), help="eta/gamma preset")
    p.add_argument("--eta", type=float, help="trim keep-ratio in (0, 1]")
    p.add_argument("--gamma", type=float, help="scaling factor for merged deltas")
    p.add_argument("--rank-tol", type=float, help="relative singular-value cutoff")
    p.add_argument("--solver-tol", type=float, help="relative eigenvalue cutoff of the solver")
    p.add_argument("--mode", choices=["task-matrix", "fine-tuned-matrix"])
    p.add_argument("--threads", type=int, help=f"worker threads (env {THREADS_ENV})")
    p.add_argument("--lora", action="store_true", default=None, help="task files are LoRA adapters")
    p.add_argument("--lora-scale", action="append", type=float, default=None,
                   help="LoRA scale per adapter (one value applies to all)")
    if merge_flags:
        p.add_argument("--baseline", choices=["none", "average", "ta"])
        p.add_argument("--out", help="merged checkpoint path")
        p.add_argument("--report", help="JSON merge report path (default: <out>.report.json)")
        p.add_argument("--narrow", action="store_true", default=None,
                       help="write merged tensors back in the base checkpoint's dtype")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stfmerge", description="Merge fine-tuned checkpoints by superposing task features.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    merge = sub.add_parser("merge", help="merge checkpoints")
    _add_common(merge)

    inspect = sub.add_parser("inspect", help="list tensors with shapes, dtypes and roles")
    inspect.add_argument("path")
    inspect.add_argument("--config", help="config file supplying [roles]")

    pres = sub.add_parser("preserve-report", help="feature-preservation comparison of merge methods")
    _add_common(pres, merge_flags=False)
    pres.add_argument("--methods", help="comma-separated: stf,average,ta")
    pres.add_argument("--reference-eta", type=float, help="trim ratio for the reference features (default 1)")
    pres.add_argument("--json", help="output JSON path")
    pres.add_argument("--csv", help="output CSV path")

    abl = sub.add_parser("ablate", help="remove smallest/largest singular triplets before merging")
    _add_common(abl, merge_flags=False)
    abl.add_argument("--target", choices=["smallest", "largest"])
    abl.add_argument("--fraction", action="append", type=float, default=None, help="fraction removed (repeatable)")
    abl.add_argument("--json", help="output JSON path")
    abl.add_argument("--csv", help="output CSV path")
    return parser


def resolve_config(args) -> CliConfig:
    cfg = _read_config_file(args.config) if getattr(args, "config", None) else CliConfig()
    if args.base:
        cfg.base = args.base
    if args.task:
        cfg.tasks = list(args.task)
        cfg.task_ids = list(args.task_id or [])
    elif args.task_id:
        cfg.task_ids = list(args.task_id)
    if args.preset:
        cfg.merge.update(_preset(args.preset))
    for key in _FLOAT_KEYS + ("mode", "baseline", "narrow"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.merge[key] = value
    for key in ("out", "report"):
        if getattr(args, key, None):
            setattr(cfg, key, getattr(args, key))
    if os.environ.get(THREADS_ENV):
        cfg.threads = _to_int(THREADS_ENV, os.environ[THREADS_ENV])
    if args.threads is not None:
        cfg.threads = args.threads
    if args.lora:
        cfg.lora = True
    if args.lora_scale:
        cfg.lora_scales = list(args.lora_scale)

    if not cfg.base:
        raise ConfigError("no base checkpoint given (--base)")
    if not cfg.tasks:
        raise ConfigError("no task checkpoints given (--task)")
    if cfg.task_ids and len(cfg.task_ids) != len(cfg.tasks):
        raise ConfigError(f"{len(cfg.task_ids)} --task-id values for {len(cfg.tasks)} --task paths")
    if cfg.lora_scales and len(cfg.lora_scales) not in (1, len(cfg.tasks)):
        raise ConfigError("--lora-scale takes one value or one per task")
    return cfg


def merge_config(cfg: CliConfig) -> MergeConfig:
    return MergeConfig(**cfg.merge, role_rules=cfg.role_rules, threads=cfg.threads)


def open_set(cfg: CliConfig) -> CheckpointSet:
    base = open_checkpoint(cfg.base)
    tasks = []
    scales = cfg.lora_scales * len(cfg.tasks) if len(cfg.lora_scales) == 1 else cfg.lora_scales
    for i, path in enumerate(cfg.tasks):
        store = open_checkpoint(path)
        if cfg.lora:
            store = LoraTaskStore(base, store, scales[i] if scales else 1.0)
        tasks.append(store)
    ids = cfg.task_ids or [os.path.splitext(os.path.basename(p))[0] for p in cfg.tasks]
    if len(set(ids)) != len(ids):
        ids = [f"{tid}#{i}" for i, tid in enumerate(ids)]
    return CheckpointSet(base, tasks, ids)


def cmd_merge(args) -> int:
    from stfmerge.pipeline import merge_checkpoints

    cfg = resolve_config(args)
    if not cfg.out:
        raise ConfigError("no output path given (--out)")
    config = merge_config(cfg)
    cset = open_set(cfg)
    try:
        log.info("merging %d task checkpoint(s) into %s", len(cset.tasks), cfg.out)
        store, report = merge_checkpoints(cset, config)
        write_checkpoint(cfg.out, store.records())
    finally:
        cset.close()
    report_path = cfg.report or cfg.out + ".report.json"
    report_doc = report.to_dict()
    report_doc["inputs"] = {"base": cfg.base, "tasks": [{"id": t, "path": p} for t, p in zip(cset.task_ids, cfg.tasks)]}
    dump_json(report_doc, report_path)
    log.info("wrote %s and %s (%d linear layers, %.2fs)", cfg.out, report_path, report.layers_merged, report.wall_time_s)
    return EXIT_OK


def cmd_inspect(args) -> int:
    rules = _read_config_file(args.config).role_rules if args.config else RoleRules()
    store = open_checkpoint(args.path)
    try:
        roles = classify(store, rules)
        rows = [(n, "x".join(map(str, store.shape(n))) or "scalar", store.dtype(n), roles[n].value) for n in store.names()]
    finally:
        store.close()
    headers = ("name", "shape", "dtype", "role")
    widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(headers)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    print(fmt.format(*headers))
    for row in rows:
        print(fmt.format(*row))
    return EXIT_OK


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cmd_preserve_report(args) -> int:
    cfg = resolve_config(args)
    names = args.methods or cfg.section.get("methods", "stf,average,ta")
    config = merge_config(cfg)
    methods = parse_methods([m for m in names.split(",") if m.strip()], config)
    json_path = args.json or cfg.section.get("json") or "preservation.json"
    csv_path = args.csv or cfg.section.get("csv") or "preservation.csv"
    ref_eta = args.reference_eta if args.reference_eta is not None else _to_float("reference_eta", cfg.section.get("reference_eta", 1.0))
    if not 0.0 < ref_eta <= 1.0:
        raise ConfigError(f"reference eta must lie in (0, 1], got {ref_eta}")
    cset = open_set(cfg)
    try:
        report = preservation_report(cset, methods, reference_eta=ref_eta)
    finally:
        cset.close()
    dump_json(report, json_path)
    _write_text(csv_path, preservation_csv(report))
    for method, agg in report["methods"].items():
        log.info("%-8s mean |preservation| = %.3e", method, agg["mean_abs_preservation"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    target = args.target or cfg.section.get("target", "smallest")
    if target not in {t.value for t in AblationTarget}:
        raise ConfigError(f"target must be 'smallest' or 'largest', got {target!r}")
    fractions = args.fraction
    if fractions is None:
        raw = cfg.section.get("fractions", "0.05,0.2,0.5,0.8")
        fractions = [_to_float("fractions", f) for f in raw.split(",") if f.strip()]
    specs = [AblationSpec(target, f) for f in fractions]
    config = merge_config(cfg)
    json_path = args.json or cfg.section.get("json") or "ablation.json"
    csv_path = args.csv or cfg.section.get("csv") or "ablation.csv"
    cset = open_set(cfg)
    try:
        report = ablation_report(cset, config, specs)
    finally:
        cset.close()
    dump_json(report, json_path)
    _write_text(csv_path, ablation_csv(report))
    return EXIT_OK


COMMANDS = {
    "merge": cmd_merge,
    "inspect": cmd_inspect,
    "preserve-report": cmd_preserve_report,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except MergeError as exc:
        print(f"stfmerge: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:  # output paths outside the checkpoint store
        print(f"stfmerge: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


def exit_code(exc: MergeError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
