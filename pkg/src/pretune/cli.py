"""Command line entry point: ``pretune <subcommand>``.

Every ExperimentConfig field is also a dotted flag (``--pretrain.epochs 6``,
``--tuning.lora_rank 4``, ``--models.feature_sizes [24,12]``).  Values are read
as YAML scalars/lists and overlay, in order: the named profile, the
``--config`` file, then the flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Any

import yaml

from . import PRETRAIN_STRATEGIES, TUNE_STRATEGIES, __version__
from .config import PROFILES, ExperimentConfig, config_from_dict, emit_config
from .data import derive_seed
from .errors import ConfigError, PretuneError
from .report import CSV_NAME, JSON_NAME, TXT_NAME
from .runner import LEDGER_NAME, RunLedger, out_root, resume, run_grid, run_single_finetune, run_single_pretrain
from .volume import generate_cohort, save_cohort

logger = logging.getLogger("pretune")


def config_flags(cls: type = ExperimentConfig, prefix: str = "") -> list[tuple[str, Any]]:
    """Dotted names and types of every leaf field below ``cls``."""
    out = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if not f.init:
            continue
        name = f"{prefix}{f.name}"
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            out.extend(config_flags(tp, name + "."))
        else:
            out.append((name, tp))
    return out


# set directly by dedicated flags
_DEDICATED = {"profile", "seed", "out_dir"}


def _type_name(tp: Any) -> str:
    return str(tp).replace("typing.", "") if not isinstance(tp, type) else tp.__name__


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=PROFILES, help="base profile (default: the config file's, else paper)")
    p.add_argument("--config", type=Path, help="YAML config file overlaid on the profile")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", help="output root (default: config out_dir, else $PRETUNE_OUT, else ./runs)")
    group = p.add_argument_group("config fields", "any ExperimentConfig field as a dotted flag")
    for name, tp in config_flags():
        if name in _DEDICATED:
            continue
        group.add_argument(f"--{name}", dest=f"cfg:{name}", metavar=_type_name(tp).upper(), default=None)


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: parent {key!r} is not a mapping in the config file")
    node[leaf] = value


def _parse_value(name: str, text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"--{name}: cannot parse {text!r}: {exc}") from None


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict[str, Any] = {}
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} does not exist")
        try:
            loaded = yaml.safe_load(args.config.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.config}: malformed YAML: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
        values = loaded or {}
    if args.profile:
        values["profile"] = args.profile
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out:
        values["out_dir"] = args.out
    for key, text in vars(args).items():
        if key.startswith("cfg:") and text is not None:
            name = key[4:]
            _set_dotted(values, name, _parse_value(name, text))
    cfg = config_from_dict(values)
    cfg.validate()
    return cfg


# -- subcommands -----------------------------------------------------------------------


def _print_rows(result) -> int:
    if result is None:
        return 0
    print((result.report["txt"]).read_text(encoding="utf-8"), end="")
    print(f"run {result.run_id}: {result.run_dir}")
    if result.failed:
        print(f"{len(result.failed)} cell(s) failed: {', '.join(result.failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_config(args) -> int:
    print(emit_config(build_config(args)), end="")
    return 0


def cmd_synth(args) -> int:
    cfg = build_config(args)
    dest = Path(args.dest)
    subjects = generate_cohort(cfg.data.n_subjects, cfg.data.generator, seed=derive_seed(cfg.seed, "cohort"))
    manifest = save_cohort(subjects, dest, compress=not args.no_compress)
    print(manifest)
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_config(args)
    result = run_single_pretrain(cfg, args.strategy, args.feature_size, force=args.force)
    return _print_rows(result)


def cmd_finetune(args) -> int:
    cfg = build_config(args)
    if args.tune == "scratch" and args.checkpoint:
        raise ConfigError("--checkpoint: scratch training starts from random weights")
    if args.tune != "scratch" and not args.checkpoint:
        raise ConfigError(f"--checkpoint: required for tuning strategy {args.tune!r}")
    result = run_single_finetune(cfg, args.tune, args.checkpoint, args.feature_size, force=args.force)
    return _print_rows(result)


def cmd_grid(args) -> int:
    cfg = build_config(args)
    return _print_rows(run_grid(cfg, force=args.force, workers=args.workers))


def cmd_resume(args) -> int:
    return _print_rows(resume(args.run_id, args.out, workers=args.workers))


def _find_report(target: Path, root: Path) -> Path:
    candidates = [target, root / target]
    for c in candidates:
        if c.is_file():
            return c.parent
        if (c / "report").is_dir():
            return c / "report"
        if (c / CSV_NAME).is_file():
            return c
    raise ConfigError(f"no report found at {target}")


def cmd_report(args) -> int:
    root = out_root(None, args.out)
    folder = _find_report(Path(args.target), root)
    name = {"csv": CSV_NAME, "json": JSON_NAME, "txt": TXT_NAME}[args.format]
    print((folder / name).read_text(encoding="utf-8"), end="")
    return 0


def cmd_ls(args) -> int:
    root = out_root(None, args.out)
    ledger = RunLedger(root / LEDGER_NAME)
    runs = ledger.runs()
    if args.json:
        print(json.dumps(list(runs.values()), indent=2))
        return 0
    if not runs:
        print(f"no runs under {root}")
        return 0
    width = max(len(r) for r in runs)
    for run_id, rec in runs.items():
        print(f"{run_id.ljust(width)}  {rec['status']:<24}  {rec.get('config_digest', '')[:12]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pretune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the resolved configuration as YAML")
    _add_config_args(p)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("synth", help="generate a synthetic cohort (SVOL files + manifest.csv)")
    p.add_argument("dest", help="output directory for the cohort")
    p.add_argument("--no-compress", action="store_true", help="write plain .svol instead of .svol.gz")
    _add_config_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="one pre-training run")
    p.add_argument("--strategy", required=True, choices=PRETRAIN_STRATEGIES)
    p.add_argument("--feature-size", type=int, help="default: first of models.feature_sizes")
    p.add_argument("--force", action="store_true", help="rerun even if this config already ran")
    _add_config_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="one fine-tuning run from a checkpoint (or scratch)")
    p.add_argument("--tune", required=True, choices=TUNE_STRATEGIES)
    p.add_argument("--checkpoint", help="pre-training checkpoint directory (omit for scratch)")
    p.add_argument("--feature-size", type=int, help="default: first of models.feature_sizes")
    p.add_argument("--force", action="store_true", help="rerun even if this config already ran")
    _add_config_args(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("grid", help="full pre-train x tuning x feature-size grid with one report")
    p.add_argument("--force", action="store_true", help="rerun even if this config already ran")
    p.add_argument("--workers", type=int, default=1, help="parallel fine-tune cells (profiles become unreliable)")
    _add_config_args(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("run_id")
    p.add_argument("--out", help="output root holding the ledger")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="print the report of a run")
    p.add_argument("target", help="run id, run directory or report directory")
    p.add_argument("--format", choices=("txt", "csv", "json"), default="txt")
    p.add_argument("--out", help="output root used to resolve run ids")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ls", help="list runs in the ledger")
    p.add_argument("--out", help="output root holding the ledger")
    p.add_argument("--json", action="store_true", help="latest ledger record per run as JSON")
    p.set_defaults(func=cmd_ls)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except PretuneError as exc:
        print(f"pretune: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("pretune: interrupted; continue with `pretune resume <run-id>`", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
