"""Command-line verbs: ``python -m segdreamer {train,eval,ablate,gen-masks,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Run directories default to ``$SEGDREAMER_OUT/<verb>/...`` (``runs/`` when unset).
"""

from __future__ import annotations

import argparse
import dataclasses
import importlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from segdreamer.config import load_config
from segdreamer.errors import CheckpointError, ConfigError, ReportError, ShapeError, UsageError
from segdreamer.worldmodel import VARIANTS

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_EVAL_EPISODES = 10
OUT_ENV = "SEGDREAMER_OUT"
FINAL_CHECKPOINT = Path("checkpoints") / "final.ckpt"

log = logging.getLogger("segdreamer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. model.variant=sd_selective (repeatable)")
    p.add_argument("--out", type=Path, help="output directory (default: $%s/<verb>/...)" % OUT_ENV)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segdreamer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one run")
    _add_config_args(p)
    p.add_argument("--episodes-dir", type=Path, help="also record every collected episode here")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out distractors")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--episodes", type=int, default=DEFAULT_EVAL_EPISODES, help="episodes to run (default: 10)")
    p.add_argument("--seed", type=int, default=0, help="selects a block of held-out distractor seeds")

    p = sub.add_parser("ablate", help="run variants x seeds and emit the comparison report")
    _add_config_args(p)
    p.add_argument("--variants", required=True, help="comma-separated: " + ",".join(VARIANTS))
    p.add_argument("--seeds", default="0", help="comma-separated integer seeds")
    p.add_argument("--workers", type=int, default=1, help="bounded worker pool size")

    p = sub.add_parser("gen-masks", help="write mask containers for recorded episodes")
    _add_config_args(p)
    p.add_argument("episodes", nargs="+", type=Path, help="episode containers")
    p.add_argument("--adapter", help="module:function predicting a boolean HxW mask from an image")

    p = sub.add_parser("report", help="emit figures and summary.tsv for run directories")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    handler = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
               "gen-masks": cmd_gen_masks, "report": cmd_report}[args.verb]
    try:
        return handler(args)
    except (ConfigError, UsageError) as err:
        print(f"segdreamer {args.verb}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ReportError, ShapeError, OSError, FloatingPointError, RuntimeError) as err:
        print(f"segdreamer {args.verb}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def cmd_train(args) -> int:
    from segdreamer.trainer import run

    config = load_config(args.config, args.overrides)
    out = args.out or out_root() / "train" / f"{config.name}-seed{config.seed}"
    report = run(config, out, args.episodes_dir)
    print(json.dumps({"run_dir": str(report.run_dir), "env_steps": report.env_steps, "updates": report.updates,
                      "final_return": report.final_return}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from segdreamer.trainer import evaluate_policy, load_checkpoint

    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    config, wm, agent, header = load_checkpoint(args.checkpoint)
    summary = evaluate_policy(config, wm, agent, args.episodes, seed=args.seed)
    out = {"checkpoint": str(args.checkpoint), "env_steps": header.get("env_steps"),
           "episodes": len(summary["episode_returns"]), "mean_return": summary["mean_return"],
           "episode_returns": summary["episode_returns"]}
    if "head_iou" in summary:
        out["head_iou"] = sum(summary["head_iou"]) / len(summary["head_iou"])
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _parse_list(raw: str, kind, what: str) -> list:
    try:
        return [kind(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--{what}: cannot parse {raw!r}") from None


def ablation_cells(config, variants: Sequence[str], seeds: Sequence[int], out: Path) -> list[tuple]:
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s) {', '.join(unknown)}; valid names: {', '.join(VARIANTS)}")
    cells = []
    for variant in variants:
        for seed in seeds:
            cfg = dataclasses.replace(config, seed=seed, label=config.label or variant,
                                      model=dataclasses.replace(config.model, variant=variant))
            cells.append((cfg.validate(), out / variant / f"seed{seed}"))
    return cells


def _run_cell(cell) -> str:
    from segdreamer.trainer import run

    cfg, run_dir = cell
    run(cfg, run_dir)
    return str(run_dir)


def cmd_ablate(args) -> int:
    from segdreamer.evalkit import emit_report

    config = load_config(args.config, args.overrides)
    variants = _parse_list(args.variants, str, "variants")
    seeds = _parse_list(args.seeds, int, "seeds")
    out = args.out or out_root() / "ablate"
    cells = ablation_cells(config, variants, seeds, out)
    todo = [c for c in cells if not (c[1] / FINAL_CHECKPOINT).exists()]
    for cfg, run_dir in cells:
        if (cfg, run_dir) not in todo:
            log.info("skipping completed cell %s", run_dir)
    if args.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            list(pool.map(_run_cell, todo))
    else:
        for cell in todo:
            _run_cell(cell)
    paths = emit_report([d for _, d in cells], out / "report")
    print(json.dumps({"cells": len(cells), "ran": len(todo), "skipped": len(cells) - len(todo),
                      "summary": str(paths["summary"])}))
    return EXIT_OK


def _load_adapter(spec: str):
    if ":" not in spec:
        raise UsageError(f"--adapter must look like module:function, got {spec!r}")
    module, func = spec.split(":", 1)
    try:
        return getattr(importlib.import_module(module), func)
    except (ImportError, AttributeError) as err:
        raise UsageError(f"--adapter {spec}: {err}") from None


def cmd_gen_masks(args) -> int:
    from segdreamer.masks import MaskProvider, generate_mask_file

    config = load_config(args.config, args.overrides)
    provider = MaskProvider(config.masks, _load_adapter(args.adapter) if args.adapter else None)
    out = args.out or out_root() / "masks"
    written = []
    for path in args.episodes:
        target = out / (path.stem + ".masks.sdc")
        written.append(str(generate_mask_file(path, target, provider)))
    print(json.dumps({"written": written}))
    return EXIT_OK


def cmd_report(args) -> int:
    from segdreamer.evalkit import emit_report

    out = args.out or out_root() / "report"
    paths = emit_report(args.run_dirs, out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
