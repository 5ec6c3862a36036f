"""Command-line entry points.

Subcommands: gen-data, segment, prompts, stage1, stage2, eval, gradcheck.
Run configuration flags mirror RunConfig field names; a `--config` file with
`key = value` lines supplies defaults that explicit flags override.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .data import (
    gen_indoor_dataset,
    gen_trajectory_dataset,
    read_indoor_jsonl,
    read_trajectory_jsonl,
    write_indoor_jsonl,
    write_trajectory_jsonl,
)
from .encoders import EncoderConfig
from .errors import NavPromptError, ParameterError
from .prompts import Vocabulary, build_prompt_set
from .segmenter import load_dataset, pair_subpaths, split_instruction
from .training import (
    RunConfig,
    evaluate_retrieval,
    load_checkpoint,
    parse_config_file,
    run_stage1,
    run_stage2,
    stage1_gradient_report,
    stage2_gradient_report,
)


def _add_runconfig_flags(parser: argparse.ArgumentParser) -> None:
    for field in dataclasses.fields(RunConfig):
        flag = "--" + field.name.replace("_", "-")
        if field.type == "bool" or isinstance(field.default, bool):
            parser.add_argument(flag, dest=field.name, default=None,
                                type=lambda v: v.lower() in ("true", "1", "yes"),
                                metavar="BOOL")
        else:
            parser.add_argument(flag, dest=field.name, default=None, type=type(field.default))


def _build_runconfig(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for field in dataclasses.fields(RunConfig):
        given = getattr(args, field.name, None)
        if given is not None:
            values[field.name] = given
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _cmd_gen_data(args) -> int:
    if args.seed is None:
        raise ParameterError("gen-data requires --seed")
    cfg = _build_runconfig(args)
    if args.kind == "indoor":
        samples = gen_indoor_dataset(
            num_classes=cfg.num_classes, samples_per_class=cfg.indoor_samples_per_class,
            noise=cfg.indoor_noise, seed=cfg.seed,
            num_patches=cfg.num_patches, feature_dim=cfg.feature_dim,
        )
        write_indoor_jsonl(samples, args.output)
    else:
        samples = gen_trajectory_dataset(
            count=cfg.trajectory_count,
            subpaths_range=(cfg.subpaths_min, cfg.subpaths_max),
            viewpoints_range=(cfg.viewpoints_min, cfg.viewpoints_max),
            seed=cfg.seed, feature_dim=cfg.feature_dim,
            noise=cfg.viewpoint_noise, duplicate_prob=cfg.duplicate_prob,
        )
        write_trajectory_jsonl(samples, args.output)
    print(f"wrote {len(samples)} {args.kind} records to {args.output}")
    return 0


def _cmd_segment(args) -> int:
    records = load_dataset(args.input)
    written = 0
    with open(args.output, "w", encoding="utf-8") as fh:
        for rec in records:
            subs = split_instruction(rec.instruction)
            pairs = pair_subpaths(subs, len(rec.path),
                                  chunks=[list(c) for c in rec.chunks] if rec.chunks else None)
            fh.write(json.dumps({
                "instruction": rec.instruction.text,
                "path": rec.path,
                "chunk_view": [list(c) for c in rec.chunks] if rec.chunks else None,
                "sub_instructions": [p.sub_instruction.text for p in pairs],
                "aligned_ranges": [[p.start, p.end] for p in pairs],
            }))
            fh.write("\n")
            written += 1
    print(f"segmented {written} records into {args.output}")
    return 0


def _cmd_prompts(args) -> int:
    records = load_dataset(args.input)
    for rec in records:
        subs = split_instruction(rec.instruction)
        print(json.dumps(build_prompt_set(subs).as_dict()))
    return 0


def _cmd_stage1(args) -> int:
    cfg = _build_runconfig(args)
    dataset = read_indoor_jsonl(args.data) if args.data else None
    result = run_stage1(cfg, dataset=dataset)
    print(json.dumps({"metrics": result.metrics, "checkpoint": result.checkpoint_path}, indent=2))
    return 0


def _cmd_stage2(args) -> int:
    cfg = _build_runconfig(args)
    dataset = read_trajectory_jsonl(args.data) if args.data else None
    result = run_stage2(cfg, args.stage1_ckpt, dataset=dataset)
    printable = dict(result.metrics)
    printable.pop("epoch_total_loss", None)
    print(json.dumps({"metrics": printable, "checkpoint": result.checkpoint_path}, indent=2))
    return 0


def _cmd_eval(args) -> int:
    store, config = load_checkpoint(args.ckpt)
    if "encoder" not in config:
        raise ParameterError("checkpoint does not carry an encoder config")
    enc = EncoderConfig(**config["encoder"])
    vocab = Vocabulary.load(args.vocab)
    dataset = read_trajectory_jsonl(args.data)
    metrics = evaluate_retrieval(store, enc, dataset, vocab, mode=args.mode)
    print(json.dumps(metrics, indent=2))
    return 0


def _cmd_gradcheck(args) -> int:
    ok = True
    if args.stage in ("1", "both"):
        report = stage1_gradient_report(eps=args.eps)
        print(f"stage1 cross-entropy: max relative error {report.max_rel_error:.3e}")
        ok &= report.max_rel_error < args.tolerance
    if args.stage in ("2", "both"):
        report = stage2_gradient_report(eps=args.eps)
        print(f"stage2 weighted alignment loss: max relative error {report.max_rel_error:.3e}")
        ok &= report.max_rel_error < args.tolerance
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="navprompt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=("indoor", "trajectories"), required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    _add_runconfig_flags(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("segment", help="split instructions and align sub-paths")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_segment)

    p = sub.add_parser("prompts", help="print context prompt sets per record")
    p.add_argument("--input", required=True)
    p.set_defaults(fn=_cmd_prompts)

    p = sub.add_parser("stage1", help="prompt tuning on the frozen backbone")
    p.add_argument("--config")
    p.add_argument("--data", help="indoor JSONL (generated when omitted)")
    _add_runconfig_flags(p)
    p.set_defaults(fn=_cmd_stage1)

    p = sub.add_parser("stage2", help="contrastive prompt alignment")
    p.add_argument("--config")
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--data", help="trajectory JSONL (generated when omitted)")
    _add_runconfig_flags(p)
    p.set_defaults(fn=_cmd_stage2)

    p = sub.add_parser("eval", help="retrieval metrics for a stage-2 checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="full")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of both stage losses")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NavPromptError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
