"""Command-line entry points: benchmark generation, training, self-training
rounds, evaluation, the ablation suite, and report rendering.

Exit codes: 0 success, 1 run error, 2 configuration/usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dataio, ensemble, evalkit, trainer


class ConfigError(ValueError):
    pass


def _load_config(path, seed=None):
    if path is None:
        cfg_dict = {}
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            cfg_dict = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if seed is not None:
        cfg_dict["seed"] = seed
    try:
        return trainer.RunConfig.from_dict(cfg_dict)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def _load_splits(data_root):
    if data_root is None:
        raise ConfigError("no dataset directory: set data_root in the config or pass --data")
    root = Path(data_root)
    if not (root / "index.json").exists():
        raise ConfigError(f"no benchmark at {root} (missing index.json); run `triseg gen` first")
    return dataio.load_benchmark(root)


def _cmd_gen(args):
    spec = dataio.SceneSpec(seed=args.seed, num_classes=args.classes,
                            height=args.image_size, width=args.image_size)
    counts = None
    if args.counts:
        try:
            n = [int(x) for x in args.counts.split(",")]
            counts = dict(zip(dataio.ROLES, n))
        except ValueError as exc:
            raise ConfigError(f"bad --counts {args.counts!r}: {exc}") from exc
    splits = dataio.generate_benchmark(spec, counts=counts)
    dataio.save_benchmark(splits, args.out)
    print(f"benchmark written to {args.out} "
          f"({', '.join(f'{r}={len(s)}' for r, s in splits.items())})")
    return 0


def _cmd_train(args):
    config = _load_config(args.config, args.seed)
    data_root = args.data or config.data_root
    splits = _load_splits(data_root)
    stage1_cfg = trainer.RunConfig.from_dict({**config.to_dict(), "max_rounds": 0,
                                              "data_root": str(data_root)})
    result = trainer.run_full_pipeline(stage1_cfg, splits, args.out,
                                       max_train_iters=args.max_iters)
    if result.interrupted:
        print(f"interrupted; resume with --resume {args.out}/checkpoints/interrupt.ckpt")
    else:
        print(f"stage-1 run complete in {result.run_dir}")
    return 0


def _cmd_ssl(args):
    state = trainer.load_checkpoint(args.resume)
    if state.stage == "done":
        raise ConfigError(f"checkpoint {args.resume} is a finished run; "
                          "resume from a stage or round boundary instead")
    if args.rounds is not None:
        state.config.max_rounds = args.rounds
    if state.config.max_rounds < 1:
        state.config.max_rounds = 2
    data_root = args.data or state.config.data_root
    splits = _load_splits(data_root)
    result = trainer.run_full_pipeline(None, splits, args.out, resume_state=state,
                                       max_train_iters=args.max_iters)
    if result.interrupted:
        print(f"interrupted; resume with --resume {args.out}/checkpoints/interrupt.ckpt")
    else:
        print(f"self-training complete in {result.run_dir}")
    return 0


def _cmd_eval(args):
    state = trainer.load_checkpoint(args.resume)
    data_root = args.data or state.config.data_root
    splits = _load_splits(data_root)
    if args.split not in splits:
        raise ConfigError(f"unknown split {args.split!r}; have {sorted(splits)}")
    report = evalkit.evaluate_state(state, splits[args.split])
    print(report.to_json())
    return 0


def _cmd_ablate(args):
    config = _load_config(args.config, None)
    data_root = args.data or config.data_root
    splits = _load_splits(data_root)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = evalkit.run_ablation_suite(splits, config, args.out, seeds=seeds)
    print(f"ablation report written to {args.out}/comparison.csv")
    if report["failures"]:
        print(f"{len(report['failures'])} run(s) failed; see comparison.json")
        return 1
    return 0


def _cmd_report(args):
    written = evalkit.render_report(args.run, args.out)
    if not written:
        print(f"nothing to render in {args.run}")
        return 1
    print(f"wrote {', '.join(written)} to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="triseg",
        description="Ensemble self-training domain adaptation on a synthetic benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--counts", help="per-split counts: src,tgt,tval,wval")
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("train", help="run stage-1 training (plus meta fit for ours)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="benchmark directory (overrides config data_root)")
    p.add_argument("--max-iters", type=int, help="interrupt after this many iterations")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("ssl", help="continue a run with self-training rounds")
    p.add_argument("--resume", required=True, help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--rounds", type=int)
    p.add_argument("--max-iters", type=int)
    p.set_defaults(fn=_cmd_ssl)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--resume", required=True)
    p.add_argument("--split", default="target-val")
    p.add_argument("--data")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="run the method-comparison suite")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("report", help="render metrics and meta weights to CSV")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
