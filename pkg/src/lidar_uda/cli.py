"""Command-line entry point: ``lidar-uda <verb> [--config cfg.json] [--set key=value ...] --seed N``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evaluate import ConfusionMatrix, RunResult, report, summary_table
from .pipeline import ABLATION_AXES, OUT_ENV, ExperimentConfig, Runner, StageError, apply_overrides, config_hash

VERBS = ("generate", "distill", "train", "selftrain", "eval", "ablate", "report", "pipeline")


def _presets() -> dict:
    from .study import desk_config

    return {"default": ExperimentConfig, "desk": desk_config}


def build_config(args) -> ExperimentConfig:
    base = _presets()[args.preset]().to_dict()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        base.update(json.loads(path.read_text()))
    base = apply_overrides(base, args.set)
    base["seed"] = args.seed
    if args.out:
        base["out_root"] = args.out
    return ExperimentConfig.from_dict(base)


def _pair_args(cfg: ExperimentConfig, args) -> list:
    if args.source is None and args.target is None:
        return list(cfg.pairs)
    pairs = [p for p in cfg.pairs if (args.source in (None, p[0])) and (args.target in (None, p[1]))]
    if not pairs:
        raise ValueError(f"no configured pair matches source={args.source} target={args.target}")
    return pairs


def _report_dir(cfg: ExperimentConfig, tag: str) -> Path:
    return cfg.root() / "reports" / f"{tag}-{config_hash(cfg)[:8]}"


def _emit(runs: list, out: Path) -> None:
    written = report(runs, out)
    print(summary_table(sorted(runs, key=lambda r: r.name)), end="")
    print(f"report written to {Path(written['summary']).parent}")


def run_verb(args) -> int:
    if args.verb == "report":
        src = Path(args.runs)
        try:
            records = json.loads(src.read_text())
        except OSError as e:
            raise StageError("report", f"cannot read {src}: {e.strerror}") from e
        runs = [RunResult(r["name"], ConfusionMatrix.from_dict(r["cm"])) for r in records]
        try:
            _emit(runs, Path(args.out or src.parent))
        except (OSError, ValueError) as e:
            raise StageError("report", str(e)) from e
        return 0

    cfg = build_config(args)
    runner = Runner(cfg, force=args.force)
    if args.verb == "generate":
        for name, path in runner.generate().items():
            print(f"{name}\t{path}")
        return 0
    if args.verb == "ablate":
        runner.generate()
        runs = runner.ablate(args.axis)
        _emit(runs, _report_dir(cfg, f"ablate-{args.axis}"))
        return 0
    if args.verb == "pipeline":
        runner.generate()
        runs = runner.pipeline(selftrain=not args.no_selftrain)
        _emit(runs, _report_dir(cfg, "pipeline"))
        if runner.cache_hits:
            print(f"reused {len(runner.cache_hits)} cached stage outputs")
        return 0

    runs = []
    done_sets = set()
    for src, tgt in _pair_args(cfg, args):
        sets = cfg.pretrain_sets(src, tgt)
        dkey, bb = runner.distill(sets)
        if args.verb == "distill":
            if sets not in done_sets:
                print(f"{'+'.join(sets)}\t{runner.root / 'distill' / dkey / 'backbone.ckpt'}")
                done_sets.add(sets)
            continue
        hkey, net, head = runner.head(src, dkey, bb)
        if args.verb == "train":
            print(f"{src}\t{runner.root / 'train' / hkey / 'model.ckpt'}")
            continue
        if args.verb == "selftrain" or (args.verb == "eval" and args.selftrain):
            skey, net2, student = runner.selftrain(hkey, net, head, src, tgt)
            if args.verb == "selftrain":
                print(f"{src}->{tgt}\t{runner.root / 'selftrain' / skey / 'model.ckpt'}")
                continue
            runs.append(RunResult(f"{cfg.train.recipe}+selftrain/{src}->{tgt}",
                                  runner.evaluate(skey, net2, student, tgt), runner.stage_log("selftrain", skey)))
        else:
            runs.append(RunResult(f"{cfg.train.recipe}/{src}->{tgt}", runner.evaluate(hkey, net, head, tgt),
                                  runner.stage_log("train", hkey)))
    if args.verb == "eval":
        _emit(runs, _report_dir(cfg, "eval"))
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidar-uda", description="Cross-sensor lidar segmentation experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("-v", "--verbose", action="store_true")
        if verb == "report":
            s.add_argument("--runs", required=True, help="runs.json written by pipeline, eval or ablate")
            s.add_argument("--out", default=None, help="output directory (defaults next to runs.json)")
            continue
        s.add_argument("--seed", type=int, required=True)
        s.add_argument("--config", default=None, help="JSON experiment config")
        s.add_argument("--preset", choices=("default", "desk"), default="default")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.epochs=5 (repeatable)")
        s.add_argument("--out", default=None, help=f"output root (else ${OUT_ENV}, else ./runs)")
        s.add_argument("--force", action="store_true", help="recompute stages even if cached")
        if verb in ("distill", "train", "selftrain", "eval"):
            s.add_argument("--source", default=None)
            s.add_argument("--target", default=None)
        if verb == "eval":
            s.add_argument("--selftrain", action="store_true", help="evaluate the self-trained head")
        if verb == "ablate":
            s.add_argument("--axis", required=True, choices=ABLATION_AXES)
        if verb == "pipeline":
            s.add_argument("--no-selftrain", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_verb(args)
    except StageError as e:
        print(f"lidar-uda {args.verb}: error {e}", file=sys.stderr)
        return 1
    except (ValueError, TypeError, KeyError, FileNotFoundError) as e:
        print(f"lidar-uda {args.verb}: error [config] {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
