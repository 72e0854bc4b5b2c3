"""Command-line entry point: gen-data, train, eval, ablate, cross-domain, grad-check.

Exit codes: 0 ok, 2 usage or invalid config, 3 I/O, 4 non-finite loss, 5 failed verification.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from . import __version__
from .config import merge, parse_config_file
from .data import dataset_fingerprint, ensure_dir, load_dataset
from .errors import ConfigError, IoError, NonFiniteLoss
from .evaluation import CONF_THRESHOLD, NMS_IOU, evaluate
from .experiments import (
    GRAD_TOLERANCE, GenConfig, cross_domain_entry, gen_data, gradcheck_suite, run_ablation, run_cross_domain,
    worst_by_check,
)
from .model import anchor_grid
from .trainer import TrainConfig, load_checkpoint, train

log = logging.getLogger("consisaug")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5

# keys a config.json snapshot records beside the config itself
_SNAPSHOT_ONLY = {"dataset"}


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        kind = hints[f.name]
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None,
                            help=f"(default: {f.default})")


def _flags_for(cls, args) -> dict:
    return {f.name: getattr(args, f.name, None) for f in dataclasses.fields(cls)}


def _build(cls, args, **overrides):
    file_values = parse_config_file(args.config) if args.config else {}
    snapshot_extra = {k: file_values.pop(k) for k in list(file_values) if k in _SNAPSHOT_ONLY}
    flags = _flags_for(cls, args)
    for k, v in overrides.items():
        if flags.get(k) is None and k not in file_values:
            flags[k] = v
    return merge(cls, file_values, flags), snapshot_extra


def _write_json(path: Path, obj) -> None:
    try:
        ensure_dir(path.parent)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("need at least one seed")
    return seeds


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg, _ = _build(GenConfig, args)
    entries = gen_data(cfg)
    print(f"wrote {len(entries)} files under {cfg.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, extra = _build(TrainConfig, args)
    want = extra.get("dataset")
    if want and want != dataset_fingerprint(Path(cfg.data_dir) / cfg.train_split):
        log.warning("training data differs from the snapshot's dataset fingerprint")
    res = train(cfg, resume=args.resume)
    if res.metrics:
        print(json.dumps(res.metrics[-1]))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not 0.0 <= args.conf <= 1.0 or not 0.0 < args.nms <= 1.0:
        raise ConfigError("--conf must lie in [0, 1] and --nms in (0, 1]")
    ckpt = load_checkpoint(args.checkpoint)
    num_classes = int(ckpt.config.get("num_classes", 1))
    params = ckpt.params("teacher" if args.use_teacher else "student", num_classes)
    data_dir = Path(args.data) / args.split
    samples = load_dataset(data_dir)
    if not samples:
        raise IoError(f"no samples under {data_dir}")
    report = evaluate(params, samples, anchor_grid(samples[0].image.shape[-1]), args.conf, args.nms)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    tag = f"eval_{'teacher' if args.use_teacher else 'student'}_{args.split}"
    snapshot = {"checkpoint": str(args.checkpoint), "step": ckpt.step, "data": str(args.data), "split": args.split,
                "use_teacher": args.use_teacher, "conf": args.conf, "nms": args.nms,
                "dataset": dataset_fingerprint(data_dir)}
    _write_json(out / f"{tag}_config.json", snapshot)
    _write_json(out / f"{tag}.json", report.as_dict())
    print(json.dumps(report.as_dict()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base, _ = _build(TrainConfig, args, out_dir="runs/ablate")
    _write_json(Path(base.out_dir) / "ablate_config.json", dict(base.to_dict(), seeds=args.seeds, jobs=args.jobs))
    report = run_ablation(base, args.seeds, args.jobs)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_cross_domain(args) -> int:
    base, _ = _build(TrainConfig, args, out_dir="runs/ablate")
    _write_json(Path(base.out_dir) / "cross_domain_config.json",
                dict(base.to_dict(), seeds=args.seeds, jobs=args.jobs, target_data=args.target_data))
    report = run_cross_domain(base, args.seeds, args.target_data, args.jobs)
    for model in ("vanilla", "consis_flipaug"):
        for domain in ("source", "target"):
            s = cross_domain_entry(report, model, domain)["summary"]["map50"]
            print(f"{model:15s} {domain:7s} map50 {s['mean']:.3f}±{s['std']:.3f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    faults = tuple(args.inject_fault or ())
    results = gradcheck_suite(args.seed, args.n_seeds, faults)
    worst = worst_by_check(results)
    failed = sorted(name for name, err in worst.items() if not err < GRAD_TOLERANCE)
    for name, err in worst.items():
        print(f"{name:16s} {err:.3e} {'FAIL' if name in failed else 'ok'}")
    if args.out:
        out = Path(args.out)
        _write_json(out / "grad_check_config.json", {"seed": args.seed, "n_seeds": args.n_seeds,
                                                     "inject_fault": list(faults)})
        _write_json(out / "grad_check.json", {"worst": worst, "failed": failed})
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consisaug", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/val/test splits")
    p.add_argument("--config", help="key = value file; flags override it")
    _add_dataclass_flags(p, GenConfig)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="key = value file or a config.json snapshot; flags override it")
    p.add_argument("--resume", help="continue from this last.ckpt")
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and print the metrics as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root holding the split directory")
    p.add_argument("--split", default="test")
    p.add_argument("--use-teacher", action="store_true", help="evaluate the EMA teacher instead of the student")
    p.add_argument("--conf", type=float, default=CONF_THRESHOLD)
    p.add_argument("--nms", type=float, default=NMS_IOU)
    p.add_argument("--out", help="where to write the report and snapshot (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("ablate", cmd_ablate, "train and compare all four modes"),
                                 ("cross-domain", cmd_cross_domain, "evaluate on a second domain")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2], help="comma separated (default: 0,1,2)")
        p.add_argument("--jobs", type=int, default=1, help="cells trained in parallel")
        if name == "cross-domain":
            p.add_argument("--target-data", required=True, help="dataset root of the target domain")
        _add_dataclass_flags(p, TrainConfig, skip=("mode", "seed"))
        p.set_defaults(func=func)

    p = sub.add_parser("grad-check", help="compare every backward rule with finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--out", help="also write the results and a snapshot here")
    p.add_argument("--inject-fault", action="append", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
