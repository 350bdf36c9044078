"""Command-line surface: train / eval / affinity / gradcheck / generate-data.

Commands are batch-oriented: they write artifacts under an output
directory and exit. Exit codes: 0 success, 2 configuration or argument
error, 3 non-finite loss during training, 1 failed gradient check.
``TASKADAPT_OUT`` sets the default output root (falling back to ./out).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .affinity import AffinityMatrix, save_affinity_csv
from .config import TrainConfig, config_from_dict, load_config
from .data import dump_dataset
from .errors import ConfigError, NonFiniteLoss, TaskAdaptError
from .train import RUNG_FLAGS, Trainer, load_checkpoint, train
from .verify import GRADCHECK_MODULES, run_gradcheck

GRADCHECK_TOLERANCE = 1e-3


def _default_out(sub: str) -> Path:
    return Path(os.environ.get("TASKADAPT_OUT", "out")) / sub


def _load_or_default_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return load_config(path)


def _apply_overrides(config: TrainConfig, args) -> TrainConfig:
    doc = config.to_dict()
    if args.seed is not None:
        doc["seed"] = int(args.seed)
    if args.epochs is not None:
        doc["optim"]["epochs"] = int(args.epochs)
        if doc["optim"]["warmup_epochs"] >= int(args.epochs):
            doc["optim"]["warmup_epochs"] = max(0, int(args.epochs) - 1)
    if args.ablate is not None:
        doc["adapter"].update(RUNG_FLAGS[args.ablate])
    if args.troa_sign is not None:
        doc["troa"]["sign_convention"] = {
            "paper": "paper_negative", "positive": "positive"}[args.troa_sign]
    return config_from_dict(doc)


def cmd_train(args) -> int:
    config = _apply_overrides(_load_or_default_config(args.config), args)
    out = Path(args.out) if args.out else _default_out("train")
    trainer, summary = train(config, out_dir=out)
    report = trainer.evaluate("test")
    (out / "metrics_test.json").write_text(report.to_json() + "\n")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    print(f"final train loss: {summary['final_train_loss']:.6f} "
          f"(epoch 1: {summary['epoch1_train_loss']:.6f})")
    m = report.values
    print(f"test: miou={m['segmentation']['miou']:.2f} "
          f"rmse={m['depth']['rmse']:.4f} "
          f"mangle={m['normal']['mean_angle_deg']:.2f} "
          f"f1={m['edge']['f1']:.2f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    trainer = Trainer.from_checkpoint(ckpt)
    report = trainer.evaluate(split=args.split, domain=args.domain)
    out = Path(args.out) if args.out else _default_out("eval")
    out.mkdir(parents=True, exist_ok=True)
    domain = args.domain or ckpt.config.data.domain
    stem = f"metrics_{args.split}_{domain}"
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    (out / f"{stem}.csv").write_text(
        report.CSV_HEADER + "\n" + report.to_csv_row() + "\n")
    print(report.to_json())
    return 0


def cmd_affinity(args) -> int:
    from . import viz

    if args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        matrix = ckpt.affinity
        names = [t.name for t in ckpt.config.tasks]
    else:
        config = _load_or_default_config(args.config)
        matrix = AffinityMatrix.uniform(config.n_tasks)
        names = [t.name for t in config.tasks]
    out = Path(args.out) if args.out else _default_out("affinity")
    out.mkdir(parents=True, exist_ok=True)
    matrix.validate(tol=1e-6)
    save_affinity_csv(matrix, out / "affinity.csv")
    viz.affinity_heatmap_png(matrix.matrix, out / "affinity.png")
    viz.affinity_figure_png(matrix.matrix, names, out / "affinity_large.png")
    print(f"affinity dumped to {out} (step_count={matrix.step_count})")
    return 0


def cmd_gradcheck(args) -> int:
    modules = GRADCHECK_MODULES if args.module == "all" else (args.module,)
    reports = []
    for module in modules:
        reports.extend(run_gradcheck(module, seed=args.seed, step=args.step,
                                     corrupt=args.corrupt))
    worst = 0.0
    ok = True
    for rep in reports:
        status = "ok" if rep.max_rel_error < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{rep.group}: max_rel_error={rep.max_rel_error:.3e} [{status}]")
        worst = max(worst, rep.max_rel_error)
        ok = ok and rep.max_rel_error < GRADCHECK_TOLERANCE
    print(f"max relative error: {worst:.3e}")
    if args.json:
        Path(args.json).write_text(json.dumps(
            [json.loads(r.to_json()) for r in reports], indent=2, sort_keys=True))
    return 0 if ok else 1


def cmd_generate_data(args) -> int:
    out = Path(args.out) if args.out else _default_out("data")
    dump_dataset(out, args.domain, args.count, seed_start=args.seed,
                 image_size=args.image_size)
    print(f"wrote {args.count} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskadapt",
        description="Multitask adapter training on procedural dense-prediction scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train adapters+decoders, write checkpoint")
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablate", choices=sorted(RUNG_FLAGS))
    p.add_argument("--troa-sign", choices=("paper", "positive"), dest="troa_sign")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split/domain")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--domain", choices=("A", "B"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("affinity", help="dump the task-affinity matrix (CSV + PNG)")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_affinity)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", default="all",
                   choices=("all",) + tuple(GRADCHECK_MODULES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--json", help="also write reports as JSON")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("generate-data", help="write a dataset dump + manifest")
    p.add_argument("--out")
    p.add_argument("--domain", default="A", choices=("A", "B"))
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64, dest="image_size")
    p.set_defaults(func=cmd_generate_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TaskAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
