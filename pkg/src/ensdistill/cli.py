"""Command-line pipeline driver.

Every subcommand is a pure function of its flags and input files: rerunning
with the same inputs produces byte-identical outputs.  Exit codes separate
science from plumbing: 0 success, 1 verified-claim violation, 2 bad
flags/config, 3 I/O failure, 4 theorem-premise violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import distill as distill_mod
from . import evaluate as eval_mod
from .findwl import FindWlConfig, SgdConfig
from .nets import ConfigError, flops, params_from_dict, params_to_dict

EXIT_OK = 0
EXIT_CLAIM = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PREMISE = 4

_SGD_KEYS = ("lr", "momentum", "weight_decay", "epochs", "batch_size", "lr_drops", "lr_factor")
_FINDWL_KEYS = ("barrier_gamma", "logit_bound_b", "temperature", "max_search", "loss_mode", "sgd")
_TOP_KEYS = ("T", "R", "eta", "eta_mode", "g_inf", "edge_tol", "base_hidden",
             "connection_kind", "seed", "findwl")


def _take(doc: dict, allowed, where: str) -> dict:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} in {where}")
    return doc


def build_config(doc: dict, in_dim: int, n_labels: int) -> distill_mod.DistillConfig:
    """Construct the run configuration from a JSON document; unknown keys are
    rejected by name, missing keys fall back to package defaults."""
    _take(doc, _TOP_KEYS, "config")
    fw_doc = dict(doc.get("findwl", {}))
    _take(fw_doc, _FINDWL_KEYS, "config.findwl")
    sgd_doc = dict(fw_doc.pop("sgd", {}))
    _take(sgd_doc, _SGD_KEYS, "config.findwl.sgd")
    if "lr_drops" in sgd_doc:
        sgd_doc["lr_drops"] = tuple(sgd_doc["lr_drops"])
    base_findwl = FindWlConfig()
    sgd = replace(base_findwl.sgd, **sgd_doc)
    findwl = replace(base_findwl, **fw_doc, sgd=sgd)
    top = {k: v for k, v in doc.items() if k not in ("findwl", "base_hidden")}
    hidden = doc.get("base_hidden", [24, 24])
    base_class = data_mod.mlp_spec(in_dim, hidden, n_labels)
    cfg = replace(distill_mod.DistillConfig(), **top, findwl=findwl, base_class=base_class)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _load_split(data_dir: Path):
    train = data_mod.load_dataset_csv(data_dir / "train.csv")
    test = data_mod.load_dataset_csv(data_dir / "test.csv")
    return train, test


def _load_logits(data_dir: Path, part: str) -> np.ndarray:
    return data_mod.load_logits_csv(data_dir / f"{part}_logits.csv")


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset == "ellipsoid":
        ds = data_mod.gen_ellipsoid(args.seed, args.n, args.d)
    else:
        ds = data_mod.gen_cube(args.seed, args.n, args.d)
    train, test = data_mod.split(ds, 0.8, args.seed)
    data_mod.save_dataset_csv(out / "dataset.csv", ds)
    data_mod.save_meta(out / "meta.json", ds.meta)
    data_mod.save_dataset_csv(out / "train.csv", train)
    data_mod.save_dataset_csv(out / "test.csv", test)
    print(f"wrote {args.dataset} n={ds.n} d={ds.d} to {out} "
          f"(train {train.n} / test {test.n})")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    data_dir = Path(args.data)
    train, test = _load_split(data_dir)
    hidden = [int(w) for w in args.spec.split(",") if w]
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    spec = data_mod.mlp_spec(train.d, hidden, n_classes)
    recipe = SgdConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                       epochs=args.epochs, batch_size=args.batch_size,
                       lr_drops=(0.3, 0.6, 0.9), lr_factor=0.2)
    params = data_mod.train_teacher(train, spec, recipe, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh, indent=2)
        fh.write("\n")
    train_logits = data_mod.teacher_logits(params, train.x)
    test_logits = data_mod.teacher_logits(params, test.x)
    data_mod.save_logits_csv(data_dir / "train_logits.csv", train_logits)
    data_mod.save_logits_csv(data_dir / "test_logits.csv", test_logits)
    train_acc = eval_mod.accuracy(train_logits, train.labels)
    test_acc = eval_mod.accuracy(test_logits, test.labels)
    print(f"teacher trained: train accuracy {train_acc:.4f}, test accuracy {test_acc:.4f}")
    return EXIT_OK


def cmd_distill(args) -> int:
    data_dir = Path(args.data)
    train, _ = _load_split(data_dir)
    g = _load_logits(data_dir, "train")
    doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    cfg = build_config(doc, train.d, g.shape[1])
    if args.seed is not None:
        cfg.seed = args.seed
    ens, hist = distill_mod.run(cfg, train.x, g, teacher_hash=_file_hash(Path(args.teacher)))
    distill_mod.save_ensemble(args.out, ens)
    distill_mod.write_history(args.history, hist)
    n_esc = len(hist.escalations)
    print(f"distilled {len(ens.members)} members (T={cfg.T}, R={cfg.R}, "
          f"escalations={n_esc}, eta={ens.eta:.6g})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ens = distill_mod.load_ensemble(args.ensemble)
    data_dir = Path(args.data)
    train, test = _load_split(data_dir)
    teacher = params_from_dict(json.loads(Path(args.teacher).read_text(encoding="utf-8")))
    teacher_cost = flops(teacher)
    if args.mode == "anytime":
        points = eval_mod.anytime_curve(ens, test.x, test.labels, teacher_cost)
        eval_mod.write_curve_csv(args.out, points)
        print(f"anytime curve: {len(points)} points, "
              f"final accuracy {points[-1].accuracy:.4f}")
    elif args.mode == "resched":
        g = _load_logits(data_dir, "train")
        specs = [eval_mod.standalone_spec(m) for m in ens.members]
        points = eval_mod.baseline_resched(specs, train.x, g, test.x, test.labels,
                                           teacher_cost, FindWlConfig(), seed=args.seed or 0)
        eval_mod.write_curve_csv(args.out, points)
        print(f"resched baseline: {len(points)} points, "
              f"final accuracy {points[-1].accuracy:.4f}")
    else:  # early-exit
        if args.threshold is None:
            raise ConfigError("--threshold is required for early-exit mode")
        preds, evaluated, spent = eval_mod.early_exit(ens, test.x, args.threshold)
        acc = float(np.mean(preds == test.labels))
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write("threshold,mean_members_evaluated,mean_flops_fraction,accuracy\n")
            fh.write(f"{float(args.threshold)!r},{float(np.mean(evaluated))!r},"
                     f"{float(np.mean(spent) / teacher_cost)!r},{acc!r}\n")
        print(f"early exit at {args.threshold}: mean members {np.mean(evaluated):.2f}, "
              f"accuracy {acc:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    rows = distill_mod.read_history(args.history)
    ens = distill_mod.load_ensemble(args.ensemble)
    data_dir = Path(args.data)
    train = data_mod.load_dataset_csv(data_dir / "train.csv")
    g = _load_logits(data_dir, "train")
    report = eval_mod.verify_bound(rows, ens, train.x, g, args.g_inf)
    if args.out:
        eval_mod.save_bound_report(args.out, report)
    print(f"verify: {report.status} (measured {report.measured_sup_error:.6g} "
          f"vs bound {report.theorem_bound:.6g})")
    if report.status == "premise_violated":
        return EXIT_PREMISE
    return EXIT_OK if report.status == "pass" else EXIT_CLAIM


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensdistill",
                                     description="Distill a teacher network onto an "
                                                 "anytime ensemble of small students.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with an 80/20 split")
    p.add_argument("--dataset", required=True, choices=("ellipsoid", "cube"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="fit the teacher MLP on hard labels")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True, help="comma-separated hidden widths, e.g. 64,64")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=128)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="run the boosting loop against cached teacher logits")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--config", default=None, help="JSON run config; defaults used when omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--history", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="anytime curve, early-exit, or the resched baseline")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--mode", required=True, choices=("anytime", "early-exit", "resched"))
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="replay a run and check the convergence bound")
    p.add_argument("--history", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--g-inf", type=float, required=True, dest="g_inf")
    p.add_argument("--out", default=None, help="bound report JSON path")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        # residuals outgrew what the configured eta can absorb: the bounded-
        # magnitude premise of the convergence argument failed at runtime
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREMISE


if __name__ == "__main__":
    sys.exit(main())
