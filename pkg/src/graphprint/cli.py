"""Command-line entry points.

Subcommands: gen-data, train, eval, grad-check, sweep. Exit codes:
0 success, 1 validation error, 2 runtime/numeric failure. Every command is
deterministic given its flags and input files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import (RunConfig, data_config_from_dict, run_config_from_dict)
from .errors import NumericError, ValidationError
from .model import ModelParams
from .pipeline import (GRADCHECK_TOLERANCE, evaluate, gradcheck_suite,
                       split_gallery_probes, sweep)
from .storage import (load_checkpoint, read_dataset, read_json, save_checkpoint,
                      write_dataset, write_epoch_log, write_metrics)
from .synth import gen_dataset, split_dataset
from .training import AdamW, train


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    return run_config_from_dict(read_json(path))


def cmd_gen_data(args) -> int:
    spec_doc = read_json(args.spec)
    if args.seed is not None:
        spec_doc = dict(spec_doc, seed=args.seed)
    spec = data_config_from_dict(spec_doc)
    records = gen_dataset(spec)
    write_dataset(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    records = read_dataset(args.data)
    train_records, _ = split_dataset(records, cfg.train.holdout)

    start_epoch = 0
    if args.resume:
        ckpt_cfg, params, opt_state, meta = load_checkpoint(args.resume)
        cfg = ckpt_cfg
        start_epoch = int(meta.get("epochs_done", 0))
        optimizer = AdamW(params.named_parameters(),
                          weight_decay=cfg.train.weight_decay)
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
        print(f"resuming from epoch {start_epoch}")
    else:
        params = ModelParams.init(cfg.model, cfg.train.seed)
        optimizer = AdamW(params.named_parameters(),
                          weight_decay=cfg.train.weight_decay)

    result = train(train_records, cfg, params=params, optimizer=optimizer,
                   start_epoch=start_epoch)
    meta = {"epochs_done": result.epochs_done, "global_step": result.global_step}
    save_checkpoint(args.out, cfg, result.params,
                    optimizer_state=optimizer.state_dict(), meta=meta)
    log_path = args.log or (args.out + ".log")
    write_epoch_log(log_path, [rec.to_dict() for rec in result.log])
    if result.aborted:
        print("training aborted on non-finite loss; last good state "
              f"written to {args.out}", file=sys.stderr)
        return 2
    final = result.log[-1].mean_loss if result.log else float("nan")
    print(f"trained {result.epochs_done} epochs; final mean loss {final:.6f}; "
          f"checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg, params, _, _ = load_checkpoint(args.checkpoint)
    records = read_dataset(args.data)
    gallery_n, probe_n = _parse_split(args.gallery_split)
    gallery, probes = split_gallery_probes(records, gallery_n, probe_n)
    ks = [int(k) for k in args.topk.split(",") if k]
    doc = evaluate(gallery, probes, cfg.model, params, args.far, ks)
    write_metrics(args.out, doc)
    print(f"tar@far={args.far}: {doc['tar_at_far']['tar']:.4f}  "
          f"eer: {doc['eer']:.4f}  "
          f"topk: {doc['topk']}  -> {args.out}")
    return 0


def _parse_split(text: str) -> tuple[int, int]:
    try:
        gallery_n, probe_n = (int(part) for part in text.split("/"))
    except ValueError as exc:
        raise ValidationError(
            f"--gallery-split must look like '3/1', got {text!r}") from exc
    if gallery_n < 1 or probe_n < 1:
        raise ValidationError("--gallery-split needs positive counts")
    return gallery_n, probe_n


def cmd_grad_check(args) -> int:
    results = gradcheck_suite(seed=args.seed, inject_fault=args.inject_fault)
    worst = 0.0
    for name, err in results:
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:>14s}: max relative error {err:.3e}  [{status}]")
        worst = max(worst, err)
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check failed: worst error {worst:.3e} "
              f">= {GRADCHECK_TOLERANCE}", file=sys.stderr)
        return 2
    print(f"all {len(results)} components below {GRADCHECK_TOLERANCE}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args.config)
    records = read_dataset(args.data)
    values = [int(v) for v in args.values.split(",") if v]
    if not values:
        raise ValidationError("--values must list at least one integer")
    rows = sweep(args.param, values, records, cfg, far_target=args.far)
    doc = {"param": args.param, "far": args.far, "rows": rows}
    write_metrics(args.out, doc)
    print(f"{'value':>8s} {'tar@far':>10s} {'eer':>8s}")
    for row in rows:
        print(f"{row['value']:>8d} {row['tar_at_far']:>10.4f} {row['eer']:>8.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphprint",
        description="Graph-based fingerprint embedding: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled dataset")
    p.add_argument("--spec", required=True, help="JSON data spec")
    p.add_argument("--out", required=True, help="output dataset (JSON lines)")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model end-to-end")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="RunConfig JSON (defaults otherwise)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--log", default=None, help="epoch log path (default: <out>.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--far", type=float, default=0.001)
    p.add_argument("--topk", default="1,5,10")
    p.add_argument("--gallery-split", default="3/1",
                   help="per-identity gallery/probe impression counts")
    p.add_argument("--out", required=True, help="metrics document path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true",
                   help="flip one gradient sign to verify checker sensitivity")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("sweep", help="train/evaluate across one hyperparameter")
    p.add_argument("--param", required=True, choices=("layers", "neighbors"))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--far", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
