"""Command-line entry point.

Subcommands: `train` (one configured run), `experiment1` (weight-scale
sweep), `experiment2` (multi-task interference), `verify` (invariant
battery), `spectra` (one-shot operator SVD on a saved snapshot).

Exit codes: 0 success, 2 configuration error, 3 divergence during training,
4 verification failure. Every command writes only inside its --out directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


def _add_train(sub):
    p = sub.add_parser("train", help="run one training config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def _add_experiment1(sub):
    p = sub.add_parser("experiment1", help="weight-scale sweep on memory-pro")
    p.add_argument("--out", required=True)
    p.add_argument("--g", default="0.5,1.5,2.5")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--h", type=int, default=64, dest="H")
    p.add_argument("--max-iters", type=int, default=4000)
    p.add_argument("--batch-size", type=int, default=200)
    p.add_argument("--jobs", type=int, default=1)


def _add_experiment2(sub):
    p = sub.add_parser("experiment2", help="four-task interference analysis")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--h", type=int, default=64, dest="H")
    p.add_argument("--max-iters", type=int, default=4000)
    p.add_argument("--snapshot-every", type=int, default=50)
    p.add_argument("--jobs", type=int, default=1)


def _add_verify(sub):
    p = sub.add_parser("verify", help="run the invariant battery")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--suite", default="all", choices=["all"])


def _add_spectra(sub):
    p = sub.add_parser("spectra", help="operator SVD of a saved snapshot")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True, help="snapshot path base (no extension)")
    p.add_argument("--out", required=True)
    p.add_argument("--operator", default="k", choices=["k", "p", "pkp"])
    p.add_argument("--axes", default="trial,unit")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)


def _cmd_train(args) -> int:
    from .config import ConfigError, load_config
    from .runs import run_train
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = run_train(cfg, args.out)
    if result["diverged"]:
        print("training diverged (partial outputs written)", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _cmd_experiment1(args) -> int:
    from .experiments import experiment1
    g_list = tuple(float(v) for v in args.g.split(","))
    seeds = tuple(int(v) for v in args.seeds.split(","))
    rows = experiment1(args.out, g_list=g_list, seeds=seeds, H=args.H,
                       max_iters=args.max_iters, batch_size=args.batch_size,
                       jobs=args.jobs)
    print(json.dumps({"runs": len(rows)}, sort_keys=True))
    return EXIT_OK


def _cmd_experiment2(args) -> int:
    from .experiments import experiment2
    seeds = tuple(int(v) for v in args.seeds.split(","))
    summaries = experiment2(args.out, seeds=seeds, H=args.H,
                            max_iters=args.max_iters,
                            snapshot_every=args.snapshot_every, jobs=args.jobs)
    print(json.dumps(summaries, sort_keys=True))
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .verify import run_verification
    report = run_verification()
    text = json.dumps(report, sort_keys=True, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)
    return EXIT_OK if report["all_passed"] else EXIT_VERIFY


def _cmd_spectra(args) -> int:
    from .config import ConfigError, build_model, build_readout, build_task, load_config
    from .kpf1 import write_kpf1
    from .operators import average, make_k, make_p, make_pkp
    from .runs import load_snapshot
    from .spectral import top_svd
    from .tasks import gen_batch, noise_free
    try:
        cfg = load_config(args.config)
        axes = tuple(a for a in args.axes.split(",") if a)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    model, params_like = build_model(cfg)
    W_out_like, _ = build_readout(cfg)
    params, W_out, b_out = load_snapshot(args.params, model, params_like, W_out_like)
    spec = build_task(cfg)
    batch = gen_batch(noise_free(spec), cfg["train"]["eval_size"],
                      seed=np.random.SeedSequence([cfg["seed"], 11]))
    trace = model.forward(params, batch.inputs)
    build = {"k": make_k, "p": make_p, "pkp": make_pkp}[args.operator]
    op = build(trace)
    if axes:
        op = average(op, axes)
    summary = top_svd(op, args.k, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, f"spectra_{args.operator}.json"), "w") as fh:
        json.dump(summary.to_dict(), fh, sort_keys=True, indent=1)
    if summary.singular_functions:
        funcs = np.stack(summary.singular_functions)
        write_kpf1(os.path.join(args.out, f"functions_{args.operator}.kpf"), funcs, op.dt)
    print(json.dumps({"operator": args.operator,
                      "effective_rank_95": summary.effective_rank_95},
                     sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gdflow",
        description="Operator-level analysis of gradient-descent learning in "
                    "recurrent models")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_experiment1(sub)
    _add_experiment2(sub)
    _add_verify(sub)
    _add_spectra(sub)
    args = parser.parse_args(argv)
    handler = {
        "train": _cmd_train,
        "experiment1": _cmd_experiment1,
        "experiment2": _cmd_experiment2,
        "verify": _cmd_verify,
        "spectra": _cmd_spectra,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
