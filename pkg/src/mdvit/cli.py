"""Command-line entry point: one subcommand per pipeline stage.

Failures print a single JSON line to stderr and exit nonzero, so scripts can
parse the error kind and the stage that needs rerunning.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline as P
from .config import PRESETS
from .flops import cost, format_table


def _config(args) -> P.ExperimentConfig:
    cfg = P.ExperimentConfig.load(args.config) if args.config else P.ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, out=args.out, budget=args.budget, dims=args.dims,
                              criterion=args.criterion)


def _flops(args, cfg: P.ExperimentConfig) -> None:
    model = PRESETS[args.model]() if args.model else cfg.model
    print(format_table(args.model or "config model", cost(model)))
    if args.model is None:
        try:
            policy, _ = P.load_policy(cfg)
        except P.StageError:
            return
        print()
        print(format_table("searched policy", cost(model, policy)))


def _summary(report: P.RunReport) -> dict:
    return {"reduction": report.reduction, "pruned_macs": report.pruned_flops["total"],
            "budget": report.budget, "accuracy": report.accuracy}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mdvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "search", "prune", "finetune", "eval", "flops", "report", "defaults", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config (defaults used when omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")
        p.add_argument("--budget", type=float, help="MAC budget: fraction of baseline if <= 1, else absolute")
        p.add_argument("--dims", help="comma-separated subset of neuron,head,seq to search over")
        p.add_argument("--criterion", choices=P.CRITERIA)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "flops":
            p.add_argument("--model", choices=sorted(PRESETS), help="print a preset instead of the config model")
        if name in ("report", "run"):
            p.add_argument("--ablation", action="store_true",
                           help="also search each single dimension at the same budget")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        if args.seed is not None and args.seed < 0:
            raise ValueError(f"seed must be non-negative, got {args.seed}")
        cfg = _config(args)
        cmd = args.command
        if cmd == "defaults":
            print(P.ExperimentConfig().dumps(), end="")
        elif cmd == "flops":
            _flops(args, cfg)
        elif cmd == "pretrain":
            P.cmd_pretrain(cfg)
            print(json.dumps({"stage": "pretrain", "out": str(P._out(cfg, "pretrain"))}))
        elif cmd == "search":
            state = P.cmd_search(cfg)
            print(json.dumps({"stage": "search", "accuracy": state.best_value,
                              "policy": [float(x) for x in state.best_vector]}))
        elif cmd == "prune":
            _, plan = P.cmd_prune(cfg)
            print(json.dumps({"stage": "prune", "retained": plan.counts()}))
        elif cmd == "finetune":
            P.cmd_finetune(cfg)
            print(json.dumps({"stage": "finetune", "out": str(P._out(cfg, "finetune"))}))
        elif cmd == "eval":
            print(json.dumps(P.cmd_eval(cfg)["accuracy"]))
        elif cmd == "report":
            print(json.dumps(_summary(P.cmd_report(cfg, ablation=args.ablation))))
        elif cmd == "run":
            print(json.dumps(_summary(P.run_pipeline(cfg, ablation=args.ablation))))
    except P.StageError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "stage": args.command, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
