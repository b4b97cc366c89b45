"""Command line entry point: ``cosense run|train|batch``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import POLICIES, NumericalFailure, aggregate, load_config, run_batch, run_experiment, trained_q
from .sensing import TrainingError, save_checkpoint
from .simulator import ConfigError, OrderParseError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosense", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one policy for one seed")
    run.add_argument("--config", required=True)
    run.add_argument("--policy", choices=POLICIES, default="urbanhuro")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--ablation", choices=("reg", "nbr", "pen"), default=None)
    run.add_argument("--rvs", type=int, default=None, help="override workload.n_rvs")

    train = sub.add_parser("train", help="train the sensing Q-function and save a checkpoint")
    train.add_argument("--config", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--ablation", choices=("reg", "nbr", "pen"), default=None)

    batch = sub.add_parser("batch", help="policies x RV counts x seeds, with seed-averaged summary")
    batch.add_argument("--config", required=True)
    batch.add_argument("--out", required=True)
    batch.add_argument("--policies", default=",".join(POLICIES))
    batch.add_argument("--seeds", default="0,1,2,3,4")
    batch.add_argument("--rvs", default="25,50,100")
    batch.add_argument("--ablations", action="store_true", help="also run the three reward ablations")
    return p


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            res = run_experiment(cfg, args.policy, args.seed, args.out, args.workers, args.ablation, args.rvs)
            m = res.report["metrics"]
            print(f"{args.policy}: overdue {m['overdue_total']}, coverage {m['coverage_mean_hourly']:.1f} "
                  f"regions/h, courier income {m['courier_income_mean_hourly']:.2f}/h -> {args.out}")
        elif args.command == "train":
            q = trained_q(cfg, args.ablation)
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(q, args.out)
            print(f"saved checkpoint to {args.out}")
        else:
            pols = [p for p in args.policies.split(",") if p]
            bad = [p for p in pols if p not in POLICIES]
            if bad:
                raise ConfigError(f"unknown policies: {', '.join(bad)}")
            abl = (None, "reg", "nbr", "pen") if args.ablations else (None,)
            rows = run_batch(cfg, pols, _ints(args.seeds), _ints(args.rvs), abl, args.out)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            summary = [{"policy": k[0], "ablation": k[1], "n_rvs": k[2], **v} for k, v in aggregate(rows).items()]
            with open(out / "batch.json", "w") as fh:
                json.dump({"runs": rows, "summary": summary}, fh, indent=2, sort_keys=True)
            for s in summary:
                name = s["policy"] + (f"-{s['ablation']}" if s["ablation"] else "")
                print(f"{name:14s} rv={s['n_rvs']:4d} overdue {s['overdue']:8.1f} coverage {s['coverage']:7.1f} "
                      f"income {s['income']:7.2f}")
    except (ConfigError, OrderParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, TrainingError, FloatingPointError) as exc:
        where = getattr(exc, "checkpoint", None)
        print(f"numerical failure: {exc}" + (f" (state saved to {where})" if where else ""), file=sys.stderr)
        return EXIT_NUMERIC
    return 0
