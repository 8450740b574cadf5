"""Command-line entry point: ``coopvideo {sweep,run,price,oracle}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time

import numpy as np

from .io import PRICE_COLUMNS, OutputError, emit_outputs
from .sim import (
    SWEEP_COLUMNS,
    TRACE_COLUMNS,
    ConfigError,
    SimConfig,
    build_topology,
    plan_users,
    run_episode,
    sweep_distance,
)

log = logging.getLogger("coopvideo")


def _config(args) -> SimConfig:
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.slots is not None:
        if args.command == "sweep":
            changes["sweep"] = dataclasses.replace(cfg.sweep, n_slots=args.slots)
        else:
            changes["n_slots"] = args.slots
    try:
        return dataclasses.replace(cfg, **changes) if changes else cfg
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_sweep(cfg, args):
    rows, direct = sweep_distance(cfg, with_direct=True)
    summary = {"config": cfg.to_dict(), "rows": rows,
               "direct": [direct[d] for d in sorted(direct)]}
    return emit_outputs(args.out_dir, "sweep", SWEEP_COLUMNS, rows, summary, args.format)


def cmd_run(cfg, args):
    res = run_episode(cfg, log_protocol=args.protocol_log)
    summary = res.stats.summary()
    summary["config"] = cfg.to_dict()
    paths = emit_outputs(args.out_dir, "run", TRACE_COLUMNS, res.trace, summary, args.format)
    paths += emit_outputs(args.out_dir, "price", PRICE_COLUMNS, res.stats.price_history, None,
                          args.format)
    if args.protocol_log:
        path = os.path.join(args.out_dir, "protocol.log")
        try:
            with open(path, "w") as fh:
                fh.write("slot\tstep\tkind\tsender\trelays\tpayload\n")
                fh.writelines(line + "\n" for line in res.protocol_log)
        except OSError as exc:
            raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
        paths.append(path)
    return paths


def cmd_price(cfg, args):
    rng = np.random.default_rng(cfg.seed)
    topo_rng, plan_rng = rng.spawn(5)[:2]
    plans, price = plan_users(cfg, build_topology(cfg, topo_rng), plan_rng)
    summary = {
        "price": price.price,
        "converged": price.converged,
        "iterations": price.iterations,
        "demands": price.demands,
        "budget": 1.0 / (1.0 - cfg.alpha),
        "rate_pmfs": [{"bins_bits_per_symbol": (p.model.rate_pmf.bins * cfg.phy.symbol_period).tolist(),
                       "probabilities": p.model.rate_pmf.probabilities.tolist()} for p in plans],
        "config": cfg.to_dict(),
    }
    return emit_outputs(args.out_dir, "price", PRICE_COLUMNS, price.history, summary, args.format)


def cmd_oracle(cfg, args):
    from .oracle import random_oracle_instances

    rows = random_oracle_instances(args.instances, cfg.seed)
    cols = ("instance", "alpha", "n_states", "n_channels", "augmented", "opportunistic", "gap")
    worst = max(abs(r["gap"]) for r in rows)
    summary = {"instances": len(rows), "max_abs_gap": worst, "passed": bool(worst <= 1e-8)}
    paths = emit_outputs(args.out_dir, "oracle", cols, rows, summary, args.format)
    if worst > 1e-8:
        log.error("oracle gap %.3g exceeds 1e-8", worst)
    return paths


COMMANDS = {"sweep": cmd_sweep, "run": cmd_run, "price": cmd_price, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopvideo",
                                description="Cooperative video uplink simulator.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "sweep": "single-source statistics over distance and xi",
        "run": "multi-user closed-loop episode",
        "price": "offline price and policy computation only",
        "oracle": "check opportunistic cooperation against the explicit-choice MDP",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", help="JSON config file (defaults are used when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", default="out")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--slots", type=int, help="override the slot count")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "run":
            sp.add_argument("--protocol-log", action="store_true",
                            help="also write the per-slot handshake log")
        if name == "oracle":
            sp.add_argument("--instances", type=int, default=200)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _config(args)
        paths = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return 3
    for path in paths:
        print(path)
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
