"""Command-line entry point ``dvmpc``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, RunConfig, apply_environment, load_config
from .harness import (ablate, build_environment, evaluate, export_running_cost_heatmap, export_trajectories,
                      first_success_iteration, load_actor_network, make_run_dir, train)
from .verification import SUITES, verify


def _config_near(checkpoint):
    """The resolved config of the run a checkpoint belongs to."""
    d = os.path.dirname(os.path.abspath(checkpoint))
    for _ in range(3):
        p = os.path.join(d, "config.yaml")
        if os.path.exists(p):
            return p
        d = os.path.dirname(d)
    return None


def _resolve_config(args):
    path = getattr(args, "config", None)
    if path is None and getattr(args, "checkpoint", None):
        path = _config_near(args.checkpoint)
    cfg = load_config(path) if path else apply_environment(RunConfig())
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None):
        updates["output_dir"] = args.out
    return cfg.with_updates(**updates) if updates else cfg


def _grid(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 100x100, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("grid sizes must be positive")
    return w, h


def cmd_train(args):
    cfg = _resolve_config(args)
    res = train(cfg)
    first = first_success_iteration(res.metrics, cfg.training.success_threshold)
    last = res.metrics[-1] if res.metrics else None
    print(f"run directory: {res.run_dir}")
    if last is not None:
        print(f"final success rate {last['success_rate']:.3f}, mean return {last['mean_return']:.4f}")
    print(f"first iteration reaching success {cfg.training.success_threshold}: {first}")
    return 0


def cmd_eval(args):
    cfg = _resolve_config(args)
    env = build_environment(cfg)
    net = load_actor_network(args.checkpoint, args.label)
    res = evaluate(net, env, cfg.mpc.build(), n=args.n)
    print(f"mean return {res.mean_return:.6f}, success rate {res.success_rate:.3f} over {len(res.returns)} starts")
    return 0


def cmd_ablate(args):
    cfg = _resolve_config(args)
    results, root = ablate(cfg)
    print(f"ablation directory: {root}")
    for (mode, H, seed), metrics in results.items():
        if isinstance(metrics, Exception):
            print(f"{mode} H={H:g} seed={seed}: failed ({metrics})")
        else:
            first = first_success_iteration(metrics, cfg.training.success_threshold)
            print(f"{mode} H={H:g} seed={seed}: first success iteration {first}")
    return 0


def cmd_export_heatmap(args):
    cfg = _resolve_config(args)
    env = build_environment(cfg)
    net = load_actor_network(args.checkpoint, args.label)
    out = args.output or os.path.join(make_run_dir(cfg, label="heatmap"), "heatmap.csv")
    export_running_cost_heatmap(net, env, args.t, args.grid, out)
    print(out)
    return 0


def cmd_export_trajectories(args):
    cfg = _resolve_config(args)
    env = build_environment(cfg)
    net = load_actor_network(args.checkpoint, args.label)
    out = args.output or os.path.join(make_run_dir(cfg, label="trajectories"), "trajectories")
    for p in export_trajectories(net, env, cfg.mpc.build(), out, n=args.n):
        print(p)
    return 0


def cmd_verify(args):
    options = {}
    if args.claimed_L is not None:
        options["theorem2"] = {"claimed_L": args.claimed_L}
    unknown = [s for s in args.suites if s not in SUITES]
    if unknown:
        print(f"unknown suites {unknown}; choose from {', '.join(SUITES)}", file=sys.stderr)
        return 2
    code, results = verify(args.suites, **options)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name} ({r.elapsed:.1f}s): {r.detail}")
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="dvmpc", description="Value-function MPC actor-critic and verification tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the actor-critic training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint from the configured start states")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--n", type=int, default=8)
    e.add_argument("--label", default="target")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train over cost modes x horizons x seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    h = sub.add_parser("export-heatmap", help="running cost on a position grid")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--t", type=float, required=True)
    h.add_argument("--grid", type=_grid, default=(100, 100))
    h.add_argument("--config")
    h.add_argument("--output")
    h.add_argument("--label", default="target")
    h.set_defaults(func=cmd_export_heatmap)

    x = sub.add_parser("export-trajectories", help="write evaluation trajectories as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--config")
    x.add_argument("--output")
    x.add_argument("--n", type=int, default=8)
    x.add_argument("--label", default="target")
    x.set_defaults(func=cmd_export_trajectories)

    v = sub.add_parser("verify", help=f"run verification suites ({', '.join(SUITES)})")
    v.add_argument("suites", nargs="*", metavar="suite")
    v.add_argument("--claimed-L", type=float, dest="claimed_L",
                   help="sup-norm used in the theorem2 bound (understate it for a negative control)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
