"""Command line interface: train, eval, passk, diagnose, sweep.

Every command prints JSON on stdout. Failures print one JSON object
``{"error": ..., "message": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import itertools
import json
import logging
import sys
import time
from pathlib import Path

from .config import load_config, to_ini
from .metrics import ERROR_KINDS, eval_instances, evaluate, pass_at_k, plot_curves
from .policy import FeatureMap, load_params
from .rollout import tree_to_dict
from .synthenv import ConfigError
from .trainer import TrainingAborted, default_out_dir, run_training

log = logging.getLogger("dualrl")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _config_for_params(args):
    """Config given on the command line, else the config.ini saved beside the params file."""
    path = args.config
    if path is None and getattr(args, "params", None):
        guess = Path(args.params).parent / "config.ini"
        if guess.is_file():
            path = guess
    return load_config(path, args.set or ())


def _load(args):
    cfg = _config_for_params(args)
    fmap = FeatureMap(cfg.env, cfg.features)
    params, meta = load_params(args.params)
    if params.weights.shape != (len(fmap.vocab), fmap.dim):
        raise ConfigError(
            f"params are {params.weights.shape[0]}x{params.weights.shape[1]} but the config's features "
            f"need {len(fmap.vocab)}x{fmap.dim}; pass the config used for training"
        )
    protocol = args.protocol or ("dual" if meta.get("algorithm", cfg.algorithm) == "prco" else "flat")
    return cfg, fmap, params, protocol


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# --- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set or ())
    out = Path(args.out) if args.out else default_out_dir() / f"{cfg.algorithm}-seed{cfg.master_seed}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(cfg))

    dump = open(args.dump_trees, "w") if args.dump_trees else None

    def sink(step, trees):
        for i, t in enumerate(trees):
            dump.write(json.dumps({"step": step, "slot": i, **tree_to_dict(t)}) + "\n")

    def progress(m):
        if not args.quiet and (m.step % 10 == 0 or m.eval_accuracy is not None):
            acc = "" if m.eval_accuracy is None else f" eval={m.eval_accuracy:.3f}"
            print(f"step {m.step:4d} solver_reward={m.mean_solver_reward:.3f}{acc}", file=sys.stderr)

    t0 = time.perf_counter()
    try:
        res = run_training(cfg, out, resume_from=args.resume, on_step=progress,
                           tree_sink=sink if dump else None)
    finally:
        if dump:
            dump.close()
    if args.plot and res.metrics:
        series = {"solver reward": [m.mean_solver_reward for m in res.metrics]}
        if cfg.algorithm == "prco":
            series["caption reward std"] = [m.caption_reward_std for m in res.metrics]
        plot_curves(series, out / "curves.svg", title=cfg.algorithm)
    _emit({
        "out_dir": str(out),
        "steps": len(res.metrics),
        "evals": [dataclasses.asdict(e) for e in res.evals],
        "final_accuracy": res.evals[-1].accuracy if res.evals else None,
        "seconds": round(time.perf_counter() - t0, 2),
    })
    return 0


def cmd_eval(args) -> int:
    cfg, fmap, params, protocol = _load(args)
    ev = eval_instances(args.eval_size, cfg.env)
    mode = "greedy" if args.n == 1 and args.temperature is None else "sampled"
    r = evaluate(params, fmap, ev, protocol=protocol, mode=mode, n=args.n,
                 temperature=args.temperature or 1.0, top_p=args.top_p,
                 image_visible_solver=not cfg.solver_image_never, seed=args.seed)
    _emit({"protocol": protocol, "mode": mode, "n": args.n, "accuracy": r.accuracy,
           "error_rates": r.error_rates, "instances": len(ev)})
    return 0


def cmd_passk(args) -> int:
    cfg, fmap, params, protocol = _load(args)
    ks = sorted({int(k) for k in args.k.split(",")})
    n = args.n or max(ks)
    if max(ks) > n:
        raise ConfigError(f"k={max(ks)} exceeds the {n} samples per question")
    ev = eval_instances(args.eval_size, cfg.env)
    r = evaluate(params, fmap, ev, protocol=protocol, mode="sampled", n=n,
                 temperature=args.temperature, top_p=args.top_p,
                 image_visible_solver=not cfg.solver_image_never, seed=args.seed)
    _emit({"protocol": protocol, "n": n, "temperature": args.temperature, "top_p": args.top_p,
           "pass_at_k": {str(k): pass_at_k(r.counts, k) for k in ks}})
    return 0


def cmd_diagnose(args) -> int:
    cfg, fmap, params, protocol = _load(args)
    ev = eval_instances(args.eval_size, cfg.env)
    r = evaluate(params, fmap, ev, protocol=protocol,
                 image_visible_solver=not cfg.solver_image_never)
    wrong = sum(r.categories[c.value] for c in ERROR_KINDS)
    if not args.json:
        print(f"{'category':<12}{'count':>7}{'rate':>9}{'share':>9}", file=sys.stderr)
        for c in ERROR_KINDS:
            n = r.categories[c.value]
            share = n / wrong if wrong else 0.0
            print(f"{c.value:<12}{n:>7}{n / r.n_answers:>9.3f}{share:>9.3f}", file=sys.stderr)
        print(f"{'correct':<12}{r.categories['correct']:>7}{r.accuracy:>9.3f}", file=sys.stderr)
    _emit({"protocol": protocol, "accuracy": r.accuracy, "counts": r.categories, "error_rates": r.error_rates})
    return 0


def read_grid(path) -> tuple[dict[str, list[str]], list[str]]:
    """``[grid]`` holds comma-separated values per key; ``[base]`` holds fixed overrides."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not Path(path).is_file():
        raise ConfigError(f"grid file not found: {path}")
    cp.read(path)
    if "grid" not in cp:
        raise ConfigError(f"{path}: missing [grid] section")
    grid = {k: [x.strip() for x in v.split(",") if x.strip()] for k, v in cp["grid"].items()}
    base = [f"{k}={v}" for k, v in cp["base"].items()] if "base" in cp else []
    return grid, base


def cmd_sweep(args) -> int:
    grid, base = read_grid(args.grid)
    keys = list(grid)
    out = Path(args.out) if args.out else default_out_dir() / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        sets = base + [f"{k}={v}" for k, v in zip(keys, combo)] + list(args.set or ())
        cfg = load_config(args.config, sets)
        name = "_".join(f"{k.rpartition('.')[2]}{v}" for k, v in zip(keys, combo))
        run_dir = out / name
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.ini").write_text(to_ini(cfg))
        res = run_training(cfg, run_dir)
        row = dict(zip(keys, combo))
        row["final_accuracy"] = res.evals[-1].accuracy if res.evals else None
        row["initial_accuracy"] = res.evals[0].accuracy if res.evals else None
        rows.append(row)
        if not args.quiet:
            print(f"{name}: {row['final_accuracy']}", file=sys.stderr)
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, keys + ["initial_accuracy", "final_accuracy"])
        w.writeheader()
        w.writerows(rows)
    _emit({"out_dir": str(out), "runs": rows})
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualrl", description="Dual-role RL with verifiable rewards on a synthetic task.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_params=True):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override, e.g. optim.learning_rate=0.1 (repeatable)")
        if needs_params:
            sp.add_argument("--params", required=True, help="params file written by train")
            sp.add_argument("--protocol", choices=("dual", "flat"),
                            help="default: dual for prco params, flat otherwise")
            sp.add_argument("--eval-size", type=int, default=500)
            sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("train", help="run one training job")
    common(sp, needs_params=False)
    sp.add_argument("--out", help="output directory (default: $DUALRL_OUT/<algorithm>-seed<n>)")
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.add_argument("--dump-trees", metavar="PATH", help="write every scored rollout tree as JSON lines")
    sp.add_argument("--plot", action="store_true", help="write curves.svg")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy of saved params")
    common(sp)
    sp.add_argument("--n", type=int, default=1, help="samples per question (1 = greedy)")
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--top-p", type=float, default=1.0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("passk", help="unbiased pass@k of saved params")
    common(sp)
    sp.add_argument("--k", default="1,2,4,8,16,32")
    sp.add_argument("--n", type=int, help="samples per question (default: max k)")
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--top-p", type=float, default=1.0)
    sp.set_defaults(func=cmd_passk)

    sp = sub.add_parser("diagnose", help="error-category table")
    common(sp)
    sp.add_argument("--json", action="store_true", help="skip the table on stderr")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("sweep", help="train over a grid of settings")
    common(sp, needs_params=False)
    sp.add_argument("--grid", required=True, help="INI with [grid] key = v1, v2, ... and optional [base]")
    sp.add_argument("--out")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        code = EXIT_CONFIG
        err = e
    except (TrainingAborted, ValueError, RuntimeError, OSError) as e:
        code = EXIT_RUNTIME
        err = e
    print(json.dumps({"error": type(err).__name__, "message": str(err), "command": args.command}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
