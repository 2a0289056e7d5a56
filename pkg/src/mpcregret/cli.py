"""Command line entry point: ``mpcregret run|replay|validate|constants|generate``.

Exit codes: 0 success, 1 configuration or usage error, 2 failed cells (or a
replay mismatch / failed validation).
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .errors import ConfigError, LQRError
from .harness import ExperimentConfig, config_from_dict, emit_csv, load_config, parse_row, run_cell, run_sweep
from .model import generate_instance, read_instance, save_instance, validate_instance
from .riccati import stability_constants

EXIT_OK, EXIT_CONFIG, EXIT_CELLS = 0, 1, 2


def _config(args, **overrides):
    if getattr(args, "config", None):
        return load_config(args.config, **overrides)
    return config_from_dict({}, **overrides)


def cmd_run(args):
    cfg = _config(args, out=args.out, jobs=args.jobs, seed_offset=args.seed_offset)
    result = run_sweep(cfg)
    emit_csv(result, cfg.out)
    n_err = len(result.errors)
    print(f"wrote {len(result.rows)} rows to {cfg.out}" + (f" ({n_err} failed, see {cfg.out}.errors)" if n_err else ""))
    return EXIT_CELLS if n_err else EXIT_OK


def cmd_replay(args):
    cfg = _config(args)
    rec = parse_row(args.row)
    row, formula = run_cell(cfg, rec["seed"], rec["W"], rec["snr"], with_formula=True)
    if row.error:
        print(f"cell failed: {row.error}")
        return EXIT_CELLS
    tol = cfg.tolerances
    scale = 1 + abs(row.J_star)
    print(f"seed={row.seed} W={row.W} snr={row.snr:.17g}")
    print(f"J_pi={row.J_pi:.17g}")
    print(f"J_star={row.J_star:.17g}")
    print(f"regret={row.regret:.17g}")
    print(f"regret_formula={formula:.17g}")
    ok = abs(row.regret - rec["regret"]) <= tol.rtol * scale or (np.isnan(rec["regret"]) and np.isnan(row.regret))
    print(f"recorded_regret={rec['regret']:.17g} {'match' if ok else 'MISMATCH'}")
    return EXIT_OK if ok else EXIT_CELLS


def _instances(args):
    if getattr(args, "instance", None):
        return [(args.instance, read_instance(args.instance))]
    cfg = _config(args)
    seeds = [args.seed] if getattr(args, "seed", None) is not None else list(cfg.effective_seeds)
    return [(f"seed {s}", generate_instance(s, cfg.T, cfg.profile)) for s in seeds]


def cmd_validate(args):
    bad = 0
    for label, (sys_, costs, bounds, _trace) in _instances(args):
        rep = validate_instance(sys_, costs, bounds)
        print(f"# {label}: {'ok' if rep.ok else 'FAILED'}")
        print(rep)
        bad += not rep.ok
    return EXIT_CELLS if bad else EXIT_OK


def cmd_constants(args):
    label, (sys_, _costs, bounds, _trace) = _instances(args)[0]
    sc = stability_constants(sys_, bounds)
    print(f"# {label}")
    print(f"tau = {sc.tau:.17g}")
    print(f"rho = {sc.rho:.17g}")
    print(f"gamma = {sc.gamma:.17g}")
    print("P_max =")
    for row in sc.P_max:
        print("  " + " ".join(format(v, ".17g") for v in row))
    return EXIT_OK


def cmd_generate(args):
    cfg = _config(args)
    T = args.T or cfg.T
    save_instance(args.out, *generate_instance(args.seed, T, cfg.profile), seed=args.seed)
    print(f"wrote instance seed={args.seed} T={T} to {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mpcregret", description="Dynamic regret of MPC with disturbance forecasts.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a (seed, W, snr) sweep and write the CSV")
    r.add_argument("--config", help="JSON experiment config")
    r.add_argument("--out", help="output CSV (overrides the config)")
    r.add_argument("--jobs", type=int, help="worker processes")
    r.add_argument("--seed-offset", type=int, dest="seed_offset", help="added to every seed")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("replay", help="recompute one CSV row from its seed")
    rp.add_argument("--row", required=True, help="a data line of a sweep CSV")
    rp.add_argument("--config", help="config the row came from (default: built-in defaults)")
    rp.set_defaults(func=cmd_replay)

    v = sub.add_parser("validate", help="check instance invariants")
    g = v.add_mutually_exclusive_group()
    g.add_argument("--instance", help="instance JSON file")
    g.add_argument("--config", help="validate the instances of every seed in a config")
    v.add_argument("--seed", type=int, help="only this seed")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("constants", help="print tau, rho, gamma and P_max")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--instance", help="instance JSON file")
    g.add_argument("--config", help="use the profile of this config")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_constants)

    gen = sub.add_parser("generate", help="write a random instance to JSON")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--T", type=int)
    gen.add_argument("--config", help="take T and the profile from this config")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LQRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CELLS
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
