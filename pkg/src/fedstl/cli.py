"""Batch command-line front end.

Subcommands: monitor (boolean + robustness of a formula on a CSV trace),
mine (fit one template row to a CSV trace), train (full federated run,
report JSON + checkpoints), bench (timing tables).

Exit codes: 0 success (monitor: satisfied), 1 runtime error or unsatisfied,
2 configuration/usage error.  Progress goes to stderr; data to stdout/files.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, from_preset, load_config
from .datagen import DataGenError, generate, load_csv
from .federation import FederationError, run_experiment
from .mining import (
    MiningError,
    builtin_templates,
    infer_tight,
    mined_property_from_text,
)
from .models import save_checkpoint
from .stl import ParseError, TraceError, eval_bool, robustness

log = logging.getLogger("fedstl.cli")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _fmt_rho(value: float) -> str:
    if math.isinf(value):
        return "+inf" if value > 0 else "-inf"
    return str(value)


def cmd_monitor(args) -> int:
    formula = mined_property_from_text(Path(args.formula).read_text())
    trace = load_csv(args.trace)
    sat = eval_bool(formula, trace, args.at)
    rho = robustness(formula, trace, args.at)
    print(f"sat={'true' if sat else 'false'} rho={_fmt_rho(rho)}")
    return EXIT_OK if sat else EXIT_RUNTIME


def cmd_mine(args) -> int:
    trace = load_csv(args.trace)
    window_len = args.window_len if args.window_len else trace.length
    templates = builtin_templates(
        trace.schema, horizon=trace.length, window_len=window_len, rows=[args.row]
    )
    mined = infer_tight(templates[0], [trace], args.tol)
    print(mined.to_text())
    return EXIT_OK


def _resolve_config(args) -> RunConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = from_preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.threads is not None:
        overrides["threads"] = args.threads
    if overrides:
        cfg = replace(cfg, **overrides).validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    datasets, _labels = generate(cfg.gen_spec())
    report, state = run_experiment(datasets, cfg.model_arch(), cfg.fed_config(), cfg.method)
    report["config"] = cfg.to_dict()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    if cfg.method == "fedstl":
        prop_dir = out / "properties"
        prop_dir.mkdir(exist_ok=True)
        for client in state.clients:
            save_checkpoint(client.model, ckpt_dir / f"client_{client.id}.ckpt")
            if client.mined:
                text = "\n".join(m.to_text() for m in client.mined) + "\n"
                (prop_dir / f"client_{client.id}.stl").write_text(text)
        for cluster in state.clusters:
            save_checkpoint(cluster.model(state.arch), ckpt_dir / f"cluster_{cluster.id}.ckpt")
    else:
        save_checkpoint(state.global_model, ckpt_dir / "global.ckpt")
    log.info("report written to %s", report_path)
    print(str(report_path))
    return EXIT_OK


def _time_mining(templates, traces, repeat=3) -> float:
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for tmpl in templates:
            infer_tight(tmpl, traces)
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    datasets, _ = generate(cfg.gen_spec())
    client = datasets[0]
    traces = client.train.target_traces()[: cfg.sample_windows]
    horizon = cfg.output_len
    # the configured template set drives the table; an empty set is an empty table
    rows_avail = [r for r in cfg.templates if cfg.n_vars >= 2 or r not in (4, 6)]

    print("per-template mining time (seconds, one client sample)")
    print(f"{'row':>4}  {'seconds':>10}")
    for row in rows_avail:
        templates = builtin_templates(
            client.schema, horizon, window_len=cfg.window_len, rows=[row]
        )
        try:
            secs = _time_mining(templates, traces, repeat=2)
        except MiningError:
            continue
        print(f"{row:>4}  {secs:>10.4f}")

    print()
    print("mining time vs formula count (row 1 instances)")
    print(f"{'formulas':>9}  {'seconds':>10}")
    if rows_avail:
        base = builtin_templates(client.schema, horizon, window_len=cfg.window_len, rows=[1])
        for count in (5, 10, 15):
            secs = _time_mining(base * count, traces, repeat=1)
            print(f"{count:>9}  {secs:>10.4f}")

    print()
    print("per-cluster round time (seconds)")
    from .federation import build_federation, run_round

    fed_cfg = cfg.fed_config()
    state = build_federation(datasets, cfg.model_arch(), fed_cfg)
    t0 = time.perf_counter()
    run_round(state)
    total = time.perf_counter() - t0
    active = sum(1 for c in state.clusters if c.members) or 1
    print(f"{'clusters':>9}  {'seconds':>10}")
    print(f"{active:>9}  {total / active:>10.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedstl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("monitor", help="evaluate a formula file against a CSV trace")
    m.add_argument("formula", help="formula file (one conjunct per line, '#' comments)")
    m.add_argument("trace", help="CSV trace: header of variable names, one row per step")
    m.add_argument("--at", type=int, default=0, help="evaluation time step (default 0)")
    m.set_defaults(fn=cmd_monitor)

    mi = sub.add_parser("mine", help="fit one template row to a CSV trace")
    mi.add_argument("trace")
    mi.add_argument("--row", type=int, required=True, help="template row 1..7")
    mi.add_argument("--tol", type=float, default=None)
    mi.add_argument(
        "--window-len", type=int, default=0,
        help="window length for windowed rows (default: whole trace)",
    )
    mi.set_defaults(fn=cmd_mine)

    for name, fn in (("train", cmd_train), ("bench", cmd_bench)):
        t = sub.add_parser(name)
        t.add_argument("--config", help="key = value config file")
        t.add_argument("--preset", help="named preset (desk20, desk20-fedavg, desk20-appendix)")
        t.add_argument("--seed", type=int, default=None)
        t.add_argument("--out", default=None)
        t.add_argument("--threads", type=int, default=None)
        t.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, TraceError, MiningError, DataGenError, FederationError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
