"""Command-line entry point: run simulations from config files, evaluate
the closed forms, emit sweep tables, and self-check the numeric oracles.

All randomness flows from configured seeds; no environment entropy is
consulted anywhere.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import analysis, engine


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise SystemExit(f"error: config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise SystemExit(f"error: {path}:{e.lineno}:{e.colno}: {e.msg}")


def cmd_simulate(args: argparse.Namespace) -> int:
    raw = _load_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.slots is not None:
        raw["slots"] = args.slots
    try:
        config = engine.SimConfig.from_dict(raw)
    except (ValueError, KeyError) as e:
        raise SystemExit(f"error: invalid config {args.config}: {e}")
    log = engine.run(config)
    m = engine.metrics(log)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(
            json.dumps({"config_path": args.config, "config": config.to_dict(),
                        "schema": engine.SCHEMA}, sort_keys=True, indent=2) + "\n"
        )
        (out / "runlog.jsonl").write_text(log.to_jsonl())
        (out / "summary.json").write_text(
            json.dumps(log.summary, sort_keys=True, indent=2) + "\n"
        )
    if args.format == "structured":
        print(json.dumps(m, sort_keys=True))
    else:
        print(f"slots: {config.slots}  final score: {m['final_score']}")
        for pid, share in sorted(m["shares"].items()):
            print(f"miner {pid}: chain share {share:.4f}")
        for pid, ratio in sorted(m["rate_ratio"].items()):
            line = f"miner {pid}: announce-rate ratio {ratio:.4f}" if ratio else f"miner {pid}: no honest baseline"
            part = next(p for p in config.participants if str(p["id"]) == pid)
            if part.get("kind") == "unas":
                d = int(part.get("params", {}).get("depth", 1))
                lam = sum(int(p["coins"]) for p in config.participants)
                bound, _ = analysis.unas_rate_bound(d, lam)
                line += f"  (achievable bound {bound:.4f})"
            print(line)
        print(f"detector events: {m['detector_events']}  max reorg depth: {m['max_reorg_depth']}")
        if m["withhold_episodes"]:
            print(f"withhold episodes: {m['withhold_episodes']}")
        if m["double_spend"]:
            print(f"double spend: {m['double_spend']}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    try:
        if args.what == "race":
            value = analysis.race_probability(analysis.RaceQuery(args.a, int(args.b)))
            label = f"race_probability(alpha={args.a}, ell={int(args.b)})"
        elif args.what == "window":
            value = analysis.min_safe_window(args.a, args.b)
            label = f"min_safe_window(alpha={args.a}, tolerance={args.b})"
        elif args.what == "threshold":
            value = analysis.lifetime_threshold(int(args.a), args.b)
            label = f"lifetime_threshold(blocks={int(args.a)}, failure={args.b})"
        elif args.what == "unas-bound":
            mult, defend = analysis.unas_rate_bound(int(args.a), int(args.b))
            print(json.dumps({"multiplier": mult, "must_defend": defend}, sort_keys=True))
            return 0
        else:  # fork-trajectory
            x, y = analysis.exp_fork_trajectory(args.a, args.b, args.c, int(args.d))
            print(json.dumps({"subtree": x, "honest": y}, sort_keys=True))
            return 0
    except (ValueError, analysis.NoSafeWindow) as e:
        raise SystemExit(f"error: {e}")
    if args.format == "structured":
        print(json.dumps({"query": label, "value": value}, sort_keys=True))
    else:
        print(f"{label} = {value}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    n = int(round((args.alpha_max - args.alpha_min) / args.step)) + 1
    alphas = [round(args.alpha_min + i * args.step, 12) for i in range(n)]
    rows = analysis.sweep_alpha(args.tolerance, alphas)
    lines = ["alpha\tell_star\tp_at_ell_star"]
    for r in rows:
        if r["safe"]:
            lines.append(f"{r['alpha']}\t{r['ell_star']}\t{r['p_at_ell_star']:.6e}")
        else:
            lines.append(f"{r['alpha']}\tunsafe-at-any-window\t-")
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as e:
            raise SystemExit(f"error: cannot write {args.out}: {e}")
        Path(args.out).with_suffix(".json").write_text(json.dumps(rows, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text)
    return 0


def cmd_oracle_check(args: argparse.Namespace) -> int:
    checks = []

    def check(name: str, ok: bool, detail: str = "") -> None:
        checks.append((name, ok, detail))

    for ell in range(1, 5):
        for alpha in (0.1, 0.25, 0.4):
            exact = analysis.exhaustive_race(alpha, ell)
            closed = analysis.race_probability(analysis.RaceQuery(alpha, ell))
            check(
                f"exhaustive alpha={alpha} ell={ell}",
                abs(exact - closed) <= 1e-12,
                f"|{exact} - {closed}|",
            )
    sym_ok = all(
        abs(analysis.race_probability(analysis.RaceQuery(0.5, ell)) - 0.5) <= 1e-12
        for ell in range(1, 101)
    )
    check("symmetry at alpha=0.5", sym_ok)
    p_hat, se = analysis.monte_carlo_race(0.3, 4, args.trials, args.seed)
    closed = analysis.race_probability(analysis.RaceQuery(0.3, 4))
    check("monte-carlo alpha=0.3 ell=4", abs(p_hat - closed) <= 4 * se + 1e-9,
          f"{p_hat} vs {closed} (se {se:.2e})")
    res = engine.run_double_spend_trials(3, 10, 2, max(500, args.trials // 50), args.seed)
    closed = analysis.race_probability(analysis.RaceQuery(0.3, 2))
    check("engine race z=2 alpha=0.3",
          abs(res["frequency"] - closed) <= 4 * res["stderr"] + 1e-9,
          f"{res['frequency']} vs {closed}")

    failed = [c for c in checks if not c[1]]
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f"  {detail}" if detail and not ok else ""))
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stakesim", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    sim = sub.add_parser("simulate", help="run a simulation from a config file")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--slots", type=int)
    sim.add_argument("--out")
    sim.add_argument("--format", choices=("text", "structured"), default="text")
    sim.set_defaults(func=cmd_simulate)

    an = sub.add_parser("analyze", help="evaluate a closed form")
    an.add_argument("what", choices=("race", "window", "threshold", "unas-bound", "fork-trajectory"))
    an.add_argument("a", type=float)
    an.add_argument("b", type=float)
    an.add_argument("c", type=float, nargs="?", default=0.0)
    an.add_argument("d", type=float, nargs="?", default=0.0)
    an.add_argument("--format", choices=("text", "structured"), default="text")
    an.set_defaults(func=cmd_analyze)

    sw = sub.add_parser("sweep", help="stake-vs-safe-window table")
    sw.add_argument("--tolerance", type=float, required=True)
    sw.add_argument("--alpha-min", type=float, default=0.05)
    sw.add_argument("--alpha-max", type=float, default=0.45)
    sw.add_argument("--step", type=float, default=0.05)
    sw.add_argument("--out")
    sw.set_defaults(func=cmd_sweep)

    oc = sub.add_parser("oracle-check", help="cross-check oracles against closed forms")
    oc.add_argument("--seed", type=int, default=7)
    oc.add_argument("--trials", type=int, default=100_000)
    oc.set_defaults(func=cmd_oracle_check)
    return ap


def main(argv: "list[str] | None" = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
