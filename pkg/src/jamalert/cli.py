"""Command line entry point.

    jamalert list
    jamalert validate --scenario accident1
    jamalert run --scenario accident1 --seed 3 --out out/accident1
    jamalert compare --scenario accident1 --controller fixed --controller alert_enabled

`--scenario` takes either a bundled name (see `jamalert list`) or a path to a
YAML file. `run` writes events.csv, summary.json, and figures into the output
directory; `compare` runs the same scenario and seed once per controller mode
and reports the delay deltas.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from . import engine, report, scenario as scenario_mod
from .scenario import Scenario, ValidationError


def resolve_scenario(name_or_path: str) -> Scenario:
    p = Path(name_or_path)
    if p.exists():
        return scenario_mod.load_scenario(p)
    return scenario_mod.load_bundled(name_or_path)


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--scenario", required=True, help="bundled name or YAML path")
    sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sp.add_argument("--variant", choices=("s1", "s2"), default=None)
    sp.add_argument("--horizon", type=float, default=None, help="override horizon [s]")
    sp.add_argument("--out", type=Path, default=None, help="output directory")


def cmd_run(args: argparse.Namespace) -> int:
    scn = resolve_scenario(args.scenario)
    world, summary = engine.run_scenario(
        scn,
        seed=args.seed,
        variant=args.variant,
        controller=args.controller,
        horizon_s=args.horizon,
    )
    out = args.out or Path("out") / f"{scn.name}-seed{world.seed}"
    report.write_events_csv(world.rec.events, out / "events.csv")
    report.write_summary_json(summary, out / "summary.json")
    if not args.no_figures:
        report.render_figures(world.rec, world.horizon, out)
    a = summary["alerts"]
    v = summary["vehicles"]
    print(f"scenario {scn.name} seed {world.seed} variant {world.variant}")
    print(f"  alerts: {a['total']} ({a['true']} true, {a['false']} false)")
    print(f"  vehicles: {v['finished']}/{v['spawned']} finished, mean delay {v['mean_delay_s']}")
    lat = summary["latencies"]["incident_to_alert_s"]
    if lat is not None:
        print(f"  incident to alert: {lat:.1f}s")
    print(f"  outputs in {out}")
    return 0


def _compare_worker(
    name_or_path: str,
    mode: str,
    seed: Optional[int],
    variant: Optional[str],
    horizon: Optional[float],
) -> dict:
    """One isolated comparison run; module level so it survives pickling."""
    scn = resolve_scenario(name_or_path)
    _, summary = engine.run_scenario(
        scn, seed=seed, variant=variant, controller=mode, horizon_s=horizon
    )
    return summary


def cmd_compare(args: argparse.Namespace) -> int:
    scn = resolve_scenario(args.scenario)
    controllers: List[str] = args.controller or ["fixed", "alert_enabled"]
    out = args.out or Path("out") / f"{scn.name}-compare"
    worker_args = [
        (args.scenario, mode, args.seed, args.variant, args.horizon) for mode in controllers
    ]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(args.jobs, len(controllers))) as pool:
            futures = [pool.submit(_compare_worker, *wa) for wa in worker_args]
            summaries = [f.result() for f in futures]
    else:
        summaries = [_compare_worker(*wa) for wa in worker_args]
    rows = []
    hashes = set()
    for mode, summary in zip(controllers, summaries):
        report.write_summary_json(summary, out / f"summary-{mode}.json")
        hashes.add(summary["config"]["hash"])
        rows.append((mode, summary["vehicles"]["mean_delay_s"], summary["alerts"]["total"]))
    assert len(hashes) == 1, "comparison runs must share one scenario configuration"
    comparison = {
        "scenario": scn.name,
        "seed": scn.seed if args.seed is None else args.seed,
        "config_hash": hashes.pop(),
        "runs": [
            {"controller": m, "mean_delay_s": d, "alerts": n} for m, d, n in rows
        ],
    }
    report.write_summary_json(comparison, out / "compare.json")
    if not args.no_figures:
        report.render_compare_figure([r[0] for r in rows], [r[1] for r in rows], out)
    for mode, delay, alerts in rows:
        print(f"  {mode:18s} mean delay {delay!s:>10} alerts {alerts}")
    base = rows[0][1]
    for mode, delay, _ in rows[1:]:
        if base is not None and delay is not None:
            print(f"  {mode} vs {rows[0][0]}: {delay - base:+.1f}s")
    print(f"  outputs in {out}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    scn = resolve_scenario(args.scenario)
    print(f"ok: {scn.name} ({len(scn.vehicles)} vehicles, {len(scn.segments)} segments)")
    print(f"config hash {scenario_mod.config_hash(scn)}")
    return 0


def cmd_list(_args: argparse.Namespace) -> int:
    for name in scenario_mod.bundled_names():
        scn = scenario_mod.load_bundled(name)
        print(f"{name:14s} {scn.description or '(no description)'}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="jamalert", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="simulate one scenario and write outputs")
    _add_common(sp)
    sp.add_argument(
        "--controller",
        choices=("fixed", "adaptive_baseline", "alert_enabled"),
        default=None,
        help="override every intersection's control mode",
    )
    sp.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("compare", help="same scenario and seed under several controllers")
    _add_common(sp)
    sp.add_argument(
        "--controller",
        action="append",
        choices=("fixed", "adaptive_baseline", "alert_enabled"),
        help="repeatable; default compares fixed and alert_enabled",
    )
    sp.add_argument(
        "--jobs",
        type=int,
        default=1,
        help="run the per-controller simulations in this many parallel processes",
    )
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("validate", help="load and validate a scenario file")
    sp.add_argument("--scenario", required=True)
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("list", help="list bundled scenarios")
    sp.set_defaults(fn=cmd_list)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
