"""Command line entry point: ``nflsim run|replay|compare|export``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ComparisonError, ConfigurationError, RunError
from .harness import (
    compare_runs,
    export,
    import_log,
    load_config,
    log_json,
    metrics_table,
    replay,
    run_scenario,
)


def _run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir or Path("runs") / cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    log = run_scenario(cfg, workers=args.workers)
    export(log, out / "run_log.json", "log")
    export(log, out / "metrics.csv", "table")
    fin = log.final
    print(f"{cfg.name}: rounds={len(log.rounds)} beta={fin.get('beta')!r} "
          f"local_acc={fin.get('local_acc')!r} central_acc={fin.get('central_acc')!r}")
    for ev in log.events:
        print(f"  round {ev['round']}: {ev['kind']}")
    print(f"wrote {out}")
    return 0


def _replay(args) -> int:
    same, fresh = replay(import_log(args.log), workers=args.workers)
    if args.out:
        Path(args.out).write_text(log_json(fresh))
    print("identical" if same else "MISMATCH")
    return 0 if same else 1


def _compare(args) -> int:
    logs = [import_log(p) for p in args.logs]
    names = [Path(p).parent.name or Path(p).stem for p in args.logs]
    table = compare_runs(logs, args.metric, names=names, window=args.window)
    sys.stdout.write(table.to_csv())
    return 0


def _export(args) -> int:
    log = import_log(args.log)
    if args.out:
        export(log, args.out, args.format)
    else:
        sys.stdout.write(metrics_table(log) if args.format == "table" else log_json(log))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nflsim", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="execute a scenario config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: config output_dir or runs/<name>)")
    r.add_argument("--workers", type=int, default=None, help="parallel client workers")
    r.set_defaults(func=_run)

    rp = sub.add_parser("replay", help="re-run a logged scenario and check it reproduces")
    rp.add_argument("log")
    rp.add_argument("--workers", type=int, default=None)
    rp.add_argument("--out", help="write the fresh log here")
    rp.set_defaults(func=_replay)

    c = sub.add_parser("compare", help="align one metric across several run logs")
    c.add_argument("logs", nargs="+")
    c.add_argument("--metric", default="local_acc")
    c.add_argument("--window", type=int, default=None)
    c.set_defaults(func=_compare)

    e = sub.add_parser("export", help="write a run log as a metrics table or JSON")
    e.add_argument("log")
    e.add_argument("--format", choices=("table", "log"), default="table")
    e.add_argument("--out")
    e.set_defaults(func=_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RunError as exc:
        print(f"nflsim: run failed in round {exc.round} during {exc.phase}: {exc.cause!r}", file=sys.stderr)
        return 2
    except (ConfigurationError, ComparisonError, OSError, ValueError) as exc:
        print(f"nflsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
