"""Command-line front end: ``normalgraph {run, preset, certify, check}``.

Set ``NORMALGRAPH_THREADS`` to cap the threads used by the BLAS/OpenMP
back ends; it must be set before numpy is loaded, which is why the heavy
modules are imported inside :func:`main`.
"""

from __future__ import annotations

import argparse
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _cap_threads() -> str | None:
    raw = os.environ.get("NORMALGRAPH_THREADS")
    if not raw:
        return None
    if not raw.isdigit() or int(raw) < 1:
        return f"NORMALGRAPH_THREADS: expected a positive integer, got {raw!r}"
    for var in THREAD_VARS:
        os.environ[var] = raw
    return None


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normalgraph", description="Normal-graph surface diffusion and Willmore flows.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from an INI config")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (overrides [output] directory)")

    pr = sub.add_parser("preset", help="print, save or run a named preset")
    pr.add_argument("name")
    pr.add_argument("--emit-config", metavar="PATH", nargs="?", const="-",
                    help="write the preset config to PATH (stdout when omitted)")
    pr.add_argument("--run", action="store_true", help="run the preset")
    pr.add_argument("-o", "--output", help="output directory for --run")

    c = sub.add_parser("certify", help="certify the tubular radius of the initial surface of a config")
    c.add_argument("config")
    c.add_argument("-o", "--output", help="directory for certificate.txt")

    sub.add_parser("check", help="run the built-in invariant suite on small grids")
    return p


def _report_run(outcome) -> None:
    where = f" -> {outcome.directory}" if outcome.directory else ""
    print(f"reason: {outcome.reason} (exit {outcome.exit_code}){where}")
    if outcome.message:
        print(outcome.message, file=sys.stderr if outcome.exit_code else sys.stdout)


def main(argv=None) -> int:
    err = _cap_threads()
    if err:
        print(err, file=sys.stderr)
        return 1
    args = _parser().parse_args(argv)

    from pathlib import Path

    from .experiments import ConfigError, load_config, preset, run_experiment, to_ini

    if args.command == "check":
        from .checks import run_checks

        results = run_checks()
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return 0 if all(ok for _, ok, _ in results) else 1

    try:
        if args.command == "preset":
            cfg = preset(args.name)
        else:
            cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    if args.command == "preset":
        if args.emit_config or not args.run:
            text = to_ini(cfg)
            if args.emit_config in (None, "-"):
                sys.stdout.write(text)
            else:
                Path(args.emit_config).write_text(text)
        if not args.run:
            return 0
        outcome = run_experiment(cfg, args.output)
        _report_run(outcome)
        return outcome.exit_code

    if args.command == "run":
        outcome = run_experiment(cfg, args.output, base_dir=Path(args.config).parent)
        _report_run(outcome)
        return outcome.exit_code

    # certify
    from .certify import certify_offset_surface
    from .geometry import AdmissibilityError
    from .reference import SurfaceError

    try:
        surface = cfg.build_surface()
        rho = cfg.initial.field_values(surface, Path(args.config).parent)
        cert = certify_offset_surface(surface, rho)
    except (ConfigError, SurfaceError, AdmissibilityError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    report = cert.report()
    print(f"tubular certificate for {cfg.kind} {dict(cfg.params)} at resolution {cfg.resolution}")
    for key, val in report.items():
        print(f"  {key:>18}: {val}")
    outdir = Path(args.output or cfg.directory)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "certificate.txt", "w") as fh:
        for key, val in report.items():
            fh.write(f"{key} = {val!r}\n" if isinstance(val, float) else f"{key} = {val}\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
