"""Command line entry point: ``viewbayes <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 degenerate or
inconsistent input, 4 file-system error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import edm, harness
from .codec import FixedPointCodec, interleave_decode_decimal, interleave_encode
from .errors import (ConfigError, DegenerateInput, EffectiveSampleCollapse,
                     InconsistentDistances, MalformedString, OutOfRange)

EXIT_CONFIG, EXIT_DEGENERATE, EXIT_IO = 2, 3, 4


def _digits(text):
    try:
        p, q = text.split(".")
        return int(p), int(q)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected P.Q, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewbayes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a paired experiment and write a report")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", help="output directory (default: config output_path or .)")
    sim.add_argument("--format", choices=("csv", "json"), default="json")
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--timing", action="store_true", help="include wall times in JSON")

    rec = sub.add_parser("reconstruct", help="embed points from a distance matrix CSV")
    rec.add_argument("--matrix", required=True)
    rec.add_argument("--dim", type=int, required=True)
    rec.add_argument("--method", choices=("incremental", "spectral"), default="incremental")
    rec.add_argument("--sidecar", help="write {quality, dimension, degenerate} JSON here")

    cmp_ = sub.add_parser("compare-observers", help="print the decision agreement matrix")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--seed", type=int)
    cmp_.add_argument("--jobs", type=int, default=1)

    inter = sub.add_parser("interleave", help="digit-interleave vectors from stdin")
    mode = inter.add_mutually_exclusive_group(required=True)
    mode.add_argument("--encode", action="store_true")
    mode.add_argument("--decode", action="store_true")
    inter.add_argument("--digits", type=_digits, required=True, help="P.Q digit counts")
    inter.add_argument("--offset", type=float, default=0.0)
    return parser


def _summary(report) -> str:
    lines = [f"trials: {report.n_trials}"]
    for name in report.observers:
        e = report.error_rates[name]
        lines.append(f"{name:>12}  error {e['rate']:.4f}  95% CI [{e['ci_low']:.4f}, {e['ci_high']:.4f}]")
    return "\n".join(lines)


def _agreement_table(report) -> str:
    names = report.observers
    width = max(len(n) for n in names) + 2
    out = ["".rjust(width) + "".join(n.rjust(width) for n in names)]
    for a in names:
        out.append(a.rjust(width) + "".join(f"{report.agreement[a][b]:.4f}".rjust(width)
                                            for b in names))
    return "\n".join(out)


def cmd_simulate(args) -> int:
    config = harness.load_config(args.config, master_seed=args.seed)
    out = Path(args.out or config.output_path or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: {exc.strerror or exc}") from exc
    report = harness.run_experiment(config, jobs=args.jobs)
    path = harness.write_report(report, args.format, out / f"report.{args.format}",
                                include_timing=args.timing)
    print(_summary(report))
    print(f"wrote {path}")
    return 0


def cmd_reconstruct(args) -> int:
    try:
        d = np.loadtxt(args.matrix, delimiter=",", ndmin=2)
    except OSError as exc:
        raise OSError(f"{args.matrix}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{args.matrix}: {exc}") from exc
    method = edm.reconstruct_incremental if args.method == "incremental" else edm.reconstruct_spectral
    try:
        emb = method(d, args.dim)
    except DegenerateInput:
        _sidecar(args.sidecar, {"quality": None, "dimension": args.dim, "degenerate": True})
        raise
    np.savetxt(sys.stdout, emb.points, delimiter=",", fmt="%.17g")
    info = {"quality": emb.quality, "dimension": emb.dim, "degenerate": False}
    _sidecar(args.sidecar, info)
    print(json.dumps(info, sort_keys=True), file=sys.stderr)
    return 0


def _sidecar(path, info):
    if path is None:
        return
    try:
        Path(path).write_text(json.dumps(info, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def cmd_compare(args) -> int:
    config = harness.load_config(args.config, master_seed=args.seed)
    report = harness.run_experiment(config, jobs=args.jobs)
    print(_agreement_table(report))
    return 0


def cmd_interleave(args) -> int:
    p, q = args.digits
    try:
        codec = FixedPointCodec(p, q, args.offset)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if args.encode:
            values = [float(x) for x in line.replace(",", " ").split()]
            print(interleave_encode(values, codec))
        else:
            head = line.split(".")[0]
            if not head or len(head) % p:
                raise MalformedString(f"cannot infer the coordinate count from {line!r}")
            values = interleave_decode_decimal(line, len(head) // p, codec)
            print(" ".join(str(v) for v in values))
    return 0


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
            "compare-observers": cmd_compare, "interleave": cmd_interleave}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    warnings.simplefilter("ignore", EffectiveSampleCollapse)
    try:
        return COMMANDS[args.command](args)
    except (DegenerateInput, InconsistentDistances) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ConfigError, OutOfRange, MalformedString, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
