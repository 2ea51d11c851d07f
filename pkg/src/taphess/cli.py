"""Command-line entry point: one subcommand per experiment.

Exit status: 0 on success, 2 for configuration errors, 3 when at least half
of the replicas failed numerically.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .emit import EmitError, emit
from .experiments import ConfigError, ExperimentConfig, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

SUBCOMMANDS = {
    "rs-solve": "rs_solve",
    "amp-run": "amp_run",
    "tap-rs": "tap_rs",
    "spectrum": "spectrum",
    "edge": "edge",
    "theorem12": "theorem12",
    "theorem15": "theorem15",
    "phase-diagram": "phase_diagram",
}

HELP = {
    "rs-solve": "solve the overlap fixed point and report the scalar RS quantities",
    "amp-run": "run the iteration and compare its state with the predicted laws",
    "tap-rs": "TAP free energy of the iterate versus the RS functional",
    "spectrum": "Hessian spectrum at the iterate versus the free-convolution law",
    "edge": "right edge of the limiting Hessian spectrum and the AT regime",
    "theorem12": "Rayleigh quotient of the Hessian at sign magnetizations",
    "theorem15": "top Hessian eigenvalue at magnetizations independent of the disorder",
    "phase-diagram": "classify a (beta, h) grid by the AT and Plefka-2 conditions",
}


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taphess", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="flat JSON file of configuration keys; flags override it")
        p.add_argument("--beta", type=float)
        p.add_argument("--h", type=float, help="external field")
        p.add_argument("--n", type=int, help="dimension")
        p.add_argument("--k", type=int, help="iteration steps")
        p.add_argument("--replicas", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", dest="output_path", help="output file (stdout when omitted)")
        p.add_argument("--format", choices=("csv", "json"))
        p.add_argument("--grid", dest="resolution", type=int, help="phase diagram points per axis")
        p.add_argument("--beta-range", type=_pair, metavar="LO,HI")
        p.add_argument("--h-range", type=_pair, metavar="LO,HI")
        p.add_argument("--density-out", dest="density_path", help="write the limiting density as x,density CSV")
        p.add_argument("--state-dir", help="amp-run: dump per-replica i,m_k,h_k CSV files here")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    data: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    experiment = SUBCOMMANDS[args.command]
    if data.get("experiment", experiment) != experiment:
        raise ConfigError(f"config names experiment {data['experiment']!r} but subcommand is {args.command!r}")
    data["experiment"] = experiment
    flags = ("beta", "h", "n", "k", "replicas", "seed", "output_path", "format", "resolution",
             "beta_range", "h_range", "density_path", "state_dir")
    for name in flags:
        value = getattr(args, name)
        if value is not None:
            data[name] = value
    return ExperimentConfig.from_mapping(data)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"taphess: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        record = run(cfg)
    except ConfigError as exc:
        print(f"taphess: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        emit(record, cfg.output_path, cfg.format)
    except EmitError as exc:
        print(f"taphess: {exc}", file=sys.stderr)
        return 1
    if record.layout == "replicas" and record.rows and 2 * record.failures >= len(record.rows):
        print(f"taphess: {record.failures} of {len(record.rows)} replicas failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
