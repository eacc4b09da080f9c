#!/usr/bin/env python3

# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Command-line entry point: preset experiments, echo index estimation and certification."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pydantic
import yaml

from contraction import Region, certify_region, global_esp_check
from core_dynamics import RnnParams
from echo_index import EchoIndexProtocol, estimate_echo_index
from errors import ConfigurationError, EchodexError
from esn_training import TrainedModel
from experiments import (
    LOG_LEVELS,
    ExperimentConfig,
    Preset,
    PresetResult,
    RuntimeSettings,
    parse_overrides,
    plain,
    replay,
    run_preset,
    write_yaml,
)
from input_space import InputSequence

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_ERROR = 2
FAILURES_NAME = "failures.yaml"


def load_network(path: Path) -> RnnParams:
    """Read either a bare network document or a trained model file."""
    try:
        document = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read network file {path}: {e}") from e
    if isinstance(document, dict) and "params" in document:
        return TrainedModel.load(path).params
    return RnnParams.load(path)


def _region_for(text: str, params: RnnParams) -> Region:
    region = Region.parse(text)
    if region.dim == 1 and params.n_r > 1:
        region = Region(lo=np.full(params.n_r, region.lo[0]), hi=np.full(params.n_r, region.hi[0]))
    if region.dim != params.n_r:
        raise ConfigurationError(f"region has {region.dim} dimensions, network has {params.n_r}")
    region.check_inside(params.bound)
    return region


def _emit(data: dict, out: Optional[Path]) -> None:
    text = yaml.safe_dump(plain(data), sort_keys=True, default_flow_style=False)
    if out is not None:
        Path(out).write_text(text)
    sys.stdout.write(text)


def _report_preset(result: PresetResult, out: Path) -> int:
    if result.ok:
        return EXIT_OK
    failures = [{"name": c.name, "detail": c.detail} for c in result.failures]
    write_yaml(out / FAILURES_NAME, {"preset": result.preset, "failures": failures})
    sys.stdout.write(yaml.safe_dump({"failures": failures}, sort_keys=True))
    return EXIT_CHECKS_FAILED


def cmd_preset(args: argparse.Namespace, runtime: RuntimeSettings) -> int:
    """Run one preset experiment."""
    try:
        config = ExperimentConfig(
            preset=args.command,
            seed=args.seed,
            output_dir=args.out,
            overrides=parse_overrides(args.set),
        )
    except pydantic.ValidationError as e:
        raise ConfigurationError(f"invalid experiment configuration: {e}") from e
    return _report_preset(run_preset(config, runtime), Path(config.output_dir))


def cmd_replay(args: argparse.Namespace, runtime: RuntimeSettings) -> int:
    """Re-run a manifest and compare file digests."""
    result, mismatches = replay(args.manifest, args.out, runtime)
    if mismatches:
        sys.stdout.write(yaml.safe_dump({"mismatched_files": mismatches}, sort_keys=True))
        return EXIT_CHECKS_FAILED
    return _report_preset(result, Path(args.out) if args.out else Path(args.manifest).parent / "replay")


def cmd_index(args: argparse.Namespace, runtime: RuntimeSettings) -> int:
    """Estimate the echo index of a network under a stored input."""
    params = load_network(args.model)
    seq = InputSequence.from_csv(args.input)
    try:
        protocol = EchoIndexProtocol.parse_obj(parse_overrides(args.set))
    except pydantic.ValidationError as e:
        raise ConfigurationError(f"invalid protocol overrides: {e}") from e
    report = estimate_echo_index(params, seq, protocol)
    _emit(report.summary(), args.out)
    return EXIT_OK


def cmd_certify(args: argparse.Namespace, runtime: RuntimeSettings) -> int:
    """Run the global or the region certifier."""
    params = load_network(args.model)
    if args.region is None:
        report = global_esp_check(params, args.mu, args.grid)
        _emit({"global": report.summary()}, args.out)
        return EXIT_OK if report.certified else EXIT_CHECKS_FAILED
    if args.input is None:
        raise ConfigurationError("a region certificate needs --input to sample input values from")
    region = _region_for(args.region, params)
    samples = np.unique(InputSequence.from_csv(args.input).values, axis=0)
    invariance, contraction = certify_region(params, region, samples, args.mu, args.grid or 33)
    _emit({"invariance": invariance.summary(), "contraction": contraction.summary()}, args.out)
    return EXIT_OK if invariance.invariant and contraction.certified else EXIT_CHECKS_FAILED


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per preset plus index, certify and replay."""
    parser = argparse.ArgumentParser(prog="echodex", description=__doc__)
    parser.add_argument("--log-level", choices=LOG_LEVELS, default=None, help="overrides ECHODEX_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    for preset in Preset:
        p = sub.add_parser(preset.value, help=f"run the {preset.value} preset")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("echodex-out") / preset.value)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a setting")
        p.set_defaults(handler=cmd_preset)

    p = sub.add_parser("index", help="estimate the echo index of a network under an input CSV")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a protocol field")
    p.add_argument("--out", type=Path, default=None, help="also write the report here")
    p.set_defaults(handler=cmd_index)

    p = sub.add_parser("certify", help="check sufficient conditions for contraction")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument(
        "--region",
        default=None,
        metavar="LO..HI",
        help="box lo_1,..,lo_n..hi_1,..,hi_n; write --region=LO..HI when LO starts with a minus sign",
    )
    p.add_argument("--input", type=Path, default=None)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="also write the report here")
    p.set_defaults(handler=cmd_certify)

    p = sub.add_parser("replay", help="re-run a preset from its manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_replay)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, configure logging and dispatch."""
    args = build_parser().parse_args(argv)
    try:
        runtime = RuntimeSettings()
    except pydantic.ValidationError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error("invalid ECHODEX_* environment: %s", e)
        return EXIT_ERROR
    if args.log_level is not None:
        runtime.log_level = args.log_level
    logging.basicConfig(
        level=runtime.validated_log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args, runtime)
    except EchodexError as e:
        logger.error(e.message)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
