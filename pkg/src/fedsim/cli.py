"""Command-line entry point: ``fedsim run | partition | inspect``.

Exit status: 0 success, 1 configuration error, 2 transport error,
3 protocol abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields


from . import runner
from .config import ExperimentConfig, build_config
from .errors import ConfigError, FedSimError, ProtocolError, TransportError
from .partition import PartitionMap, format_report, partition_report

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_PROTOCOL = 0, 1, 2, 3

_OPTIONAL_TYPES = {
    "idx_dir": str,
    "num_shards": int,
    "partition_file": str,
    "metrics_out": str,
    "port": int,
    "world_size": int,
    "rank": int,
    "listen_port": int,
}


def _rank_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ranks, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "async_enabled":
            p.add_argument("--async", dest=f.name, action=argparse.BooleanOptionalAction,
                           default=None, help="use the asynchronous pattern")
        elif isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "downstream":
            p.add_argument(flag, dest=f.name, type=_rank_list, default=None,
                           help="comma-separated client ranks behind a scheduler")
        else:
            kind = _OPTIONAL_TYPES.get(f.name) or type(f.default)
            p.add_argument(flag, dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment in one of the deployment modes")
    _add_config_flags(run)

    part = sub.add_parser("partition", help="write a partition file for a config")
    _add_config_flags(part)
    part.add_argument("--out", required=True, help="destination JSON file")

    insp = sub.add_parser("inspect", help="summarize a partition file")
    insp.add_argument("path")
    insp.add_argument("--labels-from", dest="labels_config",
                      help="config whose training labels fill the per-client histograms")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    names = {f.name for f in fields(ExperimentConfig)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def _cmd_run(args) -> int:
    cfg = build_config(args.config, _overrides(args))
    if cfg.mode == "standalone":
        result = runner.run_standalone(cfg)
    elif cfg.mode == "simulate":
        result = runner.run_simulate(cfg)
    elif cfg.mode == "server":
        result = runner.run_server(cfg)
    elif cfg.mode == "client":
        runner.run_client(cfg)
        return EXIT_OK
    else:
        runner.run_scheduler(cfg)
        return EXIT_OK
    if result.rows:
        last = result.rows[-1]
        print(f"rounds={len(result.rows)} loss={last.global_loss:.6f} accuracy={last.accuracy:.4f}")
    return EXIT_OK


def _cmd_partition(args) -> int:
    cfg = build_config(args.config, _overrides(args))
    exp = runner.build_experiment(cfg)
    exp.partition.save(args.out)
    sizes = exp.partition.sizes()
    print(f"wrote {args.out}: {len(sizes)} clients, {sum(sizes.values())} samples")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    try:
        with open(args.path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.path}: {exc}") from exc
    try:
        pmap = PartitionMap.from_json(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    except ValueError as exc:
        raise ConfigError(f"{args.path}: {exc}") from exc
    labels = None
    if args.labels_config:
        labels = runner.build_experiment(build_config(args.labels_config)).train.y
    print(format_report(partition_report(pmap, labels)))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    handlers = {"run": _cmd_run, "partition": _cmd_partition, "inspect": _cmd_inspect}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except FedSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
