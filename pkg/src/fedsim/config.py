"""Experiment configuration: JSON file, command-line overrides, validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields

from .errors import ConfigError

MODES = ("standalone", "simulate", "server", "client", "scheduler")
MODELS = ("logistic", "mlp")
DATASETS = ("synthetic", "idx")
PARTITIONS = ("iid", "shard", "dirichlet", "quantity")
COMPRESSIONS = ("none", "topk", "f16")
DTYPES = ("f32", "f64")
SCHEDULER_MODES = ("forward", "middle")


@dataclass
class ExperimentConfig:
    mode: str = "standalone"
    # model
    model: str = "logistic"
    hidden: int = 32
    # data
    dataset: str = "synthetic"
    n: int = 2000
    d: int = 20
    num_classes: int = 2
    separation: float = 3.0
    idx_dir: str | None = None
    # partition
    partition: str = "iid"
    beta: float = 0.5
    min_size: int = 1
    num_shards: int | None = None
    shards_per_client: int = 2
    partition_file: str | None = None
    # federation
    rounds: int = 5
    num_clients: int = 10
    sample_fraction: float = 1.0
    # local training
    epochs: int = 5
    lr: float = 0.1
    batch_size: int = 32
    momentum: float = 0.0
    # wire
    compression: str = "none"
    topk_fraction: float = 0.01
    dtype: str = "f64"
    # asynchronous pattern
    async_enabled: bool = False
    alpha: float = 0.5
    staleness_exponent: float = 0.0
    drop_stale: bool = False
    # hierarchy (simulate mode)
    groups: int = 0
    scheduler_mode: str = "forward"
    # bookkeeping
    seed: int = 0
    metrics_out: str | None = None
    record_wall_time: bool = True
    # network (server / client / scheduler)
    host: str = "127.0.0.1"
    port: int | None = None
    world_size: int | None = None
    rank: int | None = None
    upstream_rank: int = 0
    listen_port: int | None = None
    downstream: list[int] | None = None
    group_id: int = 0
    connect_retries: int = 5
    connect_backoff: float = 1.0
    timeout: float = 120.0

    def validate(self) -> "ExperimentConfig":
        problems = []

        def need(cond: bool, msg: str) -> None:
            if not cond:
                problems.append(msg)

        for name, choices in (("mode", MODES), ("model", MODELS), ("dataset", DATASETS),
                              ("partition", PARTITIONS), ("compression", COMPRESSIONS),
                              ("dtype", DTYPES), ("scheduler_mode", SCHEDULER_MODES)):
            need(getattr(self, name) in choices, f"{name}: must be one of {', '.join(choices)}")
        need(self.rounds >= 0, "rounds: must be >= 0")
        need(self.num_clients >= 1, "num_clients: must be >= 1")
        need(0.0 < self.sample_fraction <= 1.0, "sample_fraction: must lie in (0, 1]")
        need(self.epochs >= 1, "epochs: must be >= 1")
        need(self.batch_size >= 1, "batch_size: must be >= 1")
        need(self.lr >= 0, "lr: must be >= 0")
        need(0.0 <= self.momentum < 1.0, "momentum: must lie in [0, 1)")
        need(0.0 < self.topk_fraction <= 1.0, "topk_fraction: must lie in (0, 1]")
        need(0.0 <= self.alpha <= 1.0, "alpha: must lie in [0, 1]")
        need(self.staleness_exponent >= 0, "staleness_exponent: must be >= 0")
        need(self.beta > 0, "beta: must be > 0")
        need(self.groups >= 0, "groups: must be >= 0")
        need(self.groups <= self.num_clients, "groups: cannot exceed num_clients")
        need(self.model != "mlp" or self.hidden >= 1, "hidden: must be >= 1 for the mlp model")
        if self.dataset == "synthetic":
            need(self.num_classes >= 2, "num_classes: must be >= 2")
            need(self.n >= self.num_classes, "n: must be >= num_classes")
            need(self.d >= 1, "d: must be >= 1")
        else:
            need(bool(self.idx_dir), "idx_dir: required when dataset is idx")
        if self.groups and self.async_enabled:
            problems.append("groups: hierarchical topologies run the synchronous pattern only")
        if self.mode in ("server", "client", "scheduler"):
            need(self.port is not None, f"port: required in {self.mode} mode")
        if self.mode == "server":
            need(self.world_size is not None and self.world_size >= 2,
                 "world_size: required in server mode (>= 2)")
        if self.mode in ("client", "scheduler"):
            need(self.rank is not None and self.rank >= 1, f"rank: required in {self.mode} mode (>= 1)")
        if self.mode == "scheduler":
            need(self.listen_port is not None, "listen_port: required in scheduler mode")
            need(bool(self.downstream), "downstream: required in scheduler mode")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return self


FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(body, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    # accept the CLI spelling of the async switch
    if "async" in body:
        body["async_enabled"] = body.pop("async")
    unknown = sorted(set(body) - FIELD_NAMES)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    return body


def build_config(file_path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file, then explicit overrides; validated."""
    values: dict = {}
    if file_path:
        try:
            with open(file_path) as f:
                values.update(parse_config_text(f.read(), file_path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {file_path}: {exc}") from exc
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
