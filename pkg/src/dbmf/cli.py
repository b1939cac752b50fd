"""Config-driven experiment runner.

Config files are flat ``key = value`` text; every key has a default and
any key can be overridden by a command-line flag of the same name. The
resolved config is echoed into the metrics file header as comments so a
run can be reproduced from its artifact alone.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .cluster import BurnInMonitor, ParameterServer, SampleStore, ServerSettings, collect_sample
from .core import ModelConfig
from .data import Dataset, SynthSpec, dump_ratings, dump_truth, load_ratings, split_train_test, synth_generate
from .evaluation import RunningPredictive, relative_improvement, rmse
from .gibbs_bpmf import GaussianWishartParams, GibbsSampler
from .partition import schedule_round, split_column, split_square
from .samplers import StepSchedule

ALGORITHMS = ("sgld", "dsgld-s", "dsgld-c", "sgd", "dsgd", "gibbs")

METRIC_COLUMNS = (
    "wall_clock_s",
    "round",
    "chain_id",
    "algorithm",
    "train_rmse",
    "test_rmse",
    "samples_collected",
    "eps_current",
)


class UsageError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


@dataclass
class RunConfig:
    """Every key of the flat config format, with its default."""

    algorithm: str = "sgld"
    data: str = ""                    # ratings file; empty means synthetic
    synth_users: int = 0
    synth_items: int = 0
    synth_rank: int = 5
    synth_noise_sd: float = 0.5
    synth_density: float = 0.05
    test_fraction: float = 0.2
    n_factors: int = 30
    tau: float = 2.0
    alpha0: float = 1.0
    beta0: float = 1.0
    eps0: float = 9e-6
    kappa: float = 1000.0
    gamma_decay: float = 0.51
    round_length: int = 50
    minibatch_size: int = 50000
    workers: int = 1
    chains: int = 1
    burn_in_rmse_threshold: float = 0.85
    thin: int = 10
    hyper_interval: int = 50
    max_rounds: int = 100
    max_seconds: float = 0.0          # 0 disables the wall-clock budget
    seed: int = 0
    out: str = "metrics.csv"
    eval_fraction: float = 1.0
    init_precision: float = 2.0
    clock: str = "virtual"            # 'virtual' or 'logical'
    transport: str = "inproc"         # 'inproc' or 'socket'
    endpoints: str = ""               # host:port per block, comma-separated, block-id order

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise UsageError("algorithm", f"must be one of {ALGORITHMS}")
        if not self.data and self.synth_users <= 0:
            raise UsageError("data", "give a ratings file or synth_users/synth_items")
        if self.workers < 1:
            raise UsageError("workers", "must be >= 1")
        if self.chains < 1:
            raise UsageError("chains", "must be >= 1")
        if self.algorithm in ("sgld", "sgd"):
            if self.workers != 1:
                raise UsageError("workers", f"{self.algorithm} is single-machine; set workers = 1")
            if self.chains != 1:
                raise UsageError("chains", f"{self.algorithm} runs one chain")
        if self.algorithm in ("dsgld-s", "dsgd"):
            root = math.isqrt(self.workers)
            if root * root != self.workers:
                raise UsageError("workers", f"{self.algorithm} needs a perfect square, got {self.workers}")
            if self.chains > root:
                raise UsageError("chains", f"at most sqrt(workers) = {root} chains")
        if self.algorithm == "dsgld-c" and self.chains > self.workers:
            raise UsageError("chains", f"at most workers = {self.workers} chains")
        if self.clock not in ("virtual", "logical"):
            raise UsageError("clock", "must be 'virtual' or 'logical'")
        if self.transport not in ("inproc", "socket"):
            raise UsageError("transport", "must be 'inproc' or 'socket'")
        if self.transport == "socket" and self.algorithm == "gibbs":
            raise UsageError("transport", "the gibbs baseline runs in process")
        if self.transport == "socket" and not self.endpoints:
            raise UsageError("endpoints", "socket transport needs host:port per block")
        if self.max_rounds < 0:
            raise UsageError("max_rounds", "must be >= 0")
        return self

    def endpoint_list(self) -> list[tuple[str, int]]:
        out = []
        for item in self.endpoints.split(","):
            item = item.strip()
            if not item:
                continue
            host, _, port = item.rpartition(":")
            try:
                out.append((host, int(port)))
            except ValueError:
                raise UsageError("endpoints", f"cannot parse endpoint {item!r}") from None
        return out

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_flat_config(path) -> dict:
    """Read ``key = value`` lines; '#' starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{line_no}", "expected 'key = value'")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


def config_from_mapping(values: dict) -> RunConfig:
    cfg = RunConfig()
    valid = {f.name: f.type for f in fields(RunConfig)}
    for key, raw in values.items():
        if key not in valid:
            raise UsageError(key, "unknown key")
        current = getattr(cfg, key)
        try:
            if isinstance(current, bool):
                value = raw in ("1", "true", "True", "yes")
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = str(raw)
        except ValueError:
            raise UsageError(key, f"cannot parse value {raw!r}") from None
        setattr(cfg, key, value)
    return cfg


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".10g")
    return str(value)


class MetricsWriter:
    """Appends one comma-separated row per evaluation point.

    The header comments echo the resolved config; the column header is
    written exactly once.
    """

    def __init__(self, path, config_echo: dict, algorithm: str):
        self.path = Path(path)
        self.algorithm = algorithm
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        for key in sorted(config_echo):
            self._fh.write(f"# {key} = {config_echo[key]}\n")
        self._fh.write(",".join(METRIC_COLUMNS) + "\n")
        self.rows_written = 0

    def emit(self, record: dict) -> None:
        record = dict(record)
        record.setdefault("algorithm", self.algorithm)
        row = ",".join(_fmt(record[col]) for col in METRIC_COLUMNS)
        self._fh.write(row + "\n")
        self._fh.flush()
        self.rows_written += 1

    def close(self):
        self._fh.close()


def emit_metrics(writer: MetricsWriter, record: dict) -> None:
    writer.emit(record)


def build_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data:
        raw = load_ratings(cfg.data, seed=cfg.seed)
    else:
        spec = SynthSpec(
            n_users=cfg.synth_users,
            n_items=cfg.synth_items or cfg.synth_users,
            true_rank=cfg.synth_rank,
            noise_sd=cfg.synth_noise_sd,
            density=cfg.synth_density,
            seed=cfg.seed,
        )
        raw = synth_generate(spec)
    return split_train_test(raw, cfg.test_fraction, cfg.seed)


def build_plan(cfg: RunConfig, dataset: Dataset):
    if cfg.algorithm in ("sgld", "sgd"):
        return split_column(dataset, 1)
    if cfg.algorithm in ("dsgld-s", "dsgd"):
        return split_square(dataset, math.isqrt(cfg.workers))
    return split_column(dataset, cfg.workers)


def _run_gibbs_instrumented(cfg: RunConfig, dataset: Dataset, writer: MetricsWriter) -> SampleStore:
    prior = GaussianWishartParams.default(cfg.n_factors)
    sampler = GibbsSampler(dataset, prior, cfg.n_factors, tau=cfg.tau, seed=cfg.seed)
    store = SampleStore()
    monitor = BurnInMonitor(cfg.burn_in_rmse_threshold)
    ensemble = RunningPredictive(
        dataset.test[:, 0].astype(np.int64),
        dataset.test[:, 1].astype(np.int64),
        dataset.test[:, 2],
    ) if dataset.n_test else None
    train_users = dataset.train[:, 0].astype(np.int64)
    train_items = dataset.train[:, 1].astype(np.int64)
    clock = 0.0
    for t in range(1, cfg.max_rounds + 1):
        t0 = time.perf_counter()
        sampler.sweep()
        clock += (time.perf_counter() - t0) if cfg.clock == "virtual" else 1.0
        test_rmse = sampler.test_rmse(dataset)
        preds = np.einsum(
            "nd,nd->n", sampler.user_factors[train_users], sampler.item_factors[train_items]
        )
        train_rmse = rmse(preds, dataset.train[:, 2])
        if not math.isnan(test_rmse):
            monitor.update([test_rmse])
        else:
            monitor.complete = True
        store.burn_in_complete = monitor.complete
        if monitor.complete:
            before = store.count()
            collect_sample(store, 0, sampler.snapshot(), t, cfg.thin)
            if ensemble is not None and store.count() > before:
                ensemble.add_snapshot(store.samples[0][-1][1])
        writer.emit({
            "wall_clock_s": clock,
            "round": t,
            "chain_id": 0,
            "train_rmse": train_rmse,
            "test_rmse": test_rmse,
            "samples_collected": store.count(),
            "eps_current": 0.0,
        })
        if ensemble is not None and ensemble.count > 0:
            writer.emit({
                "wall_clock_s": clock,
                "round": t,
                "chain_id": "ensemble",
                "train_rmse": float("nan"),
                "test_rmse": ensemble.rmse(),
                "samples_collected": store.count(),
                "eps_current": 0.0,
            })
        if cfg.max_seconds and clock >= cfg.max_seconds:
            break
    return store


def _server_settings(cfg: RunConfig) -> ServerSettings:
    langevin = cfg.algorithm in ("sgld", "dsgld-s", "dsgld-c")
    return ServerSettings(
        model=ModelConfig(
            n_factors=cfg.n_factors,
            tau=cfg.tau,
            alpha0=cfg.alpha0,
            beta0=cfg.beta0,
            minibatch_size=cfg.minibatch_size,
        ),
        schedule=StepSchedule(cfg.eps0, cfg.kappa, cfg.gamma_decay),
        round_length=cfg.round_length,
        thin=cfg.thin,
        hyper_interval=cfg.hyper_interval,
        burn_in_threshold=cfg.burn_in_rmse_threshold,
        max_rounds=cfg.max_rounds,
        max_seconds=cfg.max_seconds or None,
        seed=cfg.seed,
        eval_fraction=cfg.eval_fraction,
        langevin=langevin,
        collect_samples=langevin,
        init_precision=cfg.init_precision,
        clock=cfg.clock,
    )


def _build_transport(cfg: RunConfig, plan):
    if cfg.transport == "inproc":
        return None  # server builds its own workers
    from .cluster import SocketTransport

    endpoints = cfg.endpoint_list()
    if len(endpoints) != plan.n_blocks:
        raise UsageError(
            "endpoints",
            f"need one endpoint per block ({plan.n_blocks}), got {len(endpoints)}",
        )
    return SocketTransport(dict(enumerate(endpoints)))


def run_experiment(cfg: RunConfig, trace_schedule: int = 0, dump_plan: bool = False) -> int:
    """Execute the configured algorithm; returns a process exit status."""
    cfg.validate()
    dataset = build_dataset(cfg)
    writer = MetricsWriter(cfg.out, cfg.echo(), cfg.algorithm)
    started = time.perf_counter()
    transport = None
    try:
        if cfg.algorithm == "gibbs":
            store = _run_gibbs_instrumented(cfg, dataset, writer)
            diverged = {}
        else:
            plan = build_plan(cfg, dataset)
            if dump_plan:
                print(plan.summary())
            if trace_schedule:
                for t in range(trace_schedule):
                    assignment = schedule_round(plan, cfg.chains, t)
                    desc = ", ".join(
                        f"chain {c} -> blocks {assignment[c].block_ids}" for c in sorted(assignment)
                    )
                    print(f"round {t + 1}: {desc}")
            transport = _build_transport(cfg, plan)
            server = ParameterServer(
                _server_settings(cfg), plan, dataset,
                transport=transport, metrics_hook=writer.emit,
            )
            store = server.run(cfg.chains)
            diverged = server.stats.diverged
        elapsed = time.perf_counter() - started
        final = _final_rmse(cfg.out)
        print(
            f"{cfg.algorithm}: final test RMSE {_fmt(final)} | samples {store.count()} "
            f"| wall {elapsed:.1f}s | metrics -> {cfg.out}"
        )
        if diverged:
            for chain, (round_index, message) in sorted(diverged.items()):
                print(f"chain {chain} diverged at round {round_index}: {message}", file=sys.stderr)
            return 1
        return 0
    finally:
        if transport is not None:
            transport.shutdown()
        writer.close()


def read_metrics(path):
    """Parse a metrics file back into (config echo, row dicts)."""
    config = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        data_lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                config[key.strip()] = value.strip()
            else:
                data_lines.append(line)
    reader = csv.DictReader(data_lines)
    for row in reader:
        rows.append(row)
    return config, rows


def _final_rmse(path) -> float:
    _, rows = read_metrics(path)
    if not rows:
        return float("nan")
    ensemble_rows = [r for r in rows if r["chain_id"] == "ensemble"]
    last = ensemble_rows[-1] if ensemble_rows else rows[-1]
    return float(last["test_rmse"])


def _cmd_run(args) -> int:
    values = parse_flat_config(args.config) if args.config else {}
    for key, raw in (args.set or []):
        values[key] = raw
    cfg = config_from_mapping(values)
    return run_experiment(cfg, trace_schedule=args.trace_schedule, dump_plan=args.dump_plan)


def _cmd_worker(args) -> int:
    """Serve one block of the configured run over TCP.

    The worker rebuilds the dataset and plan from the same config (and
    seed) as the server, so both sides agree on block contents and
    correctors without shipping data.
    """
    from .cluster import SocketWorkerServer, build_workers

    values = parse_flat_config(args.config) if args.config else {}
    for key, raw in (args.set or []):
        values[key] = raw
    cfg = config_from_mapping(values)
    if cfg.algorithm == "gibbs":
        raise UsageError("algorithm", "the gibbs baseline has no block workers")
    dataset = build_dataset(cfg)
    plan = build_plan(cfg, dataset)
    if args.block_id not in plan.blocks:
        raise UsageError("block-id", f"plan has blocks {sorted(plan.blocks)}")
    langevin = cfg.algorithm in ("sgld", "dsgld-s", "dsgld-c")
    workers = build_workers(plan, _server_settings(cfg).model, dataset.n_users,
                            dataset.n_items, langevin=langevin)
    server = SocketWorkerServer(workers[args.block_id], host=args.host, port=args.port)
    host, port = server.address
    print(f"worker {args.block_id} listening on {host}:{port}", flush=True)
    server.join(timeout=None)
    return 0


def _cmd_synth(args) -> int:
    values = parse_flat_config(args.spec)
    known = {"users", "items", "rank", "noise_sd", "density", "seed"}
    unknown = set(values) - known
    if unknown:
        raise UsageError(sorted(unknown)[0], "unknown synth key")
    spec = SynthSpec(
        n_users=int(values.get("users", 100)),
        n_items=int(values.get("items", values.get("users", 100))),
        true_rank=int(values.get("rank", 5)),
        noise_sd=float(values.get("noise_sd", 0.5)),
        density=float(values.get("density", 0.05)),
        seed=int(values.get("seed", 0)),
    )
    dataset = synth_generate(spec)
    dump_ratings(dataset, args.out)
    dump_truth(dataset.truth, str(args.out) + ".truth")
    print(f"wrote {dataset.n_train} ratings to {args.out} (+ .truth sidecar)")
    return 0


def _cmd_summarize(args) -> int:
    final = _final_rmse(args.metrics)
    _, rows = read_metrics(args.metrics)
    samples = int(rows[-1]["samples_collected"]) if rows else 0
    algorithm = rows[-1]["algorithm"] if rows else "?"
    print(f"{args.metrics}: algorithm {algorithm}, final test RMSE {_fmt(final)}, samples {samples}")
    if args.baseline:
        base = _final_rmse(args.baseline)
        ri = relative_improvement(final, base)
        print(f"relative improvement vs {args.baseline}: {ri:+.4%} (baseline RMSE {_fmt(base)})")
    return 0


def _key_value(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected key=value")
    key, _, value = text.partition("=")
    return key.strip(), value.strip()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dbmf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment")
    p_run.add_argument("--config", help="flat key = value config file")
    p_run.add_argument(
        "--set", action="append", type=_key_value, metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    for name in ("algorithm", "data", "out", "clock"):
        p_run.add_argument(f"--{name}", dest=f"flag_{name}")
    for name in ("seed", "workers", "chains", "max_rounds", "n_factors"):
        p_run.add_argument(f"--{name}", dest=f"flag_{name}")
    p_run.add_argument("--trace-schedule", type=int, default=0, metavar="ROUNDS",
                       help="print the block assignment for the first N rounds")
    p_run.add_argument("--dump-plan", action="store_true",
                       help="print one line per block before running")
    p_run.set_defaults(func=_cmd_run)

    p_worker = sub.add_parser("worker", help="serve one block over TCP for a socket run")
    p_worker.add_argument("--config", help="the run's config file")
    p_worker.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE")
    p_worker.add_argument("--block-id", type=int, required=True)
    p_worker.add_argument("--host", default="127.0.0.1")
    p_worker.add_argument("--port", type=int, default=0, help="0 picks a free port")
    p_worker.set_defaults(func=_cmd_worker)

    p_synth = sub.add_parser("synth", help="generate a synthetic ratings file")
    p_synth.add_argument("--spec", required=True, help="flat key = value synth spec")
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=_cmd_synth)

    p_sum = sub.add_parser("summarize", help="report the final RMSE of a metrics file")
    p_sum.add_argument("--metrics", required=True)
    p_sum.add_argument("--baseline", help="metrics file to compute relative improvement against")
    p_sum.set_defaults(func=_cmd_summarize)

    args = parser.parse_args(argv)
    if args.command == "run":
        args.set = args.set or []
        for name in ("algorithm", "data", "out", "clock", "seed", "workers",
                     "chains", "max_rounds", "n_factors"):
            value = getattr(args, f"flag_{name}", None)
            if value is not None:
                args.set.append((name, value))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
