"""Deterministic round orchestrator.

Runs one of the learning regimes for T rounds over a (possibly
time-varying) device graph: snapshot the previous round's outboxes,
deliver along the graph edges, apply every node's pure transition, then
validate and meter transmitted bytes. Identical (config, seed) pairs
produce identical metrics regardless of worker count, because inboxes are
frozen snapshots and all randomness is keyed by (seed, round, node).
"""
from __future__ import annotations

import csv
import io
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import algorithms as alg
from . import data as ds
from . import nn
from . import topology as tp

ALGORITHMS = ("cfa", "cfa-ge", "fa", "centralized", "isolated")
METRICS_HEADER = "round,node,algo,val_loss,val_acc,tx_bytes,cum_tx_bytes,update_ms"


class DivergenceError(RuntimeError):
    """A parameter went non-finite; carries the offending node and round."""

    def __init__(self, node: int, round_: int):
        super().__init__(f"non-finite model parameters at node {node}, round {round_}")
        self.node = node
        self.round = round_


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    node: int
    algo: str
    val_loss: float
    val_acc: float
    tx_bytes: int
    cum_tx_bytes: int
    update_ms: float


@dataclass
class SimConfig:
    """Everything needed to reproduce a run."""

    algo: str = "cfa"
    model: str = "cnn"
    K: int = 80
    degree: int = 2                    # neighbors per device for generated graphs
    rounds: int = 40
    topology: object = "kregular"      # name, Topology, or TopologySchedule
    partition: object = "iid"          # PartitionSpec or config string
    hyper: alg.HyperParams = field(default_factory=alg.HyperParams)
    train_data: object = None          # Dataset, path, or "synth-..." spec
    val_data: object = None
    seed: int = 1
    mu_server: float | None = None     # server step size; defaults to hyper.mu
    fa_fraction: float = 1.0           # participating fraction per server round
    alternate: tuple[int, ...] = ()    # round indices handled by the server
    val_stride: int = 1
    workers: int = 1
    measure_time: bool = False

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.rounds < 1:
            raise ValueError("need at least one round")
        if self.K < 1:
            raise ValueError("need at least one node")
        if any(t < 0 or t >= self.rounds for t in self.alternate):
            raise ValueError("alternation round indices must lie in [0, rounds)")
        if not 0.0 < self.fa_fraction <= 1.0:
            raise ValueError("participation fraction must lie in (0, 1]")
        if self.val_stride < 1:
            raise ValueError("validation stride must be at least 1")
        if self.workers < 1:
            raise ValueError("worker count must be at least 1")


@dataclass
class SimResult:
    metrics: list[RoundMetrics]
    models: dict[int, nn.ParamSet]
    arch: nn.Architecture
    config: SimConfig


# ---------------------------------------------------------------------------
# Config resolution helpers
# ---------------------------------------------------------------------------

def resolve_dataset(spec, default: str, seed: int) -> ds.Dataset:
    """Accept a Dataset, a file path, or a "synth-radar"/"synth-digits"
    generator spec like "synth-radar:n=500,seed=3"."""
    if spec is None:
        spec = default
    if isinstance(spec, ds.Dataset):
        return spec
    text = str(spec)
    if text.startswith("synth-radar") or text.startswith("synth-digits"):
        kind, _, tail = text.partition(":")
        kwargs = {"seed": seed, "n": 1000}
        for part in filter(None, tail.split(",")):
            key, _, value = part.partition("=")
            kwargs[key.strip()] = float(value) if key.strip() == "noise" else int(value)
        if kind == "synth-radar":
            return ds.synth_radar(**kwargs)
        return ds.synth_digits(**kwargs)
    return ds.load_native(text)


def default_dataset_spec(model_id: str, role: str) -> str:
    n = 1600 if role == "train" else 2000
    seed_off = 0 if role == "train" else 1
    if model_id == "mnist-1fc":
        return f"synth-digits:n={n},seed={7 + seed_off}"
    return f"synth-radar:n={n},seed={7 + seed_off}"


def resolve_schedule(config: SimConfig) -> tp.TopologySchedule:
    spec = config.topology
    if isinstance(spec, tp.TopologySchedule):
        if spec.K != config.K:
            raise ValueError("scheduled graphs disagree with config node count")
        if spec.total_rounds < config.rounds:
            raise ValueError("topology schedule does not cover every round")
        return spec
    if isinstance(spec, tp.Topology):
        if spec.K != config.K:
            raise ValueError("topology node count disagrees with config")
        return tp.constant_schedule(spec, config.rounds)
    name = str(spec)
    if name == "line":
        topo = tp.line_topology(config.K)
    elif name == "ring":
        topo = tp.ring_topology(config.K)
    elif name == "full":
        topo = tp.full_topology(config.K)
    elif name in ("kregular", "k-regular"):
        topo = tp.k_regular(config.K, config.degree, config.seed)
    elif os.path.exists(name):
        topo = tp.from_text(Path(name).read_text())
        if topo.K != config.K:
            raise ValueError(f"adjacency file lists {topo.K} nodes, "
                             f"config says {config.K}")
    else:
        raise ValueError(f"unknown topology {name!r}")
    return tp.constant_schedule(topo, config.rounds)


# ---------------------------------------------------------------------------
# Overhead accounting and summaries
# ---------------------------------------------------------------------------

def overhead_bytes(algorithm: str, model, num_neighbors: int = 2,
                   bits: int = 16) -> int:
    """Bytes a device transmits per round.

    Model exchange (consensus or server averaging) costs one quantized
    model; the gradient-exchange variant scales with the neighborhood
    size. Local-only regimes transmit nothing.
    """
    if bits not in (8, 16, 32):
        raise ValueError("quantization width must be 8, 16 or 32 bits")
    arch = model if isinstance(model, nn.Architecture) else nn.build_architecture(str(model))
    unit = arch.parameter_count() * bits // 8
    if algorithm in ("cfa", "fa"):
        return unit
    if algorithm == "cfa-ge":
        return num_neighbors * unit
    if algorithm in ("isolated", "centralized"):
        return 0
    raise ValueError(f"unknown algorithm {algorithm!r}")


@dataclass(frozen=True)
class RoundsToTarget:
    min_rounds: int | None
    max_rounds: int | None
    unreached: tuple[int, ...]


def rounds_to_target(metrics: list[RoundMetrics], threshold: float = 0.5) -> RoundsToTarget:
    """Earliest round per node at which validation loss reaches the
    threshold; min/max across nodes, plus the nodes that never reach it."""
    if not metrics:
        raise ValueError("empty metrics")
    first: dict[int, int] = {}
    nodes = set()
    for m in sorted(metrics, key=lambda m: (m.round, m.node)):
        nodes.add(m.node)
        if m.node not in first and m.val_loss <= threshold:
            first[m.node] = m.round
    unreached = tuple(sorted(nodes - set(first)))
    if not first:
        return RoundsToTarget(None, None, unreached)
    return RoundsToTarget(min(first.values()), max(first.values()), unreached)


def convergence_bound(gamma_g: float, gamma_l: float) -> float:
    """Iteration bound log(1/(1-gamma_g))/gamma_l with the natural log.

    The logarithm base is a modeling choice, so treat the value as
    order-of-magnitude guidance rather than an exact round count.
    """
    if not 0.0 < gamma_g < 1.0:
        raise ValueError("global accuracy must lie in (0, 1)")
    if gamma_l <= 0.0:
        raise ValueError("local accuracy must be positive")
    return math.log(1.0 / (1.0 - gamma_g)) / gamma_l


def write_metrics_csv(metrics: list[RoundMetrics], path_or_buf) -> None:
    """Emit the metrics table with the fixed header."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER.split(","))
        for m in metrics:
            writer.writerow([m.round, m.node, m.algo, f"{m.val_loss:.10g}",
                             f"{m.val_acc:.10g}", m.tx_bytes, m.cum_tx_bytes,
                             f"{m.update_ms:.3f}"])
    finally:
        if own:
            fh.close()


def metrics_csv_text(metrics: list[RoundMetrics]) -> str:
    buf = io.StringIO()
    write_metrics_csv(metrics, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# The simulation loop
# ---------------------------------------------------------------------------

def run(config: SimConfig, trace_hook=None) -> SimResult:
    """Execute the configured regime for T rounds.

    trace_hook, if given, is called as trace_hook(round, node, inbox)
    before each consensus transition; it exists for tests that need to
    observe the frozen message snapshots.
    """
    train = resolve_dataset(config.train_data,
                            default_dataset_spec(config.model, "train"),
                            config.seed)
    val = resolve_dataset(config.val_data,
                          default_dataset_spec(config.model, "val"),
                          config.seed + 1)
    arch = nn.build_architecture(config.model, train.feature_dim, train.num_classes)
    if train.feature_dim != arch.input_dim:
        raise nn.ShapeError(f"dataset width {train.feature_dim} != model input "
                            f"{arch.input_dim}")
    if val.feature_dim != arch.input_dim:
        raise nn.ShapeError("validation width disagrees with the model input")

    w0 = nn.init_params(arch, config.seed)
    hyper = config.hyper
    mu_server = config.mu_server if config.mu_server is not None else hyper.mu

    if config.algo == "centralized":
        return _run_centralized(config, arch, train, val, w0, mu_server)

    part = config.partition
    if isinstance(part, str):
        part = ds.parse_partition(part, seed=config.seed, K=config.K)
    shards = ds.partition(train, config.K, part)

    if config.algo == "fa":
        return _run_fa(config, arch, train, val, w0, shards, mu_server)

    return _run_consensus(config, arch, val, w0, shards, mu_server, trace_hook)


def _run_centralized(config, arch, train, val, w0, mu_server) -> SimResult:
    pool = ds.whole_shard(train)
    hyper = replace(config.hyper, mu=mu_server)
    model = w0
    metrics: list[RoundMetrics] = []
    velocity = None
    for t in range(config.rounds):
        start = time.perf_counter()
        model, velocity = alg.model_update(arch, model, pool, hyper,
                                           config.seed, t, velocity=velocity)
        ms = (time.perf_counter() - start) * 1e3 if config.measure_time else 0.0
        if not model.all_finite():
            raise DivergenceError(0, t)
        if (t + 1) % config.val_stride == 0 or t == config.rounds - 1:
            loss, acc = nn.evaluate(arch, model, val.features, val.labels)
            metrics.append(RoundMetrics(t, 0, config.algo, loss, acc, 0, 0, ms))
    return SimResult(metrics, {0: model}, arch, config)


def _run_fa(config, arch, train, val, w0, shards, mu_server) -> SimResult:
    model = w0
    metrics: list[RoundMetrics] = []
    per_device = overhead_bytes("fa", arch, bits=config.hyper.quantize_bits)
    cum = {k: 0 for k in range(config.K)}
    for t in range(config.rounds):
        participants = _draw_participants(config, t)
        start = time.perf_counter()
        model = alg.fa_round(arch, model, participants, shards, mu_server,
                             config.hyper.quantize_bits,
                             config.hyper.quantize_numerics)
        ms = (time.perf_counter() - start) * 1e3 if config.measure_time else 0.0
        if not model.all_finite():
            raise DivergenceError(0, t)
        tx = {k: per_device if k in participants else 0 for k in range(config.K)}
        for k in range(config.K):
            cum[k] += tx[k]
        if (t + 1) % config.val_stride == 0 or t == config.rounds - 1:
            loss, acc = nn.evaluate(arch, model, val.features, val.labels)
            for k in range(config.K):
                metrics.append(RoundMetrics(t, k, config.algo, loss, acc,
                                            tx[k], cum[k], ms))
    return SimResult(metrics, {k: model for k in range(config.K)}, arch, config)


def _draw_participants(config: SimConfig, t: int) -> list[int]:
    n = max(1, int(round(config.fa_fraction * config.K)))
    if n >= config.K:
        return list(range(config.K))
    rng = np.random.default_rng([config.seed, 404, t])
    return sorted(rng.choice(config.K, size=n, replace=False).tolist())


def _run_consensus(config, arch, val, w0, shards, mu_server, trace_hook) -> SimResult:
    K = config.K
    hyper = config.hyper
    algo = config.algo
    schedule = None
    weights_cache: dict[int, tp.MixingWeights] = {}
    sizes = [s.size for s in shards]
    if algo != "isolated":
        schedule = resolve_schedule(config)
        for _, topo in schedule.entries:
            w = tp.mixing_weights(topo, sizes)
            weights_cache[id(topo)] = w
            lo, hi = tp.epsilon_bound(topo, w)
            if hyper.eps >= hi:
                warnings.warn(
                    f"consensus step size {hyper.eps} is at or above the "
                    f"stability bound {hi:.4g}; agreement is not guaranteed",
                    RuntimeWarning, stacklevel=2)

    states = {k: alg.init_node_state(k, w0) for k in range(K)}
    outbox = {}
    if algo != "isolated":
        topo0 = schedule.query(0)
        for k in range(K):
            outbox[k] = alg.initial_message(states[k], algo, topo0.neighbors[k])

    alt_set = set(config.alternate)
    server_model = None
    metrics: list[RoundMetrics] = []
    cum = {k: 0 for k in range(K)}
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    def node_bytes(topo, k):
        if algo == "isolated":
            return 0
        return overhead_bytes(algo, arch, len(topo.neighbors[k]),
                              hyper.quantize_bits)

    try:
        for t in range(config.rounds):
            tx = {}
            ms = {}
            if t in alt_set:
                # server round: fuse, update, broadcast
                if server_model is None or (t - 1) not in alt_set:
                    total = sum(sizes)
                    server_model = w0.zeros_like()
                    for k in range(K):
                        server_model = server_model.add(
                            states[k].model.scale(sizes[k] / total))
                participants = _draw_participants(config, t)
                start = time.perf_counter()
                server_model = alg.fa_round(arch, server_model, participants,
                                            shards, mu_server,
                                            hyper.quantize_bits,
                                            hyper.quantize_numerics)
                elapsed = (time.perf_counter() - start) * 1e3
                per_device = overhead_bytes("fa", arch, bits=hyper.quantize_bits)
                for k in range(K):
                    states[k] = alg.init_node_state(k, server_model)
                    states[k].round = t + 1
                    if algo != "isolated":
                        topo = schedule.query(min(t + 1, config.rounds - 1))
                        outbox[k] = alg.initial_message(states[k], algo,
                                                        topo.neighbors[k])
                    tx[k] = per_device if k in participants else 0
                    ms[k] = elapsed if config.measure_time else 0.0
            elif algo == "isolated":
                def iso_step(k):
                    start = time.perf_counter()
                    st = alg.isolated_round(states[k], hyper, shards[k], arch,
                                            config.seed)
                    return st, (time.perf_counter() - start) * 1e3

                results = (list(pool.map(iso_step, range(K))) if pool
                           else [iso_step(k) for k in range(K)])
                for k, (st, elapsed) in enumerate(results):
                    states[k] = st
                    tx[k] = 0
                    ms[k] = elapsed if config.measure_time else 0.0
            else:
                topo = schedule.query(t)
                weights = weights_cache[id(topo)]
                snapshot = dict(outbox)
                warm = algo == "cfa-ge" and t < hyper.warmup_rounds
                if warm:
                    models = {k: states[k].model for k in range(K)}
                    psis = {}
                    for k in range(K):
                        nbrs = topo.neighbors[k]
                        psis[k] = alg.consensus_aggregate(
                            models[k], {i: models[i] for i in nbrs},
                            hyper.eps, {i: weights.row(k)[i] for i in nbrs})

                def step(k):
                    nbrs = topo.neighbors[k]
                    inbox = [snapshot[i] for i in nbrs if i in snapshot]
                    if trace_hook is not None:
                        trace_hook(t, k, inbox)
                    start = time.perf_counter()
                    if algo == "cfa":
                        st, msg = alg.cfa_round(states[k], inbox,
                                                weights.row(k), hyper,
                                                shards[k], arch, config.seed)
                    elif warm:
                        st, msg = alg.cfa_ge_warmup_round(
                            states[k], {i: models[i] for i in nbrs},
                            {i: psis[i] for i in nbrs},
                            {i: shards[i] for i in nbrs},
                            weights.row(k), hyper, shards[k], arch,
                            config.seed)
                    else:
                        st, msg = alg.cfa_ge_round_2stage(
                            states[k], inbox, weights.row(k), hyper,
                            shards[k], arch, nbrs, config.seed)
                    return st, msg, (time.perf_counter() - start) * 1e3

                results = (list(pool.map(step, range(K))) if pool
                           else [step(k) for k in range(K)])
                for k, (st, msg, elapsed) in enumerate(results):
                    states[k] = st
                    outbox[k] = msg
                    tx[k] = node_bytes(topo, k)
                    ms[k] = elapsed if config.measure_time else 0.0

            for k in range(K):
                if not states[k].model.all_finite():
                    raise DivergenceError(k, t)
                cum[k] += tx.get(k, 0)

            if (t + 1) % config.val_stride == 0 or t == config.rounds - 1:
                def validate(k):
                    return nn.evaluate(arch, states[k].model, val.features,
                                       val.labels)

                scores = (list(pool.map(validate, range(K))) if pool
                          else [validate(k) for k in range(K)])
                for k, (loss, acc) in enumerate(scores):
                    metrics.append(RoundMetrics(t, k, algo, loss, acc,
                                                tx.get(k, 0), cum[k],
                                                ms.get(k, 0.0)))
    finally:
        if pool is not None:
            pool.shutdown()

    return SimResult(metrics, {k: states[k].model for k in range(K)}, arch,
                     config)
