"""Orchestrator behavior: byte accounting, determinism, snapshot isolation,
server alternation, summaries."""
import math

import numpy as np
import pytest

from flsim import algorithms as alg
from flsim import data as ds
from flsim import engine
from flsim import nn
from flsim import topology as tp


def small_config(**overrides):
    defaults = dict(
        algo="cfa", model="toy", K=4, topology="line", rounds=4,
        hyper=alg.HyperParams(eps=0.5, mu=0.05, grad_rates=0.1, batch_size=5),
        train_data="synth-digits:n=200,seed=3",
        val_data="synth-digits:n=80,seed=4", seed=9)
    defaults.update(overrides)
    return engine.SimConfig(**defaults)


# ---------------------------------------------------------------------------
# Overhead accounting
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("algo,model,degree,want", [
    ("cfa", "cnn", 2, 2976),
    ("fa", "cnn", 2, 2976),
    ("cfa", "2nn", 2, 33360),
    ("cfa-ge", "cnn", 2, 5952),
    ("cfa-ge", "2nn", 2, 66720),
    ("cfa-ge", "cnn", 6, 17856),
    ("cfa-ge", "2nn", 6, 200160),
    ("cfa-ge", "cnn", 10, 29760),
    ("cfa-ge", "2nn", 10, 333600),
    ("isolated", "cnn", 2, 0),
    ("centralized", "2nn", 2, 0),
])
def test_overhead_bytes_table(algo, model, degree, want):
    assert engine.overhead_bytes(algo, model, degree) == want


def test_overhead_bits_scaling():
    assert engine.overhead_bytes("cfa", "cnn", 2, bits=32) == 2 * 2976
    assert engine.overhead_bytes("cfa", "cnn", 2, bits=8) == 2976 // 2


def test_overhead_rejects_unknown():
    with pytest.raises(ValueError):
        engine.overhead_bytes("cfa", "cnn", 2, bits=12)
    with pytest.raises(ValueError):
        engine.overhead_bytes("gossip", "cnn", 2)


# ---------------------------------------------------------------------------
# Round-count summaries
# ---------------------------------------------------------------------------

def _metric(t, k, loss):
    return engine.RoundMetrics(t, k, "cfa", loss, 0.5, 10, 10 * (t + 1), 0.0)


def test_rounds_to_target_constant_low_loss():
    rows = [_metric(t, k, 0.4) for t in range(3) for k in range(2)]
    r = engine.rounds_to_target(rows, 0.5)
    assert (r.min_rounds, r.max_rounds) == (0, 0)
    assert r.unreached == ()


def test_rounds_to_target_threshold_above_everything():
    rows = [_metric(t, k, 1.0) for t in range(3) for k in range(2)]
    r = engine.rounds_to_target(rows, 2.0)
    assert (r.min_rounds, r.max_rounds) == (0, 0)


def test_rounds_to_target_unreached():
    rows = [_metric(t, k, 1.0) for t in range(3) for k in range(2)]
    r = engine.rounds_to_target(rows, 0.1)
    assert r.min_rounds is None
    assert r.unreached == (0, 1)


def test_rounds_to_target_mixed():
    rows = [_metric(0, 0, 0.9), _metric(1, 0, 0.4),
            _metric(0, 1, 0.9), _metric(1, 1, 0.8), _metric(2, 1, 0.45),
            _metric(2, 0, 0.9)]  # node 0 later rises again; first touch counts
    r = engine.rounds_to_target(rows, 0.5)
    assert (r.min_rounds, r.max_rounds) == (1, 2)


def test_convergence_bound_values():
    assert engine.convergence_bound(0.9, 0.2) == pytest.approx(
        math.log(10) / 0.2)
    assert engine.convergence_bound(1 - math.exp(-1), 1.0) == pytest.approx(1.0)
    assert engine.convergence_bound(1e-9, 1.0) == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ValueError):
        engine.convergence_bound(1.0, 0.2)
    with pytest.raises(ValueError):
        engine.convergence_bound(0.5, 0.0)


# ---------------------------------------------------------------------------
# Engine runs
# ---------------------------------------------------------------------------

def test_isolated_single_node_matches_plain_sgd():
    cfg = small_config(algo="isolated", K=1, topology="line", rounds=3)
    result = engine.run(cfg)
    train = engine.resolve_dataset(cfg.train_data, "", cfg.seed)
    arch = result.arch
    shard = ds.partition(train, 1, ds.parse_partition("iid", seed=cfg.seed))[0]
    params = nn.init_params(arch, cfg.seed)
    vel = None
    for t in range(3):
        params, vel = alg.model_update(arch, params, shard, cfg.hyper,
                                       cfg.seed, t, velocity=vel)
    assert result.models[0].distance(params) == 0.0


def test_metrics_csv_header_and_shape():
    result = engine.run(small_config())
    text = engine.metrics_csv_text(result.metrics)
    lines = text.strip().split("\n")
    assert lines[0] == engine.METRICS_HEADER
    assert len(lines) == 1 + 4 * 4  # rounds x nodes


def test_run_deterministic_across_repeats_and_workers():
    base = small_config(algo="cfa-ge", rounds=5)
    a = engine.metrics_csv_text(engine.run(base).metrics)
    b = engine.metrics_csv_text(engine.run(small_config(algo="cfa-ge", rounds=5)).metrics)
    c = engine.metrics_csv_text(engine.run(small_config(algo="cfa-ge", rounds=5, workers=4)).metrics)
    assert a == b == c


def test_byte_accounting_matches_overhead():
    cfg = small_config(algo="cfa-ge", rounds=6, model="toy")
    result = engine.run(cfg)
    arch = result.arch
    per_node_degree = {0: 1, 1: 2, 2: 2, 3: 1}
    for m in result.metrics:
        want = engine.overhead_bytes("cfa-ge", arch, per_node_degree[m.node])
        assert m.tx_bytes == want
    finals = [m for m in result.metrics if m.round == 5]
    for m in finals:
        assert m.cum_tx_bytes == 6 * engine.overhead_bytes(
            "cfa-ge", arch, per_node_degree[m.node])


def test_constant_degree_total_bytes():
    cfg = small_config(algo="cfa", topology="ring", K=5, rounds=4)
    result = engine.run(cfg)
    arch = result.arch
    total = sum(m.tx_bytes for m in result.metrics)
    assert total == engine.overhead_bytes("cfa", arch, 2) * 4 * 5


def test_snapshot_isolation_by_sentinel_injection(monkeypatch):
    # node 0 publishes a sentinel model during round 1; no round-1 inbox may
    # contain it (inboxes are frozen round-0 snapshots), every round-2 inbox
    # fed from node 0 must
    sentinel_value = 777.0
    real_round = alg.cfa_round

    def patched(state, inbox, alpha, hyper, shard, arch, data_seed):
        new_state, msg = real_round(state, inbox, alpha, hyper, shard, arch,
                                    data_seed)
        if state.node == 0 and state.round == 1:
            tagged = msg.model.zeros_like()
            for w in tagged.weights:
                w[...] = sentinel_value
            msg = alg.ExchangeMsg(msg.sender, msg.round, tagged)
        return new_state, msg

    monkeypatch.setattr(alg, "cfa_round", patched)
    seen = {}

    def trace(t, k, inbox):
        for msg in inbox:
            if msg.sender == 0:
                seen.setdefault(t, set()).add(
                    float(msg.model.weights[0].flat[0]))

    engine.run(small_config(algo="cfa", rounds=3), trace_hook=trace)
    assert sentinel_value not in seen[1]
    assert seen[2] == {sentinel_value}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard_reports_node_and_round():
    hub = alg.HyperParams(eps=0.5, mu=1e9, batch_size=5)  # absurd step
    cfg = small_config(algo="isolated", hyper=hub, rounds=3)
    with pytest.raises(engine.DivergenceError) as exc:
        engine.run(cfg)
    assert 0 <= exc.value.round < 3
    assert 0 <= exc.value.node < 4


def test_validation_stride():
    cfg = small_config(rounds=6, val_stride=3)
    result = engine.run(cfg)
    rounds = sorted({m.round for m in result.metrics})
    assert rounds == [2, 5]


def test_fa_participation_fraction():
    cfg = small_config(algo="fa", rounds=5, fa_fraction=0.5)
    result = engine.run(cfg)
    for t in range(5):
        active = [m for m in result.metrics if m.round == t and m.tx_bytes > 0]
        assert len(active) == 2  # half of four nodes


def test_eps_at_stability_bound_warns():
    cfg = small_config(hyper=alg.HyperParams(eps=1.0, mu=0.05, batch_size=5),
                       rounds=2)
    with pytest.warns(RuntimeWarning, match="stability"):
        engine.run(cfg)


# ---------------------------------------------------------------------------
# Server alternation
# ---------------------------------------------------------------------------

def test_alternation_all_rounds_equals_fa_run():
    rounds = 4
    fa = engine.run(small_config(algo="fa", rounds=rounds))
    alt = engine.run(small_config(algo="cfa", rounds=rounds,
                                  alternate=tuple(range(rounds))))
    fa_by = {(m.round, m.node): m.val_loss for m in fa.metrics}
    alt_by = {(m.round, m.node): m.val_loss for m in alt.metrics}
    assert fa_by == alt_by


def test_alternation_none_equals_pure_consensus():
    plain = engine.run(small_config(rounds=4))
    alt = engine.run(small_config(rounds=4, alternate=()))
    a = engine.metrics_csv_text(plain.metrics)
    b = engine.metrics_csv_text(alt.metrics)
    assert a == b


def test_alternation_broadcast_gives_common_start():
    seen = {}

    def trace(t, k, inbox):
        if t == 1:
            seen[k] = [m.model for m in inbox]

    result = engine.run(small_config(rounds=3, alternate=(0,),
                                     algo="cfa"), trace_hook=trace)
    # after the server round every inbox model is the broadcast model
    models = [m for msgs in seen.values() for m in msgs]
    assert models
    for m in models[1:]:
        assert m.distance(models[0]) == 0.0


def test_alternation_index_validation():
    with pytest.raises(ValueError):
        small_config(rounds=3, alternate=(5,))


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def test_resolve_dataset_specs(tmp_path):
    d = engine.resolve_dataset("synth-radar:n=64,seed=5", "", 1)
    assert len(d) == 64 and d.num_classes == 8
    d2 = engine.resolve_dataset("synth-digits:n=50,seed=5", "", 1)
    assert d2.num_classes == 10
    path = tmp_path / "x.flds"
    ds.save_native(d, path)
    d3 = engine.resolve_dataset(str(path), "", 1)
    assert len(d3) == 64


def test_model_dataset_width_mismatch_rejected():
    cfg = small_config(model="cnn")  # digit data is 784-wide, cnn wants 512
    with pytest.raises(nn.ShapeError):
        engine.run(cfg)


def test_topology_from_adjacency_file(tmp_path):
    path = tmp_path / "graph.adj"
    path.write_text(tp.line_topology(4).to_text())
    result = engine.run(small_config(topology=str(path), rounds=2))
    degrees = {m.node: m.tx_bytes for m in result.metrics if m.round == 1}
    arch = result.arch
    assert degrees[0] == engine.overhead_bytes("cfa", arch, 1)
    assert degrees[1] == engine.overhead_bytes("cfa", arch, 2)


def test_schedule_resolution_checks_coverage():
    topo = tp.line_topology(4)
    sched = tp.TopologySchedule([((0, 3), topo)])
    with pytest.raises(ValueError, match="cover"):
        engine.run(small_config(topology=sched, rounds=5))


def test_time_varying_topology_runs():
    a = tp.line_topology(4)
    b = tp.ring_topology(4)
    sched = tp.TopologySchedule([((0, 2), a), ((2, 4), b)])
    result = engine.run(small_config(topology=sched, rounds=4))
    by_round_bytes = {m.round: m.tx_bytes for m in result.metrics if m.node == 0}
    arch = result.arch
    assert by_round_bytes[1] == engine.overhead_bytes("cfa", arch, 1)
    assert by_round_bytes[3] == engine.overhead_bytes("cfa", arch, 2)


def test_time_varying_topology_with_gradient_exchange():
    # node 0 gains a neighbor when the line becomes a ring; the per-round
    # payload grows with the degree and the run stays deterministic
    a = tp.line_topology(4)
    b = tp.ring_topology(4)
    sched = tp.TopologySchedule([((0, 3), a), ((3, 6), b)])
    cfg = small_config(algo="cfa-ge", topology=sched, rounds=6)
    r1 = engine.run(cfg)
    r2 = engine.run(small_config(algo="cfa-ge", topology=sched, rounds=6))
    assert engine.metrics_csv_text(r1.metrics) == engine.metrics_csv_text(r2.metrics)
    by_round = {m.round: m.tx_bytes for m in r1.metrics if m.node == 0}
    arch = r1.arch
    assert by_round[2] == engine.overhead_bytes("cfa-ge", arch, 1)
    assert by_round[5] == engine.overhead_bytes("cfa-ge", arch, 2)


def test_final_models_saved_in_checkpoint_format(tmp_path):
    result = engine.run(small_config(rounds=2))
    path = tmp_path / "m.flw"
    nn.save_checkpoint(result.models[2], path)
    loaded = nn.load_checkpoint(path)
    assert loaded.distance(result.models[2]) == 0.0


def test_noniid_partition_through_engine():
    cfg = small_config(algo="cfa-ge", rounds=3,
                       partition="noniid:classes=2-4,per_node=40",
                       train_data="synth-digits:n=400,seed=3")
    result = engine.run(cfg)
    assert len({m.node for m in result.metrics}) == 4
    assert all(np.isfinite(m.val_loss) for m in result.metrics)


def test_quantized_exchange_changes_results_but_stays_deterministic():
    plain = small_config(algo="cfa-ge", rounds=4)
    quant_hyper = alg.HyperParams(eps=0.5, mu=0.05, grad_rates=0.1,
                                  batch_size=5, quantize_numerics=True,
                                  quantize_bits=8)
    quant = small_config(algo="cfa-ge", rounds=4, hyper=quant_hyper)
    a = engine.metrics_csv_text(engine.run(plain).metrics)
    b = engine.metrics_csv_text(engine.run(quant).metrics)
    b2 = engine.metrics_csv_text(engine.run(quant).metrics)
    assert b == b2
    assert a != b


def test_cfa_early_loss_decreases_smoothed():
    # four-device line on digit-like data: the smoothed validation loss
    # must come down over the first ten rounds
    hyper = alg.HyperParams(eps=0.5, mu=0.025, batch_size=5)
    cfg = engine.SimConfig(algo="cfa", model="mnist-1fc", K=4,
                           topology="line", rounds=10, hyper=hyper,
                           train_data="synth-digits:n=400,seed=7",
                           val_data="synth-digits:n=200,seed=8", seed=11)
    result = engine.run(cfg)
    by_round = {}
    for m in result.metrics:
        by_round.setdefault(m.round, []).append(m.val_loss)
    means = [float(np.mean(by_round[t])) for t in sorted(by_round)]
    early = np.mean(means[:3])
    late = np.mean(means[-3:])
    assert late < early


@pytest.mark.parametrize("mode", ["classic", "nesterov"])
def test_momentum_modes_run_deterministically(mode):
    hyper = alg.HyperParams(eps=0.5, mu=0.05, grad_rates=0.1, batch_size=5,
                            momentum=mode, momentum_decay=0.5)
    cfg = small_config(algo="cfa-ge", rounds=4, hyper=hyper)
    a = engine.metrics_csv_text(engine.run(cfg).metrics)
    b = engine.metrics_csv_text(engine.run(cfg).metrics)
    assert a == b
    assert all(np.isfinite(m.val_loss) for m in engine.run(cfg).metrics)
