"""Learning regimes as pure round-transition functions over node states.

Five regimes are provided: consensus averaging of neighbor models (with a
local SGD pass per round), the faster variant that additionally exchanges
gradients computed on each other's aggregated models, server-coordinated
federated averaging, centralized training, and isolated no-cooperation
training. Momentum and Nesterov adaptations are selected via HyperParams.

Every transition is a pure function of (state, frozen inbox, shard), so an
orchestrator may evaluate all nodes of a round concurrently and in any
order without changing the result.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import Dataset, Shard, minibatches, whole_shard
from .nn import (Architecture, GradientSet, ParamSet, backward, per_layer_rates,
                 sgd_step)


@dataclass(frozen=True)
class HyperParams:
    """Round-level training knobs shared by all regimes.

    grad_rates are the per-layer rates applied to exchanged neighbor
    gradients (a scalar broadcasts; a short tuple repeats its last entry).
    beta_self optionally overrides the step of the first local batch after
    the exchanged gradients are folded in.
    """

    eps: float = 1.0                      # consensus step size
    mu: float = 0.025                     # local SGD step size
    grad_rates: tuple[float, ...] | float = 0.1
    beta_self: float | None = None
    mewma_rho: float = 0.99               # moving-average weight for fresh gradients
    momentum: str = "none"                # none | classic | nesterov
    momentum_decay: float = 0.0
    batch_size: int = 5
    warmup_rounds: int = 3                # synchronous rounds before the two-stage scheme
    quantize_bits: int = 16
    quantize_numerics: bool = False       # apply quantization to exchanged gradients

    def __post_init__(self):
        if not 0.0 < self.eps <= 1.0:
            raise ValueError("consensus step size must lie in (0, 1]")
        if self.mu < 0:
            raise ValueError("SGD step size must be nonnegative")
        if not 0.0 < self.mewma_rho <= 1.0:
            raise ValueError("moving-average weight must lie in (0, 1]")
        if self.momentum not in ("none", "classic", "nesterov"):
            raise ValueError(f"unknown momentum mode {self.momentum!r}")
        if self.momentum != "none" and not 0.0 <= self.momentum_decay < 1.0:
            raise ValueError("momentum decay must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.warmup_rounds < 0:
            raise ValueError("warmup round count must be nonnegative")
        if self.quantize_bits not in (8, 16, 32):
            raise ValueError("quantization width must be 8, 16 or 32 bits")


@dataclass
class NodeState:
    """Everything a device carries between rounds."""

    node: int
    model: ParamSet                        # current local model
    aggregate: ParamSet                    # last consensus aggregate (shared next round)
    grad_store: dict[int, GradientSet] = field(default_factory=dict)
    velocity: GradientSet | None = None    # momentum state, if enabled
    round: int = 0


@dataclass(frozen=True)
class ExchangeMsg:
    """What a node publishes for one round.

    Model-only for plain consensus; the gradient-exchange variant also
    carries one predicted gradient per neighbor, keyed by receiver id.
    """

    sender: int
    round: int
    model: ParamSet
    gradients: dict[int, GradientSet] | None = None


def init_node_state(node: int, params: ParamSet) -> NodeState:
    return NodeState(node, params, params, {}, None, 0)


def initial_message(state: NodeState, algo: str,
                    neighbors=()) -> ExchangeMsg:
    """Phase-start payload: the node's current model, plus zero gradients
    for the gradient-exchange variant."""
    if algo == "cfa-ge":
        zeros = state.model.zeros_like()
        return ExchangeMsg(state.node, state.round, state.aggregate,
                           {i: zeros for i in neighbors})
    return ExchangeMsg(state.node, state.round, state.model, None)


# ---------------------------------------------------------------------------
# Quantization at the exchange boundary
# ---------------------------------------------------------------------------

def quantize(x: np.ndarray, bits: int = 16) -> np.ndarray:
    """Symmetric per-tensor uniform quantization over [-max|x|, max|x|],
    returned dequantized. 32 bits is the identity."""
    if bits not in (8, 16, 32):
        raise ValueError("quantization width must be 8, 16 or 32 bits")
    x = np.asarray(x, dtype=float)
    if bits == 32:
        return x.copy()
    m = float(np.abs(x).max()) if x.size else 0.0
    if m == 0.0:
        return x.copy()
    step = 2.0 * m / (2 ** bits - 1)
    return np.round((x + m) / step) * step - m


def quantize_params(params: ParamSet, bits: int = 16) -> ParamSet:
    return ParamSet([quantize(w, bits) for w in params.weights],
                    [quantize(b, bits) for b in params.biases])


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def consensus_aggregate(model: ParamSet, received: Mapping[int, ParamSet],
                        eps: float, alpha: Mapping[int, float]) -> ParamSet:
    """Innovation-weighted neighbor averaging.

    Returns model + eps * sum_i alpha[i] * (received[i] - model). The alpha
    map must cover exactly the received senders; absent neighbors simply
    contribute nothing.
    """
    if set(received) != set(alpha):
        raise ValueError("mixing weights must cover exactly the received senders")
    out = model
    for i in sorted(received):
        out = out.add(received[i].sub(model).scale(eps * alpha[i]))
    return out


def gradient_for_peer(arch: Architecture, at: ParamSet, shard: Shard,
                      batch_size: int, data_seed: int, round_: int,
                      peer: int) -> GradientSet:
    """Single-batch gradient of this shard's loss at a peer's model.

    The batch cycles deterministically with (round, peer) so consecutive
    rounds see different local batches.
    """
    batches = minibatches(shard, batch_size, data_seed, round_)
    X, y = batches[(round_ + peer) % len(batches)]
    _, grad = backward(arch, at, X, y)
    return grad


def model_update(arch: Architecture, params: ParamSet, shard: Shard,
                 hyper: HyperParams, data_seed: int, epoch: int,
                 velocity: GradientSet | None = None,
                 first_step: float | None = None,
                 ) -> tuple[ParamSet, GradientSet | None]:
    """One full local training pass over the shard's minibatches.

    Plain SGD by default; heavy-ball or Nesterov steps when momentum is
    enabled, with the velocity threaded through and returned.
    """
    if hyper.momentum == "none" and hyper.mu == 0.0 and not first_step:
        return params, velocity
    if hyper.momentum != "none" and velocity is None:
        velocity = params.zeros_like()
    decay = hyper.momentum_decay
    for b, (X, y) in enumerate(minibatches(shard, hyper.batch_size, data_seed, epoch)):
        step = first_step if (b == 0 and first_step is not None) else hyper.mu
        if hyper.momentum == "none":
            _, g = backward(arch, params, X, y)
            params = sgd_step(params, g, step)
        elif hyper.momentum == "classic":
            _, g = backward(arch, params, X, y)
            velocity = velocity.scale(decay).sub(g.scale(step))
            params = params.add(velocity)
        else:
            look = params.add(velocity.scale(decay))
            _, g = backward(arch, look, X, y)
            velocity = velocity.scale(decay).sub(g.scale(step))
            params = params.add(velocity)
    return params, velocity


def mewma_update(prev: GradientSet, fresh: GradientSet, rho: float) -> GradientSet:
    """Exponentially weighted moving average: rho*fresh + (1-rho)*prev.

    rho = 1 keeps only the latest gradient.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError("moving-average weight must lie in (0, 1]")
    prev._check(fresh)
    return fresh.scale(rho).add(prev.scale(1.0 - rho))


def _fold_exchanged_gradients(psi: ParamSet, grads: list[GradientSet],
                              hyper: HyperParams,
                              velocity: GradientSet | None,
                              ) -> tuple[ParamSet, GradientSet | None]:
    """Apply exchanged neighbor gradients to an aggregate.

    Plain mode runs one descent step per gradient sequentially; momentum
    folds their weighted sum into the shared velocity first.
    """
    n_layers = len(psi.weights)
    rates = per_layer_rates(hyper.grad_rates, n_layers)
    if hyper.momentum == "none":
        out = psi
        for g in grads:
            out = out.sub(g.scale_per_layer(rates))
        return out, velocity
    if velocity is None:
        velocity = psi.zeros_like()
    acc = psi.zeros_like()
    for g in grads:
        acc = acc.add(g.scale_per_layer(rates))
    velocity = velocity.scale(hyper.momentum_decay).sub(acc)
    return psi.add(velocity), velocity


def _maybe_quantize(grad: GradientSet, hyper: HyperParams) -> GradientSet:
    if hyper.quantize_numerics:
        return quantize_params(grad, hyper.quantize_bits)
    return grad


# ---------------------------------------------------------------------------
# Round transitions
# ---------------------------------------------------------------------------

def cfa_round(state: NodeState, inbox: list[ExchangeMsg],
              alpha: Mapping[int, float], hyper: HyperParams, shard: Shard,
              arch: Architecture, data_seed: int) -> tuple[NodeState, ExchangeMsg]:
    """Consensus round: aggregate received neighbor models, then run one
    local SGD pass. Missing neighbor messages drop out of the innovation
    sum for this round; with no neighbors at all this reduces to isolated
    training."""
    t = state.round
    received = {m.sender: m.model for m in inbox if m.sender in alpha}
    psi = consensus_aggregate(state.model, received, hyper.eps,
                              {i: alpha[i] for i in received})
    model, velocity = model_update(arch, psi, shard, hyper, data_seed, t,
                                   velocity=state.velocity)
    new_state = NodeState(state.node, model, psi, dict(state.grad_store),
                          velocity, t + 1)
    payload = model
    if hyper.momentum == "nesterov" and velocity is not None:
        payload = model.add(velocity.scale(hyper.momentum_decay))
    return new_state, ExchangeMsg(state.node, t + 1, payload, None)


def isolated_round(state: NodeState, hyper: HyperParams, shard: Shard,
                   arch: Architecture, data_seed: int) -> NodeState:
    """No-cooperation baseline: one local pass, no messages."""
    model, velocity = model_update(arch, state.model, shard, hyper,
                                   data_seed, state.round,
                                   velocity=state.velocity)
    return NodeState(state.node, model, state.model, dict(state.grad_store),
                     velocity, state.round + 1)


def cfa_ge_round_2stage(state: NodeState, inbox: list[ExchangeMsg],
                        alpha: Mapping[int, float], hyper: HyperParams,
                        shard: Shard, arch: Architecture, neighbors,
                        data_seed: int) -> tuple[NodeState, ExchangeMsg]:
    """Asynchronous gradient-exchange round.

    Inbox messages carry the neighbors' shared models plus gradients of
    neighbor data predicted at the model this node shared last round. The
    node (a) folds the received models into its own by innovation
    averaging, (b) refreshes its per-neighbor predicted gradients on one
    local batch each and updates their moving averages, (c) applies the
    received gradients, one descent step per sender, and (d) runs the
    local pass. A missing message simply skips that neighbor's terms for
    the round.
    """
    t = state.round
    neighbors = tuple(neighbors)
    received = {m.sender: m for m in inbox if m.sender in set(neighbors)}

    models = {i: m.model for i, m in received.items()}
    psi = consensus_aggregate(state.model, models, hyper.eps,
                              {i: alpha[i] for i in models})

    zeros = state.model.zeros_like()
    store: dict[int, GradientSet] = {}
    for i in neighbors:
        prev = state.grad_store.get(i, zeros)
        if i in received:
            fresh = gradient_for_peer(arch, received[i].model, shard,
                                      hyper.batch_size, data_seed, t, i)
            store[i] = mewma_update(prev, fresh, hyper.mewma_rho)
        else:
            store[i] = prev

    incoming = []
    for i in sorted(received):
        grads = received[i].gradients or {}
        g = grads.get(state.node)
        if g is not None:
            incoming.append(_maybe_quantize(g, hyper))
    psi_t, velocity = _fold_exchanged_gradients(psi, incoming, hyper,
                                                state.velocity)

    model, velocity = model_update(arch, psi_t, shard, hyper, data_seed, t,
                                   velocity=velocity,
                                   first_step=hyper.beta_self)

    new_state = NodeState(state.node, model, psi, store, velocity, t + 1)
    # The shared payload must reflect this round's local training: with a
    # full consensus step the receiver cancels its own model, so a stale
    # payload would freeze the network at the initial consensus.
    payload = model
    if hyper.momentum == "nesterov" and velocity is not None:
        payload = model.add(velocity.scale(hyper.momentum_decay))
    out_grads = {i: _maybe_quantize(store[i], hyper) for i in neighbors}
    return new_state, ExchangeMsg(state.node, t + 1, payload, out_grads)


def _ge_synchronous_update(state: NodeState, neighbor_models: Mapping[int, ParamSet],
                           neighbor_shards: Mapping[int, Shard],
                           alpha: Mapping[int, float], hyper: HyperParams,
                           shard: Shard, arch: Architecture, data_seed: int,
                           ) -> tuple[ParamSet, ParamSet, GradientSet | None]:
    """Shared core of the synchronous gradient-exchange round: returns
    (aggregate, updated model, velocity)."""
    t = state.round
    psi = consensus_aggregate(state.model, dict(neighbor_models), hyper.eps,
                              {i: alpha[i] for i in neighbor_models})
    grads = []
    for i in sorted(neighbor_models):
        if i not in neighbor_shards:
            raise ValueError(f"neighbor {i}'s shard is unavailable; the "
                             "synchronous scheme cannot proceed")
        g = gradient_for_peer(arch, psi, neighbor_shards[i],
                              hyper.batch_size, data_seed, t, state.node)
        grads.append(_maybe_quantize(g, hyper))
    psi_t, velocity = _fold_exchanged_gradients(psi, grads, hyper,
                                                state.velocity)
    model, velocity = model_update(arch, psi_t, shard, hyper, data_seed, t,
                                   velocity=velocity,
                                   first_step=hyper.beta_self)
    return psi, model, velocity


def cfa_ge_round_4stage(state: NodeState, neighbor_models: Mapping[int, ParamSet],
                        neighbor_shards: Mapping[int, Shard],
                        alpha: Mapping[int, float], hyper: HyperParams,
                        shard: Shard, arch: Architecture,
                        data_seed: int) -> NodeState:
    """Strictly synchronous gradient-exchange round.

    Every neighbor evaluates a fresh single-batch gradient of its own data
    at this node's aggregate before the local pass runs; all neighbor
    shards must therefore be reachable within the round.
    """
    psi, model, velocity = _ge_synchronous_update(
        state, neighbor_models, neighbor_shards, alpha, hyper, shard, arch,
        data_seed)
    return NodeState(state.node, model, psi, dict(state.grad_store),
                     velocity, state.round + 1)


def cfa_ge_warmup_round(state: NodeState, neighbor_models: Mapping[int, ParamSet],
                        neighbor_aggregates: Mapping[int, ParamSet],
                        neighbor_shards: Mapping[int, Shard],
                        alpha: Mapping[int, float], hyper: HyperParams,
                        shard: Shard, arch: Architecture,
                        data_seed: int) -> tuple[NodeState, ExchangeMsg]:
    """Synchronous round that also primes the asynchronous scheme.

    Runs the synchronous update, then refreshes this node's per-neighbor
    predicted gradients at the supplied neighbor aggregates so the next
    round can switch to the two-stage message exchange seamlessly.
    """
    t = state.round
    psi, model, velocity = _ge_synchronous_update(
        state, neighbor_models, neighbor_shards, alpha, hyper, shard, arch,
        data_seed)
    zeros = state.model.zeros_like()
    store: dict[int, GradientSet] = {}
    for i in sorted(neighbor_aggregates):
        fresh = gradient_for_peer(arch, neighbor_aggregates[i], shard,
                                  hyper.batch_size, data_seed, t, i)
        store[i] = mewma_update(state.grad_store.get(i, zeros), fresh,
                                hyper.mewma_rho)
    new_state = NodeState(state.node, model, psi, store, velocity, t + 1)
    payload = model
    if hyper.momentum == "nesterov" and velocity is not None:
        payload = model.add(velocity.scale(hyper.momentum_decay))
    out_grads = {i: _maybe_quantize(store[i], hyper) for i in store}
    return new_state, ExchangeMsg(state.node, t + 1, payload, out_grads)


# ---------------------------------------------------------------------------
# Server-side baselines
# ---------------------------------------------------------------------------

def fa_round(arch: Architecture, model: ParamSet, participants,
             shards: list[Shard], mu_server: float,
             quantize_bits: int = 16, apply_quantize: bool = False) -> ParamSet:
    """Server aggregation: average the participating devices' full-shard
    gradients at the current global model, weighted by shard fraction."""
    participants = sorted(participants)
    if not participants:
        raise ValueError("at least one device must participate")
    total = sum(s.size for s in shards)
    acc = model.zeros_like()
    for k in participants:
        sh = shards[k]
        _, g = backward(arch, model, sh.features, sh.labels)
        if apply_quantize:
            g = quantize_params(g, quantize_bits)
        acc = acc.add(g.scale(sh.size / total))
    return model.sub(acc.scale(mu_server / len(participants)))


def centralized_step(arch: Architecture, model: ParamSet, data,
                     mu_server: float) -> ParamSet:
    """One full gradient step on the shard-fraction-weighted global loss."""
    if isinstance(data, Dataset):
        shards = [whole_shard(data)]
    else:
        shards = list(data)
    total = sum(s.size for s in shards)
    grad = model.zeros_like()
    for sh in shards:
        _, g = backward(arch, model, sh.features, sh.labels)
        grad = grad.add(g.scale(sh.size / total))
    return model.sub(grad.scale(mu_server))
