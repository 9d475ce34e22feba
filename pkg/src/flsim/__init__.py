"""Server-less federated learning over device-to-device graphs.

Deterministic simulator and library for consensus-based model averaging,
its gradient-exchange variant, and the standard server / centralized /
isolated baselines, with exact communication-overhead accounting.
"""

from .algorithms import (ExchangeMsg, HyperParams, NodeState,
                         centralized_step, cfa_ge_round_2stage,
                         cfa_ge_round_4stage, cfa_round, consensus_aggregate,
                         fa_round, init_node_state, isolated_round,
                         mewma_update, model_update, quantize,
                         quantize_params)
from .data import (Dataset, FormatError, PartitionSpec, Shard, load_idx,
                   load_native, minibatches, partition, save_native,
                   synth_digits, synth_radar, whole_shard)
from .engine import (DivergenceError, RoundMetrics, SimConfig, SimResult,
                     convergence_bound, overhead_bytes, rounds_to_target,
                     run, write_metrics_csv)
from .nn import (Architecture, GradientSet, LayerSpec, ParamSet, ShapeError,
                 backward, build_architecture, cnn, cross_entropy, evaluate,
                 forward, init_params, load_checkpoint, mnist_1fc,
                 momentum_step, save_checkpoint, sgd_step, toy_dense, two_nn)
from .topology import (MixingWeights, Topology, TopologySchedule,
                       epsilon_bound, full_topology, k_regular,
                       line_topology, mixing_weights, ring_topology)

__version__ = "0.1.0"
