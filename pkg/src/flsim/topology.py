"""Device-to-device interaction graphs, mixing weights and schedules.

Nodes average neighbor model innovations, so every graph carries per-node
neighbor sets (self excluded) plus shard-size-proportional mixing weights
whose rows sum to one. Graphs may vary over rounds via a schedule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Topology:
    """Directed interaction graph over K nodes.

    neighbors[k] lists the nodes whose messages node k consumes, self
    excluded. Generators in this module produce symmetric graphs.
    """

    K: int
    neighbors: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("need at least one node")
        if len(self.neighbors) != self.K:
            raise ValueError("neighbor list length != node count")
        for k, nbrs in enumerate(self.neighbors):
            for i in nbrs:
                if not 0 <= i < self.K:
                    raise ValueError(f"node {k} lists out-of-range neighbor {i}")
                if i == k:
                    raise ValueError(f"node {k} lists itself as a neighbor")
            if len(set(nbrs)) != len(nbrs):
                raise ValueError(f"node {k} lists a duplicate neighbor")

    def degree(self, k: int) -> int:
        return len(self.neighbors[k])

    def max_degree(self) -> int:
        return max(len(n) for n in self.neighbors)

    def is_connected(self) -> bool:
        """Reachability over the undirected support of the edge set."""
        if self.K == 1:
            return True
        adj = [set(n) for n in self.neighbors]
        for k, nbrs in enumerate(self.neighbors):
            for i in nbrs:
                adj[i].add(k)
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.K

    def to_text(self) -> str:
        """Adjacency-list text, one "k: i,j,..." line per node."""
        return "\n".join(
            f"{k}: {','.join(str(i) for i in nbrs)}"
            for k, nbrs in enumerate(self.neighbors)) + "\n"


def validate_connected(topology: Topology, allow_disconnected: bool = False) -> Topology:
    if not allow_disconnected and not topology.is_connected():
        raise ValueError("graph is not connected; models cannot reach agreement "
                         "(pass allow_disconnected=True to override)")
    return topology


def from_text(text: str, allow_disconnected: bool = False) -> Topology:
    """Parse the adjacency-list text emitted by Topology.to_text."""
    rows: dict[int, tuple[int, ...]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        head, _, tail = line.partition(":")
        nbrs = tuple(int(p) for p in tail.split(",") if p.strip() != "")
        rows[int(head)] = nbrs
    K = max(rows) + 1 if rows else 0
    neighbors = tuple(rows.get(k, ()) for k in range(K))
    return validate_connected(Topology(K, neighbors), allow_disconnected)


def line_topology(K: int) -> Topology:
    """Path graph: endpoints have one neighbor, interior nodes two."""
    if K < 2:
        raise ValueError("a line needs at least 2 nodes")
    neighbors = []
    for k in range(K):
        nbrs = [i for i in (k - 1, k + 1) if 0 <= i < K]
        neighbors.append(tuple(nbrs))
    return Topology(K, tuple(neighbors))


def ring_topology(K: int) -> Topology:
    """Cycle graph: every node talks to its two ring neighbors."""
    if K < 3:
        raise ValueError("a ring needs at least 3 nodes")
    return Topology(K, tuple(
        tuple(sorted(((k - 1) % K, (k + 1) % K))) for k in range(K)))


def full_topology(K: int) -> Topology:
    if K < 2:
        raise ValueError("a full graph needs at least 2 nodes")
    return Topology(K, tuple(
        tuple(i for i in range(K) if i != k) for k in range(K)))


def _pair_stubs(K: int, degree: int, rng: np.random.Generator):
    """One stub-pairing attempt: repeatedly shuffle and pair the leftover
    stubs, skipping self-loops and parallel edges. Returns an edge set or
    None when the leftovers cannot be paired off."""
    edges: set[tuple[int, int]] = set()
    stubs = list(range(K)) * degree
    while stubs:
        rng.shuffle(stubs)
        leftover: dict[int, int] = {}
        it = iter(stubs)
        for a, b in zip(it, it):
            if a > b:
                a, b = b, a
            if a != b and (a, b) not in edges:
                edges.add((a, b))
            else:
                leftover[a] = leftover.get(a, 0) + 1
                leftover[b] = leftover.get(b, 0) + 1
        # a retry can only help if some leftover pair is still joinable
        if leftover:
            nodes = sorted(leftover)
            joinable = any((a, b) not in edges
                           for i, a in enumerate(nodes)
                           for b in nodes[i + 1:])
            if not joinable:
                return None
        stubs = [n for n, c in leftover.items() for _ in range(c)]
    return edges


def k_regular(K: int, degree: int, seed: int, max_tries: int = 100) -> Topology:
    """Random connected k-regular graph via stub pairing with repair.

    Attempts that dead-end or come out disconnected restart from a fresh
    sub-seed, up to max_tries.
    """
    if degree < 2:
        raise ValueError("degree must be at least 2")
    if degree >= K:
        raise ValueError("degree must be below the node count")
    if (K * degree) % 2 != 0:
        raise ValueError(f"no {degree}-regular graph on {K} nodes exists "
                         "(odd stub count)")
    for attempt in range(max_tries):
        rng = np.random.default_rng([int(seed), 303, attempt])
        edges = _pair_stubs(K, degree, rng)
        if edges is None:
            continue
        neighbors = [[] for _ in range(K)]
        for a, b in edges:
            neighbors[a].append(b)
            neighbors[b].append(a)
        topo = Topology(K, tuple(tuple(sorted(n)) for n in neighbors))
        if topo.is_connected():
            return topo
    raise ValueError(f"no connected {degree}-regular graph found in "
                     f"{max_tries} tries")


@dataclass(frozen=True)
class MixingWeights:
    """Per node k, a map neighbor -> weight in (0, 1]; rows sum to one."""

    rows: tuple[dict[int, float], ...]

    def __post_init__(self):
        for k, row in enumerate(self.rows):
            if row and abs(sum(row.values()) - 1.0) > 1e-12:
                raise ValueError(f"mixing weights of node {k} do not sum to 1")
            for i, a in row.items():
                if not 0.0 < a <= 1.0:
                    raise ValueError(f"weight {a} of edge ({k},{i}) outside (0,1]")

    def row(self, k: int) -> dict[int, float]:
        return self.rows[k]


def mixing_weights(topology: Topology, shard_sizes) -> MixingWeights:
    """Shard-size-proportional weights: node k weighs neighbor i by
    E_i / sum of neighbor sizes."""
    sizes = [int(s) for s in shard_sizes]
    if len(sizes) != topology.K:
        raise ValueError("need one shard size per node")
    if any(s < 1 for s in sizes):
        raise ValueError("every shard must hold at least one example")
    rows = []
    for k in range(topology.K):
        nbrs = topology.neighbors[k]
        total = sum(sizes[i] for i in nbrs)
        rows.append({i: sizes[i] / total for i in nbrs})
    return MixingWeights(tuple(rows))


def epsilon_bound(topology: Topology, weights: MixingWeights) -> tuple[float, float]:
    """Open stability interval (0, 1/Delta) for the consensus step size,
    with Delta the maximum weighted degree."""
    delta = max((sum(row.values()) for row in weights.rows), default=1.0)
    if delta <= 0:
        raise ValueError("weighted degree must be positive")
    return (0.0, 1.0 / delta)


class TopologySchedule:
    """Round-indexed graph: entries ((start, stop), topology) must tile
    [0, T) with no gap or overlap."""

    def __init__(self, entries):
        entries = sorted(entries, key=lambda e: e[0][0])
        if not entries:
            raise ValueError("empty schedule")
        expected = entries[0][0][0]
        if expected != 0:
            raise ValueError("schedule must start at round 0")
        for (start, stop), topo in entries:
            if stop <= start:
                raise ValueError(f"empty range [{start}, {stop})")
            if start > expected:
                raise ValueError(f"gap before round {start}")
            if start < expected:
                raise ValueError(f"overlap at round {start}")
            expected = stop
        self.entries = [((int(a), int(b)), t) for (a, b), t in entries]
        self.total_rounds = expected
        ks = {t.K for _, t in self.entries}
        if len(ks) != 1:
            raise ValueError("all scheduled graphs must share the node count")
        self.K = ks.pop()

    def query(self, t: int) -> Topology:
        for (start, stop), topo in self.entries:
            if start <= t < stop:
                return topo
        raise ValueError(f"round {t} outside the scheduled range "
                         f"[0, {self.total_rounds})")


def constant_schedule(topology: Topology, rounds: int) -> TopologySchedule:
    return TopologySchedule([((0, rounds), topology)])
