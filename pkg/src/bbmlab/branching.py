"""Exact event-driven simulation of branching Brownian motion.

One particle performs standard Brownian motion; after an exponential
waiting time of mean 1 it splits into k particles with probability p_k,
and the offspring continue independently.  Positions are sampled only at
branch events, checkpoints and the horizon, so there is no path
discretization anywhere.

Trees are stored in struct-of-arrays form (parent pointers plus per-node
birth/end times and positions), built generation by generation with
vectorized draws.  Node randomness is keyed by lineage words (see
``bbmlab.rng``), which makes a realization a pure function of
(config, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence

import numpy as np

from . import rng
from .errors import CapacityError, ConfigError, EmptyConfigurationError
from .ioutils import fmt_float

SQRT2 = math.sqrt(2.0)
LOG_CORRECTION = 3.0 / (2.0 * SQRT2)

_TAG_EVENT = 0      # waiting time + offspring count
_TAG_INCREMENT = 1  # Gaussian displacement pieces

DEFAULT_NODE_CAP = 4_000_000


def front_centering(t: float) -> float:
    """Front position sqrt(2)*t - (3/(2*sqrt(2)))*log(t).

    Only meaningful in the asymptotic regime; t <= 1 is rejected because
    the logarithmic term changes sign there.
    """
    if t <= 1.0:
        raise ConfigError(f"front_centering requires t > 1, got {t}")
    return SQRT2 * t - LOG_CORRECTION * math.log(t)


@dataclass(frozen=True)
class OffspringLaw:
    """Offspring distribution p_k on k = 1..k_max with mean exactly 2.

    ``require_mean_two=False`` admits degenerate laws (e.g. p_1 = 1, a
    single lineage) that are useful as analytic test cases but sit outside
    the standard normalization.
    """

    probabilities: tuple[float, ...]  # probabilities[i] = p_{i+1}
    require_mean_two: bool = True

    #: sum of k(k-1) p_k, computed on construction
    factorial_moment: float = field(init=False, repr=False)

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise ConfigError("offspring law needs at least one probability")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ConfigError("offspring probabilities must lie in [0, 1]")
        k = np.arange(1, len(p) + 1, dtype=np.float64)
        if abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError(f"offspring probabilities sum to {p.sum()!r}, not 1")
        mean = float((k * p).sum())
        if self.require_mean_two and abs(mean - 2.0) > 1e-12:
            raise ConfigError(f"offspring mean must be 2, got {mean!r}")
        object.__setattr__(self, "factorial_moment", float((k * (k - 1) * p).sum()))
        object.__setattr__(self, "_cumulative", np.cumsum(p))

    @classmethod
    def binary(cls) -> "OffspringLaw":
        return cls((0.0, 1.0))

    @classmethod
    def single(cls) -> "OffspringLaw":
        """Degenerate law p_1 = 1: the population never grows."""
        return cls((1.0,), require_mean_two=False)

    @property
    def k_max(self) -> int:
        return len(self.probabilities)

    def sample_counts(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms to offspring counts by inverse CDF."""
        return np.searchsorted(self._cumulative, u, side="right").astype(np.int64) + 1

    def as_dict(self) -> dict[str, float]:
        return {str(k + 1): p for k, p in enumerate(self.probabilities)}

    @classmethod
    def from_dict(cls, d: dict) -> "OffspringLaw":
        kmax = max(int(k) for k in d)
        probs = [0.0] * kmax
        for k, p in d.items():
            probs[int(k) - 1] = float(p)
        mean = sum((i + 1) * p for i, p in enumerate(probs))
        return cls(tuple(probs), require_mean_two=abs(mean - 2.0) <= 1e-12)


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    offspring: OffspringLaw = field(default_factory=OffspringLaw.binary)
    seed: int = 0
    barrier_offset: Optional[float] = None
    checkpoint_times: tuple[float, ...] = ()
    node_cap: int = DEFAULT_NODE_CAP

    def __post_init__(self):
        if not self.horizon > 0.0:
            raise ConfigError(f"horizon must be > 0, got {self.horizon}")
        if self.barrier_offset is not None and self.barrier_offset < 0.0:
            raise ConfigError("barrier_offset must be >= 0")
        cps = tuple(float(c) for c in self.checkpoint_times)
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise ConfigError("checkpoint_times must be strictly increasing")
        if cps and (cps[0] <= 0.0 or cps[-1] > self.horizon):
            raise ConfigError("checkpoint_times must lie in (0, horizon]")
        object.__setattr__(self, "checkpoint_times", cps)


class BranchingTree:
    """Realized branching tree in struct-of-arrays form.

    ``parent[i]`` is -1 for the root.  A node is a leaf iff it has no
    children; unpruned leaves have ``end_time == horizon``.  ``children``
    lists are materialized lazily from the parent array.
    """

    def __init__(self, *, parent, birth_time, end_time, birth_position,
                 end_position, pruned, horizon, seed, offspring,
                 barrier_offset, checkpoints):
        self.parent = parent
        self.birth_time = birth_time
        self.end_time = end_time
        self.birth_position = birth_position
        self.end_position = end_position
        self.pruned = pruned
        self.horizon = float(horizon)
        self.seed = int(seed)
        self.offspring = offspring
        self.barrier_offset = barrier_offset
        #: positions of all particles alive at each checkpoint time,
        #: as {time: (node_ids, positions)}
        self.checkpoints = checkpoints
        self._children = None
        self._leaf_ids = None

    # -- structure ---------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return 0

    @property
    def pruned_count(self) -> int:
        return int(self.pruned.sum())

    def is_leaf(self) -> np.ndarray:
        """Boolean mask over nodes: True where the node has no children."""
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.parent[self.parent >= 0]] = False
        return mask

    def leaf_ids(self) -> np.ndarray:
        """Ids of unpruned leaves (end_time == horizon), ascending."""
        if self._leaf_ids is None:
            mask = self.is_leaf() & ~self.pruned
            self._leaf_ids = np.nonzero(mask)[0]
        return self._leaf_ids

    def children(self, node: int) -> list[int]:
        if self._children is None:
            order = np.argsort(self.parent[1:], kind="stable")
            kids = order + 1
            starts = np.searchsorted(self.parent[kids], np.arange(self.n_nodes))
            ends = np.searchsorted(self.parent[kids], np.arange(self.n_nodes), side="right")
            self._children = (kids, starts, ends)
        kids, starts, ends = self._children
        return kids[starts[node]:ends[node]].tolist()

    # -- ancestry ----------------------------------------------------------

    def ancestor_alive_at(self, nodes: np.ndarray, s: float) -> np.ndarray:
        """For each node, the ancestor edge alive at time s.

        The edge alive at s is the one with birth_time <= s < end_time
        (children, not the parent, at an event exactly at s).  Vectorized
        pointer jumping; O(depth) passes.
        """
        cur = np.array(nodes, dtype=np.int64, copy=True)
        while True:
            up = self.birth_time[cur] > s
            if not up.any():
                return cur
            cur[up] = self.parent[cur[up]]

    # -- serialization -----------------------------------------------------

    def write_ndjson(self, fh: IO[str]) -> None:
        header = {
            "horizon": fmt_float(self.horizon),
            "seed": self.seed,
            "offspring": self.offspring.as_dict(),
            "barrier_offset": None if self.barrier_offset is None else fmt_float(self.barrier_offset),
            "pruned_count": self.pruned_count,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(self.n_nodes):
            row = {
                "id": i,
                "parent": int(self.parent[i]) if self.parent[i] >= 0 else None,
                "birth_time": fmt_float(self.birth_time[i]),
                "end_time": fmt_float(self.end_time[i]),
                "birth_position": fmt_float(self.birth_position[i]),
                "end_position": fmt_float(self.end_position[i]),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_tree_ndjson(fh: IO[str]) -> BranchingTree:
    header = json.loads(fh.readline())
    rows = [json.loads(line) for line in fh if line.strip()]
    n = len(rows)
    parent = np.full(n, -1, dtype=np.int64)
    birth_time = np.empty(n)
    end_time = np.empty(n)
    birth_position = np.empty(n)
    end_position = np.empty(n)
    for r in rows:
        i = r["id"]
        parent[i] = -1 if r["parent"] is None else r["parent"]
        birth_time[i] = float(r["birth_time"])
        end_time[i] = float(r["end_time"])
        birth_position[i] = float(r["birth_position"])
        end_position[i] = float(r["end_position"])
    horizon = float(header["horizon"])
    has_child = np.zeros(n, dtype=bool)
    has_child[parent[parent >= 0]] = True
    pruned = ~has_child & (end_time < horizon)
    barrier = header.get("barrier_offset")
    return BranchingTree(
        parent=parent, birth_time=birth_time, end_time=end_time,
        birth_position=birth_position, end_position=end_position,
        pruned=pruned, horizon=horizon, seed=int(header["seed"]),
        offspring=OffspringLaw.from_dict(header["offspring"]),
        barrier_offset=None if barrier is None else float(barrier),
        checkpoints={},
    )


def simulate_tree(config: SimConfig) -> BranchingTree:
    """Simulate one tree exactly, generation wave by generation wave."""
    horizon = config.horizon
    seed = config.seed
    law = config.offspring
    barrier = config.barrier_offset
    cps = np.asarray(config.checkpoint_times, dtype=np.float64)

    parts_parent: list[np.ndarray] = []
    parts_birth_t: list[np.ndarray] = []
    parts_end_t: list[np.ndarray] = []
    parts_birth_x: list[np.ndarray] = []
    parts_end_x: list[np.ndarray] = []
    parts_pruned: list[np.ndarray] = []
    cp_nodes: dict[float, list[np.ndarray]] = {float(c): [] for c in cps}
    cp_positions: dict[float, list[np.ndarray]] = {float(c): [] for c in cps}

    # active front of the construction
    act_words = np.array([rng.root_word()], dtype=np.uint64)
    act_parent = np.array([-1], dtype=np.int64)
    act_birth_t = np.zeros(1)
    act_birth_x = np.zeros(1)
    n_nodes = 0

    while act_words.size:
        n = act_words.size
        if n_nodes + n > config.node_cap:
            raise CapacityError(
                f"node cap {config.node_cap} exceeded ({n_nodes} nodes built, "
                f"{n} active)", nodes_built=n_nodes,
                time_reached=float(act_birth_t.min()))
        ids = np.arange(n_nodes, n_nodes + n, dtype=np.int64)
        n_nodes += n

        u_wait, u_off = rng.uniform_pair(seed, act_words, np.uint32(0), _TAG_EVENT)
        wait = -np.log(u_wait)
        raw_end = act_birth_t + wait
        branches = raw_end < horizon
        end_t = np.where(branches, raw_end, horizon)

        # walk each edge through the checkpoints it crosses, sampling the
        # Brownian increment piece by piece
        cur_t = act_birth_t.copy()
        cur_x = act_birth_x.copy()
        inc = 0
        for c in cps:
            alive = (act_birth_t < c) & (c <= end_t) & (c < horizon)
            if alive.any():
                dt = c - cur_t[alive]
                z = rng.normals(seed, act_words[alive], np.uint32(inc), _TAG_INCREMENT)
                cur_x[alive] = cur_x[alive] + np.sqrt(dt) * z
                cur_t[alive] = c
                cp_nodes[float(c)].append(ids[alive])
                cp_positions[float(c)].append(cur_x[alive])
            inc += 1
        dt = end_t - cur_t
        z = rng.normals(seed, act_words, np.uint32(inc), _TAG_INCREMENT)
        end_x = cur_x + np.sqrt(dt) * z

        if barrier is not None:
            pruned = branches & (end_x < SQRT2 * end_t - barrier)
        else:
            pruned = np.zeros(n, dtype=bool)

        parts_parent.append(act_parent)
        parts_birth_t.append(act_birth_t)
        parts_end_t.append(end_t)
        parts_birth_x.append(act_birth_x)
        parts_end_x.append(end_x)
        parts_pruned.append(pruned)

        # spawn the next generation
        spawning = branches & ~pruned
        if not spawning.any():
            break
        k = law.sample_counts(u_off[spawning])
        rep_words = np.repeat(act_words[spawning], k)
        rep_ids = np.repeat(ids[spawning], k)
        rep_end_t = np.repeat(end_t[spawning], k)
        rep_end_x = np.repeat(end_x[spawning], k)
        # per-child index within its sibling group
        offsets = np.concatenate([[0], np.cumsum(k)[:-1]])
        sibling = np.arange(k.sum(), dtype=np.int64) - np.repeat(offsets, k)
        act_words = rng.child_words(rep_words, sibling)
        act_parent = rep_ids
        act_birth_t = rep_end_t
        act_birth_x = rep_end_x

    tree = BranchingTree(
        parent=np.concatenate(parts_parent),
        birth_time=np.concatenate(parts_birth_t),
        end_time=np.concatenate(parts_end_t),
        birth_position=np.concatenate(parts_birth_x),
        end_position=np.concatenate(parts_end_x),
        pruned=np.concatenate(parts_pruned),
        horizon=horizon, seed=seed, offspring=law,
        barrier_offset=barrier,
        checkpoints={},
    )
    checkpoints = {}
    for c in cps:
        c = float(c)
        if c == horizon:
            lid = tree.leaf_ids()
            checkpoints[c] = (lid, tree.end_position[lid])
        else:
            node_arr = (np.concatenate(cp_nodes[c]) if cp_nodes[c]
                        else np.empty(0, dtype=np.int64))
            pos_arr = (np.concatenate(cp_positions[c]) if cp_positions[c]
                       else np.empty(0))
            order = np.argsort(node_arr)
            checkpoints[c] = (node_arr[order], pos_arr[order])
    tree.checkpoints = checkpoints
    return tree


@dataclass
class ExtremalConfiguration:
    """Leaf positions recentered by the front, in decreasing order."""

    positions: np.ndarray   # strictly decreasing (ties broken by leaf id)
    leaf_ids: np.ndarray    # tree leaf id per rank
    horizon: float

    def __len__(self) -> int:
        return len(self.positions)

    def window(self, low: float, high: float = math.inf) -> "ExtremalConfiguration":
        """Restriction to the half-open window (low, high], order preserved."""
        if not low < high:
            raise ConfigError(f"window requires low < high, got ({low}, {high})")
        keep = (self.positions > low) & (self.positions <= high)
        return ExtremalConfiguration(self.positions[keep], self.leaf_ids[keep],
                                     self.horizon)


def leaf_configuration(tree: BranchingTree) -> ExtremalConfiguration:
    """Centered leaf positions x_i - m(t), sorted decreasing."""
    lid = tree.leaf_ids()
    if lid.size == 0:
        raise EmptyConfigurationError(
            "all leaves pruned; barrier too aggressive")
    centered = tree.end_position[lid] - front_centering(tree.horizon)
    order = np.lexsort((lid, -centered))
    return ExtremalConfiguration(centered[order], lid[order], tree.horizon)


def leaves_in_window(config: ExtremalConfiguration, low: float,
                     high: float = math.inf) -> ExtremalConfiguration:
    return config.window(low, high)
