"""Replica pipeline: simulate one tree, reduce it to a RunRecord, discard.

Trees at interesting horizons are too large to keep; every per-replica
statistic the estimators need (martingale values, extremal summaries,
thinned points, genealogy probes) is computed while the tree is alive.
Replicas are pure functions of (parameters, seed) and run in a process
pool; results are written in seed order so output files do not depend on
scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Iterable, Optional, Sequence

import numpy as np

from .branching import (BranchingTree, OffspringLaw, SimConfig,
                        front_centering, leaf_configuration, simulate_tree)
from .errors import ConfigError
from .genealogy import _cluster_labels, _first_occurrence_mask, has_mid_range_pair
from .ioutils import config_hash
from .martingale import RunRecord, derivative_martingale, second_order_sum


@dataclass(frozen=True)
class ProbeConfig:
    """Per-replica diagnostics recorded alongside the scalars."""

    thinned_q: float = 0.5
    #: number of leading thinned points kept per run.  The list must not be
    #: truncated by a fixed positional floor: conditioning "at least k
    #: points above a floor" would bias the top-k spacings.
    thinned_top: int = 40
    probe_y: float = -3.0
    #: r values (r_d = r_g = r) for the thinning-stability probe
    stability_r: tuple[float, ...] = (3.0, 4.0)
    stability_grid: int = 9
    #: r values (r_d = r_g = r) for the mid-range ancestry probe
    pair_r: tuple[float, ...] = (2.0, 3.0, 4.0)
    top_keep: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    horizon: float
    replicas: int
    base_seed: int = 0
    offspring: OffspringLaw = field(default_factory=OffspringLaw.binary)
    barrier_offset: Optional[float] = None
    checkpoint_times: tuple[float, ...] = ()
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    workers: int = 1

    def sim_config(self, replica: int) -> SimConfig:
        return SimConfig(horizon=self.horizon, offspring=self.offspring,
                         seed=self.base_seed + replica,
                         barrier_offset=self.barrier_offset,
                         checkpoint_times=self.checkpoint_times)

    def hash(self) -> str:
        d = {
            "horizon": self.horizon,
            "replicas": self.replicas,
            "base_seed": self.base_seed,
            "offspring": ",".join(f"{p:.17g}" for p in self.offspring.probabilities),
            "barrier_offset": self.barrier_offset,
            "checkpoints": ",".join(f"{c:.17g}" for c in self.checkpoint_times),
            **{f"probe_{k}": str(v) for k, v in asdict(self.probe).items()},
        }
        return config_hash(d)

    def header(self) -> dict:
        return {
            "horizon": self.horizon,
            "replicas": self.replicas,
            "base_seed": self.base_seed,
            "offspring": self.offspring.as_dict(),
            "barrier_offset": self.barrier_offset,
            "checkpoint_times": list(self.checkpoint_times),
            "probe": asdict(self.probe),
            "config_hash": self.hash(),
        }


def thinned_points_above(tree: BranchingTree, q: float, floor: float) -> np.ndarray:
    """Positions of thinned representatives above ``floor``, decreasing.

    Restricting to leaves above the floor is exact: any cluster whose
    maximum clears the floor has that maximum inside the candidate set.
    """
    lid = tree.leaf_ids()
    centered = tree.end_position[lid] - front_centering(tree.horizon)
    above = centered > floor
    if not above.any():
        return np.empty(0)
    cand_ids = lid[above]
    cand_pos = centered[above]
    order = np.lexsort((cand_ids, -cand_pos))
    cand_ids, cand_pos = cand_ids[order], cand_pos[order]
    labels = _cluster_labels(tree, cand_ids, q)
    return cand_pos[_first_occurrence_mask(labels)]


def thinned_top_points(tree: BranchingTree, q: float, top: int
                       ) -> tuple[np.ndarray, float]:
    """The ``top`` largest thinned positions, via an adaptive floor.

    Starts shallow and deepens until the floor demonstrably cannot cut
    into the leading ``top`` representatives; returns (points, floor).
    """
    lid = tree.leaf_ids()
    centered = tree.end_position[lid] - front_centering(tree.horizon)
    lowest = float(centered.min())
    floor = -3.0
    while True:
        pts = thinned_points_above(tree, q, floor)
        if len(pts) >= top or floor <= lowest:
            return pts[:top], floor
        floor -= 3.0


def _stability_sets(tree: BranchingTree, r: float, y: float, grid: int
                    ) -> list[frozenset[int]]:
    t = tree.horizon
    qs = np.linspace(r / t, 1.0 - r / t, grid)
    lid = tree.leaf_ids()
    centered = tree.end_position[lid] - front_centering(t)
    above = centered > y
    cand = lid[above]
    if cand.size == 0:
        return [frozenset()] * grid
    order = np.lexsort((cand, -centered[above]))
    cand = cand[order]
    out = []
    for q in qs:
        labels = _cluster_labels(tree, cand, q)
        out.append(frozenset(int(i) for i in cand[_first_occurrence_mask(labels)]))
    return out


def summarize_tree(tree: BranchingTree, probe: ProbeConfig,
                   cfg_hash: str) -> RunRecord:
    config = leaf_configuration(tree)
    z, zf = derivative_martingale(tree, with_flush_count=True)
    z2, z2f = second_order_sum(tree, with_flush_count=True)
    checkpoint_z = {}
    for s in tree.checkpoints:
        checkpoint_z[float(s)] = (derivative_martingale(tree, s),
                                  second_order_sum(tree, s))
    stability = {}
    for r in probe.stability_r:
        sets = _stability_sets(tree, r, probe.probe_y, probe.stability_grid)
        stability[float(r)] = all(s == sets[0] for s in sets[1:])
    pairs = {}
    for r in probe.pair_r:
        pairs[float(r)] = has_mid_range_pair(tree, probe.probe_y, r, r)
    thin_pts, thin_floor = thinned_top_points(tree, probe.thinned_q,
                                              probe.thinned_top)
    return RunRecord(
        seed=tree.seed,
        horizon=tree.horizon,
        z=z, z2=z2, z_flushed=zf, z2_flushed=z2f,
        max_centered=float(config.positions[0]),
        leaf_count=len(config),
        pruned_count=tree.pruned_count,
        config_hash=cfg_hash,
        top_centered=[float(x) for x in config.positions[:probe.top_keep]],
        thinned_q=probe.thinned_q,
        thinned_floor=thin_floor,
        thinned_points=[float(x) for x in thin_pts],
        checkpoint_z=checkpoint_z,
        thinning_stable=stability,
        mid_pair=pairs,
        probe_y=probe.probe_y,
    )


def run_replica(exp: ExperimentConfig, replica: int) -> RunRecord:
    tree = simulate_tree(exp.sim_config(replica))
    return summarize_tree(tree, exp.probe, exp.hash())


def _worker(args) -> list[dict]:
    exp, replicas = args
    return [run_replica(exp, r).to_json() for r in replicas]


def run_experiment(exp: ExperimentConfig, *, progress=None) -> list[RunRecord]:
    """All replicas, in replica order regardless of scheduling."""
    if exp.horizon <= 1.0:
        raise ConfigError("experiments require horizon > 1")
    replicas = list(range(exp.replicas))
    if exp.workers <= 1 or exp.replicas < 4:
        out = []
        for r in replicas:
            out.append(run_replica(exp, r))
            if progress:
                progress(len(out), exp.replicas)
        return out
    chunk = max(1, min(64, exp.replicas // (exp.workers * 4)))
    batches = [(exp, replicas[i:i + chunk])
               for i in range(0, len(replicas), chunk)]
    records: list[RunRecord] = []
    with ProcessPoolExecutor(max_workers=exp.workers) as pool:
        for part in pool.map(_worker, batches):
            records.extend(RunRecord.from_json(d) for d in part)
            if progress:
                progress(len(records), exp.replicas)
    return records
