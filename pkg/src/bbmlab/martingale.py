"""Derivative martingale and its second-order companion.

Z(s)  = sum over particles alive at s of  y * exp(-sqrt(2) y)
Z2(s) = sum over particles alive at s of  y^2 * exp(-2 sqrt(2) y)

with y = sqrt(2) s - x_k(s).  Evaluated only on exact recorded positions:
at the horizon via the leaves, or at a declared checkpoint time.
Contributions whose exponent falls below -700 are flushed to zero and
counted; they are negligible by construction but would otherwise underflow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional

import numpy as np

from .branching import SQRT2, BranchingTree
from .errors import ConfigError
from .ioutils import fmt_float

UNDERFLOW_EXPONENT = -700.0


def _positions_at(tree: BranchingTree, s: float) -> np.ndarray:
    if s == tree.horizon:
        return tree.end_position[tree.leaf_ids()]
    if s in tree.checkpoints:
        return tree.checkpoints[s][1]
    raise ConfigError(
        f"time {s} is neither the horizon nor a recorded checkpoint")


def _weighted_sum(positions: np.ndarray, s: float, *, power: int,
                  rate: float) -> tuple[float, int]:
    y = SQRT2 * s - positions
    exponent = -rate * y
    keep = exponent >= UNDERFLOW_EXPONENT
    flushed = int((~keep).sum())
    terms = (y[keep] ** power) * np.exp(exponent[keep])
    return float(terms.sum()), flushed


def derivative_martingale(tree: BranchingTree, s: Optional[float] = None,
                          *, with_flush_count: bool = False):
    """Z evaluated at s (default: the horizon)."""
    s = tree.horizon if s is None else s
    z, flushed = _weighted_sum(_positions_at(tree, s), s, power=1, rate=SQRT2)
    return (z, flushed) if with_flush_count else z


def second_order_sum(tree: BranchingTree, s: Optional[float] = None,
                     *, with_flush_count: bool = False):
    """Z2 evaluated at s (default: the horizon)."""
    s = tree.horizon if s is None else s
    z2, flushed = _weighted_sum(_positions_at(tree, s), s, power=2,
                                rate=2.0 * SQRT2)
    return (z2, flushed) if with_flush_count else z2


@dataclass
class RunRecord:
    """Per-replica scalars plus the summaries the statistics suite consumes."""

    seed: int
    horizon: float
    z: float
    z2: float
    max_centered: float
    leaf_count: int
    pruned_count: int
    config_hash: str
    z_flushed: int = 0
    z2_flushed: int = 0
    #: top centered leaf positions, decreasing (bounded length)
    top_centered: list[float] = field(default_factory=list)
    #: thinned points above ``thinned_floor`` at level ``thinned_q``, decreasing
    thinned_q: float = 0.5
    thinned_floor: float = -3.0
    thinned_points: list[float] = field(default_factory=list)
    #: martingale values at checkpoint times: {time: (z, z2)}
    checkpoint_z: dict[float, tuple[float, float]] = field(default_factory=dict)
    #: per (r = r_d = r_g): thinned set above probe_y identical across the q grid
    thinning_stable: dict[float, bool] = field(default_factory=dict)
    #: per (r = r_d = r_g): an extremal pair with ancestry inside (r, t - r)
    mid_pair: dict[float, bool] = field(default_factory=dict)
    probe_y: float = -3.0

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "horizon": fmt_float(self.horizon),
            "z": fmt_float(self.z),
            "z2": fmt_float(self.z2),
            "max_centered": fmt_float(self.max_centered),
            "leaf_count": self.leaf_count,
            "pruned_count": self.pruned_count,
            "config_hash": self.config_hash,
            "z_flushed": self.z_flushed,
            "z2_flushed": self.z2_flushed,
            "top_centered": [fmt_float(x) for x in self.top_centered],
            "thinned_q": fmt_float(self.thinned_q),
            "thinned_floor": fmt_float(self.thinned_floor),
            "thinned_points": [fmt_float(x) for x in self.thinned_points],
            "checkpoint_z": {f"{k:g}": [fmt_float(v[0]), fmt_float(v[1])]
                             for k, v in sorted(self.checkpoint_z.items())},
            "thinning_stable": {f"{k:g}": v for k, v in sorted(self.thinning_stable.items())},
            "mid_pair": {f"{k:g}": v for k, v in sorted(self.mid_pair.items())},
            "probe_y": fmt_float(self.probe_y),
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        return cls(
            seed=int(d["seed"]),
            horizon=float(d["horizon"]),
            z=float(d["z"]),
            z2=float(d["z2"]),
            max_centered=float(d["max_centered"]),
            leaf_count=int(d["leaf_count"]),
            pruned_count=int(d["pruned_count"]),
            config_hash=d["config_hash"],
            z_flushed=int(d.get("z_flushed", 0)),
            z2_flushed=int(d.get("z2_flushed", 0)),
            top_centered=[float(x) for x in d.get("top_centered", [])],
            thinned_q=float(d.get("thinned_q", 0.5)),
            thinned_floor=float(d.get("thinned_floor", -3.0)),
            thinned_points=[float(x) for x in d.get("thinned_points", [])],
            checkpoint_z={float(k): (float(v[0]), float(v[1]))
                          for k, v in d.get("checkpoint_z", {}).items()},
            thinning_stable={float(k): bool(v)
                             for k, v in d.get("thinning_stable", {}).items()},
            mid_pair={float(k): bool(v) for k, v in d.get("mid_pair", {}).items()},
            probe_y=float(d.get("probe_y", -3.0)),
        )


def write_records(fh: IO[str], header: dict, records: Iterable[RunRecord]) -> None:
    fh.write(json.dumps({"kind": "header", **header}, sort_keys=True) + "\n")
    for rec in records:
        fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_records(fh: IO[str]) -> tuple[dict, list[RunRecord]]:
    header = json.loads(fh.readline())
    if header.get("kind") != "header":
        raise ConfigError("record file is missing its header row")
    records = [RunRecord.from_json(json.loads(line))
               for line in fh if line.strip()]
    return header, records
