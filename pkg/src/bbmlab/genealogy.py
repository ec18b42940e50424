"""Genealogical distances and thinning of the extremal configuration.

The genealogical distance of two particles is the branch time of their
most recent common ancestor; normalized by the horizon it is a similarity
in [0, 1] whose level sets are ultrametric.  Cutting the tree at a level
q*t partitions the leaves into clusters; retaining the maximal leaf of
each cluster gives the q-thinned configuration.  Both a matrix route
(literal greedy recursion on the overlap matrix) and a tree route
(cluster labels from the ancestor alive at the cut time) are provided and
must agree exactly; tests exploit that redundancy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .branching import (BranchingTree, ExtremalConfiguration,
                        front_centering, leaf_configuration)
from .errors import CapacityError, ConfigError

MATRIX_CAP = 4096


def overlap(tree: BranchingTree, i: int, j: int) -> float:
    """Branch time of the most recent common ancestor of leaves i and j.

    Returns the horizon when i == j.
    """
    for leaf in (i, j):
        if not 0 <= leaf < tree.n_nodes:
            raise ConfigError(f"unknown leaf id {leaf}")
        if tree.children(leaf):
            raise ConfigError(f"node {leaf} is not a leaf")
    if i == j:
        return tree.horizon
    seen = set()
    node = i
    while node >= 0:
        seen.add(node)
        node = int(tree.parent[node])
    node = j
    while node not in seen:
        node = int(tree.parent[node])
    return float(tree.end_time[node])


@dataclass
class OverlapMatrix:
    """Normalized pairwise genealogical distances, index-aligned with a
    rank-ordered extremal configuration."""

    values: np.ndarray  # (n, n), entries in [0, 1], diagonal 1
    horizon: float

    @property
    def size(self) -> int:
        return len(self.values)

    def validate_basic(self) -> None:
        q = self.values
        if q.shape[0] != q.shape[1]:
            raise ConfigError("overlap matrix must be square")
        if not np.array_equal(q, q.T):
            raise ConfigError("overlap matrix must be symmetric")
        if not np.all(np.diag(q) == 1.0):
            raise ConfigError("overlap matrix diagonal must be 1")
        if q.min() < 0.0 or q.max() > 1.0:
            raise ConfigError("overlap entries must lie in [0, 1]")


def normalized_overlap_matrix(tree: BranchingTree,
                              cap: int = MATRIX_CAP) -> OverlapMatrix:
    """Full n x n matrix of MRCA branch times over the horizon.

    Rows/columns follow the rank order of ``leaf_configuration(tree)``.
    The dense form is an oracle tool; n above ``cap`` is rejected.
    """
    config = leaf_configuration(tree)
    leaves = config.leaf_ids
    n = len(leaves)
    if n > cap:
        raise CapacityError(f"matrix form capped at {cap} leaves, tree has {n}",
                            nodes_built=n)
    # DFS assigns unpruned leaves contiguous slots per subtree, so every
    # internal node owns one contiguous slot interval per child.
    slot = np.full(tree.n_nodes, -1, dtype=np.int64)
    lo = np.zeros(tree.n_nodes, dtype=np.int64)
    hi = np.zeros(tree.n_nodes, dtype=np.int64)
    keep = np.zeros(tree.n_nodes, dtype=bool)
    keep[leaves] = True

    q = np.ones((n, n), dtype=np.float64)
    counter = 0
    stack: list[tuple[int, bool]] = [(tree.root, False)]
    while stack:
        node, processed = stack.pop()
        kids = tree.children(node)
        if not processed:
            if not kids:
                lo[node] = counter
                if keep[node]:
                    slot[node] = counter
                    counter += 1
                hi[node] = counter
            else:
                stack.append((node, True))
                for child in reversed(kids):
                    stack.append((child, False))
        else:
            lo[node] = lo[kids[0]]
            hi[node] = hi[kids[-1]]
            level = tree.end_time[node] / tree.horizon
            for a in range(len(kids)):
                ia, ja = lo[kids[a]], hi[kids[a]]
                if ja == ia:
                    continue
                for b in range(a + 1, len(kids)):
                    ib, jb = lo[kids[b]], hi[kids[b]]
                    if jb == ib:
                        continue
                    q[ia:ja, ib:jb] = level
                    q[ib:jb, ia:ja] = level
    # permute DFS slots into rank order
    perm = slot[leaves]
    q = q[np.ix_(perm, perm)]
    return OverlapMatrix(values=q, horizon=tree.horizon)


@dataclass
class ThinnedProcess:
    """Cluster maxima of the configuration at thinning level q."""

    positions: np.ndarray        # decreasing subsequence of the configuration
    selected_indices: np.ndarray  # 0-based rank indices, strictly increasing
    q: float
    horizon: float
    leaf_ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.positions)

    def to_json(self) -> dict:
        out = {
            "positions": [float(x) for x in self.positions],
            "selected_indices": [int(i) for i in self.selected_indices],
            "q": self.q,
            "horizon": self.horizon,
        }
        if self.leaf_ids is not None:
            out["leaf_ids"] = [int(i) for i in self.leaf_ids]
        return out


@dataclass
class ClusterDecomposition:
    """Partition of rank indices into genealogical clusters at level q."""

    blocks: list[np.ndarray]          # each strictly increasing rank indices
    representatives: np.ndarray       # rank index of each block maximum
    q: float
    horizon: float

    def to_json(self) -> dict:
        return {
            "blocks": [[int(i) for i in b] for b in self.blocks],
            "representatives": [int(i) for i in self.representatives],
            "q": self.q,
            "horizon": self.horizon,
        }


def _check_q(q: float) -> None:
    if not 0.0 < q < 1.0:
        raise ConfigError(f"thinning level must satisfy 0 < q < 1, got {q}")


def q_thinning_matrix(config: ExtremalConfiguration, qmat: OverlapMatrix,
                      q: float) -> ThinnedProcess:
    """Greedy thinning recursion on the overlap matrix.

    Starting from the maximum, each step selects the next rank whose
    overlap with everything already selected is below q.  The output list
    simply terminates when no admissible rank remains.
    """
    _check_q(q)
    n = len(config)
    if qmat.size != n:
        raise ConfigError(f"configuration has {n} points but matrix is {qmat.size}")
    values = qmat.values
    admissible = np.ones(n, dtype=bool)
    selected: list[int] = []
    pos = 0
    while pos < n:
        selected.append(pos)
        admissible &= values[pos] < q
        nxt = np.nonzero(admissible[pos + 1:])[0]
        if nxt.size == 0:
            break
        pos = pos + 1 + int(nxt[0])
    idx = np.asarray(selected, dtype=np.int64)
    return ThinnedProcess(positions=config.positions[idx],
                          selected_indices=idx, q=q, horizon=config.horizon,
                          leaf_ids=config.leaf_ids[idx])


def _cluster_labels(tree: BranchingTree, leaf_ids: np.ndarray, q: float) -> np.ndarray:
    """Id of the ancestor edge alive at the cut time q * horizon.

    A branch event exactly at the cut goes to the later-than side: the
    children, not the parent, carry the labels.
    """
    return tree.ancestor_alive_at(leaf_ids, q * tree.horizon)


def _first_occurrence_mask(labels: np.ndarray) -> np.ndarray:
    """True at the first appearance of each label, in array order."""
    seen_at = {}
    mask = np.zeros(len(labels), dtype=bool)
    for i, lab in enumerate(labels):
        if lab not in seen_at:
            seen_at[lab] = i
            mask[i] = True
    return mask


def q_thinning_tree(tree: BranchingTree, q: float,
                    config: Optional[ExtremalConfiguration] = None) -> ThinnedProcess:
    """Thinning via the tree cut: one representative per cluster hanging
    below the cut time, equal to the matrix recursion output."""
    _check_q(q)
    if config is None:
        config = leaf_configuration(tree)
    labels = _cluster_labels(tree, config.leaf_ids, q)
    mask = _first_occurrence_mask(labels)
    idx = np.nonzero(mask)[0]
    return ThinnedProcess(positions=config.positions[idx],
                          selected_indices=idx, q=q, horizon=config.horizon,
                          leaf_ids=config.leaf_ids[idx])


def cluster_decomposition(tree: BranchingTree, q: float,
                          config: Optional[ExtremalConfiguration] = None
                          ) -> ClusterDecomposition:
    _check_q(q)
    if config is None:
        config = leaf_configuration(tree)
    labels = _cluster_labels(tree, config.leaf_ids, q)
    order: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        order.setdefault(int(lab), []).append(i)
    blocks = [np.asarray(v, dtype=np.int64) for v in order.values()]
    blocks.sort(key=lambda b: b[0])
    reps = np.asarray([b[0] for b in blocks], dtype=np.int64)
    return ClusterDecomposition(blocks=blocks, representatives=reps, q=q,
                                horizon=tree.horizon)


def representatives_above(tree: BranchingTree, qs: Sequence[float], y: float
                          ) -> list[frozenset[int]]:
    """Leaf ids of thinned representatives with centered position above y,
    for each thinning level in qs.

    Only leaves above y can represent a cluster whose maximum is above y,
    so the computation restricts to that candidate set.
    """
    lid = tree.leaf_ids()
    centered = tree.end_position[lid] - front_centering(tree.horizon)
    above = centered > y
    cand = lid[above]
    if cand.size == 0:
        return [frozenset() for _ in qs]
    order = np.lexsort((cand, -centered[above]))
    cand = cand[order]
    out = []
    for q in qs:
        labels = _cluster_labels(tree, cand, q)
        mask = _first_occurrence_mask(labels)
        out.append(frozenset(int(i) for i in cand[mask]))
    return out


def has_mid_range_pair(tree: BranchingTree, y: float, r_d: float, r_g: float) -> bool:
    """Whether two leaves above m(t)+y have an ancestor branch strictly
    inside (r_d, t - r_g)."""
    t = tree.horizon
    if r_d + r_g >= t:
        return False
    lid = tree.leaf_ids()
    centered = tree.end_position[lid] - front_centering(t)
    cand = lid[centered > y]
    if cand.size < 2:
        return False
    low = tree.ancestor_alive_at(cand, r_d)
    high = tree.ancestor_alive_at(cand, t - r_g)
    # a qualifying pair shares its lineage at r_d but not at t - r_g
    pairs = {}
    for a, b in zip(low, high):
        group = pairs.setdefault(int(a), set())
        group.add(int(b))
        if len(group) > 1:
            return True
    return False


def genealogical_gap_fraction(trees: Iterable[BranchingTree], y: float,
                              r_d: float, r_g: float) -> float:
    """Fraction of trees containing an extremal pair with mid-range ancestry."""
    trees = list(trees)
    if not trees:
        raise ConfigError("need at least one tree")
    for tree in trees:
        if tree.horizon <= 3.0 * max(r_d, r_g):
            raise ConfigError(
                f"horizon {tree.horizon} too small for (r_d, r_g)=({r_d}, {r_g})")
    hits = sum(has_mid_range_pair(t, y, r_d, r_g) for t in trees)
    return hits / len(trees)


# -- ultrametricity checks ------------------------------------------------

def ultrametric_violations_bruteforce(q: np.ndarray) -> int:
    """Number of (i, j, k) triples with Q_ik < min(Q_ij, Q_jk); exact.

    Cubic; intended as the independent oracle on small matrices.
    """
    n = len(q)
    bad = 0
    for j in range(n):
        floor = np.minimum(q[j][:, None], q[j][None, :])
        bad += int((q < floor).sum())
    return bad


def is_ultrametric(q: np.ndarray) -> bool:
    """Exact ultrametricity via single-linkage cophenetic equality.

    A similarity matrix satisfies the triple inequality exactly iff the
    corresponding distance 1 - Q equals the cophenetic distance of its
    single-linkage dendrogram (minimax path distances select existing
    entries, so the comparison is float-exact).
    """
    from scipy.cluster.hierarchy import cophenet, linkage
    from scipy.spatial.distance import squareform

    n = len(q)
    if n <= 2:
        return True
    d = 1.0 - q
    np.fill_diagonal(d, 0.0)
    condensed = squareform(d, checks=False)
    link = linkage(condensed, method="single")
    coph = cophenet(link)
    return bool(np.array_equal(coph, condensed))
