import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbmlab.branching import (ExtremalConfiguration, OffspringLaw, SimConfig,
                              leaf_configuration, simulate_tree)
from bbmlab.errors import CapacityError, ConfigError
from bbmlab.genealogy import (ClusterDecomposition, OverlapMatrix,
                              cluster_decomposition,
                              genealogical_gap_fraction, has_mid_range_pair,
                              is_ultrametric, normalized_overlap_matrix,
                              overlap, q_thinning_matrix, q_thinning_tree,
                              representatives_above,
                              ultrametric_violations_bruteforce)

Q_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


class TestOverlap:
    def test_self_overlap_is_horizon(self, small_trees):
        tree = small_trees[0]
        leaf = int(tree.leaf_ids()[0])
        assert overlap(tree, leaf, leaf) == tree.horizon

    def test_two_leaf_tree(self):
        tree = simulate_tree(SimConfig(horizon=3.0, seed=17))
        # find a pair of sibling leaves: their overlap is the parent's end
        leaves = tree.leaf_ids()
        for i in range(len(leaves)):
            for j in range(i + 1, len(leaves)):
                a, b = int(leaves[i]), int(leaves[j])
                if tree.parent[a] == tree.parent[b]:
                    expected = float(tree.end_time[tree.parent[a]])
                    assert overlap(tree, a, b) == expected
                    return
        pytest.skip("no sibling pair in this realization")

    def test_unknown_leaf_rejected(self, small_trees):
        with pytest.raises(ConfigError):
            overlap(small_trees[0], -5, 0)
        with pytest.raises(ConfigError):
            overlap(small_trees[0], 0, 10 ** 9)

    def test_internal_node_rejected(self, small_trees):
        tree = small_trees[0]
        internal = int(np.nonzero(~tree.is_leaf())[0][0])
        leaf = int(tree.leaf_ids()[0])
        with pytest.raises(ConfigError):
            overlap(tree, internal, leaf)

    def test_matrix_matches_pairwise_walks(self, small_trees):
        for tree in small_trees[:4]:
            cfg = leaf_configuration(tree)
            mat = normalized_overlap_matrix(tree)
            n = min(len(cfg), 10)
            for i in range(n):
                for j in range(n):
                    direct = overlap(tree, int(cfg.leaf_ids[i]),
                                     int(cfg.leaf_ids[j])) / tree.horizon
                    assert direct == mat.values[i, j]


class TestOverlapMatrix:
    def test_single_leaf(self):
        tree = simulate_tree(SimConfig(horizon=4.0, seed=0,
                                       offspring=OffspringLaw.single()))
        mat = normalized_overlap_matrix(tree)
        assert mat.values.shape == (1, 1) and mat.values[0, 0] == 1.0

    def test_basic_invariants(self, small_trees):
        for tree in small_trees:
            mat = normalized_overlap_matrix(tree)
            mat.validate_basic()

    def test_capacity_cap(self):
        tree = simulate_tree(SimConfig(horizon=6.0, seed=1))
        n = len(tree.leaf_ids())
        with pytest.raises(CapacityError):
            normalized_overlap_matrix(tree, cap=n - 1)

    def test_ultrametric_exhaustive_and_fast_agree(self, small_trees):
        for tree in small_trees:
            mat = normalized_overlap_matrix(tree)
            if mat.size <= 150:
                brute = ultrametric_violations_bruteforce(mat.values) == 0
                assert brute == is_ultrametric(mat.values)
                assert brute

    def test_fast_check_detects_violation(self):
        q = np.array([[1.0, 0.8, 0.1],
                      [0.8, 1.0, 0.6],
                      [0.1, 0.6, 1.0]])
        # triple (0, 1, 2): min(0.8, 0.6) = 0.6 > 0.1 = Q_02
        assert ultrametric_violations_bruteforce(q) > 0
        assert not is_ultrametric(q)


def _config_from_positions(positions):
    pos = np.asarray(positions, dtype=np.float64)
    return ExtremalConfiguration(positions=pos,
                                 leaf_ids=np.arange(len(pos)),
                                 horizon=1.0)


class TestThinningMatrix:
    def test_hand_example(self):
        # three points with a tight top pair: q = 0.5 keeps ranks 0 and 2
        config = _config_from_positions([2.0, 1.0, 0.0])
        q = np.array([[1.0, 0.9, 0.1],
                      [0.9, 1.0, 0.1],
                      [0.1, 0.1, 1.0]])
        thin = q_thinning_matrix(config, OverlapMatrix(q, 1.0), 0.5)
        assert thin.selected_indices.tolist() == [0, 2]
        assert thin.positions.tolist() == [2.0, 0.0]

    def test_fully_separated_identity(self):
        config = _config_from_positions([3.0, 2.0, 1.0, 0.0])
        q = np.full((4, 4), 0.05)
        np.fill_diagonal(q, 1.0)
        thin = q_thinning_matrix(config, OverlapMatrix(q, 1.0), 0.5)
        assert thin.selected_indices.tolist() == [0, 1, 2, 3]

    def test_fully_clustered_keeps_only_max(self):
        config = _config_from_positions([3.0, 2.0, 1.0])
        q = np.full((3, 3), 0.9)
        np.fill_diagonal(q, 1.0)
        thin = q_thinning_matrix(config, OverlapMatrix(q, 1.0), 0.5)
        assert thin.selected_indices.tolist() == [0]

    def test_size_mismatch_rejected(self):
        config = _config_from_positions([1.0, 0.0])
        q = np.ones((3, 3))
        with pytest.raises(ConfigError):
            q_thinning_matrix(config, OverlapMatrix(q, 1.0), 0.5)

    @pytest.mark.parametrize("q", [0.0, 1.0, -0.2, 1.7])
    def test_q_range_enforced(self, q):
        config = _config_from_positions([1.0, 0.0])
        mat = OverlapMatrix(np.eye(2), 1.0)
        with pytest.raises(ConfigError):
            q_thinning_matrix(config, mat, q)


class TestTreeMatrixEquivalence:
    def test_oracle_equality_on_simulated_trees(self, small_trees):
        for tree in small_trees:
            cfg = leaf_configuration(tree)
            mat = normalized_overlap_matrix(tree)
            for q in Q_GRID:
                a = q_thinning_matrix(cfg, mat, q)
                b = q_thinning_tree(tree, q, cfg)
                assert np.array_equal(a.selected_indices, b.selected_indices)
                assert np.array_equal(a.positions, b.positions)

    @given(st.integers(min_value=0, max_value=10 ** 6),
           st.floats(min_value=0.02, max_value=0.98))
    @settings(max_examples=20)
    def test_oracle_equality_property(self, seed, q):
        tree = simulate_tree(SimConfig(horizon=4.0, seed=seed))
        cfg = leaf_configuration(tree)
        mat = normalized_overlap_matrix(tree)
        a = q_thinning_matrix(cfg, mat, q)
        b = q_thinning_tree(tree, q, cfg)
        assert np.array_equal(a.selected_indices, b.selected_indices)

    def test_single_lineage_single_cluster(self):
        tree = simulate_tree(SimConfig(horizon=5.0, seed=3,
                                       offspring=OffspringLaw.single()))
        thin = q_thinning_tree(tree, 0.5)
        assert len(thin) == 1

    def test_cut_above_root_edge_single_cluster(self):
        # a q small enough that the cut falls inside the root edge
        tree = simulate_tree(SimConfig(horizon=5.0, seed=3))
        first_branch = float(tree.end_time[0])
        q = first_branch / tree.horizon * 0.5
        if not 0.0 < q < 1.0:
            pytest.skip("degenerate realization")
        thin = q_thinning_tree(tree, q)
        assert len(thin) == 1


class TestThinningProperties:
    def test_idempotent(self, small_trees):
        for tree in small_trees[:6]:
            cfg = leaf_configuration(tree)
            mat = normalized_overlap_matrix(tree)
            for q in (0.3, 0.7):
                thin = q_thinning_matrix(cfg, mat, q)
                sub_cfg = ExtremalConfiguration(
                    positions=thin.positions,
                    leaf_ids=thin.leaf_ids,
                    horizon=cfg.horizon)
                idx = thin.selected_indices
                sub_mat = OverlapMatrix(mat.values[np.ix_(idx, idx)],
                                        mat.horizon)
                again = q_thinning_matrix(sub_cfg, sub_mat, q)
                assert np.array_equal(again.positions, thin.positions)

    def test_selected_count_monotone_in_q(self, small_trees):
        for tree in small_trees[:6]:
            cfg = leaf_configuration(tree)
            counts = [len(q_thinning_tree(tree, q, cfg)) for q in Q_GRID]
            assert all(a <= b for a, b in zip(counts, counts[1:]))

    def test_larger_q_refines_smaller(self, small_trees):
        for tree in small_trees[:6]:
            cfg = leaf_configuration(tree)
            coarse = cluster_decomposition(tree, 0.3, cfg)
            fine = cluster_decomposition(tree, 0.7, cfg)
            coarse_of = {}
            for b_idx, block in enumerate(coarse.blocks):
                for i in block:
                    coarse_of[int(i)] = b_idx
            for block in fine.blocks:
                owners = {coarse_of[int(i)] for i in block}
                assert len(owners) == 1


class TestClusterDecomposition:
    def test_blocks_partition(self, small_trees):
        for tree in small_trees[:6]:
            cfg = leaf_configuration(tree)
            dec = cluster_decomposition(tree, 0.5, cfg)
            seen = np.sort(np.concatenate(dec.blocks))
            assert np.array_equal(seen, np.arange(len(cfg)))

    def test_representatives_match_thinning(self, small_trees):
        for tree in small_trees[:6]:
            cfg = leaf_configuration(tree)
            dec = cluster_decomposition(tree, 0.5, cfg)
            thin = q_thinning_tree(tree, 0.5, cfg)
            assert np.array_equal(dec.representatives, thin.selected_indices)

    def test_json_round_trippable(self, small_trees):
        dec = cluster_decomposition(small_trees[0], 0.5)
        payload = dec.to_json()
        assert payload["q"] == 0.5
        assert sum(len(b) for b in payload["blocks"]) == \
            len(leaf_configuration(small_trees[0]))


class TestGapFraction:
    def test_empty_interval_gives_zero(self, small_trees):
        assert genealogical_gap_fraction(small_trees, y=-2.0,
                                         r_d=1.4, r_g=1.4) >= 0.0
        for tree in small_trees:
            assert not has_mid_range_pair(tree, -2.0, 3.0, 3.0)

    def test_y_above_max_gives_zero(self, small_trees):
        assert genealogical_gap_fraction(small_trees, y=50.0,
                                         r_d=1.0, r_g=1.0) == 0.0

    def test_horizon_constraint(self, small_trees):
        with pytest.raises(ConfigError):
            genealogical_gap_fraction(small_trees, y=0.0, r_d=2.0, r_g=2.0)

    def test_matches_bruteforce_pairs(self):
        for seed in range(25):
            tree = simulate_tree(SimConfig(horizon=6.0, seed=seed))
            cfg = leaf_configuration(tree)
            if len(cfg) > 300:
                continue
            y, rd, rg = -1.5, 1.5, 1.5
            ids = cfg.leaf_ids[cfg.positions > y]
            brute = any(
                rd < overlap(tree, int(ids[a]), int(ids[b])) < tree.horizon - rg
                for a in range(len(ids)) for b in range(a + 1, len(ids)))
            assert brute == has_mid_range_pair(tree, y, rd, rg)


class TestRepresentativesAbove:
    def test_against_matrix_route(self):
        for seed in range(10):
            tree = simulate_tree(SimConfig(horizon=6.0, seed=seed))
            cfg = leaf_configuration(tree)
            mat = normalized_overlap_matrix(tree)
            y = -1.0
            for q, byq in zip(Q_GRID,
                              representatives_above(tree, Q_GRID, y)):
                thin = q_thinning_matrix(cfg, mat, q)
                keep = thin.positions > y
                assert byq == frozenset(int(i) for i in thin.leaf_ids[keep])
