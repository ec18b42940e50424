import io
import math

import numpy as np
import pytest

from bbmlab.branching import (OffspringLaw, SQRT2, SimConfig,
                              BranchingTree, simulate_tree)
from bbmlab.errors import ConfigError
from bbmlab.martingale import (RunRecord, derivative_martingale, read_records,
                               second_order_sum, write_records)


def _single_particle_tree(horizon: float, position: float) -> BranchingTree:
    """Hand-built one-edge tree ending at the given position."""
    return BranchingTree(
        parent=np.array([-1]),
        birth_time=np.array([0.0]),
        end_time=np.array([horizon]),
        birth_position=np.array([0.0]),
        end_position=np.array([position]),
        pruned=np.array([False]),
        horizon=horizon, seed=0, offspring=OffspringLaw.single(),
        barrier_offset=None, checkpoints={})


class TestSingleParticleValues:
    def test_on_the_critical_line_contributes_zero(self):
        tree = _single_particle_tree(4.0, SQRT2 * 4.0)
        assert derivative_martingale(tree) == 0.0
        assert second_order_sum(tree) == 0.0

    def test_one_below_the_line(self):
        tree = _single_particle_tree(4.0, SQRT2 * 4.0 - 1.0)
        # y = 1: z = e^{-sqrt 2}, z2 = e^{-2 sqrt 2}
        assert derivative_martingale(tree) == pytest.approx(
            0.2431167344342142, rel=1e-14)
        assert second_order_sum(tree) == pytest.approx(
            0.05910574656195624, rel=1e-14)

    def test_underflow_flushed_and_counted(self):
        tree = _single_particle_tree(4.0, SQRT2 * 4.0 - 600.0)
        z, flushed = derivative_martingale(tree, with_flush_count=True)
        assert z == 0.0 and flushed == 1
        z2, flushed2 = second_order_sum(tree, with_flush_count=True)
        assert z2 == 0.0 and flushed2 == 1


class TestEvaluationTimes:
    def test_rejects_unrecorded_time(self, small_trees):
        with pytest.raises(ConfigError):
            derivative_martingale(small_trees[0], 1.2345)

    def test_checkpoint_at_horizon_bit_identical(self):
        tree = simulate_tree(SimConfig(horizon=5.0, seed=21,
                                       checkpoint_times=(2.0, 5.0)))
        assert derivative_martingale(tree, 5.0) == derivative_martingale(tree)
        assert second_order_sum(tree, 5.0) == second_order_sum(tree)

    def test_second_order_nonnegative(self, small_trees):
        for tree in small_trees:
            assert second_order_sum(tree) >= 0.0


class TestStabilization:
    def test_z2_medians_decrease_and_z_settles(self):
        z_traj = {4.0: [], 6.0: [], 8.0: []}
        z2_traj = {4.0: [], 6.0: [], 8.0: []}
        for s in range(300):
            tree = simulate_tree(SimConfig(horizon=8.0, seed=s,
                                           checkpoint_times=(4.0, 6.0)))
            for t in (4.0, 6.0):
                z_traj[t].append(derivative_martingale(tree, t))
                z2_traj[t].append(second_order_sum(tree, t))
            z_traj[8.0].append(derivative_martingale(tree))
            z2_traj[8.0].append(second_order_sum(tree))
        m4, m6, m8 = (np.median(z2_traj[t]) for t in (4.0, 6.0, 8.0))
        assert m4 > m6 > m8
        # successive relative variation of the martingale decreases
        d46 = np.median(np.abs(np.subtract(z_traj[6.0], z_traj[4.0])))
        d68 = np.median(np.abs(np.subtract(z_traj[8.0], z_traj[6.0])))
        assert d68 < d46


class TestRecordsIO:
    def _record(self):
        return RunRecord(seed=7, horizon=8.0, z=0.31, z2=0.002,
                         max_centered=-0.8, leaf_count=2900, pruned_count=0,
                         config_hash="cafe", top_centered=[-0.8, -1.1],
                         thinned_points=[-0.8], thinned_q=0.5,
                         thinned_floor=-6.0,
                         checkpoint_z={4.0: (0.4, 0.01)},
                         thinning_stable={3.0: True},
                         mid_pair={2.0: False}, probe_y=-3.0)

    def test_round_trip(self):
        buf = io.StringIO()
        write_records(buf, {"horizon": 8.0}, [self._record()])
        buf.seek(0)
        header, records = read_records(buf)
        assert header["horizon"] == 8.0
        rec = records[0]
        assert rec == self._record()

    def test_serialization_byte_stable(self):
        a, b = io.StringIO(), io.StringIO()
        write_records(a, {"x": 1}, [self._record()])
        write_records(b, {"x": 1}, [self._record()])
        assert a.getvalue() == b.getvalue()

    def test_header_required(self):
        buf = io.StringIO('{"not_header": true}\n')
        with pytest.raises(ConfigError):
            read_records(buf)
