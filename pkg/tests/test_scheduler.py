import numpy as np
import pytest

from depatch.scheduler import (NO_MASK, StrategyMode, schedule, snapshot_schedule)
from oracles import reference_pds


def test_pds_endpoints():
    mode = StrategyMode()
    assert schedule(0, 2000, mode) == (2, 0.2)
    assert schedule(1999, 2000, mode) == (6, 0.5)


def test_pds_matches_reference_2000():
    mode = StrategyMode()
    for e in range(2000):
        n, r = schedule(e, 2000, mode)
        rn, rr = reference_pds(e, 2000)
        assert n == rn and r == pytest.approx(rr, abs=1e-12)


def test_pds_known_epochs():
    mode = StrategyMode()
    assert schedule(399, 2000, mode) == (2, 0.5)
    assert schedule(400, 2000, mode) == (3, 0.2)
    assert schedule(1000, 2000, mode) == (4, 0.4)
    assert schedule(100, 2000, mode) == (2, 0.3)


@pytest.mark.parametrize("total", [1, 3, 5, 7, 19, 500, 2001])
def test_pds_shape_any_length(total):
    rows = [schedule(e, total, StrategyMode()) for e in range(total)]
    ns = [n for n, _ in rows]
    assert all(a <= b for a, b in zip(ns, ns[1:]))
    assert rows[0][1] == 0.2
    for (n0, r0), (n1, r1) in zip(rows, rows[1:]):
        if n1 == n0:
            assert r1 >= r0
        else:
            assert r1 == 0.2  # reset on every stage change
    if total >= 20:
        assert rows[-1] == (6, 0.5)


def test_out_of_range_epoch():
    with pytest.raises(ValueError):
        schedule(2000, 2000, StrategyMode())
    with pytest.raises(ValueError):
        schedule(-1, 10, StrategyMode())


def test_none_strategy():
    assert schedule(5, 10, StrategyMode.none()) == NO_MASK


def test_fixed_n_random_r():
    mode = StrategyMode.fixed(4)
    g = np.random.default_rng(0)
    rs = []
    for e in range(300):
        n, r = schedule(e, 300, mode, g)
        assert n == 4 and 0.2 <= r <= 0.5
        rs.append(r)
    assert np.std(rs) > 0.05
    with pytest.raises(ValueError):
        schedule(0, 10, mode)  # needs an rng


def test_fixed_r_policy():
    mode = StrategyMode(mode="fixed_n", n=3, r_policy="fixed", r=0.35)
    assert schedule(7, 10, mode) == (3, 0.35)


def test_stage_table():
    mode = StrategyMode(stage_table=[(4, 2, 0.1, 0.4), (6, 5, 0.3, 0.3)])
    assert [schedule(e, 10, mode) for e in range(10)] == [
        (2, 0.1), (2, 0.2), (2, 0.3), (2, 0.4), (5, 0.3), (5, 0.3), (5, 0.3), (5, 0.3), (5, 0.3),
        (5, 0.3)]
    with pytest.raises(ValueError):
        schedule(0, 11, mode)


@pytest.mark.parametrize("kw", [{"mode": "spiral"}, {"mode": "fixed_n"}, {"r_policy": "fixed"},
                                {"r_range": (0.6, 0.2)}, {"r_steps": 0},
                                {"stage_table": [(0, 2, 0.2, 0.5)]}])
def test_strategy_validation(kw):
    with pytest.raises(ValueError):
        StrategyMode(**kw)


def test_snapshot():
    rows = snapshot_schedule(20, StrategyMode())
    assert len(rows) == 20 and rows[0] == (0, 2, 0.2) and rows[-1] == (19, 6, 0.5)
    assert snapshot_schedule(3, StrategyMode.none()) == [(0, 0, 0.0), (1, 0, 0.0), (2, 0, 0.0)]
    assert snapshot_schedule(10, StrategyMode.fixed(6)) == [(0, 6, (0.2, 0.5))]
