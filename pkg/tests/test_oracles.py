import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bridgescore.oracles import (
    CommittorTable, OracleError, bel_second_moment_formula, bridge_second_moment, brownian_bridge_score,
    committor_score,
    double_well_bridge_score, double_well_committor, exact_second_moment, gaussian_ball_probability,
    mc_second_moment, ou_tweedie_score,
)
from bridgescore.targets import GOLDEN, AlphaSchedule


def test_brownian_bridge_score_examples():
    assert brownian_bridge_score(0.0, 1.0, -1.0) == -2.0
    assert brownian_bridge_score(0.3, 0.7, 0.7) == 0.0
    assert brownian_bridge_score(0.5, 0.0, 1.0) == 2.0
    with pytest.raises(ValueError):
        brownian_bridge_score(1.0, 0.0, 1.0)


def test_ou_tweedie_examples():
    assert ou_tweedie_score(0.4, np.exp(-0.2) * 0.9, 0.9) == pytest.approx(0.0, abs=1e-15)
    assert ou_tweedie_score(50.0, 0.3, 2.0) == pytest.approx(0.3)
    assert ou_tweedie_score(1.0, 1.0, 0.0) == pytest.approx(1.5819767, rel=1e-7)
    with pytest.raises(ValueError):
        ou_tweedie_score(0.0, 1.0, 0.0)


@pytest.fixture(scope="module")
def dw_table():
    return double_well_committor(v=5.0)


def test_committor_invariants(dw_table):
    f = dw_table.values
    assert np.all(f > 0) and np.all(f <= 1 + 1e-9)
    x = dw_table.x
    # targeting -1, starting in the left well is at least as likely as the right
    left, right = np.argmin(np.abs(x + 1)), np.argmin(np.abs(x - 1))
    assert np.all(f[:-1, left] >= f[:-1, right])
    barrier = (x > -0.9) & (x < 0.9)
    assert np.all(np.diff(f[: dw_table.t.size // 2][:, barrier], axis=1) <= 1e-12)
    terminal = gaussian_ball_probability(x, 0.0, r=dw_table.r)
    np.testing.assert_allclose(f[-1], np.maximum(terminal, np.finfo(float).tiny))


def test_committor_zero_potential_is_gaussian():
    table = double_well_committor(v=0.0, x_min=-5.0, x_max=5.0, n_x=801, n_t=2000)
    var = 1.0 - table.t[:, None]
    exact = gaussian_ball_probability(table.x[None, :], var, r=table.r)
    assert np.max(np.abs(table.values - exact)) < 1e-3


def test_committor_score_zero_potential_small_ball():
    table = double_well_committor(v=0.0, x_min=-5.0, x_max=5.0, r=0.05)
    assert abs(float(committor_score(table, 0.5, 0.0)) - (-2.0)) < 0.05


def test_committor_mirror_symmetry():
    minus = double_well_committor(v=5.0, n_x=401, n_t=500, target=-1.0)
    plus = double_well_committor(v=5.0, n_x=401, n_t=500, target=1.0)
    assert np.max(np.abs(minus.values - plus.values[:, ::-1])) < 1e-6
    t, x = 0.4, np.array([-0.7, 0.1, 1.2])
    np.testing.assert_allclose(committor_score(minus, t, x), -committor_score(plus, t, -x), atol=1e-6)


def test_bridge_score_mirrors_for_positive_target(dw_table):
    x = np.array([0.3, -0.2])
    a = double_well_bridge_score(dw_table, 0.2, x, [-1.0, 1.0])
    np.testing.assert_allclose(a[1], -committor_score(dw_table, 0.2, 0.2))
    np.testing.assert_allclose(a[0], committor_score(dw_table, 0.2, 0.3))


def test_committor_grid_independence(dw_table):
    fine = double_well_committor(v=5.0, n_x=1601, n_t=4000)
    coarse_on_fine = fine.values[::2, ::2]
    assert np.max(np.abs(coarse_on_fine - dw_table.values)) < 1e-3


def test_score_is_small_deep_in_target_well(dw_table):
    assert abs(float(committor_score(dw_table, 0.99, -1.0))) < 1.0


def test_committor_rejects_out_of_range(dw_table):
    with pytest.raises(ValueError):
        committor_score(dw_table, 0.5, 3.0)
    with pytest.raises(ValueError):
        double_well_committor(v=-1.0)


def test_committor_detects_instability():
    with pytest.raises(OracleError):
        double_well_committor(v=50.0, n_x=101, n_t=5)


def test_committor_table_round_trip(tmp_path):
    table = double_well_committor(v=2.0, n_x=51, n_t=20)
    table.save(tmp_path / "c.txt")
    back = CommittorTable.load(tmp_path / "c.txt")
    np.testing.assert_array_equal(back.values, table.values)
    np.testing.assert_array_equal(back.x, table.x)
    assert back.v == 2.0 and back.r == table.r


def test_second_moment_formula_closed_forms():
    assert bel_second_moment_formula(AlphaSchedule.average(), 0.0).value == pytest.approx(2.0)
    assert bel_second_moment_formula(AlphaSchedule.average(), 2.0).value == pytest.approx(6.0)
    opt = bel_second_moment_formula(AlphaSchedule.optimal_bm(), 0.0)
    assert opt.value == pytest.approx(GOLDEN)
    assert opt.value < 2.0 and opt.boundary_ok
    assert bel_second_moment_formula(AlphaSchedule.last(0.1), 0.0).value == pytest.approx(29.0)


def test_second_moment_formula_matches_quadrature_for_custom():
    from bridgescore.sde import TimeGrid
    g = TimeGrid(0, 1, 400)
    opt = AlphaSchedule.optimal_bm()
    custom = AlphaSchedule.custom(g, opt.aprime(g.nodes))
    a = bel_second_moment_formula(custom, 0.0, g).value
    assert a == pytest.approx(GOLDEN, rel=2e-2)


def test_builtin_schedules_satisfy_boundary_condition():
    for sched in (AlphaSchedule.average(), AlphaSchedule.first(), AlphaSchedule.last(), AlphaSchedule.optimal_bm()):
        assert bel_second_moment_formula(sched, 0.0).boundary_ok


def test_mc_matches_exact_discrete_moment():
    for sched in (AlphaSchedule.optimal_bm(), AlphaSchedule.first()):
        est, se = mc_second_moment(sched, 1.0, 20_000, seed=3)
        assert abs(est - exact_second_moment(sched, 1.0)) < 4 * se


def test_mc_is_seeded():
    a = mc_second_moment(AlphaSchedule.average(), 0.5, 1000, seed=1)
    assert a == mc_second_moment(AlphaSchedule.average(), 0.5, 1000, seed=1)
    assert a != mc_second_moment(AlphaSchedule.average(), 0.5, 1000, seed=2)


@settings(max_examples=25, deadline=None)
@given(d=st.floats(-3, 3), n=st.integers(10, 300))
def test_average_discrete_moment_is_d_squared(d, n):
    # uniform weights reproduce W_1 exactly, so only the endpoint term survives
    assert math.isclose(exact_second_moment(AlphaSchedule.average(), d, n), d * d, abs_tol=1e-9)


@pytest.mark.parametrize("sched", [AlphaSchedule.average(), AlphaSchedule.first(), AlphaSchedule.last(),
                                   AlphaSchedule.optimal_bm()], ids=lambda s: s.kind)
def test_bridge_second_moment_matches_discrete_limit(sched):
    from bridgescore.sde import TimeGrid
    cont = bridge_second_moment(sched, 2.0, TimeGrid(0, 1, 500))
    disc = exact_second_moment(sched, 2.0, 500)
    assert cont == pytest.approx(disc, rel=1e-3)


def test_optimal_has_smaller_bridge_moment_than_windows():
    opt = bridge_second_moment(AlphaSchedule.optimal_bm(), 0.0)
    assert opt == pytest.approx((GOLDEN - 1) ** 2 / (2 * GOLDEN - 1), rel=1e-6)
    assert opt < bridge_second_moment(AlphaSchedule.first(), 0.0)
    assert opt < bridge_second_moment(AlphaSchedule.last(), 0.0)
