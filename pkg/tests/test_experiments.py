import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bridgescore.experiments import (
    EXPERIMENTS, MetricReport, crossing_fraction, default_config, dist_metric, evaluate, mv_metric,
    run_experiment, shape_distance,
)
from bridgescore.sde import TimeGrid, make_model, simulate_batch


def random_paths(seed, n=50, m=10, d=2):
    return np.random.default_rng(seed).normal(size=(n, m + 1, d))


def test_dist_metric_example():
    paths = np.zeros((2, 3, 2))
    paths[0, -1] = [3.0, 4.0]
    assert dist_metric(paths, [0.0, 0.0]) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        dist_metric(np.zeros((0, 2)), [0.0, 0.0])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-2, 2))
def test_dist_triangle_inequality(seed, shift):
    paths = random_paths(seed)
    y = np.array([0.5, -0.5])
    y2 = y + shift
    assert dist_metric(paths, y) <= dist_metric(paths, y2) + np.linalg.norm(y - y2) + 1e-12


@settings(max_examples=25, deadline=None)
@given(a=st.integers(0, 10_000), b=st.integers(0, 10_000))
def test_mv_symmetric_and_zero_on_self(a, b):
    p, q = random_paths(a), random_paths(b)
    assert mv_metric(p, q) == pytest.approx(mv_metric(q, p), rel=1e-12)
    assert mv_metric(p, p) == 0.0


def test_mv_known_value():
    p = np.zeros((4, 3, 1))
    q = p + 1.0
    assert mv_metric(p, q) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mv_metric(p[:1], q)
    with pytest.raises(ValueError):
        mv_metric(p, q[:, :2])


def test_shape_distance_and_crossing():
    target = np.array([1.0, 0.0, 0.0, 1.0])
    paths = np.zeros((2, 2, 4))
    paths[:, -1] = target
    assert shape_distance(paths, target) == 0.0
    paths[1, -1] = target + np.array([1.0, 0.0, 0.0, 1.0])
    assert shape_distance(paths, target) == pytest.approx(2.0 / 4)
    xT = np.array([[-1.2], [-0.8], [0.5], [-1.31]])
    assert crossing_fraction(xT) == 0.5


def test_unconditioned_double_well_rarely_crosses():
    m = make_model("double_well", {"n": 1, "v": 5.0})
    b = simulate_batch(m, TimeGrid(0, 1, 200), [1.0], 2000, 0)
    assert crossing_fraction(b) < 0.01


def test_default_configs():
    for exp in EXPERIMENTS:
        cfg = default_config(exp)
        model = cfg.train.build_model()
        assert len(cfg.y_init) == model.dim == len(cfg.y_final)
    cfg = default_config("brownian-1d", n_eval=10, train_n_batches=3)
    assert cfg.n_eval == 10 and cfg.train.n_batches == 3
    with pytest.raises(ValueError):
        default_config("nope")


def test_oracle_controls_reach_targets():
    rep = evaluate(default_config("brownian-1d", control="oracle", n_eval=300, n_oracle=300))
    # the last Euler step leaves a residual of size sqrt(dt) * sqrt(2 / pi)
    assert rep.dist < 0.08 and rep.mv < 0.1
    rep = evaluate(default_config("doublewell-1d", control="oracle", n_eval=1000, n_oracle=2))
    assert rep.crossing_fraction >= 0.99


def test_report_json_round_trip(tmp_path):
    cfg = default_config("brownian-1d", control="untrained", n_eval=20, n_oracle=20, eval_steps=20,
                         marginal_stride=5)
    rep = evaluate(cfg, out_dir=tmp_path)
    text = (tmp_path / "report.json").read_text()
    assert MetricReport.from_json(text) == rep
    assert json.loads(text)["marginal_nodes"] == [0, 5, 10, 15, 20]
    assert (tmp_path / "eval_paths.csv").exists() and (tmp_path / "oracle_paths.csv").exists()
    with pytest.raises(ArithmeticError):
        MetricReport("x", "s", "c", 1, 0, dist=float("nan")).check()


def test_tiny_run_is_reproducible(tmp_path):
    cfg = default_config("brownian-1d", n_eval=20, n_oracle=20, eval_steps=20, train_n_batches=3,
                         train_batch_size=8, train_n_steps=5)
    r1, _ = run_experiment(cfg, tmp_path / "a")
    r2, _ = run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "checkpoint.txt").read_bytes() == (tmp_path / "b" / "checkpoint.txt").read_bytes()
    assert r1.train_batches == 3
