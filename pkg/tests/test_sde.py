import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bridgescore.sde import (
    ModelError, PathBatch, SimulationError, TimeGrid, circle_landmarks, derive_seed,
    jacobian_full, make_model, read_paths_csv, replay, simulate_batch, simulate_path,
    write_paths_csv,
)


def builtin_models():
    return [
        make_model("brownian", {"n": 2}),
        make_model("ou", {"n": 3}),
        make_model("double_well", {"n": 2, "v": 5.0}),
        make_model("shape", {"noise_grid": circle_landmarks(3, 1.0), "kappa": 0.1, "beta": 1.0}),
    ]


def central_jacobian(f, x, h=1e-5):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_grid_nodes_reconstructible():
    g = TimeGrid(0.0, 1.0, 200)
    assert g.dt == pytest.approx(1 / 200)
    assert g.node(37) == 0.0 + 37 * g.dt
    assert np.all(np.diff(g.nodes) > 0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 10)


def test_zero_noise_brownian_is_constant():
    g = TimeGrid(0, 1, 50)
    m = make_model("brownian", {"n": 2})
    p = simulate_path(m, g, [0.3, -1.0], seed=1, noise=np.zeros((50, 2)))
    np.testing.assert_array_equal(p.states, np.tile([0.3, -1.0], (51, 1)))


def test_ou_zero_noise_matches_ode():
    g = TimeGrid(0, 1, 1000)
    m = make_model("ou", {"n": 1})
    p = simulate_path(m, g, [1.0], seed=0, noise=np.zeros((1000, 1)))
    assert abs(p.states[-1, 0] - np.exp(-0.5)) < 1e-3


def test_simulation_is_deterministic_and_replayable():
    g = TimeGrid(0, 1, 100)
    m = make_model("double_well", {"n": 1})
    a = simulate_path(m, g, [1.0], seed=42)
    b = simulate_path(m, g, [1.0], seed=42)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.noise, b.noise)
    np.testing.assert_array_equal(replay(m, g, [1.0], a.noise), a.states)
    assert a.states.shape == (101, 1) and a.noise.shape == (100, 1)


def test_batch_of_one_matches_single_path():
    g = TimeGrid(0, 1, 64)
    m = make_model("ou", {"n": 2})
    batch = simulate_batch(m, g, [0.5, 0.5], 1, master_seed=9)
    single = simulate_path(m, g, [0.5, 0.5], derive_seed(9, "path", 0))
    np.testing.assert_array_equal(batch[0].states, single.states)
    assert int(batch.seeds[0]) == single.seed


def test_distinct_master_seeds_give_distinct_noise():
    g = TimeGrid(0, 1, 20)
    m = make_model("brownian")
    a = simulate_batch(m, g, [0.0], 3, 1)
    b = simulate_batch(m, g, [0.0], 3, 2)
    assert not np.array_equal(a.noise, b.noise)
    again = simulate_batch(m, g, [0.0], 3, 1)
    np.testing.assert_array_equal(a.states, again.states)


def test_brownian_marginal_law():
    n = 100_000
    g = TimeGrid(0, 1, 10)
    batch = simulate_batch(make_model("brownian"), g, [0.0], n, master_seed=2024)
    xT = batch.terminal[:, 0]
    assert abs(xT.mean()) < 3 / np.sqrt(n)
    assert abs(xT.var(ddof=1) - 1.0) < 0.05


def test_non_finite_state_reports_step():
    g = TimeGrid(0, 1, 50)
    m = make_model("double_well", {"v": 50.0})
    with pytest.raises(SimulationError) as info:
        simulate_path(m, g, [40.0], seed=0)
    assert info.value.step >= 1


def test_double_well_values():
    m = make_model("double_well", {"n": 1, "v": 5})
    assert m.potential(np.array([0.0]))[0] == pytest.approx(5.0)
    assert m.potential(np.array([1.0]))[0] == 0.0
    np.testing.assert_allclose(m.drift(0, np.array([[1.0], [-1.0]])), 0.0)
    assert m.drift(0, np.array([0.5]))[0] == pytest.approx(7.5)


def test_shape_kernel_value_at_grid_point():
    m = make_model("shape", {"noise_grid": np.array([[0.0, 0.0], [3.0, 0.0]]), "kappa": 0.1, "beta": 1.0})
    K = m.kernel_matrix(np.array([0.0, 0.0, 5.0, 5.0]))
    assert K[0, 0] == pytest.approx(0.1)
    assert m.dim == 4 and not m.sigma_constant


def test_invalid_model_parameters():
    with pytest.raises(ModelError):
        make_model("shape", {"noise_grid": np.zeros((2, 2))})
    with pytest.raises(ModelError):
        make_model("shape", {"kappa": -1.0})
    with pytest.raises(ModelError):
        make_model("unknown")


@pytest.mark.parametrize("model", builtin_models(), ids=lambda m: m.kind)
def test_drift_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(0)
    x = rng.normal(size=model.dim)
    J = central_jacobian(lambda z: model.drift(0.3, z), x)
    for _ in range(3):
        v = rng.normal(size=model.dim)
        np.testing.assert_allclose(model.drift_grad_transpose_apply(0.3, x, v), J.T @ v,
                                   rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("model", builtin_models(), ids=lambda m: m.kind)
def test_sigma_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(1)
    x = 0.5 * rng.normal(size=model.dim)
    db = rng.normal(size=model.dim)
    J = central_jacobian(lambda z: model.sigma_apply(0.0, z, db), x)
    v = rng.normal(size=model.dim)
    got = model.sigma_grad_transpose_apply(0.0, x, v, db)
    if model.sigma_constant:
        np.testing.assert_array_equal(got, 0.0)
    np.testing.assert_allclose(got, J.T @ v, rtol=1e-4, atol=1e-9)


@pytest.mark.parametrize("model", builtin_models(), ids=lambda m: m.kind)
def test_sigma_inverse_products(model):
    rng = np.random.default_rng(2)
    x = 0.2 * rng.normal(size=model.dim)
    v = rng.normal(size=model.dim)
    np.testing.assert_allclose(model.sigma_apply(0, x, model.sigma_inv_apply(0, x, v)), v, atol=1e-8)
    np.testing.assert_allclose(model.sigma_transpose_apply(0, x, model.sigma_inv_transpose_apply(0, x, v)),
                               v, atol=1e-8)


def test_jacobian_identity_for_brownian():
    g = TimeGrid(0, 1, 30)
    m = make_model("brownian", {"n": 3})
    J = jacobian_full(m, simulate_path(m, g, np.zeros(3), 0))
    np.testing.assert_array_equal(J, np.broadcast_to(np.eye(3), J.shape))


def test_jacobian_linear_flow():
    g = TimeGrid(0, 1, 200)
    m = make_model("ou", {"n": 2, "rate": 1.0})
    J = jacobian_full(m, simulate_path(m, g, np.zeros(2), 0))
    expected = np.exp(-g.nodes)[:, None, None] * np.eye(2)
    np.testing.assert_allclose(J, expected, atol=5 * g.dt)


@pytest.mark.parametrize("model", builtin_models(), ids=lambda m: m.kind)
def test_jacobian_matches_path_perturbation(model):
    g = TimeGrid(0, 1, 200)
    rng = np.random.default_rng(5)
    x0 = circle_landmarks(3).ravel() * 1.1 if model.kind == "shape" else 0.8 + 0.1 * rng.normal(size=model.dim)
    path = simulate_path(model, g, x0, seed=11)
    J = jacobian_full(model, path)
    h = 1e-5
    fd = np.stack([(replay(model, g, x0 + h * e, path.noise)[-1] - replay(model, g, x0 - h * e, path.noise)[-1]) / (2 * h)
                   for e in np.eye(model.dim)], axis=-1)
    np.testing.assert_allclose(J[-1], fd, rtol=1e-3, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**63 - 1), n_steps=st.integers(2, 40))
def test_replay_property(seed, n_steps):
    g = TimeGrid(0, 1, n_steps)
    m = make_model("double_well", {"n": 1, "v": 1.0})
    p = simulate_path(m, g, [0.2], seed)
    np.testing.assert_array_equal(replay(m, g, [0.2], p.noise), p.states)


def test_path_csv_round_trip(tmp_path):
    g = TimeGrid(0, 1, 5)
    m = make_model("ou", {"n": 2})
    batch = simulate_batch(m, g, [1.0, 0.0], 3, 0)
    y = batch.terminal
    write_paths_csv(batch, tmp_path / "p.csv", tmp_path / "n.csv", y=y)
    times, states, yy = read_paths_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(states, batch.states)
    np.testing.assert_array_equal(times, g.nodes)
    np.testing.assert_array_equal(yy, y)
    header = (tmp_path / "n.csv").read_text().splitlines()[0]
    assert header == "path_id,step,db_0,db_1"
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "path_id,step,t,x_0,x_1,y_0,y_1"
