import numpy as np
import pytest

from bridgescore.network import (
    HIDDEN_WIDTHS, AdamState, CheckpointError, DriftNet, adam_step, load_checkpoint, save_checkpoint,
)


def fd_param_check(net, inputs, targets, coords, h=1e-6):
    _, grad, _ = net.loss_and_grad(inputs, targets)
    worst = 0.0
    for i in coords:
        old = net.params[i]
        net.params[i] = old + h
        up = net.loss_and_grad(inputs, targets)[0]
        net.params[i] = old - h
        down = net.loss_and_grad(inputs, targets)[0]
        net.params[i] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8))
    return worst


def test_architecture_layout():
    net = DriftNet(2, 1, seed=0)
    assert net.widths == HIDDEN_WIDTHS == (256, 128, 64, 32, 64, 128, 256)
    assert net.in_dim == 4
    assert net.shapes[0] == (4, 256) and net.shapes[-1] == (256, 2)
    assert net.skips == {5: 3, 6: 2, 7: 1}
    assert net.params.size == net.n_params


def test_initialisation_is_seeded():
    a, b, c = DriftNet(1, 1, seed=3), DriftNet(1, 1, seed=3), DriftNet(1, 1, seed=4)
    np.testing.assert_array_equal(a.params, b.params)
    assert not np.array_equal(a.params, c.params)
    z = DriftNet(1, 1, seed=3, zero_output=True)
    np.testing.assert_array_equal(z.forward(0.5, [0.1], [0.2]), 0.0)


def test_forward_shapes():
    net = DriftNet(3, 2, seed=1, widths=(16, 8, 16))
    assert net.forward(0.1, np.zeros(3), np.zeros(2)).shape == (3,)
    assert net.forward(np.zeros(5), np.zeros((5, 3)), np.zeros(2)).shape == (5, 3)
    with pytest.raises(ValueError):
        net.forward(0.1, np.zeros(2), np.zeros(2))


@pytest.mark.parametrize("seed", range(3))
def test_parameter_gradient_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    net = DriftNet(2, 2, seed=seed)
    inputs = rng.normal(size=(7, 5))
    targets = rng.normal(size=(7, 2))
    coords = rng.choice(net.n_params, 10, replace=False)
    assert fd_param_check(net, inputs, targets, coords) < 1e-5


def test_input_jacobian_matches_finite_difference():
    net = DriftNet(2, 1, seed=2)
    t, x, y = 0.3, np.array([0.2, -0.4]), np.array([1.0])
    J = net.input_jacobian(t, x, y)
    base = np.concatenate([[t], x, y])
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        up, down = base + e, base - e
        fd = (net.forward(up[0], up[1:3], up[3:]) - net.forward(down[0], down[1:3], down[3:])) / (2 * h)
        np.testing.assert_allclose(J[:, i], fd, rtol=1e-5, atol=1e-7)


def test_float32_training_dtype():
    net = DriftNet(1, 1, seed=0, dtype="float32")
    loss, grad, _ = net.loss_and_grad(np.ones((4, 3)), np.zeros((4, 1)))
    assert grad.dtype == np.float32 and np.isfinite(loss)


def test_adam_first_step_is_lr_times_sign():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState.for_params(p, lr=0.1)
    adam_step(state, p, np.array([0.5, -4.0, 0.0]))
    np.testing.assert_allclose(p, [0.9, -1.9, 3.0], atol=1e-7)
    assert state.step == 1


def test_adam_minimises_quadratic():
    p = np.array([5.0, -3.0])
    state = AdamState.for_params(p, lr=0.05)
    for _ in range(2000):
        adam_step(state, p, 2 * p)
    assert np.max(np.abs(p)) < 1e-2


def test_checkpoint_round_trip(tmp_path):
    net = DriftNet(2, 1, seed=5, widths=(8, 4, 8))
    save_checkpoint(net, tmp_path / "c.txt", steps=12, meta={"note": "x"})
    back, steps, meta = load_checkpoint(tmp_path / "c.txt")
    np.testing.assert_array_equal(back.params, net.params)
    assert steps == 12 and meta == {"note": "x"}
    assert back.widths == net.widths and back.seed == 5
    np.testing.assert_array_equal(back.forward(0.1, [1.0, 2.0], [0.0]), net.forward(0.1, [1.0, 2.0], [0.0]))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.txt")
    bad = tmp_path / "bad.txt"
    bad.write_text("hello\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    net = DriftNet(1, 1, widths=(4,))
    save_checkpoint(net, tmp_path / "c.txt")
    lines = (tmp_path / "c.txt").read_text().splitlines()
    (tmp_path / "short.txt").write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.txt")
