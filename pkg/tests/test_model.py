import math

import numpy as np
import pytest

from slacc.core import Direction, SmashedData
from slacc.model import (
    ClientModel,
    ServerModel,
    client_backward,
    client_forward,
    load_checkpoint,
    monolithic_loss_and_grads,
    save_checkpoint,
    server_forward_backward,
    sgd_step,
    softmax_cross_entropy,
)


def micro_models(rng, c_in=1, widths=(2, 3), hw=4, hidden=5, classes=3):
    client = ClientModel.init(int(rng.integers(1 << 30)), c_in, widths)
    server = ServerModel.init(int(rng.integers(1 << 30)), widths[-1] * (hw // 2) ** 2, hidden, classes)
    for p in (*client.params.values(), *server.params.values()):
        p += rng.normal(scale=0.1, size=p.shape)  # non-zero biases too
    return client, server


def split_loss(client, server, x, y):
    s, _ = client_forward(client, x)
    return server_forward_backward(server, s, y)[0]


def fd_grads(params, loss_fn, h=1e-5):
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = loss_fn()
            p[i] = old - h
            down = loss_fn()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out[k] = g
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def test_zero_weights_give_zero_activations(rng):
    client = ClientModel.init(0, 2, (3, 3))
    client.params = {k: np.zeros_like(v) for k, v in client.params.items()}
    s, _ = client_forward(client, rng.normal(size=(2, 2, 4, 4)))
    assert s.direction is Direction.ACTIVATIONS
    assert not s.tensor.any()


def test_identity_kernel(rng):
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    client = ClientModel({"conv1.w": w, "conv1.b": np.zeros(1)})
    x = rng.uniform(0, 1, size=(2, 1, 5, 5))
    s, _ = client_forward(client, x)
    assert np.array_equal(s.tensor, x)


def test_client_jvp_matches_central_difference(rng):
    client, _ = micro_models(rng)
    x = rng.normal(size=(2, 1, 4, 4))
    s, cache = client_forward(client, x)
    u = rng.normal(size=s.shape)
    grads = client_backward(client, x, SmashedData(u, 0, Direction.GRADIENTS), cache)
    direction = {k: rng.normal(size=v.shape) for k, v in client.params.items()}
    h = 1e-5
    plus = ClientModel({k: v + h * direction[k] for k, v in client.params.items()})
    minus = ClientModel({k: v - h * direction[k] for k, v in client.params.items()})
    jvp = (client_forward(plus, x)[0].tensor - client_forward(minus, x)[0].tensor) / (2 * h)
    lhs = float((u * jvp).sum())
    rhs = sum(float((grads[k] * direction[k]).sum()) for k in grads)
    assert abs(lhs - rhs) / max(abs(lhs), 1e-12) < 1e-6


def test_uniform_logits_loss():
    server = ServerModel.init(0, 2, 4, 10)
    server.params["fc2.w"][:] = 0.0
    s = SmashedData(np.ones((3, 2, 2, 2)))
    loss, grad_s, _ = server_forward_backward(server, s, np.array([0, 4, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-15)
    assert grad_s.direction is Direction.GRADIENTS and grad_s.shape == s.shape


def test_softmax_ce_gradient_three_classes(rng):
    logits = rng.normal(size=(1, 3))
    labels = np.array([2])
    _, grad = softmax_cross_entropy(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum()
    assert np.allclose(grad, p - np.eye(3)[2], atol=1e-15)
    fd = np.zeros(3)
    for i in range(3):
        e = np.zeros((1, 3))
        e[0, i] = 1e-6
        fd[i] = (softmax_cross_entropy(logits + e, labels)[0] - softmax_cross_entropy(logits - e, labels)[0]) / 2e-6
    assert np.allclose(fd, grad[0], atol=1e-9)


def test_duplicated_batch_same_loss(rng):
    client, server = micro_models(rng)
    x, y = rng.normal(size=(3, 1, 4, 4)), np.array([0, 1, 2])
    a = split_loss(client, server, x, y)
    b = split_loss(client, server, np.concatenate([x, x]), np.concatenate([y, y]))
    assert b == pytest.approx(a, abs=1e-14)


def test_direction_checks(rng):
    client, server = micro_models(rng)
    x = rng.normal(size=(2, 1, 4, 4))
    s, _ = client_forward(client, x)
    with pytest.raises(ValueError):
        client_backward(client, x, s)
    with pytest.raises(ValueError):
        server_forward_backward(server, SmashedData(s.tensor, 0, Direction.GRADIENTS), [0, 1])
    with pytest.raises(ValueError):
        server_forward_backward(server, s, [0, 3])


def test_input_channel_mismatch(rng):
    client, _ = micro_models(rng)
    with pytest.raises(ValueError):
        client_forward(client, rng.normal(size=(1, 2, 4, 4)))


def test_sgd_step():
    p = {"w": np.array([1.0])}
    assert sgd_step(p, {"w": np.array([2.0])}, 0.1)["w"][0] == pytest.approx(0.8)
    assert sgd_step(p, {"w": np.array([2.0])}, 0.0)["w"][0] == 1.0


@pytest.mark.parametrize("trial", range(3))
def test_all_gradients_match_finite_differences(rng, trial):
    client, server = micro_models(rng)
    x = rng.normal(size=(2, 1, 4, 4))
    y = rng.integers(0, 3, size=2)
    s, cache = client_forward(client, x)
    _, grad_s, sgrads = server_forward_backward(server, s, y)
    cgrads = client_backward(client, x, grad_s, cache)
    loss = lambda: split_loss(client, server, x, y)  # noqa: E731
    for k, g in fd_grads(client.params, loss).items():
        assert rel_err(g, cgrads[k]) < 1e-4, k
    for k, g in fd_grads(server.params, loss).items():
        assert rel_err(g, sgrads[k]) < 1e-4, k


def test_split_equals_monolithic(rng):
    client, server = micro_models(rng, widths=(3, 2, 4), hw=6)
    x = rng.normal(size=(3, 1, 6, 6))
    y = np.array([0, 2, 1])
    s, cache = client_forward(client, x)
    loss, grad_s, sgrads = server_forward_backward(server, s, y)
    cgrads = client_backward(client, x, grad_s, cache)
    mloss, mc, ms = monolithic_loss_and_grads(client, server, x, y)
    assert abs(loss - mloss) <= 1e-12
    for k in mc:
        assert np.max(np.abs(mc[k] - cgrads[k])) <= 1e-12
    for k in ms:
        assert np.max(np.abs(ms[k] - sgrads[k])) <= 1e-12


def test_forward_deterministic(rng):
    client, _ = micro_models(rng)
    x = rng.normal(size=(2, 1, 4, 4))
    assert client_forward(client, x)[0] == client_forward(client, x)[0]


def test_init_deterministic_per_seed():
    a, b, c = ClientModel.init(5), ClientModel.init(5), ClientModel.init(6)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["conv1.w"], c.params["conv1.w"])
    limit = math.sqrt(6 / 9)
    assert np.abs(a.params["conv1.w"]).max() <= limit


def test_loss_decreases_on_separable_toy(rng):
    # class decided by which half of the image is bright
    n = 32
    y = np.arange(n) % 2
    x = np.zeros((n, 1, 4, 4))
    x[y == 0, :, :, :2] = 1.0
    x[y == 1, :, :, 2:] = 1.0
    x += rng.normal(scale=0.05, size=x.shape)
    client = ClientModel.init(0, 1, (2,))
    server = ServerModel.init(0, 2 * 4, 4, 2)
    losses = []
    for _ in range(50):
        s, cache = client_forward(client, x)
        loss, grad_s, sg = server_forward_backward(server, s, y)
        cg = client_backward(client, x, grad_s, cache)
        server = ServerModel(sgd_step(server.params, sg, 0.1))
        client = ClientModel(sgd_step(client.params, cg, 0.1))
        losses.append(loss)
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < smooth[0] * 0.8
    assert np.all(np.diff(smooth) <= 1e-9)


def test_checkpoint_round_trip(tmp_path, rng):
    client, server = micro_models(rng)
    save_checkpoint(tmp_path, client, server, seed=3, round=7)
    c2, s2, manifest = load_checkpoint(tmp_path)
    assert manifest["seed"] == 3 and manifest["round"] == 7
    for a, b in ((client, c2), (server, s2)):
        for k in a.params:
            assert np.array_equal(a.params[k].astype(np.float32), b.params[k].astype(np.float32))
