import numpy as np
import pytest

from stainbench.nn import (
    Adam,
    Conv2d,
    InstanceNorm2d,
    Linear,
    Module,
    RMSprop,
    ShapeError,
    Tensor,
    bce_with_logits,
    conv2d,
    instance_norm,
    l1_loss,
    leaky_relu,
    load_checkpoint,
    matmul,
    max_pool2,
    mse_loss,
    mul,
    relu,
    reshape,
    save_checkpoint,
    sigmoid,
    tanh_act,
    tmean,
    tsum,
    upsample_nearest2,
)


def fd_grad(fn, x, eps=1e-5):
    """Central finite differences of a scalar-valued fn at x (float64)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = fn()
        flat[i] = keep - eps
        lo = fn()
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def check_op(build, x):
    """Compare autodiff grads against finite differences for one input."""
    t = Tensor(x, requires_grad=True)
    loss = build(t)
    loss.backward()
    got = t.grad.copy()
    want = fd_grad(lambda: build(Tensor(x)).item(), x)
    scale = np.maximum(np.abs(want), 1e-3)
    assert np.max(np.abs(got - want) / scale) < 1e-3


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape).astype(np.float64)


def test_add_mul_broadcast_grads():
    x = rand((3, 4), 1)
    other = Tensor(rand((1, 4), 2))
    check_op(lambda t: tsum(t + other), x)
    check_op(lambda t: tsum(mul(t, other)), x)


def test_elementwise_activation_grads():
    x = rand((2, 5), 3)
    check_op(lambda t: tsum(relu(t)), x)
    check_op(lambda t: tsum(leaky_relu(t, 0.2)), x)
    check_op(lambda t: tsum(tanh_act(t)), x)
    check_op(lambda t: tsum(sigmoid(t)), x)


def test_matmul_reshape_mean_grads():
    x = rand((3, 4), 4)
    w = Tensor(rand((4, 2), 5))
    check_op(lambda t: tsum(matmul(t, w)), x)
    check_op(lambda t: tmean(reshape(t, (2, 6))), x)


def test_conv2d_matches_naive():
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, (1, 2, 5, 5))
    w = rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1).data
    # Direct loop evaluation of one output position.
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    manual = np.sum(xp[0, :, 1:4, 2:5] * w[1]) + b[1]
    assert out[0, 1, 1, 2] == pytest.approx(manual, rel=1e-6)


def test_conv2d_grads_all_inputs():
    x = rand((2, 2, 6, 6), 7)
    w0 = rand((3, 2, 3, 3), 8)
    b0 = rand(3, 9)
    check_op(lambda t: tsum(conv2d(t, Tensor(w0), Tensor(b0), 2, 1)), x)
    xt = Tensor(x)
    check_op(lambda t: tsum(conv2d(xt, t, Tensor(b0), 1, 1)), w0)
    check_op(lambda t: tsum(conv2d(xt, Tensor(w0), t, 1, 0)), b0)


def test_conv2d_reflect_pad_grad():
    x = rand((1, 2, 6, 6), 10)
    w0 = rand((2, 2, 3, 3), 11)
    b0 = rand(2, 12)
    check_op(lambda t: tsum(conv2d(t, Tensor(w0), Tensor(b0), 1, 1, "reflect")), x)


def test_instance_norm_grads_and_stats():
    x = rand((2, 3, 4, 4), 13)
    gamma0 = rand(3, 14, 0.5, 1.5)
    beta0 = rand(3, 15)
    out = instance_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-6)
    assert np.allclose(out.std(axis=(2, 3)), 1.0, atol=1e-2)
    check_op(
        lambda t: tsum(instance_norm(t, Tensor(gamma0), Tensor(beta0))), x
    )
    xt = Tensor(x)
    check_op(lambda t: tsum(instance_norm(xt, t, Tensor(beta0))), gamma0)
    check_op(lambda t: tsum(instance_norm(xt, Tensor(gamma0), t)), beta0)


def test_max_pool_and_upsample_grads():
    x = rand((1, 2, 6, 6), 16)
    check_op(lambda t: tsum(max_pool2(t)), x)
    check_op(lambda t: tsum(upsample_nearest2(t)), x)


def test_upsample_doubles_extent():
    x = rand((1, 1, 3, 5), 17)
    out = upsample_nearest2(Tensor(x)).data
    assert out.shape == (1, 1, 6, 10)
    assert out[0, 0, 0, 0] == out[0, 0, 1, 1] == x[0, 0, 0, 0]


def test_loss_grads():
    x = rand((3, 4), 18)
    target = Tensor(rand((3, 4), 19))
    check_op(lambda t: l1_loss(t, target), x)
    check_op(lambda t: mse_loss(t, target), x)
    labels = Tensor((rand((3, 4), 20) > 0).astype(np.float64))
    check_op(lambda t: bce_with_logits(t, labels), x)


def test_bce_matches_reference():
    logits = np.array([-2.0, 0.0, 3.0])
    target = np.array([0.0, 1.0, 1.0])
    want = np.mean(
        np.maximum(logits, 0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
    )
    got = bce_with_logits(Tensor(logits), Tensor(target)).item()
    assert got == pytest.approx(want, rel=1e-9)


def test_backward_accumulates_through_shared_input():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = tsum(x * x)  # dy/dx = 2x via the product rule on a shared node
    y.backward()
    assert np.allclose(x.grad, [4.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_adam_converges_on_quadratic():
    w = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(300):
        loss = tsum(w * w)
        loss.backward()
        opt.step()
    assert np.abs(w.data).max() < 1e-2


def test_rmsprop_converges_on_quadratic():
    w = Tensor(np.array([4.0, -2.0]), requires_grad=True)
    opt = RMSprop([w], lr=0.05)
    for _ in range(400):
        loss = tsum(w * w)
        loss.backward()
        opt.step()
    assert np.abs(w.data).max() < 1e-2


def test_optimizer_zero_grad_clears():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([w])
    tsum(w * 2.0).backward()
    assert w.grad is not None
    opt.zero_grad()
    assert w.grad is None or not np.any(w.grad)


def test_linear_layer_shapes_and_grad_flow():
    rng = np.random.default_rng(21)
    layer = Linear(4, 2, rng)
    out = layer(Tensor(rng.uniform(-1, 1, (5, 4))))
    assert out.data.shape == (5, 2)
    tsum(out).backward()
    assert all(p.grad is not None for p in layer.parameters())


def test_module_state_round_trip(tmp_path):
    class Net(Module):
        def __init__(self, rng):
            self.fc1 = Linear(3, 4, rng)
            self.fc2 = Linear(4, 2, rng)

        def __call__(self, x):
            return self.fc2(relu(self.fc1(x)))

    rng = np.random.default_rng(22)
    net = Net(rng)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, net.state_arrays(), {"note": "test"})
    arrays, meta = load_checkpoint(path)
    assert meta["note"] == "test"
    other = Net(np.random.default_rng(99))
    other.load_state_arrays(arrays)
    x = np.random.default_rng(23).uniform(-1, 1, (2, 3))
    assert np.array_equal(net(Tensor(x)).data, other(Tensor(x)).data)


def test_load_state_rejects_mismatch(tmp_path):
    rng = np.random.default_rng(24)
    small = Linear(2, 2, rng)
    big = Linear(3, 3, rng)
    with pytest.raises(Exception):
        big.load_state_arrays(small.state_arrays())


def test_conv_layer_rejects_bad_input():
    layer = Conv2d(3, 4, 3, 1, 1)
    with pytest.raises(ShapeError):
        layer(Tensor(np.zeros((2, 5, 8, 8))))


def test_instance_norm_layer_constant_input():
    layer = InstanceNorm2d(2)
    out = layer(Tensor(np.full((1, 2, 4, 4), 3.0)))
    assert np.allclose(out.data, 0.0, atol=1e-3)
