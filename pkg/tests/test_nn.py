import numpy as np
import pytest

from crowdnav import nn
from crowdnav.nn import ConvLSTMParams, ConvLSTMState, Param, Tape, Tensor


@pytest.fixture(autouse=True)
def float64():
    with nn.precision(np.float64):
        yield


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = f()
            flat[i] = old - eps
            lo = f()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def assert_grads_close(analytic, numeric, rel=1e-3, abs_=1e-5):
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.abs(a), np.abs(n))
        ok = np.where(scale < 1e-2, np.abs(a - n) < abs_, np.abs(a - n) <= rel * scale)
        assert ok.all(), f"max abs diff {np.abs(a - n).max():.3e}"


def check_op(build, shapes, rng, positive=False):
    """Compare tape gradients of ``sum(build(*xs) * r)`` with finite differences."""
    xs = [rng.uniform(0.2, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    r = rng.normal(size=build(*[Tensor(x) for x in xs]).shape)

    def value():
        return float(np.sum(build(*[Tensor(x) for x in xs]).data * r))

    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    with Tape() as tape:
        loss = nn.tsum(nn.mul(build(*ts), r))
        tape.backward(loss)
    assert_grads_close([t.grad for t in ts], numeric_grad(value, xs))


# --------------------------------------------------------------------------
# backward basics


def test_grad_of_sum_is_ones():
    x = Param("x", np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        nn.backward(x.sum(), [x], tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_sum_of_squares_is_twice_x():
    x = Param("x", np.array([[1.0, -2.0], [0.5, 3.0]]))
    with Tape() as tape:
        nn.backward(nn.tsum(nn.mul(x, x)), [x], tape)
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_requires_scalar_and_tape():
    x = Param("x", np.ones(3))
    with Tape() as tape:
        y = nn.mul(x, 2.0)
        with pytest.raises(ValueError):
            tape.backward(y)
    with pytest.raises(RuntimeError):
        nn.backward(x.sum(), [x])


def test_backward_zeroes_unreached_params():
    x, unused = Param("x", np.ones(2)), Param("u", np.ones(2))
    unused.grad[:] = 5.0
    with Tape() as tape:
        nn.backward(x.sum(), [x, unused], tape)
    assert not unused.grad.any()


def test_no_recording_outside_tape():
    x = Param("x", np.ones(2))
    y = nn.mul(x, x)
    assert not y.requires_grad


# --------------------------------------------------------------------------
# per-op finite differences


@pytest.mark.parametrize(
    "build,shapes",
    [
        (lambda a, b: nn.add(a, b), [(3, 4), (4,)]),
        (lambda a, b: nn.sub(a, b), [(2, 3), (2, 1)]),
        (lambda a, b: nn.mul(a, b), [(3, 4), (3, 4)]),
        (lambda a: nn.tsum(a, axis=1), [(3, 4, 2)]),
        (lambda a: nn.tsum(a, axis=(0, 2)), [(3, 4, 2)]),
        (lambda a: nn.reshape(a, (6, 2)), [(3, 4)]),
        (lambda a: nn.getitem(a, (slice(None), slice(1, 3))), [(3, 4)]),
        (lambda a, b: nn.concat([a, b], axis=1), [(2, 3), (2, 2)]),
        (lambda a, b: nn.stack([a, b], axis=0), [(2, 3), (2, 3)]),
        (nn.sigmoid, [(3, 4)]),
        (nn.tanh, [(3, 4)]),
        (nn.softplus, [(3, 4)]),
        (lambda a: nn.huber(nn.mul(a, 1.7)), [(4, 5)]),
    ],
)
def test_op_gradients_match_finite_differences(build, shapes, rng):
    check_op(build, shapes, rng)


def test_leaky_relu_gradient_away_from_kink(rng):
    check_op(lambda a: nn.leaky_relu(nn.add(a, 0.0), 0.1), [(20,)], rng, positive=True)
    check_op(lambda a: nn.leaky_relu(nn.mul(a, -1.0), 0.1), [(20,)], rng, positive=True)


def test_huber_branches():
    x = Tensor(np.array([-3.0, -0.5, 0.0, 0.5, 2.0]))
    np.testing.assert_allclose(nn.huber(x).data, [2.5, 0.125, 0.0, 0.125, 1.5])


def test_softplus_is_stable_for_large_inputs():
    y = nn.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [0.0, np.log(2.0), 800.0])


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(stride, rng):
    check_op(lambda x, w, b: nn.conv2d(x, w, b, stride=stride), [(2, 3, 6, 6), (4, 3, 3, 3), (4,)], rng)


def test_conv_transpose2d_gradients(rng):
    check_op(lambda x, w, b: nn.conv_transpose2d(x, w, b), [(2, 3, 3, 3), (3, 2, 4, 4), (2,)], rng)


# --------------------------------------------------------------------------
# convolution


def test_identity_kernel_returns_input(rng):
    x = rng.normal(size=(3, 5, 7))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    y = nn.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x)


def test_ones_kernel_on_ones_gives_nine_in_interior():
    y = nn.conv2d(Tensor(np.ones((1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1))).data
    np.testing.assert_array_equal(y[0, 1:-1, 1:-1], 9.0)
    assert y[0, 0, 0] == 4.0


def test_stride_two_halves_spatial_size(rng):
    y = nn.conv2d(Tensor(rng.normal(size=(2, 8, 8))), Tensor(rng.normal(size=(5, 2, 3, 3))), None, stride=2)
    assert y.shape == (5, 4, 4)


def test_conv_transpose_doubles_spatial_size(rng):
    y = nn.conv_transpose2d(Tensor(rng.normal(size=(3, 4, 4))), Tensor(rng.normal(size=(3, 6, 4, 4))))
    assert y.shape == (6, 8, 8)


def test_conv_transpose_equals_conv_input_adjoint(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(3, 5, 4, 4))
    y = nn.conv_transpose2d(Tensor(x), Tensor(w)).data
    ref = nn.conv2d_backward_input(x, w, (2, 5, 8, 8), stride=2, padding=1)
    assert np.abs(y - ref).max() < 1e-5


def test_conv_transpose_of_zero_is_bias(rng):
    b = rng.normal(size=4)
    y = nn.conv_transpose2d(Tensor(np.zeros((2, 3, 3))), Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(b)).data
    np.testing.assert_array_equal(y, np.broadcast_to(b[:, None, None], y.shape))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_adjoint_inner_product(stride, rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    y = nn.conv2d(Tensor(x), Tensor(w), None, stride=stride).data
    g = rng.normal(size=y.shape)
    back = nn.conv2d_backward_input(g, w, x.shape, stride=stride, padding=1)
    assert abs(np.sum(y * g) - np.sum(x * back)) < 1e-4


def test_conv_rejects_bad_shapes(rng):
    with pytest.raises(ValueError):
        nn.conv2d(Tensor(rng.normal(size=(2, 8, 8))), Tensor(rng.normal(size=(4, 3, 3, 3))))
    with pytest.raises(ValueError):
        nn.conv2d(Tensor(rng.normal(size=(3, 7, 8))), Tensor(rng.normal(size=(4, 3, 3, 3))), stride=2)


# --------------------------------------------------------------------------
# ConvLSTM


def test_zero_weights_give_zero_hidden(rng):
    params = ConvLSTMParams(Param("w", np.zeros((8, 5, 3, 3))), Param("b", np.zeros(8)))
    state = ConvLSTMState.zeros(1, 2, 4, 4, np.float64)
    new = nn.convlstm_step(Tensor(rng.normal(size=(1, 3, 4, 4))), state, params)
    assert not new.h.data.any()


def test_saturated_forget_gate_carries_cell(rng):
    hid = 2
    w = rng.normal(size=(4 * hid, 3 + hid, 3, 3)) * 0.01
    b = np.zeros(4 * hid)
    b[:hid] = -10.0
    b[hid:2 * hid] = 10.0
    params = ConvLSTMParams(Param("w", w), Param("b", b))
    c = rng.normal(size=(1, hid, 4, 4))
    state = ConvLSTMState(Tensor(np.zeros_like(c)), Tensor(c))
    new = nn.convlstm_step(Tensor(rng.normal(size=(1, 3, 4, 4))), state, params)
    assert np.abs(new.c.data - c).max() < 1e-3


def test_convlstm_gradients_match_finite_differences(rng):
    params = ConvLSTMParams.init("l", 2, 3, rng, np.float64)
    x = rng.normal(size=(1, 2, 4, 4))
    h0, c0 = rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 3, 4, 4))
    r = rng.normal(size=(1, 3, 4, 4))

    def loss():
        s = ConvLSTMState(Tensor(h0), Tensor(c0))
        s = nn.convlstm_step(Tensor(x), s, params)
        s = nn.convlstm_step(Tensor(x), s, params)
        return nn.tsum(nn.mul(nn.add(s.h, s.c), r))

    with Tape() as tape:
        nn.backward(loss(), params.params(), tape)
    analytic = [p.grad.copy() for p in params.params()]
    numeric = numeric_grad(lambda: float(loss().data), [p.data for p in params.params()], eps=1e-3)
    assert_grads_close(analytic, numeric)


def test_convlstm_forget_bias_starts_at_one(rng):
    p = ConvLSTMParams.init("l", 2, 3, rng)
    np.testing.assert_array_equal(p.bias.data, [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])


# --------------------------------------------------------------------------
# Adam and checkpoints


def test_adam_zero_grad_leaves_value():
    p = Param("p", np.array([1.0, -2.0]))
    nn.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_constant_gradient_steps_approach_lr():
    p = Param("p", np.array([0.0, 0.0]))
    steps = []
    for _ in range(200):
        p.grad = np.array([3.0, -0.02])
        before = p.data.copy()
        nn.adam_step([p], lr=0.01)
        steps.append(p.data - before)
    np.testing.assert_allclose(steps[-1], [-0.01, 0.01], rtol=1e-4)
    np.testing.assert_allclose(steps[0], [-0.01, 0.01], rtol=1e-4)


def test_adam_is_deterministic(rng):
    def run():
        p = Param("p", np.linspace(-1, 1, 5))
        g = np.random.default_rng(4)
        for _ in range(10):
            p.grad = g.normal(size=5)
            nn.adam_step([p], lr=0.05)
        return p.data

    assert run().tobytes() == run().tobytes()


def test_checkpoint_round_trip(rng):
    params = [Param("a.weight", rng.normal(size=(2, 3, 3, 3))), Param("a.bias", rng.normal(size=2)), Param("s", 1.5)]
    raw = nn.checkpoint_bytes(params)
    stored = nn.read_checkpoint(raw)
    assert list(stored) == ["a.weight", "a.bias", "s"]
    fresh = [Param(p.name, np.zeros_like(p.data)) for p in params]
    nn.load_checkpoint(raw, fresh)
    for a, b in zip(params, fresh):
        np.testing.assert_array_equal(b.data, a.data.astype(np.float32))


def test_checkpoint_layout():
    raw = nn.checkpoint_bytes([Param("w", np.ones((2, 1)))])
    assert raw[:4] == b"CKPT"
    assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert raw[12:14] == (1).to_bytes(2, "little") and raw[14:15] == b"w"
    assert raw[15] == 2
    assert len(raw) == 16 + 8 + 8


def test_checkpoint_errors(rng):
    raw = nn.checkpoint_bytes([Param("w", np.ones(3))])
    with pytest.raises(nn.CheckpointError, match="magic"):
        nn.read_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(nn.CheckpointError):
        nn.read_checkpoint(raw[:-2])
    with pytest.raises(nn.CheckpointError, match="unknown"):
        nn.load_checkpoint(raw, [Param("v", np.ones(3))])
    with pytest.raises(nn.CheckpointError, match="shape"):
        nn.load_checkpoint(raw, [Param("w", np.ones(4))])
    with pytest.raises(nn.CheckpointError, match="unique"):
        nn.checkpoint_bytes([Param("w", np.ones(1)), Param("w", np.ones(1))])
