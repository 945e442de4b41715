import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sincser import dsp_core, layers
from sincser.gradcheck import numerical_gradient, relative_error

SEEDS = range(20)
H = 1e-5
TOL = 1e-4


def _check(analytic, f, x):
    num = numerical_gradient(f, x, H)
    err = relative_error(analytic, num)
    assert err < TOL, err


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------

def test_conv1d_identity():
    y, _ = layers.conv1d(np.array([[1.0, 2.0, 3.0]]), np.array([[1.0]]))
    np.testing.assert_array_equal(y[0, 0], [1, 2, 3])


def test_conv1d_hand_example():
    y, _ = layers.conv1d(np.array([[1.0, 2, 3, 4]]), np.array([[1.0, 1.0]]))
    np.testing.assert_array_equal(y[0, 0], [3, 5, 7])


def test_conv1d_flips_kernel():
    # true convolution against numpy's valid-mode convolve
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 40))
    w = rng.normal(size=(3, 7))
    y, _ = layers.conv1d(x, w, stride=1)
    for b in range(2):
        for f in range(3):
            np.testing.assert_allclose(y[b, f], np.convolve(x[b], w[f], mode="valid"), atol=1e-12)


@pytest.mark.parametrize("time, length, stride", [(40, 7, 1), (40, 7, 3), (41, 5, 4), (7, 7, 2)])
def test_conv1d_frames_and_stride(time, length, stride):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, time))
    w = rng.normal(size=(2, length))
    y, _ = layers.conv1d(x, w, stride)
    assert y.shape == (1, 2, (time - length) // stride + 1)
    full, _ = layers.conv1d(x, w, 1)
    np.testing.assert_allclose(y, full[:, :, ::stride])


def test_conv1d_zero_input():
    y, _ = layers.conv1d(np.zeros((2, 30)), np.random.default_rng(1).normal(size=(4, 5)))
    assert np.all(y == 0)


def test_conv1d_errors():
    with pytest.raises(layers.ShapeError, match="at least 5"):
        layers.conv1d(np.zeros((1, 4)), np.ones((1, 5)))
    with pytest.raises(layers.ShapeError, match="stride"):
        layers.conv1d(np.zeros((1, 10)), np.ones((1, 5)), stride=0)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1d_gradients(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 4))
    x = rng.normal(size=(2, 30))
    w = rng.normal(size=(3, 5))
    y, cache = layers.conv1d(x, w, stride)
    probe = rng.normal(size=y.shape)
    dx, dw = layers.conv1d_backward(probe, cache)
    loss = lambda: float(np.sum(layers.conv1d(x, w, stride)[0] * probe))
    _check(dx, loss, x)
    _check(dw, loss, w)


# ---------------------------------------------------------------------------
# sinc_conv
# ---------------------------------------------------------------------------

def _random_bank(rng, n=4, length=31, fs=16000.0):
    t1 = rng.uniform(100, 5000, n) * rng.choice([-1, 1], n)
    t2 = rng.uniform(100, 2000, n) * rng.choice([-1, 1], n)
    return dsp_core.SincBank.from_thetas(t1, t2, fs, length)


def test_sinc_conv_equals_conv1d():
    rng = np.random.default_rng(0)
    bank = _random_bank(rng, 5, 51)
    x = rng.normal(size=(3, 400))
    a, _ = layers.sinc_conv(x, bank, 2)
    b, _ = layers.conv1d(x, bank.kernels(), 2)
    assert np.array_equal(a, b)


def test_sinc_conv_tone_probe():
    fs = 16000.0
    t = np.arange(8000) / fs
    tone = np.sin(2 * np.pi * 2000.0 * t)[None]
    mk = lambda lo, hi: dsp_core.SincBank.from_thetas([lo - 30.0], [hi - lo - 50.0], fs, 251)
    inside, _ = layers.sinc_conv(tone, mk(1000.0, 3000.0))
    outside, _ = layers.sinc_conv(tone, mk(4000.0, 6000.0))
    rms = lambda y: np.sqrt(np.mean(y ** 2))
    assert rms(inside) >= 10 * rms(outside)


def test_sinc_parameter_count():
    bank = dsp_core.SincBank(dsp_core.mel_spaced_init(80), dsp_core.hamming(251))
    t1, t2 = bank.thetas()
    assert t1.size + t2.size == 160
    assert bank.kernels().size == 80 * 251 == 20080


def test_sinc_conv_zero_upstream():
    rng = np.random.default_rng(1)
    bank = _random_bank(rng)
    y, cache = layers.sinc_conv(rng.normal(size=(2, 100)), bank)
    g = layers.sinc_conv_backward(np.zeros_like(y), cache)
    assert np.all(g["theta1"] == 0) and np.all(g["theta2"] == 0) and np.all(g["x"] == 0)


def test_sinc_conv_input_gradient_is_correlation():
    rng = np.random.default_rng(2)
    bank = _random_bank(rng, 3, 21)
    x = rng.normal(size=(1, 80))
    y, cache = layers.sinc_conv(x, bank)
    dy = rng.normal(size=y.shape)
    dx = layers.sinc_conv_backward(dy, cache)["x"]
    # oracle: full cross-correlation of the upstream signal with each kernel
    expected = sum(np.correlate(np.pad(dy[0, f], 20), bank.kernels()[f], mode="valid")
                   for f in range(3))
    np.testing.assert_allclose(dx[0], expected, atol=1e-12)


def test_sinc_conv_shape_mismatch():
    rng = np.random.default_rng(3)
    bank = _random_bank(rng)
    y, cache = layers.sinc_conv(rng.normal(size=(2, 100)), bank)
    with pytest.raises(layers.ShapeError):
        layers.sinc_conv_backward(np.zeros((2, 3, y.shape[2])), cache)


@pytest.mark.parametrize("seed", SEEDS)
def test_sinc_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    bank = _random_bank(rng, 4, 31)
    stride = int(rng.integers(1, 4))
    x = rng.normal(size=(2, 120))
    y, cache = layers.sinc_conv(x, bank, stride)
    probe = rng.normal(size=y.shape)
    g = layers.sinc_conv_backward(probe, cache)
    t1, t2 = bank.thetas()

    def loss():
        b = dsp_core.SincBank.from_thetas(t1, t2, bank.sample_rate, bank.length)
        return float(np.sum(layers.sinc_conv(x, b, stride)[0] * probe))

    _check(g["theta1"], loss, t1)
    _check(g["theta2"], loss, t2)
    _check(g["x"], loss, x)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def test_batch_norm_constant_column():
    x = np.full((8, 3), 2.5)
    gamma, beta = np.array([1.0, 2.0, 3.0]), np.array([0.1, -0.2, 0.3])
    y, _ = layers.batch_norm(x, gamma, beta, layers.RunningStats(3))
    np.testing.assert_allclose(y, np.broadcast_to(beta, (8, 3)), atol=1e-12)


@pytest.mark.parametrize("shape", [(16, 5), (4, 3, 7)])
def test_batch_norm_moments(shape):
    x = np.random.default_rng(0).normal(3.0, 2.0, size=shape)
    y, _ = layers.batch_norm(x, np.ones(shape[1]), np.zeros(shape[1]), layers.RunningStats(shape[1]))
    axes = layers._bn_axes(x)
    assert np.all(np.abs(y.mean(axis=axes)) < 1e-6)
    assert np.all(np.abs(y.var(axis=axes) - 1) < 1e-4)


def test_batch_norm_running_stats():
    rng = np.random.default_rng(1)
    rs = layers.RunningStats(2)
    x = rng.normal(5.0, 3.0, size=(50, 2))
    layers.batch_norm(x, np.ones(2), np.zeros(2), rs)
    np.testing.assert_allclose(rs.mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(rs.var, 0.9 + 0.1 * x.var(axis=0))
    y, _ = layers.batch_norm(x, np.ones(2), np.zeros(2), rs, mode="eval")
    np.testing.assert_allclose(y, (x - rs.mean) / np.sqrt(rs.var + 1e-5))


def test_batch_norm_errors():
    with pytest.raises(layers.ShapeError):
        layers.batch_norm(np.ones((1, 3)), np.ones(3), np.zeros(3), layers.RunningStats(3))
    with pytest.raises(ValueError):
        layers.batch_norm(np.ones((4, 3)), np.ones(3), np.zeros(3), layers.RunningStats(3), "test")


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradients(seed, mode):
    rng = np.random.default_rng(seed)
    shape = (5, 3, 4) if seed % 2 else (6, 4)
    x = rng.normal(size=shape)
    gamma = rng.normal(size=shape[1])
    beta = rng.normal(size=shape[1])
    rs = layers.RunningStats(shape[1])
    rs.mean, rs.var = rng.normal(size=shape[1]), rng.uniform(0.5, 2, shape[1])
    y, cache = layers.batch_norm(x, gamma, beta, rs, mode)
    probe = rng.normal(size=y.shape)
    dx, dg, db = layers.batch_norm_backward(probe, cache)

    def loss():
        frozen = layers.RunningStats(shape[1])
        frozen.mean, frozen.var = rs.mean.copy(), rs.var.copy()
        return float(np.sum(layers.batch_norm(x, gamma, beta, frozen, mode)[0] * probe))

    _check(dx, loss, x)
    _check(dg, loss, gamma)
    _check(db, loss, beta)


# ---------------------------------------------------------------------------
# activation and pooling
# ---------------------------------------------------------------------------

def test_leaky_relu():
    y, cache = layers.leaky_relu(np.array([-2.0, 0.0, 3.0]))
    np.testing.assert_allclose(y, [-0.2, 0.0, 3.0])
    np.testing.assert_allclose(layers.leaky_relu_backward(np.ones(3), cache), [0.1, 0.1, 1.0])


def test_max_pool():
    x = np.array([[[1.0, 5, 2, 0, 3, 3, 9, 1, 7]]])
    y, cache = layers.max_pool(x, 4)
    np.testing.assert_array_equal(y, [[[5, 9]]])
    dx = layers.max_pool_backward(np.array([[[1.0, 2.0]]]), cache)
    np.testing.assert_array_equal(dx, [[[0, 1, 0, 0, 0, 0, 2, 0, 0]]])
    with pytest.raises(layers.ShapeError):
        layers.max_pool(np.ones((1, 1, 3)), 4)


@pytest.mark.parametrize("seed", SEEDS)
def test_activation_and_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 17))
    y, c1 = layers.leaky_relu(x)
    z, c2 = layers.max_pool(y, 4)
    probe = rng.normal(size=z.shape)
    dx = layers.leaky_relu_backward(layers.max_pool_backward(probe, c2), c1)
    loss = lambda: float(np.sum(layers.max_pool(layers.leaky_relu(x)[0], 4)[0] * probe))
    _check(dx, loss, x)


def test_sigmoid_stable():
    s = layers.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


# ---------------------------------------------------------------------------
# dense and softmax cross-entropy
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradients(seed):
    rng = np.random.default_rng(seed)
    x, W, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3)), rng.normal(size=3)
    y, cache = layers.dense(x, W, b)
    probe = rng.normal(size=y.shape)
    dx, dW, db = layers.dense_backward(probe, cache)
    loss = lambda: float(np.sum(layers.dense(x, W, b)[0] * probe))
    _check(dx, loss, x)
    _check(dW, loss, W)
    _check(db, loss, b)


def test_cross_entropy_uniform():
    loss, grad = layers.softmax_cross_entropy(np.zeros(4), 2)
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    assert loss == pytest.approx(1.386294, abs=1e-6)
    np.testing.assert_allclose(grad, [0.25, 0.25, -0.75, 0.25])


def test_cross_entropy_stable():
    logits = np.zeros(4)
    logits[1] = 1e6
    loss, grad = layers.softmax_cross_entropy(logits, 1)
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_bad_label():
    for bad in (-1, 4):
        with pytest.raises(ValueError, match="0..3"):
            layers.softmax_cross_entropy(np.zeros(4), bad)


@given(hnp.arrays(float, 4, elements=st.floats(-50, 50)), st.integers(0, 3))
def test_cross_entropy_grad_sums_to_zero(logits, label):
    _, grad = layers.softmax_cross_entropy(logits, label)
    assert abs(grad.sum()) < 1e-9


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 3, size=(5, 4))
    labels = rng.integers(0, 4, 5)
    _, grad = layers.softmax_cross_entropy(logits, labels)
    _check(grad, lambda: layers.softmax_cross_entropy(logits, labels)[0], logits)
    single = logits[0].copy()
    _, g1 = layers.softmax_cross_entropy(single, labels[0])
    _check(g1, lambda: layers.softmax_cross_entropy(single, labels[0])[0], single)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def test_lstm_zero_fixed_point():
    params = {"W": np.zeros((5, 12)), "b": np.zeros(12)}
    (h, c), _ = layers.lstm_step(np.zeros(2), (np.zeros(3), np.zeros(3)), params)
    assert np.all(h == 0) and np.all(c == 0)


def test_lstm_memory_carry():
    H = 3
    b = np.zeros(4 * H)
    b[:H] = -1e4  # input gate closed
    b[H:2 * H] = 1e4  # forget gate open
    params = {"W": np.zeros((2 + H, 4 * H)), "b": b}
    c = np.array([0.3, -1.2, 2.0])
    (_, c_new), _ = layers.lstm_step(np.ones(2), (np.ones(H), c), params)
    np.testing.assert_array_equal(c_new, c)


def test_lstm_shape_error():
    params = layers.lstm_init(np.random.default_rng(0), 3, 4)
    with pytest.raises(layers.ShapeError):
        layers.lstm_step(np.zeros(2), (np.zeros(4), np.zeros(4)), params)


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_step_gradients(seed):
    rng = np.random.default_rng(seed)
    params = layers.lstm_init(rng, 3, 4)
    params["b"] += rng.normal(size=16) * 0.5
    x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    (hn, cn), cache = layers.lstm_step(x, (h, c), params)
    ph, pc = rng.normal(size=hn.shape), rng.normal(size=cn.shape)
    dx, dh, dc, g = layers.lstm_step_backward(ph, pc, cache, params)

    def loss():
        (a, b), _ = layers.lstm_step(x, (h, c), params)
        return float(np.sum(a * ph) + np.sum(b * pc))

    for analytic, target in ((dx, x), (dh, h), (dc, c), (g["W"], params["W"]), (g["b"], params["b"])):
        _check(analytic, loss, target)


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_five_step_gradients(seed):
    rng = np.random.default_rng(seed)
    params = layers.lstm_init(rng, 3, 4)
    xs = rng.normal(size=(2, 5, 3))
    mask = None
    if seed % 2:
        mask = np.ones((2, 5))
        mask[1, 3:] = 0
    hs, cache = layers.lstm_forward(xs, params, mask)
    probe = rng.normal(size=hs.shape)
    dxs, g, _ = layers.lstm_backward(probe, cache)
    loss = lambda: float(np.sum(layers.lstm_forward(xs, params, mask)[0] * probe))
    _check(dxs, loss, xs)
    _check(g["W"], loss, params["W"])
    _check(g["b"], loss, params["b"])


def test_lstm_mask_carries_state():
    rng = np.random.default_rng(0)
    params = layers.lstm_init(rng, 2, 3)
    xs = rng.normal(size=(1, 4, 2))
    mask = np.array([[1.0, 1.0, 0.0, 0.0]])
    hs, _ = layers.lstm_forward(xs, params, mask)
    np.testing.assert_array_equal(hs[0, 2], hs[0, 1])
    np.testing.assert_array_equal(hs[0, 3], hs[0, 1])


# ---------------------------------------------------------------------------
# self-attention
# ---------------------------------------------------------------------------

def test_attention_single_position():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(1, 5))
    for s in range(3):
        params = layers.attention_init(np.random.default_rng(s), 5, 4)
        out, _ = layers.self_attention(h, params)
        np.testing.assert_array_equal(out, h[0])


def test_attention_empty_sequence():
    params = layers.attention_init(np.random.default_rng(0), 3)
    with pytest.raises(layers.ShapeError):
        layers.self_attention(np.zeros((0, 3)), params)


@pytest.mark.parametrize("seed", range(50))
def test_attention_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    params = layers.attention_init(rng, 6, 5)
    _, cache = layers.self_attention(rng.normal(0, 3, size=(int(rng.integers(1, 12)), 6)), params)
    assert abs(layers.attention_weights(cache).sum() - 1) < 1e-9


def test_attention_mask_ignores_padding():
    rng = np.random.default_rng(4)
    params = layers.attention_init(rng, 4)
    h = rng.normal(size=(1, 6, 4))
    mask = np.array([[1, 1, 1, 0, 0, 0.0]])
    a, _ = layers.self_attention(h, params, mask)
    b, _ = layers.self_attention(h[:, :3], params)
    np.testing.assert_allclose(a, b, atol=1e-14)


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    params = layers.attention_init(rng, 4, 3)
    h = rng.normal(size=(2, 6, 4))
    mask = np.ones((2, 6))
    mask[0, 4:] = 0
    out, cache = layers.self_attention(h, params, mask)
    probe = rng.normal(size=out.shape)
    dh, g = layers.self_attention_backward(probe, cache)
    loss = lambda: float(np.sum(layers.self_attention(h, params, mask)[0] * probe))
    _check(dh, loss, h)
    _check(g["Wq"], loss, params["Wq"])
    _check(g["Wk"], loss, params["Wk"])


@pytest.mark.parametrize("seed", range(5))
def test_attention_unbatched_gradients(seed):
    rng = np.random.default_rng(seed)
    params = layers.attention_init(rng, 3)
    h = rng.normal(size=(5, 3))
    out, cache = layers.self_attention(h, params)
    probe = rng.normal(size=out.shape)
    dh, _ = layers.self_attention_backward(probe, cache)
    _check(dh, lambda: float(np.sum(layers.self_attention(h, params)[0] * probe)), h)


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------

@given(hnp.arrays(float, (2, 40), elements=st.floats(-1, 1)))
@settings(max_examples=25, deadline=None)
def test_forward_deterministic(x):
    bank = dsp_core.SincBank(dsp_core.mel_spaced_init(3, length=11), dsp_core.hamming(11))
    a, _ = layers.sinc_conv(x, bank, 2)
    b, _ = layers.sinc_conv(x.copy(), bank, 2)
    assert np.array_equal(a, b)
