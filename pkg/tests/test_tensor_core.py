import numpy as np
import pytest

from gradcheck import check_gradients, numeric_grad, relative_error
from metanas.exceptions import InvalidConfigError, InvalidLabelError, InvalidShapeError
from metanas.tensor import Adam, AdamState, Tape, Tensor, adam_step, checkpoint, ops, sgd_step

SEEDS = range(10)


def weighted(out, weights):
    return ops.sum(ops.mul(out, weights))


# ---------------------------------------------------------------- conv2d

def test_conv2d_zero_input_gives_zero_output():
    x = Tensor(np.zeros((1, 1, 1, 1)))
    k = Tensor(np.random.default_rng(0).normal(size=(2, 1, 3, 3)))
    assert np.all(ops.conv2d(x, k).data == 0)


def test_conv2d_delta_kernel_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 1, 5, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 5, 4))
    k = rng.normal(size=(2, 3, 5, 5))
    out = ops.conv2d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    ref = np.zeros((2, 2, 5, 4))
    for b in range(2):
        for f in range(2):
            for i in range(5):
                for j in range(4):
                    ref[b, f, i, j] = np.sum(xp[b, :, i:i + 5, j:j + 5] * k[f])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_sum_gradient_wrt_kernel(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 1, 4, 4))
    k = rng.normal(size=(1, 1, 3, 3))
    err = check_gradients(lambda t: ops.sum(ops.conv2d(Tensor(x), t[0])), [k])
    assert err < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("ksize", [3, 5, 7])
def test_conv2d_gradients(seed, ksize):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, ksize, ksize))
    w = rng.normal(size=(2, 3, 5, 5))
    assert check_gradients(lambda t: weighted(ops.conv2d(t[0], t[1]), w), [x, k]) < 1e-4


def test_conv2d_channel_mismatch():
    with pytest.raises(InvalidShapeError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# ---------------------------------------------------------------- separable conv

def test_separable_identity_composition():
    x = np.random.default_rng(3).normal(size=(2, 3, 5, 5))
    depth = np.zeros((3, 1, 5, 5))
    depth[:, 0, 2, 2] = 1.0
    point = np.eye(3)[:, :, None, None]
    out = ops.depthwise_separable_conv2d(Tensor(x), Tensor(depth), Tensor(point)).data
    np.testing.assert_allclose(out, x, atol=1e-14)


def test_separable_zero_pointwise_annihilates():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 4, 4))
    depth = rng.normal(size=(2, 1, 3, 3))
    out = ops.depthwise_separable_conv2d(Tensor(x), Tensor(depth), Tensor(np.zeros((4, 2, 1, 1))))
    assert np.all(out.data == 0)


@pytest.mark.parametrize("seed", SEEDS)
def test_separable_equals_two_step_conv2d(seed):
    rng = np.random.default_rng(seed)
    c, f = 3, 2
    x = rng.normal(size=(2, c, 5, 5))
    depth = rng.normal(size=(c, 1, 3, 3))
    point = rng.normal(size=(f, c, 1, 1))
    # Depthwise stage as a dense conv2d with a block-diagonal kernel.
    block = np.zeros((c, c, 3, 3))
    for i in range(c):
        block[i, i] = depth[i, 0]
    ref = ops.conv2d(ops.conv2d(Tensor(x), Tensor(block)), Tensor(point)).data
    out = ops.depthwise_separable_conv2d(Tensor(x), Tensor(depth), Tensor(point)).data
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_separable_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 5, 5))
    depth = rng.normal(size=(2, 1, 5, 5))
    point = rng.normal(size=(3, 2, 1, 1))
    w = rng.normal(size=(2, 3, 5, 5))
    err = check_gradients(
        lambda t: weighted(ops.depthwise_separable_conv2d(t[0], t[1], t[2]), w), [x, depth, point])
    assert err < 1e-4


def test_separable_channel_mismatch():
    with pytest.raises(InvalidShapeError):
        ops.depthwise_conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))))


# ---------------------------------------------------------------- pooling

def test_pool_constant_field():
    x = Tensor(np.full((1, 2, 5, 5), 0.7))
    np.testing.assert_allclose(ops.pool2d(x, "avg").data, 0.7)
    np.testing.assert_allclose(ops.pool2d(x, "max").data, 0.7)


def test_avg_pool_divides_edges_by_window_size():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0] = 4.0
    out = ops.pool2d(Tensor(x), "avg").data[0, 0]
    assert out[0, 0] == pytest.approx(1.0)      # 2x2 window at the corner
    assert out[1, 1] == pytest.approx(4.0 / 9)  # full interior window
    assert out[0, 1] == pytest.approx(4.0 / 6)  # 2x3 window on the edge


def test_max_pool_spike_spreads_to_block():
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1.0
    out = ops.pool2d(Tensor(x), "max").data[0, 0]
    expected = np.zeros((7, 7))
    expected[2:5, 2:5] = 1.0
    np.testing.assert_array_equal(out, expected)


def test_max_pool_tie_routes_to_first_element():
    x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    with Tape() as tape:
        out = ops.pool2d(x, "max")
        loss = ops.getitem(out, (0, 0, 1, 1))
    (g,) = tape.gradient(loss, [x])
    expected = np.zeros((3, 3))
    expected[0, 0] = 1.0
    np.testing.assert_array_equal(g[0, 0], expected)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["avg", "max"])
def test_pool_gradients(seed, kind):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 5, 4))
    w = rng.normal(size=(2, 2, 5, 4))
    assert check_gradients(lambda t: weighted(ops.pool2d(t[0], kind), w), [x]) < 1e-4


# ---------------------------------------------------------------- dense / gap

def test_dense_identity():
    x = np.random.default_rng(5).normal(size=(3, 4))
    out = ops.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_dense_bias_gradient_is_batch_size():
    x = Tensor(np.random.default_rng(6).normal(size=(7, 3)))
    w = Tensor(np.ones((3, 2)))
    b = Tensor(np.zeros(2), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.dense(x, w, b))
    (gb,) = tape.gradient(loss, [b])
    np.testing.assert_array_equal(gb, np.full(2, 7.0))


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    r = rng.normal(size=(3, 5))
    assert check_gradients(lambda t: weighted(ops.dense(t[0], t[1], t[2]), r), [x, w, b]) < 1e-4


def test_dense_dimension_mismatch():
    with pytest.raises(InvalidShapeError):
        ops.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


def test_global_avg_pool_cases():
    assert np.allclose(ops.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 2.5))).data, 2.5)
    one_hot = np.zeros((1, 1, 4, 5))
    one_hot[0, 0, 2, 1] = 1.0
    assert ops.global_avg_pool(Tensor(one_hot)).data[0, 0] == pytest.approx(1 / 20)
    x = np.random.default_rng(7).normal(size=(2, 3, 4, 4))
    brute = np.array([[sum(x[b, c].ravel()) / 16 for c in range(3)] for b in range(2)])
    np.testing.assert_allclose(ops.global_avg_pool(Tensor(x)).data, brute, rtol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_global_avg_pool_gradient(seed):
    rng = np.random.default_rng(seed)
    x, r = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3))
    assert check_gradients(lambda t: weighted(ops.global_avg_pool(t[0]), r), [x]) < 1e-4


# ---------------------------------------------------------------- cross-entropy

def test_cross_entropy_uniform_logits():
    loss = ops.softmax_cross_entropy(Tensor(np.zeros((4, 5))), [0, 1, 2, 3])
    assert loss.item() == pytest.approx(np.log(5))


def test_cross_entropy_confident_limit():
    logits = np.zeros((1, 3))
    logits[0, 1] = 50.0
    assert ops.softmax_cross_entropy(Tensor(logits), [1]).item() < 1e-20


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 5)) * 3
    labels = rng.integers(0, 5, size=4)
    assert check_gradients(lambda t: ops.softmax_cross_entropy(t[0], labels), [logits]) < 1e-4


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(InvalidLabelError):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- elementwise, lstm, misc

@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("fn", [ops.sigmoid, ops.tanh, ops.log_sigmoid, ops.relu, ops.log_softmax])
def test_elementwise_gradients(seed, fn):
    rng = np.random.default_rng(seed)
    x, r = rng.normal(size=(3, 4)) * 2, rng.normal(size=(3, 4))
    assert check_gradients(lambda t: weighted(fn(t[0]), r), [x]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_embedding_and_concat_gradients(seed):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(6, 3))
    extra = rng.normal(size=(1, 2))
    r = rng.normal(size=(1, 5))

    def build(t):
        row = ops.embedding_lookup(t[0], 4)
        return weighted(ops.concat([row, t[1]], axis=1), r)

    assert check_gradients(build, [table, extra]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_cell_gradients(seed):
    rng = np.random.default_rng(seed)
    d, hs = 3, 4
    arrays = [rng.normal(size=(1, d)), rng.normal(size=(1, hs)), rng.normal(size=(1, hs)),
              rng.normal(size=(d, 4 * hs)) * 0.5, rng.normal(size=(hs, 4 * hs)) * 0.5,
              rng.normal(size=4 * hs)]
    r1, r2 = rng.normal(size=(1, hs)), rng.normal(size=(1, hs))

    def build(t):
        h, c = ops.lstm_cell(*t)
        return ops.add(weighted(h, r1), weighted(c, r2))

    assert check_gradients(build, arrays) < 1e-4


def test_lstm_zero_weights_keep_zero_state():
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    h, c = ops.lstm_cell(z(1, 3), z(1, 4), z(1, 4), z(3, 16), z(4, 16), z(16))
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_dropout_modes():
    x = Tensor(np.ones((200, 50)))
    assert ops.dropout(x, 0.25, train=False) is x
    a = ops.dropout(x, 0.25, np.random.default_rng(0)).data
    b = ops.dropout(x, 0.25, np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.75}
    assert abs((a == 0).mean() - 0.25) < 0.02


def test_dropout_gradient_uses_same_mask():
    x = np.random.default_rng(3).normal(size=(4, 6))
    r = np.random.default_rng(4).normal(size=(4, 6))
    err = check_gradients(lambda t: weighted(ops.dropout(t[0], 0.5, np.random.default_rng(9)), r), [x])
    assert err < 1e-4


# ---------------------------------------------------------------- optimizers

def test_sgd_zero_gradient_leaves_params():
    p = Tensor(np.arange(4.0))
    sgd_step([p], [np.zeros(4)], lr=0.1)
    np.testing.assert_array_equal(p.data, np.arange(4.0))


@pytest.mark.parametrize("lr", [0.0, -1.0])
def test_optimizers_reject_nonpositive_lr(lr):
    with pytest.raises(InvalidConfigError):
        sgd_step([Tensor(np.zeros(1))], [np.zeros(1)], lr)
    with pytest.raises(InvalidConfigError):
        adam_step(AdamState(), [Tensor(np.zeros(1))], [np.zeros(1)], lr)


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.02, 1e-3, -50.0])
    p = Tensor(np.zeros(4))
    adam_step(AdamState(), [p], [g], lr=0.01)
    # closed form first step: m_hat = g, v_hat = g^2  =>  -lr * g / (|g| + eps)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_minimizes_quadratic():
    p = Tensor(np.array([3.0, -2.0]))
    opt = Adam([p], lr=0.05)
    for _ in range(500):
        opt.step([2 * p.data])
    assert np.all(np.abs(p.data) < 0.05)


# ---------------------------------------------------------------- composed graph

def _three_layer_net(t):
    x, k1, k2, w, b = t
    h = ops.relu(ops.conv2d(x, k1))
    h = ops.pool2d(ops.conv2d(h, k2), "max")
    logits = ops.dense(ops.global_avg_pool(h), w, b)
    return ops.softmax_cross_entropy(logits, [0, 2])


@pytest.mark.parametrize("seed", SEEDS)
def test_whole_graph_gradient(seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=(2, 1, 5, 5)), rng.normal(size=(3, 1, 3, 3)),
              rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3)), rng.normal(size=3)]
    assert check_gradients(_three_layer_net, arrays) < 1e-4


def test_tape_visits_records_in_reverse_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, x)
        z = ops.add(y, x)
    assert [r.output for r in tape.records] == [y, z]
    (g,) = tape.gradient(z, [x])
    assert g[0] == pytest.approx(5.0)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        pass
    ops.mul(x, x)
    assert len(tape) == 0


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    arrays = [rng.normal(size=(2, 1, 5, 5)), rng.normal(size=(3, 1, 3, 3)),
              rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3)), rng.normal(size=3)]
    a = _three_layer_net([Tensor(v) for v in arrays]).data
    b = _three_layer_net([Tensor(v) for v in arrays]).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    records = [("a", rng.normal(size=(2, 3))), ("scalar", np.array(1.5)), ("b", rng.normal(size=4))]
    path = tmp_path / "ck.bin"
    checkpoint.save(path, records)
    loaded = checkpoint.load(path)
    assert [n for n, _ in loaded] == ["a", "scalar", "b"]
    for (_, x), (_, y) in zip(records, loaded):
        assert x.shape == y.shape and x.tobytes() == y.tobytes()


def test_checkpoint_byte_layout():
    blob = checkpoint.dumps([("w", np.array([1.0, 2.0]))])
    assert blob[:4] == b"MNCK"
    assert len(blob) == 4 + 8 + 4 + 1 + 4 + 8 + 16
    assert blob[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_numeric_grad_oracle_sanity():
    # d/dx sum(x^3) = 3 x^2, independent of the tape
    x = np.array([[1.0, -2.0]])
    num = numeric_grad(lambda a: float(np.sum(a[0] ** 3)), [x], 0)
    assert relative_error(num, 3 * x ** 2) < 1e-8
