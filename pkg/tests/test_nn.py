import math

import mpmath
import numpy as np
import pytest

from evaction.nn import checkpoint
from evaction.nn import layers as L
from evaction.nn import tensor as T
from evaction.nn.optim import OptimState, optim_step
from evaction.nn.tensor import DimensionError, GraphStateError, Tensor, no_grad
from oracles import central_difference, depthwise_direct, gradcheck, kink_safe_difference, matmul_loops


def _dense(w, b):
    return L.LayerParams("dense", {"weight": Tensor(np.asarray(w, float), requires_grad=True),
                                   "bias": Tensor(np.asarray(b, float), requires_grad=True)})


# --- dense -----------------------------------------------------------------

def test_dense_identity():
    x = np.random.default_rng(0).random((3, 4))
    y = L.dense_forward(Tensor(x), _dense(np.eye(4), np.zeros(4)))
    assert np.array_equal(y.data, x)


def test_dense_hand_example():
    y = L.dense_forward(Tensor(np.array([[1.0, 2.0]])), _dense([[1, 0], [0, 1]], [1, 1]))
    assert y.data.tolist() == [[2.0, 3.0]]


def test_dense_matches_loops():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n, a, b = rng.integers(1, 8, 3)
        x, w, bias = rng.normal(size=(n, a)), rng.normal(size=(a, b)), rng.normal(size=b)
        y = L.dense_forward(Tensor(x), _dense(w, bias)).data
        assert np.max(np.abs(y - (matmul_loops(x, w) + bias))) <= 1e-10


def test_dense_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        L.dense_forward(Tensor(np.zeros((2, 3))), _dense(np.zeros((4, 5)), np.zeros(5)))


# --- separable conv --------------------------------------------------------

def _dw(kernel, stride=1):
    k = np.asarray(kernel, float)
    return L.LayerParams("depthwise_conv2d", {"weight": Tensor(k, requires_grad=True)}, {"stride": stride, "pad": 1})


def _pw(w):
    w = np.asarray(w, float)
    return L.LayerParams("conv2d", {"weight": Tensor(w[:, :, None, None], requires_grad=True)}, {"stride": 1, "pad": 0})


def test_sepconv_constant_interior():
    x = Tensor(np.full((1, 2, 6, 6), 2.0))
    y = L.sepconv_forward(x, _dw(np.ones((2, 3, 3))), _pw(np.eye(2))).data
    assert np.allclose(y[:, :, 1:-1, 1:-1], 18.0)


def test_sepconv_delta_gives_flipped_kernel():
    k = np.arange(9, dtype=float).reshape(3, 3) + 1
    img = np.zeros((5, 5))
    img[2, 2] = 1.0
    y = L.sepconv_forward(Tensor(img[None, None]), _dw(k[None]), _pw([[1.0]])).data[0, 0]
    assert np.allclose(y, depthwise_direct(img, k))
    assert np.allclose(y[1:4, 1:4], k[::-1, ::-1])


def test_depthwise_matches_direct_strided():
    rng = np.random.default_rng(2)
    img = rng.normal(size=(3, 9, 8))
    k = rng.normal(size=(3, 3, 3))
    y = L.depthwise_forward(Tensor(img[None]), _dw(k, stride=2)).data[0]
    for c in range(3):
        assert np.allclose(y[c], depthwise_direct(img[c], k[c], stride=2))


def test_stride_two_halves():
    x = Tensor(np.zeros((1, 3, 16, 12)))
    y = L.sepconv_forward(x, _dw(np.ones((3, 3, 3)), stride=2), _pw(np.ones((5, 3))))
    assert y.shape == (1, 5, 8, 6)


def test_sepconv_channel_mismatch():
    with pytest.raises(DimensionError):
        L.sepconv_forward(Tensor(np.zeros((1, 2, 4, 4))), _dw(np.ones((2, 3, 3))), _pw(np.ones((4, 3))))


def test_conv_general_kernel_matches_direct():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    y = T.conv2d(Tensor(x), Tensor(w), stride=1, pad=1).data
    for n in range(2):
        for o in range(4):
            ref = sum(depthwise_direct(x[n, c], w[o, c]) for c in range(3))
            assert np.allclose(y[n, o], ref)


# --- attention -------------------------------------------------------------

def _attn(rng, dim, heads):
    p = L.init_attention(rng, dim, heads, np.float64)
    for k in ("bq", "bk", "bv", "bo"):
        p.weights[k].data = rng.normal(0, 0.1, dim)
    return p


def test_single_token_attention():
    rng = np.random.default_rng(4)
    p = _attn(rng, 8, 4)
    x = rng.normal(size=(1, 8))
    out, att = L.mha_forward(Tensor(x), p, L.causal_mask(1))
    assert np.array_equal(att, np.ones((4, 1, 1)))
    v = x @ p["wv"].data + p["bv"].data
    assert np.allclose(out.data, v @ p["wo"].data + p["bo"].data)


def test_identical_tokens_uniform_attention():
    rng = np.random.default_rng(5)
    x = np.tile(rng.normal(size=(1, 8)), (5, 1))
    _, att = L.mha_forward(Tensor(x), _attn(rng, 8, 2))
    assert np.allclose(att, 0.2, atol=1e-12)


def test_attention_manual_spreadsheet():
    x = np.array([[1.0, 0.0, 2.0, -1.0], [0.5, 1.0, 0.0, 0.0], [-1.0, 2.0, 1.0, 0.5]])
    eye = np.eye(4)
    wq = np.diag([1.0, 0.5, -1.0, 2.0])
    wk = np.ones((4, 4)) * 0.25
    wv = eye[:, ::-1].copy()
    wo = 2 * eye
    p = L.LayerParams("attention_heads", {
        "wq": Tensor(wq), "bq": Tensor(np.zeros(4)), "wk": Tensor(wk), "bk": Tensor(np.zeros(4)),
        "wv": Tensor(wv), "bv": Tensor(np.zeros(4)), "wo": Tensor(wo), "bo": Tensor(np.full(4, 0.1))}, {"heads": 1})
    mask = L.causal_mask(3, np.float64)
    out, att = L.mha_forward(Tensor(x), p, mask)
    # manual evaluation, element by element
    q = [[sum(x[i][a] * wq[a][j] for a in range(4)) for j in range(4)] for i in range(3)]
    k = [[sum(x[i][a] * wk[a][j] for a in range(4)) for j in range(4)] for i in range(3)]
    v = [[sum(x[i][a] * wv[a][j] for a in range(4)) for j in range(4)] for i in range(3)]
    for i in range(3):
        s = [sum(q[i][d] * k[j][d] for d in range(4)) / 2.0 for j in range(i + 1)]
        m = max(s)
        e = [math.exp(v_ - m) for v_ in s]
        w = [v_ / sum(e) for v_ in e]
        assert np.allclose(att[0, i, :i + 1], w, atol=1e-8)
        assert np.all(att[0, i, i + 1:] == 0)
        ctx = [sum(w[j] * v[j][d] for j in range(i + 1)) for d in range(4)]
        o = [sum(ctx[a] * wo[a][d] for a in range(4)) + 0.1 for d in range(4)]
        assert np.allclose(out.data[i], o, atol=1e-8)


def test_attention_heads_divisibility():
    with pytest.raises(L.ConfigError):
        L.init_attention(np.random.default_rng(0), 10, 4)


def test_attention_rows_normalized_with_mask():
    rng = np.random.default_rng(6)
    _, att = L.mha_forward(Tensor(rng.normal(size=(2, 7, 8))), _attn(rng, 8, 4), L.causal_mask(7, np.float64))
    assert np.allclose(att.sum(-1), 1.0, atol=1e-12)
    assert np.all(att[..., np.triu_indices(7, 1)[0], np.triu_indices(7, 1)[1]] == 0)


# --- mask / positional encoding ---------------------------------------------

def test_causal_mask_small():
    assert L.causal_mask(1).tolist() == [[0.0]]
    assert L.causal_mask(2).tolist() == [[0.0, -np.inf], [0.0, 0.0]]


def test_masked_softmax_zero_future():
    rng = np.random.default_rng(7)
    sc = rng.normal(size=(6, 6)) * 5 + L.causal_mask(6, np.float64)
    p = T.softmax(Tensor(sc)).data
    assert np.all(np.triu(p, 1) == 0)


def test_positional_encoding():
    pe = L.positional_encoding(5, 8)
    assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)
    assert np.abs(pe).max() <= 1
    small = L.positional_encoding(3, 4)
    for pos in range(3):
        for k in range(2):
            ang = pos / 10000 ** (2 * k / 4)
            assert abs(small[pos, 2 * k] - math.sin(ang)) <= 1e-12
            assert abs(small[pos, 2 * k + 1] - math.cos(ang)) <= 1e-12
    with pytest.raises(ValueError):
        L.positional_encoding(3, 5)


# --- softmax cross-entropy ---------------------------------------------------

def test_xent_uniform():
    loss, probs = L.softmax_xent(Tensor(np.zeros((4, 30))), np.arange(4))
    assert abs(float(loss.data) - math.log(30)) < 1e-12
    assert np.allclose(probs.sum(1), 1.0, atol=1e-9)


def test_xent_large_logit_stable():
    z = np.zeros((1, 5))
    z[0, 2] = 1000.0
    loss, probs = L.softmax_xent(Tensor(z), [2])
    assert np.isfinite(loss.data) and float(loss.data) < 1e-12
    assert np.all(np.isfinite(probs))


def test_xent_high_precision_oracle():
    rng = np.random.default_rng(8)
    z = rng.normal(0, 3, (6, 7))
    y = rng.integers(0, 7, 6)
    loss, _ = L.softmax_xent(Tensor(z), y)
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, lab in zip(z, y):
        lse = mpmath.log(sum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
        total += lse - mpmath.mpf(float(row[lab]))
    assert abs(float(loss.data) - float(total / len(y))) <= 1e-9


def test_xent_label_range():
    with pytest.raises(ValueError):
        L.softmax_xent(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError):
        L.softmax_xent(Tensor(np.zeros((2, 3))), [-1, 0])


def test_softmax_shift_invariance():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(4, 6))
    a = T.softmax(Tensor(z)).data
    b = T.softmax(Tensor(z + 123.25)).data
    assert np.max(np.abs(a - b)) <= 1e-12


# --- backward --------------------------------------------------------------

def test_sum_gradient_ones():
    x = Tensor(np.random.default_rng(0).random((3, 4)), requires_grad=True)
    T.sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_dense_quadratic_closed_form():
    rng = np.random.default_rng(1)
    x, w, y = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=(5, 2))
    wt = Tensor(w.copy(), requires_grad=True)
    r = T.add(T.linear(Tensor(x), wt), Tensor(-y))
    T.sum_all(T.mul(r, r)).backward()
    assert np.max(np.abs(wt.grad - 2 * x.T @ (x @ w - y))) <= 1e-10


def test_backward_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    out = T.sum_all(T.mul(x, 2.0))
    out.backward()
    out.backward()
    assert np.array_equal(x.grad, np.full(3, 4.0))


def test_backward_before_forward():
    with pytest.raises(GraphStateError):
        Tensor(np.ones(2), requires_grad=True).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.sum_all(T.mul(x, 3.0))
    with pytest.raises(GraphStateError):
        y.backward()


def _check_layer(forward, params: dict, x: Tensor, seed: int):
    return gradcheck(forward, list(params.values()) + [x], seed)


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_gradcheck_dense():
    rng = np.random.default_rng(10)
    p = L.init_dense(rng, 5, 4, np.float64)
    p.weights["bias"].data = rng.normal(size=4)
    x = _rand(rng, 3, 5)
    assert _check_layer(lambda: L.dense_forward(x, p), p.weights, x, 0) < 1e-6


def test_gradcheck_conv2d():
    rng = np.random.default_rng(11)
    for k, stride in ((1, 1), (3, 2), (3, 1)):
        p = L.init_conv(rng, 3, 4, k, stride, np.float64, bias=True)
        p.weights["bias"].data = rng.normal(size=4)
        x = _rand(rng, 2, 3, 6, 5)
        assert _check_layer(lambda: L.conv_forward(x, p), p.weights, x, 1) < 1e-6


def test_gradcheck_depthwise():
    rng = np.random.default_rng(12)
    for stride in (1, 2):
        p = L.init_depthwise(rng, 3, 3, stride, np.float64)
        x = _rand(rng, 2, 3, 7, 6)
        assert _check_layer(lambda: L.depthwise_forward(x, p), p.weights, x, 2) < 1e-6


def test_gradcheck_scale_bias():
    rng = np.random.default_rng(13)
    p = L.init_scale_bias(3, np.float64)
    p.weights["scale"].data = rng.normal(size=3)
    x = _rand(rng, 2, 3, 4, 4)
    assert _check_layer(lambda: T.relu6(L.scale_bias_forward(x, p)), p.weights, x, 3) < 1e-6


def test_gradcheck_layer_norm():
    rng = np.random.default_rng(14)
    p = L.init_layer_norm(6, np.float64)
    p.weights["gamma"].data = rng.normal(size=6)
    p.weights["beta"].data = rng.normal(size=6)
    x = _rand(rng, 2, 3, 6)
    assert _check_layer(lambda: L.layer_norm_forward(x, p), p.weights, x, 4) < 1e-6


def test_gradcheck_attention():
    rng = np.random.default_rng(15)
    p = _attn(rng, 8, 4)
    x = _rand(rng, 2, 5, 8)
    mask = L.causal_mask(5, np.float64)
    assert _check_layer(lambda: L.mha_forward(x, p, mask)[0], p.weights, x, 5) < 1e-6


def test_gradcheck_xent_and_pool():
    rng = np.random.default_rng(16)
    z = _rand(rng, 2, 3, 5)
    y = rng.integers(0, 5, (2, 3))

    def f():
        return L.softmax_xent(T.mean(T.reshape(z, (2, 3, 5, 1)), axis=(3,)), y)[0]

    assert _check_layer(f, {}, z, 6) < 1e-6


def test_kink_safe_difference_near_relu_kink():
    x = Tensor(np.array([3e-5, -2.0, 5.99995, 1.0]), requires_grad=True)

    def f():
        with no_grad():
            return float(T.sum_all(T.relu6(x)).data)

    plain = central_difference(f, x.data, 1e-4)
    safe, shrunk = kink_safe_difference(f, x.data, 1e-4)
    assert abs(plain[0] - 1) > 0.1 and abs(plain[2] - 1) > 0.1
    assert np.allclose(safe, [1, 0, 1, 1]) and shrunk == 2


# --- optimizer -------------------------------------------------------------

def test_zero_gradient_no_change():
    w = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    w.grad = np.zeros(2)
    optim_step({"w": w}, OptimState(learning_rate=0.1))
    assert np.array_equal(w.data, [1.5, -2.0])


def test_first_step_moves_by_lr():
    for g in (3.0, -0.01):
        w = Tensor(np.array([0.0]), requires_grad=True)
        w.grad = np.array([g])
        optim_step({"w": w}, OptimState(learning_rate=0.01))
        assert abs(w.data[0] + 0.01 * np.sign(g)) < 1e-6


def test_adam_quadratic_descends():
    w = Tensor(np.array([1.0]), requires_grad=True)
    st = OptimState(learning_rate=0.1)
    prev = 1.0
    for _ in range(10):
        w.grad = 2 * w.data
        optim_step({"w": w}, st)
        assert abs(w.data[0]) < prev
        prev = abs(w.data[0])


def test_adam_matches_reference_formula():
    g_seq = [0.5, -0.2, 0.1]
    w = Tensor(np.array([0.3]), requires_grad=True)
    st = OptimState(learning_rate=0.05)
    m = v = 0.0
    ref = 0.3
    for t, g in enumerate(g_seq, 1):
        w.grad = np.array([g])
        optim_step({"w": w}, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.05 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(w.data[0] - ref) < 1e-12


def test_optim_only_touches_listed():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    a.grad = b.grad = np.ones(2)
    optim_step({"a": a, "b": b}, OptimState(), names=["a"])
    assert np.array_equal(b.data, np.ones(2)) and not np.array_equal(a.data, np.ones(2))


# --- checkpoint ------------------------------------------------------------

def test_checkpoint_layout_and_round_trip(tmp_path):
    arrs = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "bias": np.array([0.5], np.float32)}
    data = checkpoint.dumps(arrs)
    assert data[:4] == b"NNP1"
    assert int.from_bytes(data[4:8], "little") == 2
    assert len(data) == 8 + (4 + 1 + 4 + 8 + 24) + (4 + 4 + 4 + 4 + 4)
    back = checkpoint.loads(data)
    assert list(back) == ["a", "bias"] and np.array_equal(back["a"], arrs["a"])
    checkpoint.save(tmp_path / "m.nnp1", arrs)
    assert checkpoint.load(tmp_path / "m.nnp1").keys() == arrs.keys()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOPE")
    good = checkpoint.dumps({"a": np.ones(4, np.float32)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(good[:-2])


def test_layer_kind_validation():
    with pytest.raises(L.ConfigError):
        L.LayerParams("lstm", {})
    with pytest.raises(DimensionError):
        L.LayerParams("scale_bias_norm", {"scale": Tensor(np.ones(3)), "bias": Tensor(np.ones(2))})
