import numpy as np
import pytest
from scipy.signal import correlate2d

from certattack import autodiff as ad


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        ad.Tensor([np.inf])


def test_tensor_shape_and_flat_data():
    t = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == [2, 2]
    assert t.data.tolist() == [1.0, 2.0, 3.0, 4.0]


def test_forward_identity():
    x = ad.leaf([0.3])
    assert ad.forward(x).array.tolist() == [0.3]


def test_forward_sum_of_squares():
    x = ad.leaf([1.0, 2.0])
    y = ad.reduce_sum(ad.mul(x, x))
    assert float(ad.forward(y).array) == 5.0


def test_forward_input_shape_validation():
    x = ad.leaf([1.0, 2.0])
    y = ad.reduce_sum(ad.mul(x, x))
    assert float(ad.forward(y, ad.Tensor([9.0, 9.0])).array) == 5.0
    with pytest.raises(ValueError):
        ad.forward(y, ad.Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        ad.forward(y, ad.Tensor([1.0]), ad.Tensor([2.0]))


def test_gradient_sum_of_squares():
    x = ad.leaf([1.0, 2.0])
    y = ad.reduce_sum(ad.mul(x, x))
    g = ad.gradient(y, x)
    assert np.allclose(g.array, [2.0, 4.0])


def test_gradient_constant_wrt_input_is_zero():
    x = ad.leaf([1.0, 2.0, 3.0])
    y = ad.add(ad.reduce_sum(ad.mul(x, 0.0)), 5.0)
    assert float(y.a) == 5.0
    g = ad.gradient(y, x)
    assert np.all(g.array == 0.0)


def test_gradient_errors():
    x = ad.leaf([1.0, 2.0])
    vec = ad.mul(x, x)  # non-scalar
    with pytest.raises(ValueError):
        ad.gradient(vec, x)
    other = ad.leaf([3.0])
    y = ad.reduce_sum(vec)
    with pytest.raises(ValueError):
        ad.gradient(y, other)  # never fed into y's tape


def test_gradient_accepts_tensor_handle():
    t = ad.Tensor([1.0, 2.0])
    x = ad.leaf(t.array)
    # handle by Tensor object identity
    g = ad.gradient(ad.reduce_sum(ad.mul(x, x)), x.value)
    assert np.allclose(g.array, [2.0, 4.0])


def _mlp_straight_line(x, w1, b1, w2, b2):
    # independent plain-numpy re-implementation
    h = x @ w1 + b1
    h = np.maximum(h, 0.0)
    return h @ w2 + b2


def test_mlp_matches_straight_line_reimplementation():
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(3, 5))
    b1 = rng.normal(size=5)
    w2 = rng.normal(size=(5, 2))
    b2 = rng.normal(size=2)
    xv = rng.normal(size=(4, 3))

    x = ad.leaf(xv)
    h = ad.relu(ad.add(ad.matmul(x, ad.constant(w1)), ad.constant(b1)))
    out = ad.add(ad.matmul(h, ad.constant(w2)), ad.constant(b2))
    expect = _mlp_straight_line(xv, w1, b1, w2, b2)
    assert np.array_equal(out.a, expect)


def test_mlp_gradient_vs_finite_differences():
    rng = np.random.default_rng(11)
    w1 = rng.normal(size=(3, 5))
    b1 = rng.normal(size=5)
    w2 = rng.normal(size=(5, 2))
    b2 = rng.normal(size=2)
    xv = rng.normal(size=(1, 3)) + 0.37  # keep away from relu kinks

    def f(x):
        h = ad.relu(ad.add(ad.matmul(x, ad.constant(w1)), ad.constant(b1)))
        out = ad.add(ad.matmul(h, ad.constant(w2)), ad.constant(b2))
        return ad.reduce_sum(ad.mul(out, out))

    assert ad.finite_diff_check(f, ad.Tensor(xv), h=1e-5) < 1e-4


def test_finite_diff_linear_is_exact():
    disc = ad.finite_diff_check(lambda x: ad.reduce_sum(x),
                                ad.Tensor([0.2, -1.4, 3.0]), h=1e-5)
    assert disc < 1e-9


def test_finite_diff_exp_at_zero():
    disc = ad.finite_diff_check(lambda x: ad.reduce_sum(ad.exp(x)),
                                ad.Tensor([0.0]), h=1e-5)
    assert disc < 1e-6


def test_finite_diff_relu_away_from_kink():
    disc = ad.finite_diff_check(lambda x: ad.reduce_sum(ad.relu(x)),
                                ad.Tensor([0.5, -0.5]), h=1e-5)
    assert disc < 1e-6


def test_relu_subgradient_at_zero_is_zero():
    x = ad.leaf([0.0, 1.0, -1.0])
    g = ad.gradient(ad.reduce_sum(ad.relu(x)), x)
    assert g.array.tolist() == [0.0, 1.0, 0.0]


def test_clip_straight_through_gradient():
    x = ad.leaf([-0.5, 0.0, 0.4, 1.0, 1.5])
    g = ad.gradient(ad.reduce_sum(ad.clip(x, 0.0, 1.0)), x)
    # inside (boundary inclusive) passes, outside blocked
    assert g.array.tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]


def test_maximum_scalar_hinge_gradient():
    x = ad.leaf([-2.0, 0.0, 2.0])
    y = ad.reduce_sum(ad.maximum_scalar(x, 0.0))
    assert y.a == 2.0
    g = ad.gradient(y, x)
    assert g.array.tolist() == [0.0, 0.0, 1.0]


def test_take_scatter_add():
    x = ad.leaf([1.0, 2.0, 3.0])
    y = ad.reduce_sum(ad.take(x, np.array([0, 0, 2])))
    assert float(y.a) == 5.0
    g = ad.gradient(y, x)
    assert g.array.tolist() == [2.0, 0.0, 1.0]


def test_reduce_max_ties_pick_first():
    x = ad.leaf([3.0, 3.0, 1.0])
    g = ad.gradient(ad.reduce_max(x), x)
    assert g.array.tolist() == [1.0, 0.0, 0.0]


def test_broadcast_add_bias_unbroadcast():
    x = ad.leaf(np.ones((4, 3)))
    b = ad.leaf(np.array([1.0, 2.0, 3.0]))
    y = ad.reduce_sum(ad.add(x, b))
    gb = ad.gradient(y, b)
    assert gb.array.tolist() == [4.0, 4.0, 4.0]


def test_broadcast_row_against_batch():
    # (d,) leaf broadcast against (B, d) noise, as the smoothing path does
    x = ad.leaf(np.array([0.5, -0.5]))
    noise = ad.constant(np.arange(6.0).reshape(3, 2))
    y = ad.reduce_sum(ad.mul(ad.add(x, noise), ad.add(x, noise)))
    gx = ad.gradient(y, x)
    expect = 2.0 * (x.a + noise.a).sum(axis=0)
    assert np.allclose(gx.array, expect)


def test_softmax_matches_definition_and_gradient():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(2, 4))
    s = ad.softmax(ad.constant(v)).a
    e = np.exp(v)
    assert np.allclose(s, e / e.sum(axis=1, keepdims=True))
    assert np.allclose(s.sum(axis=1), 1.0)

    def f(x):
        return ad.reduce_sum(ad.mul(ad.softmax(x), ad.constant(v + 0.3)))

    assert ad.finite_diff_check(f, ad.Tensor(v), h=1e-5) < 1e-4


def test_log_softmax_gradient():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(3, 5))

    def f(x):
        return ad.reduce_mean(ad.take(ad.log_softmax(x),
                                      (np.arange(3), np.array([1, 0, 4]))))

    assert ad.finite_diff_check(f, ad.Tensor(v), h=1e-5) < 1e-4


def test_matmul_rejects_bad_shapes():
    a = ad.leaf(np.ones((2, 3)))
    b = ad.leaf(np.ones((4, 2)))
    with pytest.raises(ValueError):
        ad.matmul(a, b)
    with pytest.raises(ValueError):
        ad.matmul(ad.leaf(np.ones(3)), ad.leaf(np.ones((3, 2))))


def test_conv2d_matches_scipy_correlate():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b)).a
    for bi in range(2):
        for o in range(4):
            acc = sum(correlate2d(x[bi, c], w[o, c], mode="valid")
                      for c in range(3)) + b[o]
            assert np.allclose(out[bi, o], acc, atol=1e-10)


def test_conv2d_gradients_vs_finite_differences():
    rng = np.random.default_rng(6)
    xv = rng.normal(size=(1, 2, 5, 5))
    wv = rng.normal(size=(3, 2, 3, 3))
    bv = rng.normal(size=3)
    target = rng.normal(size=(1, 3, 3, 3))

    def loss_wrt_x(x):
        y = ad.conv2d(x, ad.constant(wv), ad.constant(bv))
        d = ad.sub(y, ad.constant(target))
        return ad.reduce_sum(ad.mul(d, d))

    def loss_wrt_w(w):
        y = ad.conv2d(ad.constant(xv), w, ad.constant(bv))
        d = ad.sub(y, ad.constant(target))
        return ad.reduce_sum(ad.mul(d, d))

    def loss_wrt_b(b):
        y = ad.conv2d(ad.constant(xv), ad.constant(wv), b)
        d = ad.sub(y, ad.constant(target))
        return ad.reduce_sum(ad.mul(d, d))

    assert ad.finite_diff_check(loss_wrt_x, ad.Tensor(xv), h=1e-5) < 1e-4
    assert ad.finite_diff_check(loss_wrt_w, ad.Tensor(wv), h=1e-5) < 1e-4
    assert ad.finite_diff_check(loss_wrt_b, ad.Tensor(bv), h=1e-5) < 1e-4


def test_non_finite_intermediate_raises():
    x = ad.leaf([-1.0])
    with pytest.raises(ValueError):
        ad.log(x)  # log(-1) = nan


def test_backward_visits_shared_subgraph_once():
    # y = s + s with s shared; gradient must be 2, not 1 or 4
    x = ad.leaf([3.0])
    s = ad.reduce_sum(ad.mul(x, x))
    y = ad.add(s, s)
    g = ad.gradient(y, x)
    assert np.allclose(g.array, [12.0])


def test_determinism_same_graph_same_bits():
    rng = np.random.default_rng(9)
    v = rng.normal(size=(2, 3))

    def run():
        x = ad.leaf(v)
        y = ad.reduce_sum(ad.exp(ad.mul(x, 0.3)))
        return ad.gradient(y, x).array

    assert np.array_equal(run(), run())
