"""Tensor core: op semantics against nested-loop oracles, gradients
against central finite differences, and tape lifecycle rules."""

import numpy as np
import pytest

from fmqs import autodiff as ad
from fmqs import nn
from fmqs.autodiff import ShapeError, StaleTapeError, Tensor

from fd import FD_TOL, max_rel_error


# ---------------------------------------------------------------- oracles


def conv2d_oracle(x, w, b, padding=(0, 0), stride=(1, 1)):
    """Direct nested-loop cross-correlation, written independently."""
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = padding
    sh, sw = stride
    xp = np.zeros((C, H + 2 * ph, W + 2 * pw))
    xp[:, ph : ph + H, pw : pw + W] = x
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i * sh + u, j * sw + v] * w[o, c, u, v]
                out[o, i, j] = acc + b[o]
    return out


def maxpool_oracle(x, window, stride):
    C, H, W = x.shape
    ph, pw = window
    sh, sw = stride
    Ho = (H - ph) // sh + 1
    Wo = (W - pw) // sw + 1
    out = np.zeros((C, Ho, Wo))
    for c in range(C):
        for i in range(Ho):
            for j in range(Wo):
                out[c, i, j] = x[c, i * sh : i * sh + ph, j * sw : j * sw + pw].max()
    return out


def linear_oracle(x, w, b):
    out = np.zeros(x.shape[:-1] + (w.shape[0],))
    for idx in np.ndindex(x.shape[:-1]):
        for o in range(w.shape[0]):
            out[idx + (o,)] = float(np.dot(x[idx], w[o])) + b[o]
    return out


def attention_oracle(q, k, v, heads, wo):
    """Per-head softmax attention computed with explicit loops."""
    Lq, D = q.shape
    Lk = k.shape[0]
    dk = D // heads
    merged = np.zeros((Lq, D))
    for h in range(heads):
        qs = q[:, h * dk : (h + 1) * dk]
        ks = k[:, h * dk : (h + 1) * dk]
        vs = v[:, h * dk : (h + 1) * dk]
        for i in range(Lq):
            scores = np.array([qs[i] @ ks[j] / np.sqrt(dk) for j in range(Lk)])
            e = np.exp(scores - scores.max())
            wgt = e / e.sum()
            merged[i, h * dk : (h + 1) * dk] = sum(wgt[j] * vs[j] for j in range(Lk))
    return merged @ wo.T


# ------------------------------------------------------------- forward ops


def test_conv2d_all_ones_sums_window():
    x = Tensor(np.ones((1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    b = Tensor(np.zeros(1))
    out = nn.conv2d(x, w, b)
    assert out.data.shape == (1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 5, 4)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = nn.conv2d(x, Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = nn.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1, stride=1).data
    want = conv2d_oracle(x, w, b, padding=(1, 1))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_conv2d_stride_matches_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 8, 9))
    w = rng.standard_normal((4, 3, 3, 5))
    b = rng.standard_normal(4)
    got = nn.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=(1, 2), stride=(2, 2)).data
    want = conv2d_oracle(x, w, b, padding=(1, 2), stride=(2, 2))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_conv2d_shape_errors_name_dimension():
    x = Tensor(np.ones((2, 4, 4)))
    w = Tensor(np.ones((3, 5, 3, 3)))
    with pytest.raises(ShapeError, match="channel"):
        nn.conv2d(x, w)
    with pytest.raises(ShapeError, match="kernel"):
        nn.conv2d(x, Tensor(np.ones((1, 2, 9, 9))))


def test_maxpool_basics():
    out = nn.maxpool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), window=2)
    assert out.item() == 4.0


def test_maxpool_tie_gradient_first_index():
    x = Tensor(np.full((1, 2, 2), 5.0), requires_grad=True)
    out = nn.maxpool2d(x, window=2)
    out.sum().backward()
    want = np.zeros((1, 2, 2))
    want[0, 0, 0] = 1.0  # first element of the window wins ties
    np.testing.assert_array_equal(x.grad, want)


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 4))
    got = nn.maxpool2d(Tensor(x), window=2, stride=2).data
    np.testing.assert_array_equal(got, maxpool_oracle(x, (2, 2), (2, 2)))
    got = nn.maxpool2d(Tensor(x), window=(2, 2), stride=(1, 1)).data
    np.testing.assert_array_equal(got, maxpool_oracle(x, (2, 2), (1, 1)))


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError, match="window"):
        nn.maxpool2d(Tensor(np.ones((1, 2, 2))), window=3)


def test_linear_identity_and_bias():
    x = Tensor(np.arange(12, dtype=float).reshape(3, 4))
    out = nn.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x.data)
    out = nn.linear(x, Tensor(np.zeros((2, 4))), Tensor(np.array([1.0, -2.0])))
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0], (3, 1)))


@pytest.mark.parametrize("seed", range(5))
def test_linear_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(5)
    got = nn.linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, linear_oracle(x, w, b), rtol=0, atol=1e-12)


def test_linear_shape_error():
    with pytest.raises(ShapeError, match="trailing"):
        nn.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_attention_single_key_returns_projected_value():
    rng = np.random.default_rng(1)
    q = Tensor(rng.standard_normal((1, 8)))
    k = Tensor(rng.standard_normal((1, 8)))
    v = Tensor(rng.standard_normal((1, 8)))
    wo = Tensor(rng.standard_normal((8, 8)))
    out = nn.attention_block(q, k, v, heads=2, out_weight=wo)
    np.testing.assert_allclose(out.data, v.data @ wo.data.T, atol=1e-12)


def test_attention_identical_keys_uniform_weights():
    rng = np.random.default_rng(2)
    q = Tensor(rng.standard_normal((3, 4)))
    k = Tensor(np.tile(rng.standard_normal(4), (5, 1)))
    v = Tensor(rng.standard_normal((5, 4)))
    out = nn.attention_block(q, k, v, heads=1, out_weight=Tensor(np.eye(4)))
    np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_attention_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((4, 8))
    k = rng.standard_normal((4, 8))
    v = rng.standard_normal((4, 8))
    wo = rng.standard_normal((8, 8))
    got = nn.attention_block(Tensor(q), Tensor(k), Tensor(v), heads=2,
                             out_weight=Tensor(wo)).data
    np.testing.assert_allclose(got, attention_oracle(q, k, v, 2, wo), atol=1e-12)


def test_attention_batched_agrees_with_unbatched():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((2, 4, 8))
    wo = rng.standard_normal((8, 8))
    batched = nn.attention_block(Tensor(q), Tensor(q), Tensor(q), heads=2,
                                 out_weight=Tensor(wo)).data
    for b in range(2):
        single = nn.attention_block(Tensor(q[b]), Tensor(q[b]), Tensor(q[b]), heads=2,
                                    out_weight=Tensor(wo)).data
        np.testing.assert_allclose(batched[b], single, atol=1e-12)


def test_attention_head_divisibility_error():
    t = Tensor(np.ones((2, 6)))
    with pytest.raises(ShapeError, match="head"):
        nn.attention_block(t, t, t, heads=4, out_weight=Tensor(np.eye(6)))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = Tensor(rng.standard_normal((5, 7)) * rng.uniform(0.1, 50))
        s = ad.softmax(x, axis=-1).data
        assert (s >= 0).all()
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_forward_determinism():
    rng1 = np.random.default_rng(99)
    rng2 = np.random.default_rng(99)
    for r in (rng1, rng2):
        r.standard_normal(5)  # advance identically
    x1, x2 = rng1.standard_normal((2, 6, 6)), rng2.standard_normal((2, 6, 6))
    w1, w2 = rng1.standard_normal((3, 2, 3, 3)), rng2.standard_normal((3, 2, 3, 3))
    o1 = nn.conv2d(Tensor(x1), Tensor(w1), padding=1).data
    o2 = nn.conv2d(Tensor(x2), Tensor(w2), padding=1).data
    assert (o1 == o2).all()


# --------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, np.array([2.0, 4.0]))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        (x * 2.0).backward()


def test_backward_twice_raises_stale_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(StaleTapeError):
        loss.backward()


def test_reusing_consumed_graph_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    y.sum().backward()
    with pytest.raises(StaleTapeError):
        (y.sum() * 1.0).backward()


def test_leaves_survive_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    (x * 3.0).sum().backward()
    x.grad = None
    (x * 5.0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 5.0))


def test_grad_shapes_match_parameters():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    nn.conv2d(x, w, b, padding=1).sum().backward()
    assert x.grad.shape == x.data.shape
    assert w.grad.shape == w.data.shape
    assert b.grad.shape == b.data.shape


LAYER_CASES = {}


def _register_layer_cases():
    def conv_case(rng):
        x = Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        return (lambda: nn.conv2d(x, w, b, padding=1, stride=(2, 1)).sum()), [x, w, b]

    def pool_case(rng):
        x = Tensor(rng.standard_normal((2, 4, 6)), requires_grad=True)
        return (lambda: (nn.maxpool2d(x, window=2) * Tensor(np.arange(12.0).reshape(2, 2, 3))).sum()), [x]

    def linear_case(rng):
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        return (lambda: (nn.linear(x, w, b) ** 2.0).sum()), [x, w, b]

    def attention_case(rng):
        q = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
        v = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
        wo = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
        return (lambda: (nn.attention_block(q, k, v, 2, wo) ** 2.0).sum()), [q, k, v, wo]

    def layernorm_case(rng):
        x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        g = Tensor(rng.standard_normal(6), requires_grad=True)
        b = Tensor(rng.standard_normal(6), requires_grad=True)
        return (lambda: (nn.layer_norm(x, g, b) ** 2.0).sum()), [x, g, b]

    def embedding_case(rng):
        table = Tensor(rng.standard_normal((7, 4)), requires_grad=True)
        ids = np.array([[0, 3, 3], [5, 1, 6]])
        return (lambda: (nn.embedding(table, ids) ** 2.0).sum()), [table]

    def softmax_case(rng):
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        c = Tensor(rng.standard_normal((3, 5)))
        return (lambda: (ad.softmax(x, axis=-1) * c).sum()), [x]

    def logsumexp_case(rng):
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        return (lambda: ad.logsumexp(x, axis=-1).sum()), [x]

    def softplus_case(rng):
        x = Tensor(rng.standard_normal((4, 4)) * 3.0, requires_grad=True)
        return (lambda: ad.softplus(x).sum()), [x]

    def elementwise_case(rng):
        x = Tensor(rng.standard_normal((3, 4)) + 3.0, requires_grad=True)
        y = Tensor(rng.standard_normal((3, 4)) + 3.0, requires_grad=True)
        return (lambda: (x * y + x / y - ad.log(x) + ad.exp(y * 0.3) + ad.sqrt(x)).sum()), [x, y]

    def index_case(rng):
        x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        return (lambda: (ad.index_select(x, 0, [0, 2, 2, 4]) ** 2.0).sum()), [x]

    LAYER_CASES.update({
        "conv2d": conv_case,
        "maxpool2d": pool_case,
        "linear": linear_case,
        "attention": attention_case,
        "layer_norm": layernorm_case,
        "embedding": embedding_case,
        "softmax": softmax_case,
        "logsumexp": logsumexp_case,
        "softplus": softplus_case,
        "elementwise": elementwise_case,
        "index_select": index_case,
    })


_register_layer_cases()


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        fn, tensors = LAYER_CASES[name](rng)
        worst = max(worst, max_rel_error(fn, tensors, rng))
    assert worst < FD_TOL, f"{name}: max relative error {worst:.3e}"


# --------------------------------------------------------------- optimizer


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = nn.OptimizerState([p], base_lr=1e-3, total_steps=10)
    p.grad = np.zeros(2)
    nn.adam_step(state)
    np.testing.assert_array_equal(p.data, np.array([1.0, -2.0]))


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.array([0.5]), requires_grad=True)
    state = nn.OptimizerState([p], base_lr=1e-2, total_steps=1000)
    p.grad = np.array([1.0])
    nn.adam_step(state)
    # bias-corrected moments cancel for a constant gradient
    np.testing.assert_allclose(0.5 - p.data[0], 1e-2 / (1.0 + 1e-8), rtol=1e-12)


def test_adam_three_steps_match_hand_recurrence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta = 2.0
    p = Tensor(np.array([theta]), requires_grad=True)
    state = nn.OptimizerState([p], base_lr=lr, total_steps=0)  # constant lr
    m = v = 0.0
    for t in range(1, 4):
        g = 2.0 * theta  # d/dx x^2
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

        p.grad = np.array([2.0 * p.data[0]])
        nn.adam_step(state)
        np.testing.assert_allclose(p.data[0], theta, rtol=1e-12)


def test_cosine_schedule_formula():
    base, total = 1e-4, 200
    state = nn.OptimizerState([Tensor(np.zeros(1), requires_grad=True)],
                              base_lr=base, total_steps=total)
    import math
    for t in range(total + 1):
        want = 0.5 * base * (1.0 + math.cos(math.pi * t / total))
        assert abs(nn.cosine_lr(t, total, base) - want) < 1e-12
    assert abs(state.current_lr() - base) < 1e-18


def test_adam_moment_shapes_match_params():
    rng = np.random.default_rng(0)
    ps = [Tensor(rng.standard_normal(s), requires_grad=True) for s in [(3, 4), (7,), (2, 2, 2)]]
    state = nn.OptimizerState(ps, base_lr=1e-3, total_steps=5)
    for p, m, v in zip(state.params, state.m, state.v):
        assert m.shape == p.data.shape and v.shape == p.data.shape
