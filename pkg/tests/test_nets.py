import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mplab import nets
from mplab.nets import (
    AdamState,
    Grads,
    Head,
    Mlp,
    NonFiniteGradientError,
    ShapeError,
    adam_init,
    adam_step,
    backward,
    forward,
    forward_cached,
    forward_raw,
    gaussian_noise,
    gumbel_softmax,
    gumbel_softmax_grad,
    init_mlp,
    load_checkpoint,
    mlp_gradient,
    save_checkpoint,
    soft_update,
    softmax,
)


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def finite_difference_grads(net, x, upstream, h=1e-5):
    """Independent central-difference oracle for <upstream, forward(net, x)>."""

    def objective():
        return float(np.dot(upstream, forward(net, x)))

    dW, db = [], []
    for w in net.weights:
        g = np.zeros_like(w)
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = w[idx]
            w[idx] = orig + h
            up = objective()
            w[idx] = orig - h
            dn = objective()
            w[idx] = orig
            g[idx] = (up - dn) / (2 * h)
        dW.append(g)
    for b in net.biases:
        g = np.zeros_like(b)
        for i in range(b.size):
            orig = b[i]
            b[i] = orig + h
            up = objective()
            b[i] = orig - h
            dn = objective()
            b[i] = orig
            g[i] = (up - dn) / (2 * h)
        db.append(g)
    dx = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        up = objective()
        x[i] = orig - h
        dn = objective()
        x[i] = orig
        dx[i] = (up - dn) / (2 * h)
    return dW, db, dx


class TestForward:
    def test_zero_weights_returns_output_bias(self):
        rng = np.random.default_rng(0)
        net = init_mlp([3, 4, 2], rng)
        for w in net.weights:
            w[:] = 0.0
        net.biases[-1][:] = [0.7, -1.2]
        out = forward(net, np.array([5.0, -3.0, 2.0]))
        np.testing.assert_array_equal(out, [0.7, -1.2])

    def test_identity_single_layer(self):
        net = Mlp(dims=(2, 2), weights=[np.eye(2)], biases=[np.zeros(2)])
        out = forward(net, np.array([1.5, -2.0]))
        np.testing.assert_array_equal(out, [1.5, -2.0])

    def test_matches_independent_matrix_product_oracle(self):
        # Oracle: explicit per-layer loop written without the library helpers.
        rng = np.random.default_rng(42)
        net = init_mlp([5, 7, 3], rng)
        x = rng.normal(size=5)
        h = x.copy()
        h = np.maximum(net.weights[0].T @ h + net.biases[0], 0.0)
        expected = net.weights[1].T @ h + net.biases[1]
        got = forward(net, x)
        assert rel_err(got, expected) < 1e-12

    def test_batched_matches_per_row(self):
        rng = np.random.default_rng(3)
        net = init_mlp([4, 8, 2], rng, head=Head("tanh"))
        xs = rng.normal(size=(6, 4))
        batched = forward(net, xs)
        rows = np.stack([forward(net, x) for x in xs])
        np.testing.assert_allclose(batched, rows, rtol=0, atol=1e-14)

    def test_dimension_mismatch_reports_shapes(self):
        rng = np.random.default_rng(1)
        net = init_mlp([3, 2], rng)
        with pytest.raises(ShapeError, match="length 4"):
            forward(net, np.zeros(4))

    def test_per_slice_head(self):
        rng = np.random.default_rng(7)
        net = init_mlp([3, 5], rng,
                       head=Head("per_slice", (("tanh", 2), ("softmax", 3))))
        x = rng.normal(size=3)
        raw = forward_raw(net, x)
        y = forward(net, x)
        np.testing.assert_allclose(y[:2], np.tanh(raw[:2]))
        np.testing.assert_allclose(y[2:], softmax(raw[2:]))
        assert y[2:].sum() == pytest.approx(1.0, abs=1e-12)


class TestGradient:
    def test_scalar_chain_rule(self):
        net = Mlp(dims=(1, 1), weights=[np.array([[2.0]])], biases=[np.zeros(1)])
        grads, dx = mlp_gradient(net, np.array([3.0]), np.array([1.0]))
        assert grads.dW[0][0, 0] == 3.0
        assert dx[0] == 2.0

    def test_zero_upstream_gives_zero_gradients(self):
        rng = np.random.default_rng(5)
        net = init_mlp([4, 6, 3], rng)
        grads, dx = mlp_gradient(net, rng.normal(size=4), np.zeros(3))
        assert grads.max_abs() == 0.0
        np.testing.assert_array_equal(dx, np.zeros(4))

    @pytest.mark.parametrize("seed,dims,hidden,head", [
        (0, [3, 8, 2], "relu", Head("linear")),
        (1, [5, 6, 6, 4], "tanh", Head("tanh")),
        (2, [4, 10, 5], "relu", Head("per_slice", (("tanh", 2), ("softmax", 3)))),
        (3, [2, 3], "relu", Head("linear")),
    ])
    def test_matches_finite_differences(self, seed, dims, hidden, head):
        rng = np.random.default_rng(seed)
        net = init_mlp(dims, rng, hidden=hidden, head=head)
        x = rng.normal(size=dims[0])
        upstream = rng.normal(size=dims[-1])
        grads, dx = mlp_gradient(net, x, upstream)
        fdW, fdb, fdx = finite_difference_grads(net, x, upstream)
        for l in range(len(net.weights)):
            assert rel_err(grads.dW[l], fdW[l]) < 1e-4
            assert rel_err(grads.db[l], fdb[l]) < 1e-4
        assert rel_err(dx, fdx) < 1e-4

    def test_batched_param_grads_sum_over_rows(self):
        rng = np.random.default_rng(8)
        net = init_mlp([3, 5, 2], rng)
        xs = rng.normal(size=(4, 3))
        ups = rng.normal(size=(4, 2))
        grads, dxs = mlp_gradient(net, xs, ups)
        acc = [np.zeros_like(w) for w in net.weights]
        for x, u in zip(xs, ups):
            g, dx = mlp_gradient(net, x, u)
            for l in range(len(acc)):
                acc[l] += g.dW[l]
        for l in range(len(acc)):
            assert rel_err(grads.dW[l], acc[l]) < 1e-12
        assert dxs.shape == (4, 3)


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        net = Mlp(dims=(1, 1), weights=[np.array([[1.0]])], biases=[np.zeros(1)])
        state = adam_init(net, lr=0.01)
        grads = Grads(dW=[np.array([[2.0]])], db=[np.zeros(1)])
        adam_step(net, grads, state)
        assert net.weights[0][0, 0] == pytest.approx(1.0 - 0.01, abs=1e-9)
        assert state.step_count == 1

    def test_zero_gradients_leave_params_unchanged(self):
        rng = np.random.default_rng(0)
        net = init_mlp([3, 4, 2], rng)
        before = [w.copy() for w in net.weights]
        state = adam_init(net, lr=0.01)
        zeros = Grads(dW=[np.zeros_like(w) for w in net.weights],
                      db=[np.zeros_like(b) for b in net.biases])
        adam_step(net, zeros, state)
        for w, w0 in zip(net.weights, before):
            np.testing.assert_array_equal(w, w0)

    def test_three_steps_match_hand_recurrence(self):
        # Minimize f(w) = w^2 from w = 1; the oracle below runs the textbook
        # scalar recurrence independently of the library implementation.
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        w_ref, m, v = 1.0, 0.0, 0.0
        trace = []
        for t in range(1, 4):
            g = 2.0 * w_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            w_ref -= lr * mhat / (np.sqrt(vhat) + eps)
            trace.append(w_ref)

        net = Mlp(dims=(1, 1), weights=[np.array([[1.0]])], biases=[np.zeros(1)])
        state = adam_init(net, lr=lr, beta1=b1, beta2=b2, eps=eps)
        got = []
        for _ in range(3):
            g = 2.0 * net.weights[0][0, 0]
            adam_step(net, Grads(dW=[np.array([[g]])], db=[np.zeros(1)]), state)
            got.append(net.weights[0][0, 0])
        np.testing.assert_allclose(got, trace, rtol=1e-12)

    def test_nonfinite_gradient_rejected_and_params_untouched(self):
        rng = np.random.default_rng(1)
        net = init_mlp([2, 3, 1], rng)
        before = [w.copy() for w in net.weights]
        state = adam_init(net, lr=0.01)
        bad = Grads(dW=[np.zeros_like(w) for w in net.weights],
                    db=[np.zeros_like(b) for b in net.biases])
        bad.dW[1][0, 0] = np.nan
        with pytest.raises(NonFiniteGradientError, match="layer 1"):
            adam_step(net, bad, state)
        for w, w0 in zip(net.weights, before):
            np.testing.assert_array_equal(w, w0)
        assert state.step_count == 0

    def test_gradient_scale_leaves_step_sign_unchanged(self):
        # Per-coordinate sign of the first bias-corrected step is invariant to
        # a positive rescale of the gradient (epsilon-dominated entries aside).
        rng = np.random.default_rng(9)
        net_a = init_mlp([4, 6, 3], rng)
        net_b = net_a.copy()
        g = [rng.normal(size=w.shape) for w in net_a.weights]
        gb = [np.zeros_like(b) for b in net_a.biases]
        grads_a = Grads(dW=[x.copy() for x in g], db=[x.copy() for x in gb])
        grads_b = Grads(dW=[100.0 * x for x in g], db=[x.copy() for x in gb])
        init = net_a.copy()
        sa = adam_init(net_a, lr=0.01)
        sb = adam_init(net_b, lr=0.01)
        adam_step(net_a, grads_a, sa)
        adam_step(net_b, grads_b, sb)
        for l, gw in enumerate(g):
            mask = np.abs(gw) > 1e-6
            step_a = net_a.weights[l] - init.weights[l]
            step_b = net_b.weights[l] - init.weights[l]
            np.testing.assert_array_equal(np.sign(step_a[mask]),
                                          np.sign(step_b[mask]))


class TestSoftUpdate:
    def test_tau_one_copies_online(self):
        rng = np.random.default_rng(0)
        online = init_mlp([3, 4, 2], rng)
        target = init_mlp([3, 4, 2], rng)
        soft_update(target, online, tau=1.0)
        for tw, ow in zip(target.weights, online.weights):
            np.testing.assert_array_equal(tw, ow)

    def test_tau_zero_leaves_target(self):
        rng = np.random.default_rng(1)
        online = init_mlp([3, 4, 2], rng)
        target = init_mlp([3, 4, 2], rng)
        before = [w.copy() for w in target.weights]
        soft_update(target, online, tau=0.0)
        for tw, w0 in zip(target.weights, before):
            np.testing.assert_array_equal(tw, w0)

    def test_direct_arithmetic(self):
        online = Mlp(dims=(1, 1), weights=[np.array([[1.0]])], biases=[np.ones(1)])
        target = Mlp(dims=(1, 1), weights=[np.array([[0.0]])], biases=[np.zeros(1)])
        soft_update(target, online, tau=0.01)
        assert target.weights[0][0, 0] == pytest.approx(0.01, abs=1e-15)

    def test_geometric_contraction(self):
        # With frozen online parameters the gap shrinks by exactly (1 - tau)
        # per application.
        rng = np.random.default_rng(2)
        online = init_mlp([4, 5, 3], rng)
        target = init_mlp([4, 5, 3], rng)
        tau = 0.01
        gap0 = np.sqrt(sum(float(np.sum((t - o) ** 2)) for t, o in
                           zip(target.weights, online.weights)))
        k = 50
        for _ in range(k):
            soft_update(target, online, tau)
        gap = np.sqrt(sum(float(np.sum((t - o) ** 2)) for t, o in
                          zip(target.weights, online.weights)))
        assert gap == pytest.approx((1 - tau) ** k * gap0, rel=1e-10)

    def test_tau_out_of_range_rejected(self):
        rng = np.random.default_rng(3)
        net = init_mlp([2, 2], rng)
        with pytest.raises(ValueError):
            soft_update(net.copy(), net, tau=1.5)


class TestGumbelSoftmax:
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=8),
           st.floats(0.1, 5.0), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_sample_is_on_simplex(self, logits, temperature, seed):
        rng = np.random.default_rng(seed)
        y = gumbel_softmax(np.array(logits), temperature, rng)
        assert np.all(y >= 0)
        assert abs(float(y.sum()) - 1.0) < 1e-9

    def test_symmetric_logits_balanced_in_expectation(self):
        rng = np.random.default_rng(11)
        ys = gumbel_softmax(np.zeros((20000, 2)), temperature=50.0, rng=rng)
        assert abs(float(ys[:, 0].mean()) - 0.5) < 0.01

    def test_argmax_frequency_matches_softmax_of_logits(self):
        # Gumbel-max: the arg-max of perturbed logits is categorical with
        # probabilities softmax(logits), independent of temperature.
        rng = np.random.default_rng(123)
        logits = np.array([np.log(3.0), 0.0])
        n = 100_000
        ys = gumbel_softmax(np.tile(logits, (n, 1)), temperature=0.5, rng=rng)
        freq0 = float(np.mean(np.argmax(ys, axis=1) == 0))
        assert abs(freq0 - 0.75) < 0.01

    def test_marginal_within_three_binomial_stderr(self):
        rng = np.random.default_rng(77)
        logits = np.array([0.3, -1.0, 1.2, 0.0])
        p = softmax(logits)
        n = 100_000
        ys = gumbel_softmax(np.tile(logits, (n, 1)), temperature=1.0, rng=rng)
        counts = np.bincount(np.argmax(ys, axis=1), minlength=4)
        for k in range(4):
            se = np.sqrt(p[k] * (1 - p[k]) / n)
            assert abs(counts[k] / n - p[k]) < 3 * se

    def test_hard_mode_returns_one_hot(self):
        rng = np.random.default_rng(5)
        y = gumbel_softmax(np.array([1.0, 2.0, 3.0]), 1.0, rng, hard=True)
        assert sorted(y.tolist()) == [0.0, 0.0, 1.0]

    def test_gradient_matches_finite_differences(self):
        # Freeze the Gumbel draw, then check d<u, y>/dlogits numerically.
        logits = np.array([0.5, -0.3, 0.8])
        u = np.array([1.0, -2.0, 0.5])
        g = np.array([0.1, 1.3, -0.4])  # fixed perturbation
        T = 0.7

        def y_of(lg):
            return softmax((lg + g) / T)

        sample = y_of(logits)
        ad = gumbel_softmax_grad(sample, u, T)
        h = 1e-6
        fd = np.zeros(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd[i] = (np.dot(u, y_of(logits + e)) - np.dot(u, y_of(logits - e))) / (2 * h)
        assert rel_err(ad, fd) < 1e-6

    def test_invalid_temperature(self):
        with pytest.raises(ValueError):
            gumbel_softmax(np.zeros(2), 0.0, np.random.default_rng(0))


class TestGaussianNoise:
    def test_sigma_zero_is_exact_zero(self):
        out = gaussian_noise(4, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_dim(self):
        assert gaussian_noise(3, 1.0, np.random.default_rng(0)).shape == (3,)

    def test_moments_over_many_draws(self):
        rng = np.random.default_rng(99)
        xs = gaussian_noise(1_000_000, 1.0, rng)
        assert abs(float(xs.mean())) < 0.01
        assert abs(float(xs.std()) - 1.0) < 0.01

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            gaussian_noise(2, -0.1, np.random.default_rng(0))


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            net = init_mlp([4, 8, 3], rng)
            x = rng.normal(size=4)
            y = forward(net, x)
            s = gumbel_softmax(np.array([0.1, 0.2, 0.3]), 1.0, rng)
            n = gaussian_noise(5, 0.3, rng)
            grads, _ = mlp_gradient(net, x, np.ones(3))
            state = adam_init(net, lr=0.01)
            adam_step(net, grads, state)
            return y, s, n, net.weights[0]

        a = run(1234)
        b = run(1234)
        for xa, xb in zip(a, b):
            np.testing.assert_array_equal(xa, xb)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        net = init_mlp([3, 6, 4], rng, hidden="tanh",
                       head=Head("per_slice", (("tanh", 2), ("softmax", 2))))
        opt = adam_init(net, lr=0.01)
        grads, _ = mlp_gradient(net, rng.normal(size=3), rng.normal(size=4))
        adam_step(net, grads, opt)
        path = save_checkpoint(str(tmp_path / "ckpt"), {"actor": net},
                               {"actor": opt}, extra={"episode": 7})
        nets2, opts2, extra = load_checkpoint(path)
        got = nets2["actor"]
        assert got.dims == net.dims
        assert got.hidden == net.hidden
        assert got.head == net.head
        for a, b in zip(got.weights, net.weights):
            np.testing.assert_array_equal(a, b)
        o2 = opts2["actor"]
        assert o2.step_count == 1
        for a, b in zip(o2.mW, opt.mW):
            np.testing.assert_array_equal(a, b)
        assert extra == {"episode": 7}

    def test_wrong_format_rejected(self, tmp_path):
        import json

        path = tmp_path / "bad.npz"
        np.savez(path, meta=np.asarray(json.dumps({"format": "other-v9"})))
        with pytest.raises(ValueError, match="mplab-ckpt-v1"):
            load_checkpoint(str(path))
