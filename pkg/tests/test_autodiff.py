import math

import numpy as np
import pytest

from boxref import autodiff as ad
from boxref.autodiff import (
    OptState,
    ParamStore,
    ShapeError,
    Tensor,
    adam_step,
    finite_difference_check,
    parameter,
    tensor,
)


def fd_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f w.r.t. ndarray x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def check_op_grad(op, shapes, rng, n_trials=5, transform=None):
    """Compare backward() against finite differences for one primitive."""
    for _ in range(n_trials):
        params = []
        for s in shapes:
            x = rng.standard_normal(s)
            if transform is not None:
                x = transform(x)
            params.append(parameter(x))

        def loss():
            out = op(*params)
            # weight the output so the gradient is not trivially uniform
            w = np.cos(np.arange(out.data.size)).reshape(out.data.shape)
            return (out * tensor(w)).sum()

        err = finite_difference_check(loss, params, eps=1e-6)
        assert err < 1e-4, f"{op}: fd mismatch {err}"


class TestForward:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        out = ad.matmul(tensor(np.eye(3)), tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_softmax_symmetry(self):
        out = ad.softmax(tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)

    def test_sigmoid_values(self):
        out = ad.sigmoid(tensor([0.0, 2.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.8807970779778823], rtol=1e-12)

    def test_sigmoid_extreme_inputs_stable(self):
        out = ad.sigmoid(tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((20, 7)) * 5
        s = ad.softmax(tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(20), rtol=0, atol=1e-12)
        assert np.all(s > 0) and np.all(s < 1)

    def test_softmax_extreme_logits_still_normalized(self):
        s = ad.softmax(tensor([[1000.0, 0.0, -1000.0]])).data
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s.sum(axis=-1), [1.0], rtol=0, atol=1e-12)

    def test_layer_norm_moments(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((50, 32)) * 5 + 3
        y = ad.layer_norm(tensor(x)).data
        assert np.max(np.abs(y.mean(axis=-1))) < 1e-10
        assert np.max(np.abs(y.var(axis=-1) - 1.0)) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ad.add(tensor(np.zeros((2, 3))), tensor(np.zeros((4, 5))))
        with pytest.raises(ShapeError):
            ad.matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((4, 5))))

    def test_nonfinite_rejected(self):
        with pytest.raises(ad.NumericError):
            tensor([1.0, np.nan])
        with pytest.raises(ad.NumericError):
            tensor([np.inf])

    def test_apply_dispatch(self):
        out = ad.apply("add", tensor([1.0]), tensor([2.0]))
        assert out.item() == 3.0
        with pytest.raises(ValueError):
            ad.apply("no_such_op", tensor([1.0]))


class TestBackward:
    def test_product_rule(self):
        x = parameter(3.0)
        y = parameter(5.0)
        (x * y).backward()
        assert x.grad == 5.0 and y.grad == 3.0

    def test_softmax_sum_is_constant(self):
        v = parameter(np.array([0.3, -1.2, 2.0]))
        ad.softmax(v).sum().backward()
        np.testing.assert_allclose(v.grad, np.zeros(3), atol=1e-15)

    def test_nonscalar_root_rejected(self):
        v = parameter(np.zeros(3))
        with pytest.raises(ShapeError):
            (v * 2.0).backward()

    def test_fanout_accumulates(self):
        rng = np.random.default_rng(3)
        x = parameter(rng.standard_normal(6))

        def loss():
            y = ad.sigmoid(x)
            return (y * y).sum() + (y * x).sum()  # x used on two paths

        err = finite_difference_check(loss, [x], eps=1e-6)
        assert err < 1e-4

    def test_untouched_param_zero_grad(self):
        store = ParamStore()
        a = store.add("a", np.ones(3))
        store.add("b", np.ones(3))
        (a.sum() * 2.0).backward()
        grads = store.grad_arrays()
        np.testing.assert_array_equal(grads["b"], np.zeros(3))
        np.testing.assert_array_equal(grads["a"], 2 * np.ones(3))

    def test_mlp_loss_matches_fd(self):
        rng = np.random.default_rng(4)
        w = parameter(rng.standard_normal((4, 4)))
        x = tensor(rng.standard_normal((4,)))
        t = tensor(rng.standard_normal((4,)))

        def loss():
            d = ad.sigmoid(ad.matmul(w, x)) - t
            return (d * d).mean()

        err = finite_difference_check(loss, [w], eps=1e-6)
        assert err < 1e-4


class TestPrimitiveGradients:
    """FD sweep over every smooth primitive, random inputs."""

    def test_elementwise_binary(self):
        rng = np.random.default_rng(5)
        for op in (ad.add, ad.sub, ad.mul):
            check_op_grad(op, [(3, 4), (3, 4)], rng)
        check_op_grad(ad.div, [(3, 4), (3, 4)], rng,
                      transform=lambda x: np.sign(x) * (np.abs(x) + 0.5))

    def test_broadcasting(self):
        rng = np.random.default_rng(6)
        check_op_grad(ad.add, [(2, 3, 4), (4,)], rng)
        check_op_grad(ad.mul, [(2, 3, 4), (3, 4)], rng)
        check_op_grad(ad.mul, [(5, 1, 4), (1, 3, 1)], rng)

    def test_unary(self):
        rng = np.random.default_rng(7)
        for op in (ad.neg, ad.relu, ad.sigmoid, ad.tanh, ad.sin, ad.cos, ad.exp):
            check_op_grad(op, [(4, 5)], rng)
        check_op_grad(ad.log, [(4, 5)], rng, transform=lambda x: np.abs(x) + 0.5)
        check_op_grad(ad.absolute, [(4, 5)], rng,
                      transform=lambda x: np.sign(x) * (np.abs(x) + 0.3))

    def test_minmax(self):
        rng = np.random.default_rng(8)
        check_op_grad(ad.maximum, [(4, 5), (4, 5)], rng)
        check_op_grad(ad.minimum, [(4, 5), (4, 5)], rng)

    def test_matmul_variants(self):
        rng = np.random.default_rng(9)
        check_op_grad(ad.matmul, [(3, 4), (4, 5)], rng)
        check_op_grad(ad.matmul, [(2, 3, 4), (2, 4, 5)], rng)
        check_op_grad(ad.matmul, [(2, 3, 4), (4, 5)], rng)
        check_op_grad(ad.matmul, [(4,), (4, 5)], rng)
        check_op_grad(ad.matmul, [(3, 4), (4,)], rng)

    def test_structural(self):
        rng = np.random.default_rng(10)
        check_op_grad(lambda a: ad.reshape(a, (6, 2)), [(3, 4)], rng)
        check_op_grad(lambda a: ad.transpose(a, (1, 0, 2)), [(2, 3, 4)], rng)
        check_op_grad(lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)], rng)
        check_op_grad(lambda a: a[1:3, ::2], [(4, 6)], rng)
        check_op_grad(lambda a: ad.take_rows(a, [0, 2, 2, 1]), [(4, 3)], rng)
        check_op_grad(lambda a: ad.diag_block_select(a, 3), [(2, 3, 6)], rng)

    def test_reductions(self):
        rng = np.random.default_rng(11)
        check_op_grad(lambda a: a.sum(), [(3, 4)], rng)
        check_op_grad(lambda a: a.sum(axis=1), [(3, 4)], rng)
        check_op_grad(lambda a: a.mean(axis=0, keepdims=True), [(3, 4)], rng)
        check_op_grad(lambda a: a.mean(), [(2, 3, 4)], rng)

    def test_fused(self):
        rng = np.random.default_rng(12)
        check_op_grad(ad.softmax, [(3, 6)], rng)
        check_op_grad(ad.layer_norm, [(3, 8)], rng)
        check_op_grad(lambda a: ad.logit_clamped(a, 1e-3), [(3, 4)], rng,
                      transform=lambda x: 0.5 + 0.4 * np.tanh(x))
        check_op_grad(ad.affine, [(3, 4), (4, 5), (5,)], rng)
        check_op_grad(lambda a, g, b: ad.layer_norm_affine(a, g, b), [(3, 8), (8,), (8,)], rng)
        freqs = np.array([1.0, 2.5, 7.0])
        check_op_grad(lambda t: ad.sinusoid_pairs(t, freqs), [(4, 3)], rng)

    def test_fused_match_composed(self):
        rng = np.random.default_rng(17)
        x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
        np.testing.assert_array_equal(ad.affine(tensor(x), tensor(w), tensor(b)).data, x @ w + b)
        g, be = rng.standard_normal(6), rng.standard_normal(6)
        y = rng.standard_normal((2, 6))
        fused = ad.layer_norm_affine(tensor(y), tensor(g), tensor(be)).data
        composed = ad.layer_norm(tensor(y)).data * g + be
        np.testing.assert_allclose(fused, composed, rtol=0, atol=1e-15)
        freqs = np.array([1.0, 3.0])
        t = rng.standard_normal(5)
        sp = ad.sinusoid_pairs(tensor(t), freqs).data
        np.testing.assert_array_equal(sp[:, 0], np.sin(t * 1.0))
        np.testing.assert_array_equal(sp[:, 1], np.cos(t * 1.0))
        np.testing.assert_array_equal(sp[:, 2], np.sin(t * 3.0))

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(13)
        logits = parameter(rng.standard_normal((5, 4)))
        targets = rng.integers(0, 4, size=5)
        weights = rng.uniform(0.1, 1.0, size=5)

        def loss():
            return ad.softmax_cross_entropy(logits, targets, weights)

        err = finite_difference_check(loss, [logits], eps=1e-6)
        assert err < 1e-4

    def test_random_smooth_sweep(self):
        # broad randomized sweep: 100 random inputs across the smooth set
        rng = np.random.default_rng(14)
        ops = [ad.sigmoid, ad.tanh, ad.sin, ad.cos, ad.softmax, ad.layer_norm]
        for k in range(100):
            op = ops[k % len(ops)]
            x = parameter(rng.standard_normal((2, 6)))

            def loss():
                w = tensor(np.sin(np.arange(12)).reshape(2, 6))
                return (op(x) * w).sum()

            assert finite_difference_check(loss, [x], eps=1e-6) < 1e-4


class TestFiniteDifferenceCheck:
    def test_linear_loss_near_exact(self):
        rng = np.random.default_rng(15)
        w = parameter(rng.standard_normal(6))
        x = tensor(rng.standard_normal(6))
        err = finite_difference_check(lambda: (w * x).sum(), [w], eps=1e-6)
        assert err < 1e-9

    def test_zero_eps_rejected(self):
        w = parameter(np.ones(2))
        with pytest.raises(ValueError):
            finite_difference_check(lambda: w.sum(), [w], eps=0.0)

    def test_nondeterministic_loss_reported(self):
        w = parameter(np.ones(2))
        state = {"n": 0}

        def loss():
            state["n"] += 1
            return w.sum() * float(state["n"])

        with pytest.raises(RuntimeError):
            finite_difference_check(loss, [w], eps=1e-6)


class TestAdam:
    def test_zero_grad_no_motion(self):
        store = ParamStore()
        store.add("p", np.array([1.0, -2.0]))
        state = OptState(lr=0.1)
        adam_step(dict(store.items()), {"p": np.zeros(2)}, state)
        np.testing.assert_array_equal(store["p"].data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_matches_hand_computation(self):
        # t=1: m_hat = g, v_hat = g^2 -> step = lr * g/(|g|+eps) = lr
        store = ParamStore()
        store.add("p", np.array([1.0]))
        state = OptState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        adam_step(dict(store.items()), {"p": np.array([1.0])}, state)
        np.testing.assert_allclose(store["p"].data, [1.0 - 0.1 / (1 + 1e-8)], rtol=1e-12)

    def test_locality(self):
        store = ParamStore()
        store.add("a", np.array([1.0]))
        store.add("b", np.array([1.0]))
        state = OptState(lr=0.1)
        adam_step(dict(store.items()), {"a": np.array([1.0]), "b": np.array([0.0])}, state)
        assert store["a"].data[0] != 1.0
        assert store["b"].data[0] == 1.0

    def test_shape_mismatch_rejected(self):
        store = ParamStore()
        store.add("p", np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            adam_step(dict(store.items()), {"p": np.zeros(3)}, OptState())

    def test_converges_on_quadratic(self):
        store = ParamStore()
        p = store.add("p", np.array([5.0, -3.0]))
        state = OptState(lr=0.05)
        for _ in range(2000):
            store.zero_grads()
            (p * p).sum().backward()
            adam_step(dict(store.items()), store.grad_arrays(), state)
        assert np.max(np.abs(p.data)) < 1e-3


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("x", np.zeros(1))
        with pytest.raises(ValueError):
            store.add("x", np.zeros(1))

    def test_state_dict_roundtrip(self):
        rng = np.random.default_rng(16)
        store = ParamStore()
        store.add("a", rng.standard_normal((2, 3)))
        store.add("b", rng.standard_normal(4))
        snap = store.state_dict()
        store["a"].data[:] = 0.0
        store.load_state_dict(snap)
        np.testing.assert_array_equal(store["a"].data, snap["a"])

    def test_load_name_mismatch(self):
        store = ParamStore()
        store.add("a", np.zeros(2))
        with pytest.raises(ValueError):
            store.load_state_dict({"zzz": np.zeros(2)})
