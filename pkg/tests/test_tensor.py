import math

import numpy as np
import pytest

import promptvision.tensor as T
from promptvision.optim import OptimizerState, adamw_step, clip_global_norm
from promptvision.tensor import Tape, Tensor, TensorError

from gradcheck import check_gradients, rand_tensor


def scalar(fn):
    """Wrap an op so the gradcheck loss is its L-shaped sum of squares."""
    def wrapped(*tensors):
        out = fn(*tensors)
        return T.sum_(T.mul(out, out))
    return wrapped


class TestForwardFixtures:
    def test_softmax_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(5, 7)))
        out = T.softmax(x, axis=-1)
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-12

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_matmul_identity(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 3))
        out = T.matmul(Tensor(np.eye(3)), Tensor(a))
        assert np.allclose(out.data, a, atol=0)

    def test_layer_norm_stats(self):
        out = T.layer_norm(Tensor([1.0, 2.0, 3.0]))
        assert abs(out.data.mean()) < 1e-12
        assert abs(out.data.var() - 1.0) < 1e-4  # eps shifts variance slightly
        out = T.layer_norm(Tensor([1.0, 2.0, 3.0]), eps=1e-12)
        assert abs(out.data.var() - 1.0) < 1e-9

    def test_cross_entropy_matches_log_softmax(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(4, 9))
        ids = rng.integers(0, 9, size=4)
        ce = T.cross_entropy_from_logits(Tensor(logits), ids)
        ref = -np.log(np.exp(logits) / np.exp(logits).sum(-1, keepdims=True))
        expect = ref[np.arange(4), ids]
        assert np.abs(ce.data - expect).max() < 1e-10

    def test_shape_mismatch_names_op(self):
        with pytest.raises(TensorError, match="matmul"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(TensorError, match="add"):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_nonfinite_input_rejected(self):
        with pytest.raises(TensorError, match="non-finite"):
            T.add(Tensor([1.0, np.nan]), Tensor([1.0, 1.0]))
        with pytest.raises(TensorError, match="non-finite"):
            T.matmul(Tensor([[np.inf]]), Tensor([[1.0]]))


class TestBackwardFixtures:
    def test_sum_of_squares(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(T.mul(x, x))
            tape.backward(loss)
        assert np.allclose(x.grad, [6.0])

    def test_sigmoid_slope_at_zero(self):
        w = Tensor(0.0, requires_grad=True)
        x = Tensor(1.0)
        with Tape() as tape:
            loss = T.sigmoid(T.mul(w, x))
            tape.backward(loss)
        assert abs(float(w.grad) - 0.25) < 1e-12

    def test_accumulation_across_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(T.add(T.mul(x, x), x))  # x^2 + x -> 2x + 1 = 5
            tape.backward(loss)
        assert np.allclose(x.grad, [5.0])

    def test_loss_must_be_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            with pytest.raises(TensorError, match="scalar"):
                tape.backward(y)

    def test_loss_off_tape_rejected(self):
        with pytest.raises(TensorError, match="tape"):
            T.backward(Tensor(1.0))

    def test_no_tape_means_no_recording(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.mul(x, x)
        assert y.tape is None and not y.requires_grad


def _attr_cases(rng):
    """(name, fn-of-tensors, tensor-shapes, kwargs) for every primitive."""
    i54 = rng.integers(0, 4, size=5)
    ids23 = rng.integers(0, 6, size=(2, 3))
    return [
        ("add", T.add, [(3, 4), (3, 4)], {}),
        ("add_broadcast", T.add, [(3, 4), (4,)], {}),
        ("sub", T.sub, [(3, 4), (3, 4)], {}),
        ("mul", T.mul, [(3, 4), (3, 4)], {}),
        ("mul_broadcast", T.mul, [(2, 3, 4), (1, 4)], {}),
        ("div", lambda a, b: T.div(a, T.add(T.mul(b, b), 0.5)), [(3, 4), (3, 4)], {}),
        ("neg", T.neg, [(5,)], {}),
        ("exp", T.exp, [(3, 3)], {}),
        ("log", lambda a: T.log(T.add(T.mul(a, a), 0.3)), [(3, 3)], {}),
        ("sqrt", lambda a: T.sqrt(T.add(T.mul(a, a), 0.3)), [(4,)], {}),
        ("abs", T.abs_, [(4, 4)], {}),
        ("maximum", T.maximum, [(4, 4), (4, 4)], {}),
        ("minimum", T.minimum, [(4, 4), (4, 4)], {}),
        ("sigmoid", T.sigmoid, [(3, 4)], {}),
        ("gelu", T.gelu, [(3, 4)], {}),
        ("relu", T.relu, [(3, 4)], {}),
        ("reshape", lambda a: T.reshape(a, (4, 3)), [(3, 4)], {}),
        ("transpose", lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)], {}),
        ("swap_last2", T.swap_last2, [(2, 3, 4)], {}),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], {}),
        ("concat3", lambda a, b, c: T.concat([a, b, c], axis=0), [(1, 3), (2, 3), (1, 3)], {}),
        ("slice", lambda a: T.slice_(a, (slice(1, 3), slice(None))), [(4, 5)], {}),
        ("embedding", lambda t: T.embedding_lookup(t, i54), [(4, 6)], {}),
        ("embedding_2d", lambda t: T.embedding_lookup(t, ids23), [(6, 5)], {}),
        ("sum_all", T.sum_, [(3, 4)], {}),
        ("sum_axis", lambda a: T.sum_(a, axis=1), [(3, 4)], {}),
        ("mean_all", T.mean, [(3, 4)], {}),
        ("mean_axis", lambda a: T.mean(a, axis=0), [(3, 4)], {}),
        ("matmul", T.matmul, [(3, 4), (4, 5)], {}),
        ("matmul_batched", T.matmul, [(2, 3, 4), (2, 4, 5)], {}),
        ("matmul_vec", T.matmul, [(3, 4), (4,)], {}),
        ("softmax", lambda a: T.softmax(a, axis=-1), [(3, 5)], {}),
        ("layer_norm", T.layer_norm, [(3, 6), (6,), (6,)], {}),
        ("ce", lambda lg: T.cross_entropy_from_logits(lg, i54), [(5, 4)], {}),
    ]


class TestFiniteDifferences:
    """Every primitive's analytic gradient against the central-difference oracle."""

    def test_primitives_random_tensors(self):
        rng = np.random.default_rng(7)
        cases = _attr_cases(rng)
        total = 0
        for name, fn, shapes, kwargs in cases:
            for rep in range(3):
                tensors = [rand_tensor(rng, *s) for s in shapes]
                check_gradients(scalar(fn), tensors, rtol=1e-4)
                total += 1
        assert total >= 100

    def test_conv2d(self):
        rng = np.random.default_rng(8)
        x = rand_tensor(rng, 2, 3, 6, 6)
        w = rand_tensor(rng, 4, 3, 3, 3)
        b = rand_tensor(rng, 4)
        check_gradients(scalar(lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1)), [x, w, b])

    def test_group_norm(self):
        rng = np.random.default_rng(9)
        x = rand_tensor(rng, 2, 4, 3, 3)
        g = rand_tensor(rng, 4)
        b = rand_tensor(rng, 4)
        check_gradients(scalar(lambda x, g, b: T.group_norm(x, 2, g, b)), [x, g, b])

    def test_bilinear_sample(self):
        rng = np.random.default_rng(10)
        fmap = rand_tensor(rng, 2, 3, 5, 5)
        # keep coords interior and off lattice points so the kink set is avoided
        xs = Tensor(rng.uniform(0.3, 3.6, size=(2, 4)), requires_grad=True)
        ys = Tensor(rng.uniform(0.3, 3.6, size=(2, 4)), requires_grad=True)
        check_gradients(scalar(T.bilinear_sample), [fmap, xs, ys])


class TestDeterminism:
    def test_bit_identical_forward_and_grads(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            with Tape() as tape:
                loss = T.sum_(T.gelu(T.matmul(x, w)))
                tape.backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


class TestAdamW:
    def test_zero_grad_zero_decay_is_noop(self):
        p = Tensor([1.5], requires_grad=True)
        p.grad = np.zeros(1)
        state = OptimizerState()
        adamw_step({"p": p}, state, lr=0.1)
        assert np.allclose(p.data, [1.5])

    def test_first_step_bias_corrected(self):
        p = Tensor([0.0], requires_grad=True)
        p.grad = np.ones(1)
        state = OptimizerState(betas=(0.9, 0.999), eps=1e-8)
        adamw_step({"p": p}, state, lr=0.1)
        # mhat = vhat = 1 on step one, so the update is -lr/(1+eps)
        assert abs(float(p.data) + 0.1) < 1e-8

    def test_decoupled_weight_decay(self):
        p = Tensor([2.0], requires_grad=True)
        p.grad = np.zeros(1)
        state = OptimizerState(weight_decay=0.01)
        adamw_step({"p": p}, state, lr=0.1)
        assert abs(float(p.data) - 2.0 * (1 - 0.001)) < 1e-12

    def test_missing_gradient_names_param(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(TensorError, match="vision.query"):
            adamw_step({"vision.query": p}, OptimizerState(), lr=0.1)

    def test_gradients_untouched(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([0.5])
        adamw_step({"p": p}, OptimizerState(), lr=0.01)
        assert np.allclose(p.grad, [0.5])


class TestClip:
    def test_below_threshold_unchanged(self):
        g = np.array([3.0, 4.0])
        assert clip_global_norm([g], 10.0) == 1.0
        assert np.allclose(g, [3.0, 4.0])

    def test_scales_to_max_norm(self):
        g = np.array([3.0, 4.0])
        factor = clip_global_norm([g], 1.0)
        assert abs(factor - 0.2) < 1e-12
        assert np.allclose(g, [0.6, 0.8])

    def test_exact_boundary_unchanged(self):
        g1, g2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert clip_global_norm([g1, g2], math.sqrt(2)) == 1.0
        assert np.allclose(g1, [1.0, 0.0]) and np.allclose(g2, [0.0, 1.0])

    def test_empty_set(self):
        assert clip_global_norm([], 1.0) == 1.0


def test_primitive_dispatcher():
    out = T.primitive_forward("softmax", Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])
    with pytest.raises(TensorError, match="unknown"):
        T.primitive_forward("fft", Tensor([0.0]))
