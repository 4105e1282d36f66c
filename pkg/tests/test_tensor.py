import math

import numpy as np
import pytest

from chainkd import tensor as T
from chainkd.tensor import (
    F64,
    GradTape,
    NonFiniteError,
    Tensor,
    TensorError,
    grad_check,
    value_and_grad,
)


def t64(values):
    return Tensor(values, dtype=F64)


class TestMatmul:
    def test_identity(self):
        a = t64([[1.0, 0.0], [0.0, 1.0]])
        b = t64([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_by_hand(self):
        # [[1,2]] x [[3],[4]] = [[1*3 + 2*4]] = [[11]]
        out = T.matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_zero_annihilates(self):
        z = t64(np.zeros((3, 4)))
        b = t64(np.arange(20, dtype=float).reshape(4, 5))
        assert np.all(T.matmul(z, b).data == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(TensorError):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_batched_backward_matches_fd(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(2, 3, 4)), dtype=F64)
        w = Tensor(rng.normal(size=(4, 5)), dtype=F64)

        def f(params):
            return T.matmul(params[0], params[1]).sum()

        assert grad_check(f, [a, w], samples_per_param=10) < 1e-9


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(t64([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=0)

    def test_closed_form(self):
        # softmax([ln 1, ln 3]) = (1, 3) / 4
        out = T.softmax(t64([math.log(1.0), math.log(3.0)]))
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_stability_under_shift(self):
        out = T.softmax(t64([1000.0, 0.0]))
        assert np.allclose(out.data, [1.0, 0.0], atol=1e-12)
        assert np.isfinite(out.data).all()

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = T.softmax(Tensor(rng.normal(size=(7, 11)), dtype=F64))
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 9))
        a = T.softmax(t64(x)).data
        b = T.softmax(t64(x + 13.25)).data
        assert np.allclose(a, b, atol=1e-6)


class TestLayerNorm:
    def test_constant_row_zeroed_by_eps(self):
        x = t64([[5.0, 5.0, 5.0]])
        out = T.layer_norm(x, t64([1.0, 1.0, 1.0]), t64([0.0, 0.0, 0.0]), eps=1e-5)
        assert np.allclose(out.data, 0.0)

    def test_closed_form(self):
        # mean 2, var 1 -> ([1,3]-2)/1 = [-1, 1]
        out = T.layer_norm(t64([1.0, 3.0]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=0.0)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-12)

    def test_beta_shift_identity(self):
        rng = np.random.default_rng(3)
        x = t64(rng.normal(size=(5, 8)))
        g = t64(rng.normal(size=8))
        beta = rng.normal(size=8)
        base = T.layer_norm(x, g, t64(np.zeros(8)), eps=1e-5).data
        shifted = T.layer_norm(x, g, t64(beta), eps=1e-5).data
        assert np.allclose(shifted, base + beta, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(TensorError):
            T.layer_norm(t64(np.ones((2, 4))), t64(np.ones(3)), t64(np.zeros(3)))


class TestGelu:
    def test_zero(self):
        assert T.gelu(t64(0.0)).item() == 0.0

    def test_asymptote(self):
        assert abs(T.gelu(t64(10.0)).item() - 10.0) < 1e-6

    def test_tanh_formula_at_one(self):
        u = math.sqrt(2.0 / math.pi) * (1.0 + 0.044715)
        expected = 0.5 * (1.0 + math.tanh(u))
        got = T.gelu(t64(1.0)).item()
        assert abs(got - expected) < 1e-12
        assert abs(got - 0.8412) < 5e-5


class TestValueAndGrad:
    def test_sum_gives_ones(self):
        p = t64(np.arange(6, dtype=float).reshape(2, 3))
        val, grads = value_and_grad(lambda ps: ps[0].sum(), [p])
        assert val == 15.0
        assert np.array_equal(grads[0].data, np.ones((2, 3)))

    def test_quadratic_gives_2p(self):
        p = t64([1.0, -2.0, 3.0])
        _, grads = value_and_grad(lambda ps: (ps[0] * ps[0]).sum(), [p])
        assert np.allclose(grads[0].data, 2.0 * p.data, atol=1e-12)

    def test_untouched_param_gets_zeros(self):
        p = t64([1.0])
        q = t64([2.0, 3.0])
        _, grads = value_and_grad(lambda ps: ps[0].sum(), [p, q])
        assert np.array_equal(grads[1].data, np.zeros(2))

    def test_nonscalar_rejected(self):
        p = t64([1.0, 2.0])
        with pytest.raises(TensorError):
            value_and_grad(lambda ps: ps[0] * 2.0, [p])


class TestGradCheck:
    def test_linear_is_exact(self):
        p = t64(np.linspace(-1, 1, 5))
        err = grad_check(lambda ps: (ps[0] * 3.0).sum(), [p])
        assert err < 1e-10

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(7)
        logits = Tensor(rng.normal(size=(4, 9)), dtype=F64)
        targets = rng.integers(0, 9, size=4)

        def f(ps):
            logp = T.log_softmax(ps[0])
            return -T.gather_last(logp, targets).mean()

        assert grad_check(f, [logits]) < 1e-6

    def test_requires_f64(self):
        p = Tensor([1.0, 2.0])  # f32
        with pytest.raises(TensorError):
            grad_check(lambda ps: ps[0].sum(), [p])


class TestTapeAndInvariants:
    def test_no_recording_without_tape(self):
        p = t64([1.0, 2.0])
        p.requires_grad = True
        out = (p * p).sum()
        assert out.grad is None and p.grad is None

    def test_non_trainable_gets_no_grad(self):
        p = t64([1.0, 2.0])
        c = t64([3.0, 4.0])
        p.requires_grad = True
        with GradTape() as tape:
            out = (p * c).sum()
        tape.backward(out)
        assert p.grad is not None
        assert c.grad is None

    def test_nonfinite_fails_fast_with_op_name(self):
        big = Tensor(np.full(4, 3e38), dtype=np.float32)
        with pytest.raises(NonFiniteError) as e:
            T.add(big, big)
        assert e.value.op == "add"

    def test_nan_construction_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([float("nan")])

    def test_immutable_payload(self):
        p = t64([1.0, 2.0])
        with pytest.raises(ValueError):
            p.data[0] = 9.0

    def test_deterministic_ops(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(6, 6)).astype(np.float32)
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x)).data
        assert a.tobytes() == b.tobytes()

    def test_layer_norm_and_gelu_grads(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(3, 6)), dtype=F64)
        g = Tensor(rng.normal(size=6), dtype=F64)
        b = Tensor(rng.normal(size=6), dtype=F64)

        def f(ps):
            return T.gelu(T.layer_norm(ps[0], ps[1], ps[2], eps=1e-5)).sum()

        assert grad_check(f, [x, g, b]) < 1e-5

    def test_embedding_grad_scatter(self):
        table = t64(np.arange(12, dtype=float).reshape(4, 3))
        ids = np.array([1, 1, 3])
        _, grads = value_and_grad(lambda ps: T.embedding(ps[0], ids).sum(), [table])
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        assert np.array_equal(grads[0].data, expected)
