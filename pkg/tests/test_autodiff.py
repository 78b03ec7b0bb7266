import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routedlm.autodiff import Tensor, concat, cosine_sim, gelu, log_softmax, softmax
from routedlm.gradcheck import grad_check
from routedlm.optim import Parameter

RNG = np.random.default_rng(0)


class TestSoftmax:
    def test_symmetric_pair(self):
        assert np.array_equal(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_log_odds(self):
        # closed form: exp(ln1)=1, exp(ln3)=3 -> [1/4, 3/4]
        out = softmax(np.log([1.0, 3.0]))
        assert np.allclose(out, [0.25, 0.75], atol=1e-15)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-50, 50))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, v, c):
        a = softmax(np.array(v))
        b = softmax(np.array(v) + c)
        assert np.allclose(a, b, atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
    @settings(max_examples=60, deadline=None)
    def test_sums_to_one(self, v):
        out = softmax(np.array(v))
        assert abs(out.sum() - 1.0) <= 1e-12
        assert np.all(out >= 0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax([1.0, np.nan])
        with pytest.raises(ValueError):
            softmax([np.inf, 0.0])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            softmax([])


class TestCosine:
    def test_identity(self):
        u = RNG.normal(size=6)
        assert abs(cosine_sim(u, u) - 1.0) <= 1e-12

    def test_orthogonal(self):
        assert cosine_sim([1.0, 0.0], [0.0, 2.0]) == 0.0

    def test_hand_value(self):
        # 24 / (5*5) = 0.96
        assert abs(cosine_sim([3.0, 4.0], [4.0, 3.0]) - 0.96) <= 1e-15

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            cosine_sim([0.0, 0.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            cosine_sim([1.0, 2.0], [0.0, 0.0])

    def test_bounded(self):
        for _ in range(20):
            a, b = RNG.normal(size=4), RNG.normal(size=4)
            assert -1.0 - 1e-12 <= cosine_sim(a, b) <= 1.0 + 1e-12


class TestTensorGradients:
    def test_arithmetic_chain(self):
        w = Parameter(RNG.normal(size=(3, 4)), "w")
        b = Parameter(RNG.normal(size=4), "b")
        x = RNG.normal(size=(5, 3))

        def loss():
            h = (Tensor(x) @ w + b).tanh()
            y = (h * h + h.exp() * 0.01) / (h * h + 2.0)
            return y.sum()

        assert grad_check(loss, [w, b]).passed

    def test_reshape_transpose_getitem(self):
        w = Parameter(RNG.normal(size=(4, 6)), "w")

        def loss():
            t = w.reshape(2, 2, 6).transpose(1, 0, 2)
            picked = t[(np.array([0, 1]), np.array([1, 0]), np.array([2, 3]))]
            return (picked * picked).sum() + t.mean()

        assert grad_check(loss, [w]).passed

    def test_concat_and_log(self):
        a = Parameter(np.abs(RNG.normal(size=(2, 3))) + 0.5, "a")
        b = Parameter(np.abs(RNG.normal(size=(2, 2))) + 0.5, "b")

        def loss():
            c = concat([a, b], axis=1)
            return (c.log() + c.sqrt()).sum()

        assert grad_check(loss, [a, b]).passed

    def test_batched_matmul_broadcast(self):
        w = Parameter(RNG.normal(size=(4, 5)), "w")
        x = RNG.normal(size=(3, 2, 4))

        def loss():
            return ((Tensor(x) @ w) ** 2.0).sum()

        assert grad_check(loss, [w]).passed

    def test_softmax_logsoftmax_gelu(self):
        w = Parameter(RNG.normal(size=(3, 5)), "w")

        def loss():
            s = softmax(gelu(w), axis=-1)
            return (s * s).sum() + log_softmax(w, axis=0).mean()

        assert grad_check(loss, [w]).passed

    def test_unbroadcast_add(self):
        a = Parameter(RNG.normal(size=(2, 3)), "a")
        b = Parameter(RNG.normal(size=(3,)), "b")
        out = a + b
        out.backward(np.ones((2, 3)))
        assert np.array_equal(a.grad, np.ones((2, 3)))
        assert np.array_equal(b.grad, np.full(3, 2.0))

    def test_determinism(self):
        x = RNG.normal(size=(64, 64))
        t = Tensor(x)
        r1 = ((t @ t).tanh() @ t).data
        r2 = ((t @ t).tanh() @ t).data
        assert np.array_equal(r1, r2)
