import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daa.autodiff import Tensor, backward, conv2d, parameter, sigmoid
from daa.autodiff import ops
from daa.grl import GrlNode, grl_forward


class TestForward:
    def test_identity(self):
        x = parameter([1.5, -2.0])
        np.testing.assert_array_equal(grl_forward(x, 0.05).data, [1.5, -2.0])

    def test_output_is_a_copy(self):
        x = parameter([1.0])
        y = grl_forward(x, 1.0)
        y.data[0] = 9.0
        assert x.data[0] == 1.0

    def test_negative_scale_rejected(self):
        with pytest.raises(ValueError):
            grl_forward(parameter([1.0]), -0.1)
        with pytest.raises(ValueError):
            GrlNode(-1.0)


class TestBackward:
    def test_hand_example(self):
        x = parameter([0.0, 0.0])
        backward((grl_forward(x, 0.05) * Tensor(np.array([1.0, -2.0]))).sum())
        np.testing.assert_allclose(x.grad, [-0.05, 0.1], atol=1e-15)

    def test_zero_scale_gives_exact_zero(self):
        x = parameter([3.0, -1.0])
        y = GrlNode(0.0)(x)
        backward((y * y).sum())
        assert np.all(x.grad == 0.0)

    @given(seed=st.integers(0, 2**16), lam=st.floats(0.0, 2.0))
    @settings(max_examples=40, deadline=None)
    def test_reverses_gradient_of_clone(self, seed, lam):
        """A feature extractor below the layer gets -lam times the gradient
        it would get from the same graph without the layer."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        w0 = rng.normal(size=(3, 2, 3, 3))
        head = Tensor(rng.normal(size=(3, 3, 3)))

        def grad_of(with_grl):
            w = parameter(w0.copy())
            z = conv2d(x, w, Tensor(np.zeros(3)))
            if with_grl:
                z = grl_forward(z, lam)
            backward(ops.sum(sigmoid(z) * head))
            return w.grad

        plain, reversed_ = grad_of(False), grad_of(True)
        np.testing.assert_allclose(reversed_, -lam * plain, atol=1e-10, rtol=0)
        if lam > 1e-6:
            mask = np.abs(plain) > 1e-12
            assert np.all(np.sign(reversed_[mask]) == -np.sign(plain[mask]))
