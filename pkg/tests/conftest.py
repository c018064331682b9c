import numpy as np
import pytest

from erde.tensor import Tape


def finite_difference_check(build_loss, leaves, h=1e-5, tol=1e-4):
    """Compare analytic gradients of a scalar loss against central differences.

    `build_loss` must be a deterministic zero-argument callable returning a
    scalar Tensor built from the `leaves` (all float64, requires_grad=True).
    """
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = []
    for leaf in leaves:
        assert leaf.grad is not None, "leaf received no gradient"
        assert leaf.grad.shape == leaf.data.shape
        analytic.append(leaf.grad.copy())

    def value():
        return build_loss().item()

    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = value()
            flat[i] = original - h
            f_minus = value()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(flat_grad[i] - numeric)
            scale = max(1.0, abs(flat_grad[i]), abs(numeric))
            worst = max(worst, err / scale)
            assert err <= tol * scale, (
                f"gradient mismatch at element {i}: analytic {flat_grad[i]:.8g} "
                f"vs numeric {numeric:.8g}")
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
