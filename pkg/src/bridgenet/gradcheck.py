"""Central finite-difference gradient checking."""
import numpy as np

from .autodiff import Tape, Tensor, backward, no_grad


def numerical_grad(fn, tensors, eps=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. each tensor's data, in place."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            with no_grad():
                up = float(fn().data)
            flat[k] = orig - eps
            with no_grad():
                down = float(fn().data)
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def analytic_grad(fn, tensors):
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(a, b, floor=1e-6):
    """``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps gradients that are zero in theory (a conv bias followed
    by batch norm, say) from turning finite-difference round-off into a
    large relative error.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, tensors, eps=1e-5):
    """Return the worst relative error between autodiff and finite differences.

    ``fn`` must rebuild the graph from ``tensors`` on every call and return a
    scalar :class:`Tensor`. Every tensor in ``tensors`` must have
    ``requires_grad`` set.
    """
    if not all(isinstance(t, Tensor) and t.requires_grad for t in tensors):
        raise ValueError("check_gradients needs leaf tensors with requires_grad=True")
    analytic = analytic_grad(fn, tensors)
    numeric = numerical_grad(fn, tensors, eps)
    # a tensor whose true gradient vanishes is judged on the scale of the
    # largest gradient in the graph, where finite-difference round-off lives
    floor = max(1e-6, 1e-6 * max(np.linalg.norm(n) for n in numeric))
    return max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))
