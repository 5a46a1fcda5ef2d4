import numpy as np

from ampal import autodiff as ad


def numeric_grad(f, arrays, eps=1e-5):
    """Central finite differences of scalar ``f(*arrays)`` for each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + eps
            hi = f(*arrays)
            arr[i] = old - eps
            lo = f(*arrays)
            arr[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    """Max elementwise relative error, floored at 1e-6 of the gradient's scale."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    floor = max(1e-6 * float(np.max(np.abs(n), initial=0.0)), 1e-12)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


def check_grads(build, arrays, eps=1e-5):
    """Compare reverse-mode gradients of ``build(*tensors)`` against finite differences."""
    leaves = [ad.leaf(a) for a in arrays]
    out = build(*leaves)
    analytic = ad.backward(out, leaves)

    def f(*arrs):
        return float(build(*[ad.constant(a) for a in arrs]).data)

    numeric = numeric_grad(f, [a.copy() for a in arrays], eps)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))
