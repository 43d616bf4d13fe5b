"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from mspg import tensor as T


def numeric_grads(f, arrays, h=1e-5):
    """d f / d arrays[i] by central differences; ``f`` maps numpy arrays to a float."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f(*arrays)
            a[idx] = old - h
            fm = f(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / scale)


def check(build, arrays, h=1e-5):
    """Compare autograd and finite differences for ``build(*tensors) -> scalar Tensor``.

    Returns the worst relative error over all inputs.
    """
    with T.precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        ts = [T.tensor(a, requires_grad=True) for a in arrays]
        build(*ts).backward()
        analytic = [t.grad for t in ts]

        def f(*arrs):
            with T.no_grad():
                return float(build(*[T.tensor(a) for a in arrs]).data)
        numeric = numeric_grads(f, arrays, h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def check_module(build, module, h=1e-5):
    """Finite-difference check over every parameter of ``module``; ``build()`` returns a scalar."""
    with T.precision(np.float64):
        params = module.parameters()
        for p in params:
            p.grad = None
        build().backward()
        worst = 0.0
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            num = np.zeros_like(p.data)
            it = np.nditer(p.data, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = p.data[idx]
                p.data[idx] = old + h
                with T.no_grad():
                    fp = float(build().data)
                p.data[idx] = old - h
                with T.no_grad():
                    fm = float(build().data)
                p.data[idx] = old
                num[idx] = (fp - fm) / (2 * h)
            worst = max(worst, rel_err(analytic, num))
    return worst
