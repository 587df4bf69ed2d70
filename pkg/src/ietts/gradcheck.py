"""Finite-difference gradient checks for every registered autodiff op.

Each check builds a small random problem, reduces the op's output to a
scalar through a fixed random projection, and compares the analytic
gradient against central differences. Used by both the test suite and the
``oracle-check`` CLI command.
"""

import numpy as np

from . import autodiff as ad


def _away_from_zero(x, eps=0.05):
    return x + np.sign(x) * eps + (x == 0) * eps


def _projected(op, shapes, rng, transform=None, positive=False):
    """Build (theta0, f) for an op taking len(shapes) array inputs."""
    sizes = [int(np.prod(s)) for s in shapes]
    theta0 = rng.standard_normal(sum(sizes))
    if positive:
        theta0 = np.abs(theta0) + 0.1
    elif transform is not None:
        theta0 = transform(theta0)
    out_probe = None

    def f(theta):
        args = []
        off = 0
        for s, n in zip(shapes, sizes):
            args.append(ad.reshape(theta[off:off + n], s))
            off += n
        y = op(*args)
        nonlocal out_probe
        if out_probe is None:
            out_probe = rng.standard_normal(y.shape)
        return ad.nsum(y * out_probe)
    return theta0, f


def registered_op_checks():
    """name -> callable(rng) returning max relative FD error for one trial."""

    def check(op, shapes, **kw):
        def run(rng):
            theta0, f = _projected(op, shapes, rng, **kw)
            return ad.finite_difference_check(f, theta0, h=1e-5)
        return run

    two = [(2, 3), (2, 3)]
    return {
        "add": check(ad.add, two),
        "sub": check(ad.sub, two),
        "mul": check(ad.mul, two),
        "div": check(ad.div, two, transform=_away_from_zero),
        "neg": check(ad.neg, [(2, 3)]),
        "exp": check(ad.exp, [(2, 3)]),
        "log": check(ad.log, [(2, 3)], positive=True),
        "tanh": check(ad.tanh, [(2, 3)]),
        "sigmoid": check(ad.sigmoid, [(2, 3)]),
        "relu": check(ad.relu, [(2, 3)], transform=_away_from_zero),
        "softplus": check(ad.softplus, [(2, 3)]),
        "square": check(ad.square, [(2, 3)]),
        "matmul": check(ad.matmul, [(2, 3), (3, 2)]),
        "matmul_batched": check(ad.matmul, [(2, 2, 3), (3, 2)]),
        "broadcast_add": check(ad.add, [(2, 3), (1, 3)]),
        "broadcast_mul": check(ad.mul, [(2, 1), (2, 3)]),
        "reshape": check(lambda a: ad.reshape(a, (3, 2)), [(2, 3)]),
        "transpose": check(lambda a: ad.transpose(a, (1, 0)), [(2, 3)]),
        "concat": check(lambda a, b: ad.concat([a, b], axis=1), two),
        "slice": check(lambda a: a[:, 1:3], [(2, 4)]),
        "index": check(lambda a: a[np.array([0, 1, 1])], [(2, 3)]),
        "sum": check(lambda a: ad.nsum(a, axis=1), [(2, 3)]),
        "sum_all": check(lambda a: ad.nsum(a), [(2, 3)]),
        "mean": check(lambda a: ad.nmean(a, axis=0), [(2, 3)]),
        "softmax": check(ad.softmax, [(2, 4)]),
        "conv1d": check(lambda x, w, b: ad.conv1d(x, w, b),
                        [(2, 5, 3), (3, 3, 2), (2,)]),
    }


def run_all(trials=100, seed=0):
    """Run every registered op check; returns {name: worst error over trials}."""
    rng = np.random.default_rng(seed)
    results = {}
    for name, run in registered_op_checks().items():
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, run(rng))
        results[name] = worst
    return results
