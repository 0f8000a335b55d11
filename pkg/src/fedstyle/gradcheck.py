"""Central finite-difference gradient checks for every op and loss graph.

The numeric side only ever calls forward passes, so it stays independent of
the backward rules it is judging. ``run_all`` is the suite behind the
``grad-check`` CLI subcommand and acceptance criterion on gradient
correctness.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


def numeric_gradients(fn: Callable[[Sequence[ad.Tensor]], ad.Tensor],
                      values: Sequence[np.ndarray],
                      h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of a scalar function of several arrays."""
    grads = []
    for k, base in enumerate(values):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for i in range(base.size):
            bumped = [v.copy() for v in values]
            bumped[k].reshape(-1)[i] += h
            hi = float(fn([ad.Tensor(v) for v in bumped]).data)
            bumped = [v.copy() for v in values]
            bumped[k].reshape(-1)[i] -= h
            lo = float(fn([ad.Tensor(v) for v in bumped]).data)
            flat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradients(fn: Callable[[Sequence[ad.Tensor]], ad.Tensor],
                       values: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [ad.Tensor(v.copy(), requires_grad=True) for v in values]
    with ad.record():
        loss = fn(leaves)
        ad.backward(loss)
    return [np.zeros_like(v) if t.grad is None else t.grad for v, t in zip(values, leaves)]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm((analytic - numeric).ravel())
    den = np.linalg.norm(numeric.ravel())
    if den < 1e-12:
        return float(num)  # fall back to absolute when the true grad is ~0
    return float(num / den)


def check(fn, values, tol: float = 1e-5, h: float = 1e-5) -> float:
    """Max relative error between analytic and numeric grads; raises if > tol."""
    ana = analytic_gradients(fn, values)
    num = numeric_gradients(fn, values, h=h)
    worst = max(relative_error(a, n) for a, n in zip(ana, num))
    if worst > tol:
        raise AssertionError(f"gradient check failed: rel err {worst:.3e} > {tol:.0e}")
    return worst


@dataclass
class CheckResult:
    name: str
    worst: float
    passed: bool


def _case_list(rng: np.random.Generator):
    """One (name, fn, value-factory, checked-input-indices) per op and graph.

    ``checked`` restricts the analytic-vs-numeric comparison to inputs the
    gradient is supposed to flow through: finite differences cannot see a
    detach, and the exact-zero contract behind one is unit-tested separately.
    """
    import functools

    from . import losses

    def r(*shape):
        return rng.standard_normal(shape)

    def rpos(*shape):
        return np.abs(rng.standard_normal(shape)) + 0.5

    cases = []

    def case(name, fn, factory, checked=None):
        cases.append((name, fn, factory, checked))

    case("add", lambda t: ad.sum(ad.add(t[0], t[1])), lambda: [r(3, 4), r(3, 4)])
    case("add_broadcast", lambda t: ad.sum(ad.add(t[0], t[1])), lambda: [r(3, 4), r(4)])
    case("sub", lambda t: ad.sum(ad.sub(t[0], t[1])), lambda: [r(3, 4), r(3, 4)])
    case("mul", lambda t: ad.sum(ad.mul(t[0], t[1])), lambda: [r(3, 4), r(3, 4)])
    case("mul_scalar", lambda t: ad.sum(ad.mul_scalar(t[0], -1.7)), lambda: [r(5)])
    case("matmul", lambda t: ad.sum(ad.matmul(t[0], t[1])), lambda: [r(3, 4), r(4, 2)])
    case("transpose", lambda t: ad.sum(ad.mul(ad.transpose(t[0]), t[1])), lambda: [r(3, 4), r(4, 3)])
    case("relu", lambda t: ad.sum(ad.relu(t[0])), lambda: [r(4, 3) + 0.05])
    case("exp", lambda t: ad.sum(ad.exp(t[0])), lambda: [r(3, 3)])
    case("log", lambda t: ad.sum(ad.log(t[0])), lambda: [rpos(3, 3)])
    case("sum_axis", lambda t: ad.sum(ad.mul(ad.sum(t[0], axis=0), t[1])), lambda: [r(3, 4), r(4)])
    case("mean_all", lambda t: ad.mean(ad.mul(t[0], t[0])), lambda: [r(4, 2)])
    case("mean_axis", lambda t: ad.sum(ad.mul(ad.mean(t[0], axis=1), t[1])), lambda: [r(3, 4), r(3)])
    case("concat", lambda t: ad.sum(ad.mul(ad.concat(t[0], t[1], axis=0), t[2])),
         lambda: [r(2, 3), r(4, 3), r(6, 3)])
    case("l2_normalize", lambda t: ad.sum(ad.mul(ad.l2_normalize(t[0], axis=1), t[1])),
         lambda: [r(4, 3) + np.sign(r(4, 3)) * 0.3, r(4, 3)])
    case("cosine_sim", lambda t: ad.sum(ad.cosine_sim(t[0], t[1])),
         lambda: [r(4, 3) + 0.3, r(4, 3) + 0.3])
    case("detach_blocks", lambda t: ad.sum(ad.mul(t[0], ad.detach(t[1]))),
         lambda: [r(3, 3), r(3, 3)], checked=(0,))

    # batchnorm with a random readout t[3]: a plain sum of squares of the
    # normalized output is nearly independent of x (unit batch variance by
    # construction), which starves finite differences of signal
    def bn_train(t):
        rm = ad.constant(np.zeros(t[0].shape[1]))
        rv = ad.constant(np.ones(t[0].shape[1]))
        y = ad.batchnorm1d(t[0], t[1], t[2], rm, rv, training=True)
        return ad.sum(ad.mul(y, t[3]))

    def bn_eval(t):
        rm = ad.constant(np.full(t[0].shape[1], 0.1))
        rv = ad.constant(np.full(t[0].shape[1], 1.3))
        y = ad.batchnorm1d(t[0], t[1], t[2], rm, rv, training=False)
        return ad.sum(ad.mul(y, t[3]))

    case("batchnorm_train", bn_train, lambda: [r(6, 3), rpos(3), r(3), r(6, 3)])
    case("batchnorm_eval", bn_eval, lambda: [r(6, 3), rpos(3), r(3), r(6, 3)])

    # composite loss graphs
    case("nt_xent_graph",
         lambda t: losses.nt_xent(t[0], t[1], tau=0.5),
         lambda: [r(2, 4), r(2, 4)])
    case("style_infonce_graph",
         functools.partial(lambda labels, t: losses.style_infonce(t[0], labels, tau=0.5),
                           np.array([0, 0, 1, 1])),
         lambda: [r(4, 3)])
    case("simsiam_graph",
         lambda t: losses.simsiam_loss(t[0], t[1], t[2], t[3]),
         lambda: [r(3, 4) + 0.2, r(3, 4) + 0.2, r(3, 4) + 0.2, r(3, 4) + 0.2],
         checked=(0, 2))  # z views are behind stop-grad

    def mlp_graph(t):
        x, w1, b1, w2, b2 = t
        h = ad.relu(ad.add(ad.matmul(x, w1), b1))
        z = ad.add(ad.matmul(h, w2), b2)
        return losses.nt_xent(z, ad.mul_scalar(z, 1.0), tau=0.3)

    case("mlp_nt_xent_graph", mlp_graph,
         lambda: [r(3, 5), r(5, 4) * 0.7, r(4), r(4, 3) * 0.7, r(3)])

    return cases


def run_all(instances: int = 10, tol: float = 1e-5, seed: int = 0,
            verbose: bool = False) -> list[CheckResult]:
    """Run every op/graph check ``instances`` times at random points."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, factory, checked in _case_list(rng):
        worst = 0.0
        ok = True
        for _ in range(instances):
            values = factory()
            idx = range(len(values)) if checked is None else checked
            ana = analytic_gradients(fn, values)
            num = numeric_gradients(fn, values)
            err = max(relative_error(ana[i], num[i]) for i in idx)
            worst = max(worst, err)
            if err > tol:
                ok = False
                break
        results.append(CheckResult(name, worst, ok))
        if verbose:
            print(f"{'ok  ' if ok else 'FAIL'} {name:24s} rel err {worst:.3e}")
    return results
