"""Central finite-difference gradient checking for the engine ops.

Each check reduces an op's output to the scalar ``f = sum(op(inputs) * G)``
for a fixed random upstream gradient ``G`` and compares the analytic input
gradients against ``(f(x + eps) - f(x - eps)) / (2 * eps)``.

The two perturbed outputs are subtracted elementwise before the weighted
sum, so outputs the perturbation does not reach cancel exactly instead of
contributing summation roundoff. The perturbed evaluations run in
``numpy.longdouble`` (80-bit on x86-64); in float64 the output roundoff,
divided by ``2 * eps``, is ~1e-11 and swamps gradient entries near 1e-5.
The analytic gradients under test are always computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ilgnet import engine as E

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-6


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: dict[str, float] = field(default_factory=dict)
    skipped: int = 0
    checked: int = 0
    tolerance: float = DEFAULT_TOL

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def merge(self, other: "GradCheckReport"):
        for k, v in other.max_rel_err.items():
            self.max_rel_err[k] = max(self.max_rel_err.get(k, 0.0), v)
        self.skipped += other.skipped
        self.checked += other.checked


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    fn: Callable[[dict], np.ndarray],
    upstream: np.ndarray,
    grad_fn: Callable[[dict], dict],
    inputs: dict[str, np.ndarray],
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
    kinks: Callable[[dict, str, float], np.ndarray] | None = None,
    op: str = "",
) -> GradCheckReport:
    """Compare ``grad_fn(inputs)`` (gradients of ``sum(fn(inputs) * upstream)``)
    with central differences.

    ``kinks(inputs, name, eps)`` may return a boolean mask of elements lying
    within ``eps`` of a non-differentiable point; those are skipped and counted.
    """
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradient checking needs float64 inputs, {name} is {arr.dtype}")
    analytic = grad_fn(inputs)
    report = GradCheckReport(op=op, tolerance=tol)
    ext = {k: v.astype(np.longdouble) for k, v in inputs.items()}
    upstream = np.asarray(upstream, dtype=np.longdouble)
    for name, arr in inputs.items():
        if name not in analytic:
            continue
        skip = kinks(inputs, name, eps) if kinks else np.zeros(arr.shape, dtype=bool)
        numeric = np.zeros(arr.size, dtype=np.longdouble)
        flat = ext[name].reshape(-1)
        skip_flat = skip.reshape(-1)
        for i in range(flat.size):
            if skip_flat[i]:
                continue
            orig = flat[i]
            hi, lo = orig + eps, orig - eps
            flat[i] = hi
            yp = fn(ext)
            flat[i] = lo
            ym = fn(ext)
            flat[i] = orig
            numeric[i] = np.sum((yp - ym) * upstream) / (hi - lo)
        err = rel_error(analytic[name], numeric.reshape(arr.shape))[~skip]
        report.max_rel_err[name] = float(err.max()) if err.size else 0.0
        report.skipped += int(skip.sum())
        report.checked += int(err.size)
    return report


# ---------------------------------------------------------------------------
# random op cases
# ---------------------------------------------------------------------------

def _case_conv2d(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3, 5]))
    pad = k // 2 if rng.random() < 0.7 else 0
    stride = int(rng.integers(1, 3))
    h, w = rng.integers(k, k + 4, size=2)
    inputs = {
        "x": rng.standard_normal((n, c, h, w)),
        "w": rng.standard_normal((o, c, k, k)),
        "b": rng.standard_normal(o),
    }
    y, _ = E.conv2d_forward(inputs["x"], inputs["w"], inputs["b"], stride, pad)
    g = rng.standard_normal(y.shape)

    def fwd(d):
        return E.conv2d_forward(d["x"], d["w"], d["b"], stride, pad)[0]

    def grads(d):
        _, cache = E.conv2d_forward(d["x"], d["w"], d["b"], stride, pad)
        dx, dw, db = E.conv2d_backward(g, cache)
        return {"x": dx, "w": dw, "b": db}

    return fwd, g, grads, inputs, None


def _case_maxpool2d(rng):
    n, c = rng.integers(1, 3), rng.integers(1, 3)
    k, s = [(2, 2), (3, 2), (3, 1)][rng.integers(0, 3)]
    pad = 1 if (k == 3 and s == 1) else 0
    ceil = bool(rng.integers(0, 2)) if pad == 0 else False
    h, w = rng.integers(k, k + 5, size=2)
    inputs = {"x": rng.standard_normal((n, c, h, w))}
    y, _ = E.maxpool2d_forward(inputs["x"], k, s, pad, ceil)
    g = rng.standard_normal(y.shape)

    def fwd(d):
        return E.maxpool2d_forward(d["x"], k, s, pad, ceil)[0]

    def grads(d):
        _, cache = E.maxpool2d_forward(d["x"], k, s, pad, ceil)
        return {"x": E.maxpool2d_backward(g, cache)}

    def kinks(d, name, eps):
        # an element is at a kink if it is within 2*eps of a competing
        # value in some window where it is the max or runner-up
        x = d["x"]
        mask = np.zeros(x.shape, dtype=bool)
        _, cache = E.maxpool2d_forward(x, k, s, pad, ceil)
        _, xpshape, arg, *_ = cache
        xp = np.full(xpshape, -np.inf)
        xp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] = x
        ho, wo = arg.shape[2:]
        for a in range(ho):
            for b in range(wo):
                win = xp[:, :, a * s : a * s + k, b * s : b * s + k]
                top = win.max(axis=(2, 3), keepdims=True)
                close = (top - win) <= 2 * eps
                multi = close.sum(axis=(2, 3), keepdims=True) > 1
                hit = close & multi
                mp = np.zeros(xpshape, dtype=bool)
                mp[:, :, a * s : a * s + k, b * s : b * s + k] = hit
                mask |= mp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]]
        return mask

    return fwd, g, grads, inputs, kinks


def _case_global_avg_pool(rng):
    n, c = rng.integers(1, 3), rng.integers(1, 4)
    h, w = rng.integers(1, 5, size=2)
    inputs = {"x": rng.standard_normal((n, c, h, w))}
    g = rng.standard_normal((n, c))

    def fwd(d):
        return E.global_avg_pool_forward(d["x"])[0]

    def grads(d):
        return {"x": E.global_avg_pool_backward(g, d["x"].shape)}

    return fwd, g, grads, inputs, None


def _case_relu(rng):
    shape = tuple(rng.integers(1, 4, size=4))
    inputs = {"x": rng.standard_normal(shape)}
    g = rng.standard_normal(shape)

    def fwd(d):
        return E.relu_forward(d["x"])[0]

    def grads(d):
        _, mask = E.relu_forward(d["x"])
        return {"x": E.relu_backward(g, mask)}

    def kinks(d, name, eps):
        return np.abs(d["x"]) <= 2 * eps

    return fwd, g, grads, inputs, kinks


def _case_batchnorm(rng):
    # with only two values per channel the normalized output is constant in x
    n, c = rng.integers(2, 4), rng.integers(1, 4)
    h, w = rng.integers(2, 4, size=2)
    inputs = {
        "x": rng.standard_normal((n, c, h, w)) * rng.uniform(0.5, 2.0) + rng.uniform(-1, 1),
        "gamma": rng.uniform(0.5, 1.5, size=c),
        "beta": rng.standard_normal(c),
    }
    g = rng.standard_normal((n, c, h, w))

    def run(d):
        rm, rv = np.zeros(c), np.ones(c)
        return E.batchnorm_forward(d["x"], d["gamma"], d["beta"], rm, rv, train=True)

    def fwd(d):
        return run(d)[0]

    def grads(d):
        dx, dg, db = E.batchnorm_backward(g, run(d)[1])
        return {"x": dx, "gamma": dg, "beta": db}

    return fwd, g, grads, inputs, None


def _case_concat(rng):
    n, h, w = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    sizes = rng.integers(1, 4, size=int(rng.integers(1, 4)))
    inputs = {f"x{i}": rng.standard_normal((n, int(s), h, w)) for i, s in enumerate(sizes)}
    g = rng.standard_normal((n, int(sizes.sum()), h, w))
    names = list(inputs)

    def fwd(d):
        return E.concat_forward([d[k] for k in names], axis=1)[0]

    def grads(d):
        _, cache = E.concat_forward([d[k] for k in names], axis=1)
        return dict(zip(names, E.concat_backward(g, cache)))

    return fwd, g, grads, inputs, None


def _case_linear(rng):
    n, din, dout = rng.integers(1, 6), rng.integers(1, 11), rng.integers(1, 5)
    inputs = {
        "x": rng.standard_normal((n, din)),
        "w": rng.standard_normal((dout, din)),
        "b": rng.standard_normal(dout),
    }
    g = rng.standard_normal((n, dout))

    def fwd(d):
        return E.linear_forward(d["x"], d["w"], d["b"])[0]

    def grads(d):
        _, cache = E.linear_forward(d["x"], d["w"], d["b"])
        dx, dw, db = E.linear_backward(g, cache)
        return {"x": dx, "w": dw, "b": db}

    return fwd, g, grads, inputs, None


def _case_softmax_xent(rng):
    n, k = rng.integers(1, 6), rng.integers(2, 5)
    inputs = {"logits": rng.standard_normal((n, k)) * 2}
    labels = rng.integers(0, k, size=n)

    g = np.full(n, 1.0 / n)

    def fwd(d):
        # per-sample losses; their mean is the op's scalar loss
        return E.xent_per_sample(d["logits"], labels)

    def grads(d):
        _, _, cache = E.softmax_xent_forward(d["logits"], labels)
        return {"logits": E.softmax_xent_backward(cache)}

    return fwd, g, grads, inputs, None


OP_CASES = {
    "conv2d": _case_conv2d,
    "maxpool2d": _case_maxpool2d,
    "global_avg_pool": _case_global_avg_pool,
    "relu": _case_relu,
    "batchnorm": _case_batchnorm,
    "concat": _case_concat,
    "linear": _case_linear,
    "softmax_xent": _case_softmax_xent,
}


def check_op(op: str, trials: int = 10, seed: int = 0, eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Run ``trials`` random configurations of ``op`` and merge the reports."""
    if op not in OP_CASES:
        raise KeyError(f"unknown op {op!r}; choose from {', '.join(OP_CASES)}")
    rng = np.random.default_rng(seed)
    total = GradCheckReport(op=op, tolerance=tol)
    for _ in range(trials):
        fwd, g, grads, inputs, kinks = OP_CASES[op](rng)
        total.merge(grad_check(fwd, g, grads, inputs, eps, tol, kinks, op))
    return total
