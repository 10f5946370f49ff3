"""Finite-difference verification of the backward rules."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidArgument, NumericalError
from .tensor import Tape, Tensor, backward

# f(tape, *inputs) -> scalar Tensor; tape is None for plain evaluations.
ScalarFn = Callable[..., Tensor]


def grad_check(
    f: ScalarFn,
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    min_coords: int = 100,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    Checks a random subsample of at least ``min_coords`` coordinates
    (all of them when the inputs are smaller) and returns the maximum
    relative error ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    Requires float64 inputs.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise InvalidArgument(f"grad_check: eps must be in [1e-6, 1e-4], got {eps}")
    for i, t in enumerate(inputs):
        if t.dtype != np.float64:
            raise InvalidArgument(f"grad_check: input {i} must be float64, got {t.dtype}")
    if rng is None:
        rng = np.random.default_rng(0)

    tape = Tape()
    loss = f(tape, *inputs)
    if not np.isfinite(loss.data).all():
        raise NumericalError("grad_check: non-finite loss at the base point")
    backward(tape, loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    total = sum(t.size for t in inputs)
    n_coords = min(total, max(min_coords, 0))
    flat = rng.choice(total, size=n_coords, replace=False)

    # Map a flat position over the concatenated inputs to (input, index).
    bounds = np.cumsum([t.size for t in inputs])
    max_err = 0.0
    for pos in flat:
        which = int(np.searchsorted(bounds, pos, side="right"))
        idx = int(pos - (bounds[which - 1] if which else 0))
        t = inputs[which]
        orig = t.data.flat[idx]
        t.data.flat[idx] = orig + eps
        f_plus = float(f(None, *inputs).data)
        t.data.flat[idx] = orig - eps
        f_minus = float(f(None, *inputs).data)
        t.data.flat[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError(
                f"grad_check: non-finite loss perturbing input {which} at flat index {idx}"
            )
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[which].flat[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        max_err = max(max_err, err)
    return max_err


def _rand(rng: np.random.Generator, *shape: int) -> Tensor:
    """Random float64 tensor bounded away from zero (avoids relu/max kinks)."""
    signs = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(signs * rng.uniform(0.1, 1.0, size=shape), dtype=np.float64)


def standard_op_checks(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Gradient-check every differentiable operation at small random shapes.

    Returns op name -> max relative error.  All shapes stay within
    (2, 4, 12, 12) so the whole suite runs in seconds.
    """
    from . import ops

    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def check(name, f, inputs):
        results[name] = grad_check(f, inputs, eps=eps, rng=np.random.default_rng(seed + 1))

    x = _rand(rng, 2, 4, 12, 12)
    w = _rand(rng, 3, 4, 3, 3)
    b = _rand(rng, 3)
    check("conv2d", lambda tape, *a: ops.sum_all(ops.conv2d(a[0], a[1], a[2], stride=1, pad=1, tape=tape), tape), (x, w, b))

    xs = _rand(rng, 2, 4, 11, 11)
    ws = _rand(rng, 4, 2, 3, 3)
    check(
        "conv2d_strided_grouped",
        lambda tape, *a: ops.sum_all(ops.conv2d(a[0], a[1], None, stride=2, pad=0, groups=2, tape=tape), tape),
        (xs, ws),
    )

    xd = _rand(rng, 2, 4, 6, 6)
    wd = _rand(rng, 4, 3, 4, 4)
    check("deconv2d", lambda tape, *a: ops.sum_all(ops.deconv2d(a[0], a[1], ratio=2, tape=tape), tape), (xd, wd))

    xdg = _rand(rng, 2, 4, 4, 4)
    wdg = _rand(rng, 4, 1, 7, 7)
    check(
        "deconv2d_grouped_odd",
        lambda tape, *a: ops.sum_all(ops.deconv2d(a[0], a[1], ratio=3, groups=2, tape=tape), tape),
        (xdg, wdg),
    )

    xb = _rand(rng, 2, 3, 6, 6)
    check("bilinear_upsample", lambda tape, a: ops.sum_all(ops.bilinear_upsample(a, ratio=2, tape=tape), tape), (xb,))

    xm = _rand(rng, 2, 4, 12, 12)
    check("maxpool2d", lambda tape, a: ops.sum_all(ops.maxpool2d(a, ratio=3, tape=tape), tape), (xm,))

    xn = _rand(rng, 2, 4, 6, 6)
    sc = _rand(rng, 4)
    sh = _rand(rng, 4)

    def bn_train(tape, x_, s_, h_):
        rm = Tensor(np.zeros(4), dtype=np.float64)
        rv = Tensor(np.ones(4), dtype=np.float64)
        y = ops.batchnorm2d(x_, s_, h_, "train", rm, rv, tape=tape)
        # relu breaks the sum's invariance to the normalization
        return ops.sum_all(ops.relu(y, tape=tape), tape)

    check("batchnorm2d_train", bn_train, (xn, sc, sh))

    rm0 = np.array([0.1, -0.2, 0.3, 0.0])
    rv0 = np.array([1.1, 0.7, 2.0, 0.5])

    def bn_eval(tape, x_, s_, h_):
        rm = Tensor(rm0.copy(), dtype=np.float64)
        rv = Tensor(rv0.copy(), dtype=np.float64)
        return ops.sum_all(ops.batchnorm2d(x_, s_, h_, "eval", rm, rv, tape=tape), tape)

    check("batchnorm2d_eval", bn_eval, (xn, sc, sh))

    xr = _rand(rng, 2, 4, 8, 8)
    check("relu", lambda tape, a: ops.sum_all(ops.relu(a, tape=tape), tape), (xr,))

    c1 = _rand(rng, 2, 3, 5, 5)
    c2 = _rand(rng, 2, 2, 5, 5)
    check(
        "concat",
        lambda tape, a, b_: ops.sum_all(ops.relu(ops.concat([a, b_], tape=tape), tape=tape), tape),
        (c1, c2),
    )

    xo = _rand(rng, 2, 3, 6, 6)

    def drop_fn(tape, a):
        # identical mask on every evaluation keeps the function deterministic
        return ops.sum_all(ops.dropout(a, 0.5, "train", rng=np.random.default_rng(7), tape=tape), tape)

    check("dropout", drop_fn, (xo,))

    xl = _rand(rng, 2, 3, 8, 8)
    labels = np.random.default_rng(seed + 2).integers(0, 3, size=(2, 8, 8))
    check(
        "softmax_cross_entropy",
        lambda tape, a: ops.softmax_cross_entropy(a, labels, tape=tape),
        (xl,),
    )
    return results

