"""Central-difference gradient checking.

The analytic gradient from the tape is compared against
(f(x + h e_i) - f(x - h e_i)) / 2h component by component. Use float64
tensors and h in [1e-5, 1e-2] for tight primitive checks; float32 whole-
model spot checks need a larger h and the `pick="largest"` selection to
stay above the fp32 noise floor.
"""

import numpy as np

from .tensor import Tensor, backward, no_grad

REL_FLOOR = 1e-8


def finite_diff_check(fn, inputs, h=1e-5, pick="all", n_per_tensor=8, rng=None):
    """Max relative gradient error of `fn` at the given point.

    fn: callable taking the input Tensors and returning a scalar Tensor.
    inputs: tensors to perturb; only those with requires_grad are checked.
    pick: "all" checks every component; "largest" the n_per_tensor
          largest-|analytic| components; "random" a seeded sample.

    Returns max over checked components of
    |analytic - numeric| / max(|analytic|, 1e-8).
    """
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    backward(loss)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat_grad = analytic.reshape(-1)
        if pick == "all" or t.data.size <= n_per_tensor:
            idxs = range(t.data.size)
        elif pick == "largest":
            idxs = np.argsort(np.abs(flat_grad))[-n_per_tensor:]
        elif pick == "random":
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(t.data.size, size=n_per_tensor, replace=False)
        else:
            raise ValueError(f"unknown pick mode {pick!r}")

        flat = t.data.reshape(-1)
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = fn(*inputs).item()
                flat[i] = orig - h
                down = fn(*inputs).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(flat_grad[i] - numeric) / max(abs(flat_grad[i]), REL_FLOOR)
            worst = max(worst, err)
    return worst
