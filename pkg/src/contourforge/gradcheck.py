"""Central-difference gradient verification.

Compares analytic gradients from backward() against (f(x+h) - f(x-h)) / 2h
per coordinate. Inputs must be float64; float32 has too little headroom
under the default step.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, no_grad


def gradcheck(fn, inputs, h: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7,
              samples: int | None = None, rng: np.random.Generator | None = None) -> bool:
    """Check d fn / d input for every Tensor in `inputs`.

    fn is called as fn(*inputs) and must return a scalar Tensor, computed
    deterministically. With `samples` set, only that many randomly chosen
    coordinates per input are probed (whole-network checks); otherwise every
    coordinate is.

    Raises AssertionError listing the offending coordinates; returns True.
    """
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("gradcheck inputs must be Tensors")
        if t.data.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("fn must return a scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    failures = []
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        if samples is not None and samples < n:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=samples, replace=False)
        else:
            coords = range(n)
        for j in coords:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                f_plus = float(fn(*inputs).data)
                flat[j] = orig - h
                f_minus = float(fn(*inputs).data)
            flat[j] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            ana = float(analytic[i].reshape(-1)[j])
            if abs(num - ana) > atol + rtol * max(abs(num), abs(ana)):
                failures.append(f"input {i} coord {j}: analytic {ana:.8g} vs numeric {num:.8g}")
    if failures:
        raise AssertionError("gradient mismatch:\n" + "\n".join(failures[:20]))
    return True
