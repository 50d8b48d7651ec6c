"""Central finite-difference gradient checks."""

import numpy as np

from smad import autograd as ag


def numerical_grad(f, x: np.ndarray, eps: float = 1e-5, indices=None) -> dict:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (modified in place)."""
    if indices is None:
        indices = list(np.ndindex(x.shape))
    out = {}
    for idx in indices:
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        out[idx] = (fp - fm) / (2 * eps)
    return out


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_op(build, inputs: list[np.ndarray], tol: float = 1e-5, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of ``sum(w * build(*tensors))`` against finite differences.

    ``w`` is a fixed random weighting so that every output entry matters.
    Returns the worst relative error.
    """
    tensors = [ag.Tensor(x, requires_grad=True) for x in inputs]
    out = build(*tensors)
    w = np.random.default_rng(99).normal(size=out.shape)
    loss = ag.tsum(ag.mul(out, ag.Tensor(w)))
    ag.backward(loss)

    def f():
        with ag.no_grad():
            return float((build(*[ag.Tensor(t.data) for t in tensors]).data * w).sum())

    worst = 0.0
    for t in tensors:
        num = numerical_grad(f, t.data, eps)
        for idx, val in num.items():
            an = 0.0 if t.grad is None else t.grad[idx]
            if max(abs(val), abs(an)) > 1e-9:
                worst = max(worst, rel_err(val, an))
    assert worst <= tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
