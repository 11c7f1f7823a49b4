"""Central finite-difference gradient checker (the engine's external oracle).

For a deterministic scalar function ``f`` of f64 tensors, compares the
analytic gradient from backward() against (f(x + eps*e) - f(x - eps*e)) / 2eps
per coordinate. Coordinates are subsampled for large inputs. The relative
error is |analytic - numeric| / max(|numeric|, 1e-6), so a backward rule that
is wrong by a factor of two reports an error near 1.

Central differences carry rounding noise of order eps_machine * |f| / eps;
absolute disagreements below ``atol`` (default 1e-8 scaled by |f|) are
reported as zero so near-zero gradients are not misread through the floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prng import Prng
from .tensor import GraphError, Tensor, no_grad


class OracleError(Exception):
    """The function under test is unusable as an oracle target."""


@dataclass
class GradcheckReport:
    tol: float
    eps: float
    max_rel_err: float = 0.0
    passed: bool = True
    worst: tuple = ()  # (input index, flat coordinate)
    per_input: dict = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        loc = f" worst at input {self.worst[0]} coord {self.worst[1]}" if self.worst else ""
        return f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.tol:.1e}){loc}"


def gradcheck(
    f,
    inputs,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
    atol: float | None = None,
) -> GradcheckReport:
    """Check d f(inputs) / d inputs against central differences.

    ``inputs`` is a sequence of f64 tensors; gradients are checked for those
    with requires_grad set. ``max_coords`` bounds the checked coordinates per
    input (uniform subsample, seeded). ``atol`` is the absolute disagreement
    attributed to finite-difference rounding (default 1e-8 * max(1, |f|)).
    """
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        if t.dtype != "f64":
            raise OracleError(f"gradcheck is defined for f64 only; input {i} is {t.dtype}")

    out1 = f(*inputs)
    out2 = f(*inputs)
    if out1.data.size != 1:
        raise OracleError(f"gradcheck needs a scalar function, got shape {out1.shape}")
    if not np.array_equal(out1.data, out2.data):
        raise OracleError("function is not deterministic across two calls")
    if atol is None:
        atol = 1e-8 * max(1.0, abs(float(out1.data.reshape(-1)[0])))

    loss = f(*inputs)
    for t in inputs:
        t.grad = None  # accumulation is additive; the oracle needs fresh grads
    try:
        loss.backward()
    except GraphError as err:
        raise OracleError(f"function does not record a usable graph: {err}") from None

    rng = Prng(seed).split("gradcheck")
    report = GradcheckReport(tol=tol, eps=eps)

    def eval_at(k: int, flat: int, value: float) -> float:
        saved = inputs[k].data.flat[flat]
        inputs[k].data.flat[flat] = value
        try:
            with no_grad():
                return float(f(*inputs).data.reshape(-1)[0])
        finally:
            inputs[k].data.flat[flat] = saved

    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.integers(0, n, shape=max_coords))
        worst_here = 0.0
        for flat in coords:
            flat = int(flat)
            base = float(t.data.flat[flat])
            fp = eval_at(k, flat, base + eps)
            fm = eval_at(k, flat, base - eps)
            numeric = (fp - fm) / (2.0 * eps)
            abs_err = abs(float(analytic.flat[flat]) - numeric)
            rel = 0.0 if abs_err <= atol else abs_err / max(abs(numeric), 1e-6)
            if rel > worst_here:
                worst_here = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = (k, flat)
        report.per_input[k] = worst_here

    report.passed = report.max_rel_err <= tol
    return report


def scaled_backward(t: Tensor, factor: float = 2.0) -> Tensor:
    """Identity forward with a deliberately wrong backward (times ``factor``).

    Verification fixture: gradcheck must flag any layer wired through this.
    """
    out_data = t.data.copy()

    def _bw(g):
        t._accum(g * factor)

    return Tensor._from_op(out_data, (t,), _bw, "scaled_backward")
