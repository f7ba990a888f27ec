"""Finite-difference verification of tape gradients.

The checker perturbs every entry of every parameter by +-step, re-evaluates
the loss, and compares the central difference against the analytic gradient
from one backward pass. Run it on float64 parameters; float32 noise swamps
the tolerance.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    entries: int
    passed: bool


def _rel_err(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[Tape], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> list[GradCheckReport]:
    """Compare analytic gradients of f against central differences.

    f must build one forward pass on the tape it is given and return the
    scalar loss, reading the current .data of every tensor in params on each
    call. Returns one report per parameter with the worst relative error.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.grad = None  # stale gradients would pollute the analytic side
    tape = Tape()
    loss = f(tape)
    if not np.isfinite(loss.data):
        raise NumericError("loss is not finite at the evaluation point")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for _, p in named]

    def eval_loss() -> float:
        value = float(f(Tape(record=False)).data)
        if not np.isfinite(value):
            raise NumericError("loss became non-finite under perturbation")
        return value

    reports = []
    for (name, p), grad in zip(named, analytic):
        worst = 0.0
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss()
            flat[i] = orig - step
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = _rel_err(float(gflat[i]), numeric, floor)
            if err > worst:
                worst = err
        reports.append(GradCheckReport(name, worst, int(flat.shape[0]), worst < tol))
    return reports
