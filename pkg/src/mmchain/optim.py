"""Adam optimizer and finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericError
from .tensor import Tape, Tensor, backward, zero_grad


@dataclass
class AdamState:
    """Per-parameter Adam moments plus hyperparameters.

    ``m`` and ``v`` are keyed by parameter name and shape-matched lazily on
    the first step so a state can be constructed before the parameters.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Aborts before touching any parameter if a gradient is missing its shape
    or contains NaN/Inf, so a failed step never leaves a partial update.
    """
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"adam_step: grad shape {g.shape} != param {name} shape {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for {name}")
        grads[name] = g

    state.t += 1
    b1t = 1.0 - state.beta1 ** state.t
    b2t = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    flagged: bool


@dataclass
class GradCheckReport:
    tol: float
    step: float
    checks: list[TensorCheck]

    @property
    def passed(self) -> bool:
        return not any(c.flagged for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "FAIL" if c.flagged else "ok"
            out.append(f"{status:4s} {c.name:24s} max_rel_err={c.max_rel_err:.3e}")
        return out


def grad_check(
    loss_fn,
    params: dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare taped gradients against central finite differences.

    ``loss_fn`` takes no arguments, reads ``params``, and must be
    deterministic; two unperturbed evaluations that differ raise
    ``ContractViolation``.  The relative error uses an absolute floor so
    near-zero derivative entries do not divide by noise.
    """
    base1 = float(loss_fn().data)
    base2 = float(loss_fn().data)
    if base1 != base2:
        raise ContractViolation("grad_check: loss_fn is not deterministic")

    zero_grad(params)
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    checks = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        an = analytic[name].reshape(-1)
        worst = 0.0
        worst_idx = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn().data)
            flat[i] = orig - step
            fm = float(loss_fn().data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            rel = abs(fd - an[i]) / max(abs(fd), abs(an[i]), floor)
            if rel > worst:
                worst = rel
                worst_idx = i
        checks.append(
            TensorCheck(
                name=name,
                max_rel_err=worst,
                worst_index=np.unravel_index(worst_idx, p.data.shape),
                flagged=worst > tol,
            )
        )
    return GradCheckReport(tol=tol, step=step, checks=checks)
