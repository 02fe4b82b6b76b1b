"""Finite-difference gradient audits for toy model instances.

Central differences in float64 against autograd, sampling a few entries per
parameter tensor. Intended for small double-precision instances where the
truncation error of the stencil is far below the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor


@dataclass
class GradientAuditReport:
    max_rel_error: float
    worst_param: str = ""
    probes: int = 0
    max_grad: float = 0.0  # largest |analytic| probed; guards against a vacuous pass
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_grad > 0.0


def finite_difference_audit(
    loss_fn,
    named_params: dict[str, Tensor],
    probes_per_tensor: int = 3,
    h: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-9,
    generator: torch.Generator | None = None,
) -> GradientAuditReport:
    """Compare d(loss)/d(param) from autograd against (f(p+h)-f(p-h))/2h.

    ``loss_fn`` takes no arguments and must be a pure function of the given
    parameters. Relative error is measured against max(|analytic|, |fd|)
    with ``atol`` shielding entries where both sides are ~0.
    """
    gen = generator or torch.Generator().manual_seed(0)
    loss = loss_fn()
    params = list(named_params.values())
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    report = GradientAuditReport(max_rel_error=0.0)
    for (name, param), grad in zip(named_params.items(), grads):
        numel = param.numel()
        k = min(probes_per_tensor, numel)
        idx = torch.randperm(numel, generator=gen)[:k]
        flat = param.data.view(-1)
        for j in idx.tolist():
            original = flat[j].item()
            flat[j] = original + h
            up = float(loss_fn())
            flat[j] = original - h
            down = float(loss_fn())
            flat[j] = original
            fd = (up - down) / (2.0 * h)
            analytic = 0.0 if grad is None else float(grad.view(-1)[j])
            scale = max(abs(analytic), abs(fd))
            report.max_grad = max(report.max_grad, abs(analytic))
            err = abs(analytic - fd)
            rel = 0.0 if err <= atol else err / max(scale, atol)
            report.probes += 1
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_param = f"{name}[{j}]"
            if rel > rtol:
                report.failures.append(
                    f"{name}[{j}]: autograd={analytic:.6e} fd={fd:.6e} rel={rel:.3e}")
    return report
