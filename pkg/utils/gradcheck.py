"""
Central-difference gradient oracle

Compares autograd gradients with (f(p + h) - f(p - h)) / 2h on randomly
sampled scalar entries of the given parameters. Intended for float64 models.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence

import torch

logger = logging.getLogger(__name__)


@dataclass
class GradCheckResult:
    checked: int
    max_rel_error: float
    worst_name: str

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    named_params: Sequence,
    num_samples: int = 50,
    eps: float = 1e-6,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> GradCheckResult:
    """
    Compare autograd against central differences

    Args:
        loss_fn: Closure recomputing a scalar loss from the current parameters
        named_params: (name, parameter) pairs to sample from
        num_samples: Number of scalar entries checked
        eps: Finite-difference step
        seed: Sampling seed
        abs_floor: Denominator floor for the relative error

    Returns:
        GradCheckResult with the worst relative error seen
    """
    named_params = [(n, p) for n, p in named_params if p.requires_grad]
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for n, p in named_params}

    generator = torch.Generator().manual_seed(seed)
    sizes = torch.tensor([p.numel() for _, p in named_params], dtype=torch.float64)
    picks: List = []
    for _ in range(num_samples):
        which = int(torch.multinomial(sizes, 1, generator=generator))
        index = int(torch.randint(int(sizes[which]), (1,), generator=generator))
        picks.append((which, index))

    worst, worst_name = 0.0, ''
    with torch.no_grad():
        for which, index in picks:
            name, param = named_params[which]
            flat = param.view(-1)
            original = flat[index].item()
            flat[index] = original + eps
            plus = float(loss_fn())
            flat[index] = original - eps
            minus = float(loss_fn())
            flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            exact = float(analytic[name].view(-1)[index])
            rel = abs(numeric - exact) / max(abs(numeric), abs(exact), abs_floor)
            # both tiny: treat as agreement
            if abs(numeric - exact) < abs_floor:
                rel = 0.0
            if rel > worst:
                worst, worst_name = rel, f"{name}[{index}]"

    logger.debug(f"gradcheck: {len(picks)} entries, worst {worst:.3e} at {worst_name}")
    return GradCheckResult(checked=len(picks), max_rel_error=worst, worst_name=worst_name)
