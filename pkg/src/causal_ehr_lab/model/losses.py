"""Loss components and their mode-dependent combination.

Every component is a batch mean; the masked-encounter loss averages over
labelled slots only. Labels use ``IGNORE`` (-100) for unperturbed slots.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import MODES
from .net import ForwardOutput

IGNORE = -100


def outcome_loss(out: ForwardOutput, t, y) -> torch.Tensor:
    """BCE of the factual-arm outcome head; the other arm gets no gradient."""
    t = t.to(out.q1_logit.dtype)
    q_t = torch.where(t > 0.5, out.q1_logit, out.q0_logit)
    return F.binary_cross_entropy_with_logits(q_t, y.to(q_t.dtype))


def propensity_loss(out: ForwardOutput, t) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(out.g_logit, t.to(out.g_logit.dtype))


def loss_supervised(out: ForwardOutput, t, y) -> torch.Tensor:
    return outcome_loss(out, t, y) + propensity_loss(out, t)


def loss_mem_temp(mem_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over labelled slots, 0 when nothing is labelled."""
    sel = labels != IGNORE
    if not bool(sel.any()):
        return mem_logits.sum() * 0.0
    return F.cross_entropy(mem_logits[sel], labels[sel])


def kl_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-row KL(N(mu, exp(logvar)) || N(0, I))."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)


def loss_mem_static(mu, logvar, static_logits: dict, static_labels: dict) -> torch.Tensor:
    """Negative ELBO: masked-variable reconstruction CE plus KL, batch mean."""
    per_row = kl_standard_normal(mu, logvar)
    for name, logits in static_logits.items():
        labels = static_labels.get(name)
        if labels is None:
            continue
        sel = labels != IGNORE
        if bool(sel.any()):
            ce = F.cross_entropy(logits, labels.clamp(min=0), reduction="none")
            per_row = per_row + torch.where(sel, ce, torch.zeros_like(ce))
    return per_row.mean()


def loss_total(supervised, mem_temp, mem_static, delta: float):
    return supervised + delta * (mem_temp + mem_static)


def loss_parts(out: ForwardOutput, batch: dict) -> dict:
    """All loss components for one forward pass."""
    parts = {
        "outcome": outcome_loss(out, batch["t"], batch["y"]),
        "propensity": propensity_loss(out, batch["t"]),
    }
    if out.mem_logits is not None and "mem_labels" in batch:
        parts["mem_temp"] = loss_mem_temp(out.mem_logits, batch["mem_labels"])
        parts["mem_static"] = loss_mem_static(
            out.vae_mu, out.vae_logvar, out.static_logits, batch["static_labels"]
        )
    return parts


def uses_mem(mode: str) -> bool:
    return mode in ("tarnet-mem", "t-behrt")


def uses_propensity(mode: str) -> bool:
    return mode in ("dragonnet", "t-behrt")


def mode_loss(parts: dict, mode: str, delta: float) -> torch.Tensor:
    """Objective for a training mode.

    tarnet: outcome only; tarnet-mem: outcome + delta * MEM;
    dragonnet: outcome + propensity; t-behrt: everything.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    sup = parts["outcome"] + parts["propensity"] if uses_propensity(mode) else parts["outcome"]
    if uses_mem(mode):
        return loss_total(sup, parts["mem_temp"], parts["mem_static"], delta)
    return sup


def pretrain_loss(parts: dict) -> torch.Tensor:
    return parts["mem_temp"] + parts["mem_static"]
