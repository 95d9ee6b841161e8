"""Budget penalties and the penalized training objective.

Costs are normalized so the full model costs 1: a cost ``T(x)`` is compared
directly with the budget ``alpha`` in the penalty ``lam * (T(x) - alpha)**2``.
"""
from __future__ import annotations

from . import tensor as T
from .tensor import ContractError


def cost_global(state, L_e, L_d):
    """Average sparsity over every encoder and decoder selection layer."""
    L = L_e + L_d
    sparsities = state.sparsities()
    if len(sparsities) != L:
        raise ContractError(f"global cost needs {L} sparsities, state has {len(sparsities)}")
    return T.scale(T.sum(T.concat_rows([T.reshape(s, (1, 1)) for s in sparsities])), 1.0 / L)


def cost_local(state):
    """Sparsity at the last encoder selection layer (the channel bottleneck)."""
    if state.encoder_layers < 1 or len(state.layers) < state.encoder_layers:
        raise ContractError("local cost needs the encoder selection layers")
    return state.layers[state.encoder_layers - 1].sparsity


def measured_cost(state, config):
    if config.penalty == "global":
        return cost_global(state, config.L_e, config.L_d)
    return cost_local(state)


def penalty(cost, alpha, lam):
    diff = T.add_scalar(cost, -float(alpha))
    return T.scale(T.mul(diff, diff), float(lam))


def total_loss(logits, label, cost, alpha, lam, task_weight=1.0):
    """cross_entropy(logits, label) + lam * (cost - alpha)^2.

    Returns (loss, task_loss, penalty) tensors.
    """
    task = T.cross_entropy(logits, label)
    pen = penalty(cost, alpha, lam)
    if task_weight == 1.0:
        loss = T.add(task, pen)
    else:
        loss = T.add(T.scale(task, float(task_weight)), pen)
    return loss, task, pen


def sample_budget(rng):
    """One budget per mini-batch, uniform on [0, 1]."""
    return float(rng.uniform(0.0, 1.0))
