"""Budget-conditioned token selection.

A selection layer has two linear maps. The threshold selector turns the
budget token into a threshold ``gamma`` in (0, 1); the token gate gives each
patch token a raw gate ``g``, which becomes a halting score
``s = sigmoid(delta * g + beta)``. Tokens with ``s < gamma`` are removed for
the rest of the forward pass. The class and budget tokens are never scored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor


@dataclass
class SelectionLayerParams:
    gate_weight: Tensor    # [d]
    gate_bias: Tensor      # [1]
    thresh_weight: Tensor  # [d]
    thresh_bias: Tensor    # [1]

    @classmethod
    def from_params(cls, params, prefix):
        return cls(params[prefix + "gate_weight"], params[prefix + "gate_bias"],
                   params[prefix + "thresh_weight"], params[prefix + "thresh_bias"])


@dataclass
class TokenSequence:
    """Active rows of one sample.

    Row 0 is the class token, row 1 the budget token, the remaining rows are
    the live patch tokens in increasing original position.
    """

    tokens: Tensor
    positions: np.ndarray
    n: int

    @property
    def n_active(self):
        return len(self.positions)

    @property
    def alive_mask(self):
        mask = np.zeros(self.n, dtype=bool)
        mask[self.positions] = True
        return mask

    def patch_rows(self):
        return T.slice_rows(self.tokens, 2, self.tokens.shape[0])

    def special_rows(self):
        return T.slice_rows(self.tokens, 0, 2)


@dataclass
class LayerSelection:
    """What one selection layer saw and decided, indexed by original patch."""

    block: int            # index of the block this layer precedes
    gamma: float
    gates: np.ndarray     # raw g_i, nan for tokens dead on entry
    scores: np.ndarray    # s_i, nan for tokens dead on entry
    alive_in: np.ndarray
    kept: np.ndarray
    sparsity: Tensor      # S_k, scalar

    @property
    def sparsity_value(self):
        return self.sparsity.item()

    def to_dict(self):
        return {
            "block": self.block,
            "gamma": self.gamma,
            "gates": [None if math.isnan(v) else float(v) for v in self.gates],
            "scores": [None if math.isnan(v) else float(v) for v in self.scores],
            "alive_in": self.alive_in.astype(int).tolist(),
            "kept": self.kept.astype(int).tolist(),
            "sparsity": self.sparsity_value,
        }


@dataclass
class SelectionState:
    layers: list = field(default_factory=list)
    encoder_layers: int = 0
    measured_cost: float | None = None
    cost_tensor: Tensor | None = None

    def sparsities(self):
        return [layer.sparsity for layer in self.layers]

    def to_dict(self):
        return {
            "encoder_layers": self.encoder_layers,
            "measured_cost": self.measured_cost,
            "layers": [layer.to_dict() for layer in self.layers],
        }


def compute_threshold(budget_repr, params):
    """gamma_k = sigmoid(w . t + b) from the budget token row ``t`` ([1 x d] or [d])."""
    t = budget_repr if budget_repr.ndim == 2 else T.reshape(budget_repr, (1, -1))
    return T.sigmoid(T.add(T.matvec(t, params.thresh_weight), params.thresh_bias))


def compute_scores(tokens, params, delta, beta):
    """Return (gates, scores) for the rows of ``tokens``."""
    g = T.add(T.matvec(tokens, params.gate_weight), params.gate_bias)
    s = T.sigmoid(T.add_scalar(T.scale(g, float(delta)), float(beta)))
    return g, s


def keep_decision(scores, gamma):
    """A token survives when its score is not strictly below the threshold."""
    return ~(scores < gamma)


def layer_sparsity(scores, gamma, n):
    """S_k = (1/n) * sum_i max(s_i - gamma, 0) over the tokens alive on entry.

    Arithmetic: elementwise ``s_i - gamma`` in float64, relu, a correctly
    rounded sum, then a product with the float64 reciprocal of ``n``.
    """
    if n <= 0:
        raise ContractError("layer_sparsity needs n >= 1")
    if scores.size == 0:
        # nothing alive: zero, still attached to gamma's graph
        return T.scale(T.sum(gamma), 0.0)
    return T.scale(T.sum(T.relu(T.sub(scores, gamma))), 1.0 / n)


def apply_selection(seq, gamma, scores, score_scaling=True):
    """Drop patch rows with ``s_i < gamma``; optionally scale survivors by ``s_i``.

    Returns the new sequence and the boolean keep vector over the current
    patch rows.
    """
    keep = keep_decision(scores.data, float(gamma.data.reshape(-1)[0]))
    idx = np.flatnonzero(keep)
    kept_rows = T.gather_rows(seq.patch_rows(), idx)
    if score_scaling and idx.size:
        kept_rows = T.scale_rows(kept_rows, _take(scores, idx))
    tokens = T.concat_rows([seq.special_rows(), kept_rows])
    return TokenSequence(tokens, seq.positions[idx], seq.n), keep


def _take(vec, idx):
    return T.reshape(T.gather_rows(T.reshape(vec, (-1, 1)), idx), (-1,))


def select(seq, params, delta, beta, block, score_scaling=True):
    """Run one selection layer on ``seq``; return (new_seq, LayerSelection)."""
    gamma = compute_threshold(T.slice_rows(seq.tokens, 1, 2), params)
    patches = seq.patch_rows()
    g, s = compute_scores(patches, params, delta, beta)
    sparsity = layer_sparsity(s, gamma, seq.n)
    new_seq, keep = apply_selection(seq, gamma, s, score_scaling)

    gates = np.full(seq.n, np.nan)
    scores = np.full(seq.n, np.nan)
    gates[seq.positions] = g.data
    scores[seq.positions] = s.data
    kept = np.zeros(seq.n, dtype=bool)
    kept[new_seq.positions] = True
    record = LayerSelection(block, float(gamma.data[0]), gates, scores,
                            seq.alive_mask, kept, sparsity)
    return new_seq, record
