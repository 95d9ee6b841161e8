"""Closed-form FLOP count of one forward pass.

Convention: a multiply-add is 2 FLOPs; elementwise ops cost per element
(add/scale 1, sigmoid 4, softmax 5, layernorm 8, gelu 8). With ``m`` active
rows, embedding width ``d``, ``H`` heads and MLP width ``r*d`` one transformer
block costs

    attention   8*m*d^2 + 4*m^2*d + 6*m^2*H     (q, k, v, out projections;
                                                 QK^T and PV; scale+softmax)
    mlp         4*r*m*d^2
    elementwise 23*m*d + 9*r*m*d                (two layernorms, biases,
                                                 residuals, gelu)

A selection layer over ``p`` live patch rows, keeping ``q`` of them, costs
``2*p*d + 10*p + 2*d + 6 + q*d`` (gate, sigmoid, sparsity hinge, threshold,
row scaling). Patch embedding costs ``2*n*P*d + 2*n*d`` and the head
``8*d + 2*d*C + C``. The channel's noise addition is not counted.

Selection input sizes are approximated by the previous block's row count,
which is exact in the encoder and ignores packet loss before the decoder.
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class FlopsModel:
    d: int
    heads: int
    mlp_ratio: int
    n_patches: int
    patch_dim: int
    num_classes: int
    encoder_blocks: int
    decoder_blocks: int
    decoder_selection: bool
    score_scaling: bool = True

    @classmethod
    def from_config(cls, config):
        return cls(config.d, config.heads, config.mlp_ratio, config.n_patches,
                   config.patch_dim, config.num_classes, config.L_e, config.L_d,
                   config.penalty == "global", config.score_scaling)

    def block(self, m):
        d, H, r = self.d, self.heads, self.mlp_ratio
        return (8 * m * d * d + 4 * m * m * d + 6 * m * m * H
                + 4 * r * m * d * d + 23 * m * d + 9 * r * m * d)

    def selection(self, m_in, m_out):
        p = max(m_in - 2, 0)
        q = max(m_out - 2, 0)
        d = self.d
        cost = 2 * p * d + 10 * p + 2 * d + 6
        if self.score_scaling:
            cost += q * d
        return cost

    def embed(self):
        n, P, d = self.n_patches, self.patch_dim, self.d
        # patch projection, bias, positions, budget token (once per side)
        return 2 * n * P * d + 2 * n * d + 2 * d

    def head(self):
        return 8 * self.d + 2 * self.d * self.num_classes + self.num_classes

    def forward(self, kept_counts, selection=True):
        """Total FLOPs given the row count entering each block (specials included)."""
        L = self.encoder_blocks + self.decoder_blocks
        if len(kept_counts) != L:
            raise ValueError(f"expected {L} block counts, got {len(kept_counts)}")
        total = self.embed() + self.head()
        prev = self.n_patches + 2
        for k, m in enumerate(kept_counts):
            total += self.block(m)
            has_sel = selection and (k < self.encoder_blocks or self.decoder_selection)
            if has_sel:
                total += self.selection(prev, m)
            prev = m
        return total


def flops_forward(kept_counts, config, selection=True):
    return FlopsModel.from_config(config).forward(kept_counts, selection)
