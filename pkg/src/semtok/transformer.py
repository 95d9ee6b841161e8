"""Tiny vision transformer split into encoder, channel and decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import budget
from . import tensor as T
from .channel import ChannelSpec, transmit
from .flops import flops_forward
from .selection import SelectionLayerParams, SelectionState, TokenSequence, select
from .tensor import ContractError, DimensionError, make_rng

PENALTIES = ("global", "local")


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    d: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    L_e: int = 3
    L_d: int = 3
    num_classes: int = 4
    delta: float = 5.0
    beta: float = 0.0
    penalty: str = "global"
    lam: float = 1.0
    eps_layernorm: float = 1e-6
    score_scaling: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be divisible by patch_size")
        if self.d % self.heads:
            raise ContractError("d must be divisible by heads")
        if self.L_e < 1 or self.L_d < 1:
            raise ContractError("need at least one encoder and one decoder block")
        if self.penalty not in PENALTIES:
            raise ContractError(f"penalty must be one of {PENALTIES}")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if not (math.isfinite(self.delta) and math.isfinite(self.beta)):
            raise ContractError("delta and beta must be finite")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    @property
    def n_blocks(self):
        return self.L_e + self.L_d

    def has_selection(self, block):
        return block < self.L_e or self.penalty == "global"

    def to_dict(self):
        return asdict(self)


@dataclass
class RunMetrics:
    alpha: float
    cost: float | None = None
    kept_counts: list = field(default_factory=list)
    encoder_kept: int = 0
    flops: int = 0
    prediction: int = -1
    task_loss: float | None = None
    penalty: float | None = None
    correct: bool | None = None


# ---------------------------------------------------------------- parameters

def parameter_shapes(config):
    """Ordered (name, shape) list; this order is the checkpoint order."""
    d, h = config.d, config.mlp_ratio * config.d
    shapes = [
        ("patch.weight", (config.patch_dim, d)),
        ("patch.bias", (d,)),
        ("pos_embed", (config.n_patches, d)),
        ("cls_token", (1, d)),
        ("budget_token", (d,)),
    ]
    for k in range(config.n_blocks):
        side, j = ("enc", k) if k < config.L_e else ("dec", k - config.L_e)
        p = f"{side}.{j}."
        if config.has_selection(k):
            shapes += [(p + "sel.gate_weight", (d,)), (p + "sel.gate_bias", (1,)),
                       (p + "sel.thresh_weight", (d,)), (p + "sel.thresh_bias", (1,))]
        shapes += [(p + "ln1.gain", (d,)), (p + "ln1.bias", (d,))]
        for w in ("q", "k", "v", "o"):
            shapes += [(p + f"attn.{w}.weight", (d, d)), (p + f"attn.{w}.bias", (d,))]
        shapes += [(p + "ln2.gain", (d,)), (p + "ln2.bias", (d,)),
                   (p + "mlp.fc1.weight", (d, h)), (p + "mlp.fc1.bias", (h,)),
                   (p + "mlp.fc2.weight", (h, d)), (p + "mlp.fc2.bias", (d,))]
    shapes += [("head.ln.gain", (d,)), ("head.ln.bias", (d,)),
               ("head.weight", (d, config.num_classes)), ("head.bias", (config.num_classes,))]
    return shapes


def block_prefix(config, k):
    return f"enc.{k}." if k < config.L_e else f"dec.{k - config.L_e}."


def init_params(config, seed=0):
    """Fresh parameters. Gates start open: scores near 1, thresholds near 0.12."""
    rng = make_rng(seed, 0x1417)
    params = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            val = np.ones(shape)
        elif name.endswith("sel.gate_bias"):
            val = np.full(shape, 0.6)
        elif name.endswith("sel.thresh_bias"):
            val = np.full(shape, -2.0)
        elif name == "budget_token":
            val = rng.standard_normal(shape)
        elif leaf == "bias":
            val = np.zeros(shape)
        elif leaf == "weight" and len(shape) == 2:
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            val = rng.uniform(-lim, lim, shape)
        else:
            val = 0.02 * rng.standard_normal(shape)
        params[name] = T.tensor(val, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------- operations

def image_to_patches(image, patch_size):
    """[C, H, W] -> [n, C*p*p], patches in row-major grid order."""
    c, hh, ww = image.shape
    g = hh // patch_size
    x = image.reshape(c, g, patch_size, g, patch_size)
    return np.ascontiguousarray(x.transpose(1, 3, 0, 2, 4).reshape(g * g, c * patch_size * patch_size))


def make_budget_token(alpha, budget_embedding):
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"budget {alpha} outside [0, 1]")
    return T.scale(budget_embedding, float(alpha))


def patch_embed(image, params, config, budget_row=None):
    """Embed an image into [class, budget, patch_1..patch_n] rows.

    ``budget_row`` is the [d] budget token; zeros when omitted.
    """
    image = np.asarray(image, dtype=np.float64)
    expect = (config.channels, config.image_size, config.image_size)
    if image.shape != expect:
        raise DimensionError(f"image shape {image.shape}, expected {expect}")
    patches = T.constant(image_to_patches(image, config.patch_size))
    x = T.add(T.add(T.matmul(patches, params["patch.weight"]), params["patch.bias"]),
              params["pos_embed"])
    if budget_row is None:
        budget_row = T.constant(np.zeros(config.d))
    tokens = T.concat_rows([params["cls_token"], T.reshape(budget_row, (1, -1)), x])
    return TokenSequence(tokens, np.arange(config.n_patches), config.n_patches)


def mha_block(x, params, prefix, config, key_padding=None):
    """Pre-norm transformer block on token rows ``x``.

    ``key_padding`` (bool per row, True = padded) hides rows from attention;
    padded rows are returned unchanged.
    """
    eps = config.eps_layernorm
    keymask = None if key_padding is None else ~np.asarray(key_padding, dtype=bool)
    h = T.layernorm(x, params[prefix + "ln1.gain"], params[prefix + "ln1.bias"], eps)
    q, k, v = (T.add(T.matmul(h, params[prefix + f"attn.{w}.weight"]), params[prefix + f"attn.{w}.bias"])
               for w in ("q", "k", "v"))
    a = T.attention(q, k, v, config.heads, keymask)
    a = T.add(T.matmul(a, params[prefix + "attn.o.weight"]), params[prefix + "attn.o.bias"])
    y = T.add(x, a)
    h = T.layernorm(y, params[prefix + "ln2.gain"], params[prefix + "ln2.bias"], eps)
    h = T.gelu(T.add(T.matmul(h, params[prefix + "mlp.fc1.weight"]), params[prefix + "mlp.fc1.bias"]))
    h = T.add(T.matmul(h, params[prefix + "mlp.fc2.weight"]), params[prefix + "mlp.fc2.bias"])
    y = T.add(y, h)
    if keymask is not None and not keymask.all():
        y = T.select_rows(keymask, y, x)
    return y


def classify(tokens, params, config):
    cls = T.slice_rows(tokens, 0, 1)
    cls = T.layernorm(cls, params["head.ln.gain"], params["head.ln.bias"], config.eps_layernorm)
    logits = T.add(T.matmul(cls, params["head.weight"]), params["head.bias"])
    return T.reshape(logits, (config.num_classes,))


def masked_block(seq, params, prefix, config, filler=None):
    """Run a block on the full (n+2)-row buffer with dead rows padded.

    Dead rows hold ``filler`` (zeros by default). Returns the live rows only,
    so the result is directly comparable with ``mha_block`` on ``seq.tokens``.
    """
    rows = np.concatenate([[0, 1], 2 + seq.positions])
    if filler is None:
        filler = np.zeros((seq.n + 2, config.d))
    buf = T.scatter_rows(T.constant(filler), rows, seq.tokens)
    padding = np.ones(seq.n + 2, dtype=bool)
    padding[rows] = False
    out = mha_block(buf, params, prefix, config, key_padding=padding)
    return T.gather_rows(out, rows)


# ---------------------------------------------------------------- model

class Model:
    """Encoder -> channel -> decoder with budget-driven token selection."""

    def __init__(self, config, seed=0, params=None):
        self.config = config
        self.params = init_params(config, seed) if params is None else params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def selection_params(self, block):
        return SelectionLayerParams.from_params(self.params, block_prefix(self.config, block) + "sel.")

    def forward(self, image, alpha, channel=None, rng=None, label=None,
                selection=True, masked=False):
        """One sample through encoder, channel and decoder.

        Returns (logits, SelectionState, RunMetrics). ``masked`` runs every
        block on a padded full-length buffer instead of the compacted rows.
        ``selection=False`` is the plain transformer (no tokens scored).
        """
        cfg = self.config
        channel = channel or ChannelSpec.ideal()
        budget_emb = self.params["budget_token"]
        seq = patch_embed(image, self.params, cfg, make_budget_token(alpha, budget_emb))
        state = SelectionState(encoder_layers=cfg.L_e)
        counts = []
        encoder_kept = cfg.n_patches

        for k in range(cfg.n_blocks):
            if k == cfg.L_e:
                encoder_kept = seq.n_active
                seq = self._channel(seq, channel, rng, alpha)
            if selection and cfg.has_selection(k):
                seq, record = select(seq, self.selection_params(k), cfg.delta, cfg.beta, k,
                                     cfg.score_scaling)
                state.layers.append(record)
            counts.append(seq.tokens.shape[0])
            prefix = block_prefix(cfg, k)
            if masked:
                x = masked_block(seq, self.params, prefix, cfg)
            else:
                x = mha_block(seq.tokens, self.params, prefix, cfg)
            seq = TokenSequence(x, seq.positions, seq.n)

        logits = classify(seq.tokens, self.params, cfg)
        cost = None
        if selection and state.layers:
            cost_t = budget.measured_cost(state, cfg)
            state.cost_tensor = cost_t
            cost = cost_t.item()
        state.measured_cost = cost
        pred = int(np.argmax(logits.data))
        metrics = RunMetrics(
            alpha=float(alpha), cost=cost, kept_counts=counts, encoder_kept=encoder_kept,
            flops=flops_forward(counts, cfg, selection), prediction=pred,
            correct=None if label is None else pred == int(label))
        return logits, state, metrics

    def _channel(self, seq, channel, rng, alpha):
        cls = T.slice_rows(seq.tokens, 0, 1)
        h = T.concat_rows([cls, seq.patch_rows()])
        h2, positions = transmit(h, seq.positions, seq.n, channel, rng)
        budget_row = T.reshape(make_budget_token(alpha, self.params["budget_token"]), (1, -1))
        tokens = T.concat_rows([T.slice_rows(h2, 0, 1), budget_row,
                                T.slice_rows(h2, 1, h2.shape[0])])
        return TokenSequence(tokens, positions, seq.n)
