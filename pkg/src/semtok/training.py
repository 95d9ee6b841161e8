"""Training loop for the budget-penalized objective, and evaluation."""
from __future__ import annotations

import csv
import math
import sys
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .budget import sample_budget, total_loss
from .channel import ChannelSpec
from .data import save_checkpoint
from .tensor import make_rng

METRICS_HEADER = "# semtok-train-metrics v1"
METRICS_COLUMNS = ["epoch", "batch", "alpha", "task_loss", "penalty", "mean_cost", "accuracy"]


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return total


def trainable(model, config):
    if config.train_only_selection:
        return [p for n, p in model.params.items() if ".sel." in n]
    return model.parameters()


def training_channel(config):
    if config.channel == "awgn":
        return ChannelSpec.awgn(config.snr_db if config.snr_db is not None else 10.0, seed=config.seed)
    if config.channel == "drop":
        return ChannelSpec.drop(config.drop_prob, seed=config.seed)
    return ChannelSpec.ideal()


@dataclass
class BatchLog:
    epoch: int
    batch: int
    alpha: float
    task_loss: float
    penalty: float
    mean_cost: float
    accuracy: float

    def row(self):
        return [self.epoch, self.batch, repr(self.alpha), repr(self.task_loss),
                repr(self.penalty), repr(self.mean_cost), repr(self.accuracy)]


def train(model, data, config, metrics_path=None, log=sys.stderr, on_epoch=None):
    """Minimize cross-entropy + lam * (T(x) - alpha)^2 with one alpha per batch.

    Each sample's loss (divided by the batch size) is backpropagated on its
    own graph; gradients accumulate in the parameters, which equals
    backpropagating the batch mean. Returns the list of BatchLog rows.
    """
    cfg = model.config
    params = trainable(model, config)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = make_rng(config.seed, 0x7A1)
    channel = training_channel(config)
    n = len(data)
    logs = []
    sink = None
    if metrics_path:
        sink = open(metrics_path, "w", newline="")
        sink.write(METRICS_HEADER + "\n")
        writer = csv.writer(sink)
        writer.writerow(METRICS_COLUMNS)
    step = 0
    try:
        for epoch in range(config.epochs):
            perm = rng.permutation(n)
            epoch_correct = 0
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = perm[start:start + config.batch_size]
                alpha = sample_budget(rng)
                opt.zero_grad()
                task_sum = pen_sum = cost_sum = 0.0
                correct = 0
                for j, i in enumerate(idx):
                    logits, state, met = model.forward(
                        data.images[i], alpha, channel, rng=make_rng(config.seed, 0xC4A, step, j),
                        label=data.labels[i])
                    loss, task, pen = total_loss(logits, int(data.labels[i]), state.cost_tensor,
                                                 alpha, cfg.lam, config.task_weight)
                    if not math.isfinite(loss.item()):
                        _dump(config, epoch, b, alpha, idx, j, loss.item())
                    T.scale(loss, 1.0 / len(idx)).backward()
                    task_sum += task.item()
                    pen_sum += pen.item()
                    cost_sum += state.measured_cost
                    correct += int(met.correct)
                if config.grad_clip:
                    clip_grad_norm(params, config.grad_clip)
                opt.step()
                step += 1
                epoch_correct += correct
                k = len(idx)
                entry = BatchLog(epoch, b, alpha, task_sum / k, pen_sum / k, cost_sum / k, correct / k)
                logs.append(entry)
                if sink:
                    writer.writerow(entry.row())
            if log:
                recent = logs[-math.ceil(n / config.batch_size):]
                gap = np.mean([abs(r.mean_cost - r.alpha) for r in recent])
                print(f"epoch {epoch + 1}/{config.epochs} task_loss={np.mean([r.task_loss for r in recent]):.4f} "
                      f"acc={epoch_correct / n:.3f} |T-alpha|={gap:.3f}", file=log, flush=True)
            if config.checkpoint_path:
                save_checkpoint(model, config.checkpoint_path)
            if on_epoch:
                on_epoch(epoch, model)
    finally:
        if sink:
            sink.close()
    return logs


def _dump(config, epoch, batch, alpha, idx, j, value):
    path = f"{config.checkpoint_path or 'train'}.diverged.npz"
    np.savez(path, epoch=epoch, batch=batch, alpha=alpha, indices=np.asarray(idx), offending=idx[j])
    raise TrainingDiverged(
        f"non-finite loss {value} at epoch {epoch} batch {batch} (alpha={alpha:.4f}, "
        f"sample {idx[j]}); batch written to {path}")


@dataclass
class EvalResult:
    alpha: float
    accuracy: float
    mean_cost: float
    mean_flops: float
    kept_fraction: float
    n: int
    kept_histograms: list = field(default_factory=list)
    mean_abs_gap: float = float("nan")   # mean over samples of |T(x) - alpha|

    def as_dict(self):
        return {
            "alpha": self.alpha, "accuracy": self.accuracy, "mean_cost": self.mean_cost,
            "mean_flops": self.mean_flops, "kept_fraction": self.kept_fraction, "n": self.n,
            "mean_abs_gap": self.mean_abs_gap,
            "kept_histograms": [dict(sorted(h.items())) for h in self.kept_histograms],
        }


def evaluate(model, data, alpha, channel=None, selection=True):
    """Aggregate metrics at one budget. Sample ``i`` uses channel stream (seed, i)."""
    channel = channel or ChannelSpec.ideal()
    cfg = model.config
    correct = 0
    costs, flops, kept = [], [], []
    hist = [Counter() for _ in range(cfg.n_blocks)]
    with T.no_grad():
        for i in range(len(data)):
            _, state, met = model.forward(data.images[i], alpha, channel,
                                          rng=make_rng(channel.seed, i), label=data.labels[i],
                                          selection=selection)
            correct += int(met.correct)
            if met.cost is not None:
                costs.append(met.cost)
            flops.append(met.flops)
            kept.append(met.encoder_kept / cfg.n_patches)
            for k, c in enumerate(met.kept_counts):
                hist[k][c - 2] += 1
    n = len(data)
    if costs:
        mean_cost = float(np.mean(costs))
        gap = float(np.mean(np.abs(np.asarray(costs) - alpha)))
    else:
        mean_cost = gap = float("nan")
    return EvalResult(float(alpha), correct / n, mean_cost, float(np.mean(flops)), float(np.mean(kept)),
                      n, hist, gap)
