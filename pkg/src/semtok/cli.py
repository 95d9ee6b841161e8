"""Command-line front end: train, sweep, visualize, gradcheck, gen-data.

Exit codes: 0 success, 1 failed check or training error, 2 usage error,
3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SWEEP_HEADER = "# semtok-sweep v1"
SWEEP_COLUMNS = ["alpha", "snr_db", "p_d", "n_seeds", "n_samples",
                 "accuracy_mean", "accuracy_std", "mean_T_mean", "mean_T_std",
                 "mean_flops_mean", "mean_flops_std", "kept_fraction_mean", "kept_fraction_std"]
MASKS_HEADER = "# semtok-masks v1"
MASKS_COLUMNS = ["sample", "layer", "alpha", "kept_fraction", "mask"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parsing helpers

def parse_grid(text, name):
    """``a:b:s`` (inclusive range) or a comma list; ``inf`` allowed in lists."""
    text = text.strip()
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise UsageError(f"--{name}: step must be positive")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 12) for i in range(max(count, 0))]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--{name}: cannot parse {text!r}") from None


def worker_count():
    cap = os.environ.get("SEMTOK_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"SEMTOK_THREADS={cap!r} is not an integer") from None
    return n


def _data_settings(args):
    from .data import TrainConfig, load_config

    tc = load_config(args.config)[1] if args.config else TrainConfig()
    if args.data_dir:
        tc.data_dir = args.data_dir
    if args.n_test is not None:
        tc.n_test = args.n_test
    return tc


def _load_model(path):
    from .data import load_checkpoint

    return load_checkpoint(path)


# ---------------------------------------------------------------- commands

def cmd_train(args):
    from .data import TrainConfig, datasets_for, load_config
    from .training import train
    from .transformer import Model, ModelConfig

    mc, tc = load_config(args.config) if args.config else (ModelConfig(), TrainConfig())
    over = {}
    if args.penalty:
        over["penalty"] = args.penalty
    if args.lam is not None:
        over["lam"] = args.lam
    if args.no_score_scaling:
        over["score_scaling"] = False
    if over:
        mc = replace(mc, **over)
    for attr, val in (("epochs", args.epochs), ("seed", args.seed), ("n_train", args.n_train),
                      ("data_dir", args.data_dir), ("channel", args.channel),
                      ("snr_db", args.snr), ("drop_prob", args.drop_prob)):
        if val is not None:
            setattr(tc, attr, val)
    tc.checkpoint_path = args.out
    metrics = args.metrics or os.path.splitext(args.out)[0] + ".csv"
    train_data, _ = datasets_for(tc, mc)
    model = Model(mc, seed=tc.seed)
    train(model, train_data, tc, metrics_path=metrics, log=None if args.quiet else sys.stderr)
    print(f"wrote {args.out} and {metrics}", file=sys.stderr)
    return EXIT_OK


def _sweep_cells(args):
    budgets = parse_grid(args.budgets, "budgets")
    snrs = parse_grid(args.snrs, "snrs") if args.snrs else []
    drops = parse_grid(args.drop_probs, "drop-probs") if args.drop_probs else []
    if snrs and drops:
        raise UsageError("--snrs and --drop-probs cannot be combined in one sweep")
    for a in budgets:
        if not 0.0 <= a <= 1.0:
            raise UsageError(f"budget {a} outside [0, 1]")
    for p in drops:
        if not 0.0 <= p <= 1.0:
            raise UsageError(f"drop probability {p} outside [0, 1]")
    channels = [(s, 0.0) for s in snrs] or [(math.inf, p) for p in drops] or [(math.inf, 0.0)]
    cells = [(a, s, p) for a in budgets for s, p in channels]
    if not cells:
        raise UsageError("empty sweep grid")
    return cells


def _channel_for(snr, p_d, seed, args):
    from .channel import ChannelSpec

    if p_d > 0:
        return ChannelSpec.drop(p_d, seed=seed, drop_class_token=args.drop_class_token)
    if math.isfinite(snr):
        return ChannelSpec.awgn(snr, seed=seed, noise_mode=args.noise_mode)
    return ChannelSpec.ideal()


def run_sweep(model, data, cells, seeds, args):
    """Evaluate every (cell, seed) pair; returns one summary dict per cell in grid order."""
    from .training import evaluate

    jobs = []
    for a, snr, p_d in cells:
        noisy = p_d > 0 or math.isfinite(snr)
        for seed in (seeds if noisy else seeds[:1]):
            jobs.append((a, snr, p_d, seed))

    def run(job):
        a, snr, p_d, seed = job
        return evaluate(model, data, a, _channel_for(snr, p_d, seed, args))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(run, jobs))
    by_cell = {}
    for (a, snr, p_d, _), res in zip(jobs, results):
        by_cell.setdefault((a, snr, p_d), []).append(res)
    rows = []
    for cell in cells:
        runs = by_cell[cell]
        row = {"alpha": cell[0], "snr_db": cell[1], "p_d": cell[2], "n_seeds": len(runs),
               "n_samples": runs[0].n}
        for key, attr in (("accuracy", "accuracy"), ("mean_T", "mean_cost"),
                          ("mean_flops", "mean_flops"), ("kept_fraction", "kept_fraction")):
            vals = np.array([getattr(r, attr) for r in runs], dtype=float)
            row[key + "_mean"] = float(np.mean(vals))
            row[key + "_std"] = float(np.std(vals))
        rows.append(row)
    return rows


def write_sweep_csv(rows, out):
    out.write(SWEEP_HEADER + "\n")
    w = csv.writer(out)
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in SWEEP_COLUMNS])


def cmd_sweep(args):
    from .data import datasets_for

    cells = _sweep_cells(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    seeds = [args.channel_seed + i for i in range(args.seeds)]
    model = _load_model(args.checkpoint)
    tc = _data_settings(args)
    _, test = datasets_for(tc, model.config)
    rows = run_sweep(model, test, cells, seeds, args)
    if args.out:
        with open(args.out, "w", newline="") as f:
            write_sweep_csv(rows, f)
    else:
        write_sweep_csv(rows, sys.stdout)
    return EXIT_OK


def write_pgm(path, grid):
    """Binary P5 greyscale image; ``grid`` values in [0, 1]."""
    h, w = grid.shape
    pixels = np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in m.groups())
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w) / float(maxval)


def visualize(model, image, sample, layers, budgets, out_dir):
    """Write masks for one image; returns the CSV rows."""
    from . import tensor as T
    from .transformer import image_to_patches

    cfg = model.config
    g = cfg.grid
    means = image_to_patches(np.asarray(image, dtype=float), cfg.patch_size).mean(axis=1).reshape(g, g)
    rows = []
    for a in budgets:
        with T.no_grad():
            _, state, _ = model.forward(image, a)
        by_block = {rec.block: rec for rec in state.layers}
        with open(os.path.join(out_dir, f"state_s{sample}_a{a:.2f}.json"), "w") as f:
            json.dump(state.to_dict(), f, indent=1)
        for layer in layers:
            kept = by_block[layer].kept.reshape(g, g)
            write_pgm(os.path.join(out_dir, f"mask_s{sample}_l{layer}_a{a:.2f}.pgm"), np.where(kept, means, 0.0))
            rows.append([sample, layer, a, float(kept.mean()), "".join("1" if k else "0" for k in kept.ravel())])
    return rows


def cmd_visualize(args):
    from .data import datasets_for

    model = _load_model(args.checkpoint)
    cfg = model.config
    valid = [k for k in range(cfg.n_blocks) if cfg.has_selection(k)]
    layers = valid if args.layers is None else [int(x) for x in parse_grid(args.layers, "layers")]
    bad = [k for k in layers if k not in valid]
    if bad:
        raise UsageError(f"layer {bad[0]} out of range; selection layers are {valid[0]}..{valid[-1]}")
    budgets = parse_grid(args.budgets, "budgets")
    if any(not 0.0 <= a <= 1.0 for a in budgets):
        raise UsageError("budgets must lie in [0, 1]")
    tc = _data_settings(args)
    _, test = datasets_for(tc, cfg)
    samples = [int(x) for x in parse_grid(args.samples, "samples")]
    if any(not 0 <= s < len(test) for s in samples):
        raise UsageError(f"sample index out of range 0..{len(test) - 1}")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for s in samples:
        rows += visualize(model, test.images[s], s, layers, budgets, args.out)
    with open(os.path.join(args.out, "masks.csv"), "w", newline="") as f:
        f.write(MASKS_HEADER + "\n")
        w = csv.writer(f)
        w.writerow(MASKS_COLUMNS)
        w.writerows(rows)
    print(f"wrote {len(rows)} masks to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import report, run_all

    results, elapsed = run_all(args.seed)
    return EXIT_OK if report(results, elapsed) else EXIT_FAIL


def cmd_gen_data(args):
    from .data import gen_shapes, write_idx

    os.makedirs(args.out, exist_ok=True)
    kw = dict(image_size=args.image_size, num_classes=args.num_classes, clutter_level=args.clutter,
              noise_std=args.noise)
    for split, n, seed in (("train", args.n, args.seed), ("test", args.n_test, args.seed + 1000003)):
        ds = gen_shapes(n, seed=seed, split=split, **kw)
        write_idx(ds, os.path.join(args.out, f"{split}-images-idx3-ubyte"),
                  os.path.join(args.out, f"{split}-labels-idx1-ubyte"))
    print(f"wrote IDX files to {args.out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- argument parser

def build_parser():
    p = argparse.ArgumentParser(prog="semtok", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--penalty", choices=["global", "local"])
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--n-train", type=int)
    t.add_argument("--data-dir")
    t.add_argument("--channel", choices=["ideal", "awgn", "drop"], help="channel used during training")
    t.add_argument("--snr", type=float)
    t.add_argument("--drop-prob", type=float)
    t.add_argument("--no-score-scaling", action="store_true")
    t.add_argument("--out", default="model.stkc")
    t.add_argument("--metrics", help="metrics CSV (default: <out>.csv)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    def data_flags(q):
        q.add_argument("--config", help="config whose data settings pick the test set")
        q.add_argument("--data-dir")
        q.add_argument("--n-test", type=int)

    s = sub.add_parser("sweep", help="evaluate one checkpoint over budgets and channels")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--budgets", default="0.1:1.0:0.1")
    s.add_argument("--snrs", help="SNR list in dB or a:b:s range")
    s.add_argument("--drop-probs", help="packet drop probabilities")
    s.add_argument("--seeds", type=int, default=5, help="channel seeds averaged per cell")
    s.add_argument("--channel-seed", type=int, default=0, help="first channel seed")
    s.add_argument("--noise-mode", choices=["exact", "fixed-sigma"], default="exact")
    s.add_argument("--drop-class-token", action="store_true")
    s.add_argument("--out", help="CSV path (default: stdout)")
    data_flags(s)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("visualize", help="write per-layer kept-token masks")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--samples", default="0", help="test-set indices")
    v.add_argument("--layers", help="block indices (default: every selection layer)")
    v.add_argument("--budgets", default="0.3,0.5,0.7,1.0")
    v.add_argument("--out", default="masks")
    data_flags(v)
    v.set_defaults(func=cmd_visualize)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write the shapes dataset as IDX files")
    d.add_argument("--out", default="data")
    d.add_argument("--n", type=int, default=2000)
    d.add_argument("--n-test", type=int, default=500)
    d.add_argument("--seed", type=int, default=7)
    d.add_argument("--image-size", type=int, default=32)
    d.add_argument("--num-classes", type=int, default=4)
    d.add_argument("--clutter", type=int, default=3)
    d.add_argument("--noise", type=float, default=0.05)
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    from .data import ConfigError, ConsistencyError, CorruptionError, FormatError, ShapeError, VersionError
    from .tensor import ContractError
    from .training import TrainingDiverged

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"semtok {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, CorruptionError, VersionError, ShapeError, ConsistencyError) as exc:
        print(f"semtok {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDiverged as exc:
        print(f"semtok {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
