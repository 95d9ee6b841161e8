"""Datasets, IDX files, checkpoints and JSON configuration."""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .tensor import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CKPT_MAGIC = b"STKC"
CKPT_VERSION = 1

GLYPHS = ("circle", "square", "triangle", "cross")


class FormatError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


class CorruptionError(ValueError):
    pass


class VersionError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, pointer, message):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


@dataclass
class Dataset:
    images: np.ndarray   # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray   # [N] int64
    split: str = "train"

    def __len__(self):
        return len(self.labels)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.split)


# ---------------------------------------------------------------- shapes

def _glyph_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        # apex up, base at cy + r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    arm = max(r * 0.3, 1.0)
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def _stroke(img, rng, size):
    """A thin straight line segment of random length, angle and intensity."""
    length = rng.uniform(4, 9)
    angle = rng.uniform(0, np.pi)
    y0, x0 = rng.uniform(0, size, 2)
    val = rng.uniform(0.3, 0.7)
    for t in np.linspace(0, length, int(length * 2) + 1):
        y = int(round(y0 + t * np.sin(angle)))
        x = int(round(x0 + t * np.cos(angle)))
        if 0 <= y < size and 0 <= x < size:
            img[y, x] = max(img[y, x], val)


def gen_shapes(n, image_size=32, num_classes=4, clutter_level=3, seed=0, noise_std=0.05,
               split="train"):
    """Grayscale images with one filled glyph each; label = glyph class.

    Classes are assigned round-robin (balanced to within one), glyph size
    and position are random, ``clutter_level`` distractor strokes and
    Gaussian pixel noise are added, and pixels are quantized to k/255.
    """
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    if not 1 <= num_classes <= len(GLYPHS):
        raise ValueError(f"num_classes must be in 1..{len(GLYPHS)}")
    rng = make_rng(seed, 0x5A9E)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images = np.zeros((n, 1, image_size, image_size))
    for i in range(n):
        img = np.zeros((image_size, image_size))
        r = rng.uniform(0.16, 0.28) * image_size
        cy, cx = rng.uniform(r + 1, image_size - r - 1, 2)
        img[_glyph_mask(GLYPHS[labels[i]], yy, xx, cy, cx, r)] = rng.uniform(0.75, 1.0)
        for _ in range(clutter_level):
            _stroke(img, rng, image_size)
        if noise_std > 0:
            img = img + noise_std * rng.standard_normal(img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    images = np.round(images * 255.0) / 255.0
    return Dataset(images, labels.astype(np.int64), split)


# ---------------------------------------------------------------- IDX

def write_idx(dataset, images_path, labels_path):
    """IDX u8 pair; single-channel images only."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise FormatError("IDX images are single channel")
    pixels = np.round(dataset.images[:, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def _read_idx(path, magic, ndim):
    with open(path, "rb") as f:
        raw = f.read()
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) != head + count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split="train"):
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), split)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model, path):
    """Write ``model`` in the STKC format.

    Layout (little-endian): magic ``STKC``; u32 version; u32 config length +
    UTF-8 JSON of the ModelConfig; u32 record count; per record u32 name
    length, UTF-8 name, u32 ndim, u32 dims, float64 payload; trailing u32
    CRC32 of every preceding byte.
    """
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", t.data.ndim),
                  struct.pack(f"<{t.data.ndim}I", *t.data.shape),
                  np.ascontiguousarray(t.data, dtype="<f8").tobytes()]
    body = b"".join(parts)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def read_checkpoint(path):
    """Parse and verify a checkpoint file; return (config dict, ordered records)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"{path}: CRC mismatch")
    version = struct.unpack_from("<I", body, 4)[0]
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    pos = 8
    (clen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    config = json.loads(body[pos:pos + clen].decode("utf-8"))
    pos += clen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        if name in records:
            raise FormatError(f"{path}: duplicate parameter {name}")
        records[name] = arr.astype(np.float64)
    if pos != len(body):
        raise FormatError(f"{path}: {len(body) - pos} trailing bytes")
    return config, records


def load_checkpoint(path):
    from . import tensor as T
    from .transformer import Model, ModelConfig, parameter_shapes

    config_dict, records = read_checkpoint(path)
    config = ModelConfig(**config_dict)
    expected = parameter_shapes(config)
    names = [n for n, _ in expected]
    for name, shape in expected:
        if name not in records:
            raise ShapeError(f"parameter {name} missing from checkpoint")
        if records[name].shape != shape:
            raise ShapeError(f"parameter {name} has shape {records[name].shape}, config implies {shape}")
    extra = [n for n in records if n not in names]
    if extra:
        raise ShapeError(f"unexpected parameter {extra[0]}")
    params = {n: T.tensor(records[n], requires_grad=True, name=n) for n in names}
    return Model(config, params=params)


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    alpha_sampling: str = "uniform_per_batch"
    checkpoint_path: str = "model.stkc"
    task_weight: float = 1.0
    train_only_selection: bool = False
    # training-time channel
    channel: str = "ideal"
    snr_db: float | None = None
    drop_prob: float = 0.0
    # data
    n_train: int = 2000
    n_test: int = 500
    clutter_level: int = 3
    noise_std: float = 0.05
    data_seed: int = 7
    data_dir: str | None = None


_MODEL_KEYS = {
    "image_size": {"type": "integer", "minimum": 16},
    "patch_size": {"type": "integer", "minimum": 1},
    "channels": {"enum": [1, 3]},
    "d": {"type": "integer", "minimum": 1},
    "heads": {"type": "integer", "minimum": 1},
    "mlp_ratio": {"type": "integer", "minimum": 1},
    "L_e": {"type": "integer", "minimum": 1},
    "L_d": {"type": "integer", "minimum": 1},
    "num_classes": {"type": "integer", "minimum": 2},
    "delta": {"type": "number"},
    "beta": {"type": "number"},
    "penalty": {"enum": ["global", "local"]},
    "lambda": {"type": "number", "minimum": 0},
    "eps_layernorm": {"type": "number", "exclusiveMinimum": 0},
    "score_scaling": {"type": "boolean"},
}

_TRAIN_KEYS = {
    "epochs": {"type": "integer", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
    "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "adam_eps": {"type": "number", "exclusiveMinimum": 0},
    "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "seed": {"type": "integer", "minimum": 0},
    "alpha_sampling": {"enum": ["uniform_per_batch"]},
    "checkpoint_path": {"type": "string"},
    "task_weight": {"type": "number", "minimum": 0},
    "train_only_selection": {"type": "boolean"},
    "channel": {"enum": ["ideal", "awgn", "drop"]},
    "snr_db": {"type": ["number", "null"]},
    "drop_prob": {"type": "number", "minimum": 0, "maximum": 1},
    "n_train": {"type": "integer", "minimum": 1},
    "n_test": {"type": "integer", "minimum": 1},
    "clutter_level": {"type": "integer", "minimum": 0},
    "noise_std": {"type": "number", "minimum": 0},
    "data_seed": {"type": "integer", "minimum": 0},
    "data_dir": {"type": ["string", "null"]},
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {**_MODEL_KEYS, **_TRAIN_KEYS},
    "additionalProperties": False,
}


def _pointer(path):
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def parse_config(obj):
    """Validate a config mapping; return (ModelConfig, TrainConfig)."""
    import jsonschema

    from .transformer import ModelConfig

    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(obj) - set(CONFIG_SCHEMA["properties"]))
            path = [extra[0]] if extra else path
            raise ConfigError(_pointer(path), "unknown key")
        raise ConfigError(_pointer(path), err.message)
    model_kw = {("lam" if k == "lambda" else k): v for k, v in obj.items() if k in _MODEL_KEYS}
    train_kw = {k: v for k, v in obj.items() if k in _TRAIN_KEYS}
    try:
        model = ModelConfig(**model_kw)
    except ValueError as exc:
        raise ConfigError("", str(exc)) from None
    return model, TrainConfig(**train_kw)


def load_config(path):
    with open(path, encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
    return parse_config(obj)


def dump_config(model_config, train_config):
    """Inverse of ``parse_config``: a flat, key-sorted mapping."""
    out = {("lambda" if k == "lam" else k): v for k, v in asdict(model_config).items()}
    out.update({f.name: getattr(train_config, f.name) for f in fields(train_config)})
    return dict(sorted(out.items()))


def datasets_for(train_config, model_config):
    """Train/test datasets described by a TrainConfig (IDX dir or generated shapes)."""
    if train_config.data_dir:
        d = train_config.data_dir
        train = load_idx(os.path.join(d, "train-images-idx3-ubyte"),
                         os.path.join(d, "train-labels-idx1-ubyte"), "train")
        test = load_idx(os.path.join(d, "test-images-idx3-ubyte"),
                        os.path.join(d, "test-labels-idx1-ubyte"), "test")
        return train, test
    kw = dict(image_size=model_config.image_size, num_classes=model_config.num_classes,
              clutter_level=train_config.clutter_level, noise_std=train_config.noise_std)
    train = gen_shapes(train_config.n_train, seed=train_config.data_seed, split="train", **kw)
    test = gen_shapes(train_config.n_test, seed=train_config.data_seed + 1000003, split="test", **kw)
    return train, test
