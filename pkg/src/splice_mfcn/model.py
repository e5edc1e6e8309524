"""SFCN / MFCN networks: five conv blocks with FCN-8s style skip fusion.

Each head (surface, and optionally edge) owns 1x1 score convs on pool3,
pool4 and pool5, two 2x upsamplers for the fusions, and a final 8x
upsampler back to input resolution. Both heads share the whole encoder.
"""

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    MaxPool2,
    ReLU,
    ShapeError,
    add,
    bilinear_init,
    sgd_step,
    weighted_softmax_ce,
)

HEADS_SFCN = "surface"
HEADS_MFCN = "surface+edge"
SCORE_INIT_SCALE = 0.01


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    block_widths: list = field(default_factory=lambda: [16, 32, 64, 128, 128])
    convs_per_block: int = 2
    heads: str = HEADS_MFCN
    input_size: tuple = (64, 64)
    num_classes: int = 2
    in_channels: int = 3
    dtype: str = "float64"

    def validate(self):
        if len(self.block_widths) != 5:
            raise ConfigError(f"block_widths needs exactly 5 entries, got {len(self.block_widths)}")
        if any(int(w) < 1 for w in self.block_widths):
            raise ConfigError(f"block widths must be positive, got {self.block_widths}")
        if self.convs_per_block < 1:
            raise ConfigError(f"convs_per_block must be >= 1, got {self.convs_per_block}")
        if self.heads not in (HEADS_SFCN, HEADS_MFCN):
            raise ConfigError(f"heads must be '{HEADS_SFCN}' or '{HEADS_MFCN}', got {self.heads!r}")
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"input_size must be positive multiples of 32, got {self.input_size}")
        if self.num_classes != 2:
            raise ConfigError("num_classes is fixed at 2")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        return self

    @property
    def head_names(self):
        return ("surface",) if self.heads == HEADS_SFCN else ("surface", "edge")

    def to_text(self):
        return "\n".join([
            "block_widths=" + ",".join(str(int(w)) for w in self.block_widths),
            f"convs_per_block={self.convs_per_block}",
            f"heads={self.heads}",
            f"input_size={self.input_size[0]},{self.input_size[1]}",
            f"num_classes={self.num_classes}",
            f"in_channels={self.in_channels}",
            f"dtype={self.dtype}",
        ]) + "\n"

    @classmethod
    def from_text(cls, text):
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line {line!r}")
            k, v = line.split("=", 1)
            vals[k.strip()] = v.strip()
        known = {"block_widths", "convs_per_block", "heads", "input_size", "num_classes", "in_channels", "dtype"}
        unknown = set(vals) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls()
        if "block_widths" in vals:
            cfg.block_widths = [int(x) for x in vals["block_widths"].split(",")]
        if "convs_per_block" in vals:
            cfg.convs_per_block = int(vals["convs_per_block"])
        if "heads" in vals:
            cfg.heads = vals["heads"]
        if "input_size" in vals:
            cfg.input_size = tuple(int(x) for x in vals["input_size"].split(","))
        if "num_classes" in vals:
            cfg.num_classes = int(vals["num_classes"])
        if "in_channels" in vals:
            cfg.in_channels = int(vals["in_channels"])
        if "dtype" in vals:
            cfg.dtype = vals["dtype"]
        return cfg.validate()


class Head:
    """Score convs + decoder for one output branch."""

    def __init__(self, widths, dtype):
        self.score3 = Conv2d(widths[2], 2, kernel=1, pad=0, dtype=dtype)
        self.score4 = Conv2d(widths[3], 2, kernel=1, pad=0, dtype=dtype)
        self.score5 = Conv2d(widths[4], 2, kernel=1, pad=0, dtype=dtype)
        self.up5 = ConvTranspose2d(2, 2, 2, dtype=dtype)
        self.up4 = ConvTranspose2d(2, 2, 2, dtype=dtype)
        self.up8 = ConvTranspose2d(2, 2, 8, dtype=dtype)

    def layers(self):
        return {
            "score3": self.score3, "score4": self.score4, "score5": self.score5,
            "up5": self.up5, "up4": self.up4, "up8": self.up8,
        }

    def forward(self, pool3, pool4, pool5):
        fuse4 = add(self.up5.forward(self.score5.forward(pool5)), self.score4.forward(pool4))
        fuse3 = add(self.up4.forward(fuse4), self.score3.forward(pool3))
        return self.up8.forward(fuse3)

    def backward(self, grad):
        g3 = self.up8.backward(grad)
        d_pool3 = self.score3.backward(g3)
        g4 = self.up4.backward(g3)
        d_pool4 = self.score4.backward(g4)
        d_pool5 = self.score5.backward(self.up5.backward(g4))
        return d_pool3, d_pool4, d_pool5


class Model:
    def __init__(self, config):
        self.config = config.validate()
        dt = np.dtype(config.dtype)
        self.dtype = dt
        self.blocks = []
        c_in = config.in_channels
        for width in config.block_widths:
            convs = []
            for _ in range(config.convs_per_block):
                convs.append((Conv2d(c_in, width, 3, 1, dtype=dt), BatchNorm2d(width, dtype=dt), ReLU()))
                c_in = width
            self.blocks.append((convs, MaxPool2()))
        self.heads = {name: Head(config.block_widths, dt) for name in config.head_names}
        self.step = 0
        self.training = True

    # -- introspection -----------------------------------------------------

    def named_layers(self):
        for b, (convs, _) in enumerate(self.blocks, 1):
            for i, (conv, bn, _) in enumerate(convs, 1):
                yield f"enc.b{b}.c{i}.conv", conv
                yield f"enc.b{b}.c{i}.bn", bn
        for hname, head in self.heads.items():
            for lname, layer in head.layers().items():
                yield f"{hname}.{lname}", layer

    def named_params(self):
        out = {}
        for lname, layer in self.named_layers():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def named_buffers(self):
        out = {}
        for lname, layer in self.named_layers():
            if isinstance(layer, BatchNorm2d):
                for bname, arr in layer.buffers().items():
                    out[f"{lname}.{bname}"] = arr
        return out

    def batchnorms(self):
        return [layer for _, layer in self.named_layers() if isinstance(layer, BatchNorm2d)]

    def parameters(self):
        return list(self.named_params().values())

    def num_params(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_mode(self, mode):
        if mode not in ("training", "inference"):
            raise ValueError(f"mode must be 'training' or 'inference', got {mode!r}")
        self.training = mode == "training"
        for bn in self.batchnorms():
            bn.training = self.training

    # -- passes ------------------------------------------------------------

    def forward(self, images, mode="training"):
        """Return ``{"surface": logits, "edge": logits}`` (edge only for MFCN)."""
        self.set_mode(mode)
        x = np.asarray(images)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"images must be (n, {self.config.in_channels}, h, w), got shape {x.shape}"
            )
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image dims must be multiples of 32, got {h}x{w}")
        x = x.astype(self.dtype, copy=False)
        pools = []
        for convs, pool in self.blocks:
            for conv, bn, relu in convs:
                x = relu.forward(bn.forward(conv.forward(x)))
            x = pool.forward(x)
            pools.append(x)
        return {name: head.forward(pools[2], pools[3], pools[4]) for name, head in self.heads.items()}

    def backward(self, grads):
        """Backpropagate per-head logit gradients; returns the image gradient."""
        d = [None] * 5
        for name, head in self.heads.items():
            if grads.get(name) is None:
                continue
            g3, g4, g5 = head.backward(grads[name])
            for i, g in ((2, g3), (3, g4), (4, g5)):
                d[i] = g if d[i] is None else d[i] + g
        g = None
        for b in range(4, -1, -1):
            convs, pool = self.blocks[b]
            if d[b] is not None:
                g = d[b] if g is None else g + d[b]
            g = pool.backward(g)
            for conv, bn, relu in reversed(convs):
                g = conv.backward(bn.backward(relu.backward(g)))
        return g


def build_model(config, seed=0):
    """Build a model with He-normal convs, bilinear upsamplers and zero biases.

    Score convs use He-normal scaled by ``SCORE_INIT_SCALE`` so the initial
    softmax is close to uniform while every layer still receives gradient.
    """
    model = Model(config)
    rng = np.random.default_rng(seed)
    for name, layer in model.named_layers():
        if isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            std = np.sqrt(2.0 / fan_in)
            if ".score" in name:
                std *= SCORE_INIT_SCALE
            layer.weight.data[...] = rng.standard_normal(layer.weight.shape) * std
        elif isinstance(layer, ConvTranspose2d):
            bilinear_init(layer)
    return model


def to_input(images):
    """uint8 RGB images (n, h, w, 3) or a single (h, w, 3) -> float (n, 3, h, w)."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return arr.transpose(0, 3, 1, 2).astype(np.float64) / 255.0 - 0.5


def train_step(model, images, surface_gt, edge_gt=None, weights_s=(1.0, 1.0), weights_e=(1.0, 1.0),
               lr=1e-4, momentum=0.9, weight_decay=5e-4):
    """One SGD step on the summed surface and edge losses."""
    has_edge = "edge" in model.heads
    if has_edge and edge_gt is None:
        raise ValueError("MFCN training requires edge labels")
    if not has_edge and edge_gt is not None:
        raise ValueError("SFCN has no edge head; edge labels must not be given")
    model.zero_grad()
    logits = model.forward(images, mode="training")
    loss_s, g_s = weighted_softmax_ce(logits["surface"], surface_gt, weights_s)
    grads = {"surface": g_s}
    loss_e = 0.0
    if has_edge:
        loss_e, grads["edge"] = weighted_softmax_ce(logits["edge"], edge_gt, weights_e)
    model.backward(grads)
    sgd_step(model.parameters(), lr, momentum, weight_decay)
    model.step += 1
    return {
        "loss_total": loss_s + loss_e,
        "loss_surface": loss_s,
        "loss_edge": loss_e if has_edge else None,
    }


# ---------------------------------------------------------------------------
# checkpoint file
#
# "MFCN" | u32 version | u32 len + utf-8 config text | u32 blob count |
# per blob: u32 len + utf-8 name | u8 dtype tag | u32 rank | u32 dims... |
# raw little-endian values
# ---------------------------------------------------------------------------

MAGIC = b"MFCN"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_TAG_OF = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


def _checkpoint_blobs(model):
    blobs = {name: p.data for name, p in model.named_params().items()}
    blobs.update(model.named_buffers())
    blobs["train.step"] = np.array([model.step], dtype=np.int64)
    return blobs


def save_checkpoint(model, path):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    blobs = _checkpoint_blobs(model)
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        tag = _TAG_OF[arr.dtype]
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Read a checkpoint; the model is only built once the whole file parses."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (tlen,) = r.unpack("<I", "config length")
    try:
        config = ModelConfig.from_text(r.take(tlen, "config text").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt config header: {exc}") from exc
    (count,) = r.unpack("<I", "blob count")
    blobs = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I", "blob name length")
        name = r.take(nlen, "blob name").decode("utf-8", errors="replace")
        tag, rank = r.unpack("<BI", f"header of blob {name!r}")
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"blob {name!r} has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I", f"dims of blob {name!r}")
        dt = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes, f"values of blob {name!r}"), dtype=dt).reshape(dims)
        blobs[name] = arr
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after last blob")

    model = Model(config)
    expected = _checkpoint_blobs(model)
    missing = sorted(set(expected) - set(blobs))
    extra = sorted(set(blobs) - set(expected))
    if missing or extra:
        raise CheckpointError(f"blob set mismatch: missing {missing}, unexpected {extra}")
    for name, target in expected.items():
        if blobs[name].shape != target.shape:
            raise CheckpointError(
                f"blob {name!r} has shape {blobs[name].shape} but config implies {target.shape}"
            )
    params = model.named_params()
    buffers = model.named_buffers()
    for name, arr in blobs.items():
        if name == "train.step":
            model.step = int(arr[0])
        elif name in params:
            params[name].data[...] = arr
        else:
            buffers[name][...] = arr
    return model
