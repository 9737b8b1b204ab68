"""Siamese face-embedding network and its checkpoint format.

Architecture (one branch; both twins share it)::

    [pad(1) -> conv3x3 -> ReLU -> BatchNorm] x 3    1 -> 4 -> 8 -> 8 channels
    flatten (8*100*100 = 80000)
    Linear 80000->500 -> ReLU -> Linear 500->500 -> ReLU -> Linear 500->5
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, DimensionError, UnsupportedVersionError
from .numerics import BatchNorm2d, Conv2d, Linear, ReflectionPad2d, ReLU

IMAGE_SIZE = 100
EMBEDDING_DIM = 5
FLAT_FEATURES = 8 * IMAGE_SIZE * IMAGE_SIZE
HIDDEN = 500

CHECKPOINT_MAGIC = b"SIAMNET1"
CHECKPOINT_VERSION = 1


@dataclass
class FaceImage:
    """A 100x100 grayscale face with pixels in [0, 1]."""

    pixels: np.ndarray
    source_id: str = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise DimensionError(f"face image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError("face image pixels must be finite and within [0, 1]")
        self.pixels = px


def _stack(images):
    arr = np.stack([im.pixels if isinstance(im, FaceImage) else np.asarray(im, np.float32)
                    for im in images])
    return arr[:, None, :, :]


class SiameseNet:
    """One twin of the Siamese network; the pair shares this instance."""

    def __init__(self, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.conv_stack = []
        channels = [1, 4, 8, 8]
        for i in range(3):
            self.conv_stack += [
                ReflectionPad2d((1, 1, 1, 1)),
                Conv2d(f"conv{i + 1}", channels[i], channels[i + 1], rng, dtype),
                ReLU(),
                BatchNorm2d(f"bn{i + 1}", channels[i + 1], dtype),
            ]
        self.fc_stack = [
            Linear("fc1", FLAT_FEATURES, HIDDEN, rng, dtype),
            ReLU(),
            Linear("fc2", HIDDEN, HIDDEN, rng, dtype),
            ReLU(),
            Linear("fc3", HIDDEN, EMBEDDING_DIM, rng, dtype),
        ]
        self._conv_out_shape = None

    @property
    def layers(self):
        return self.conv_stack + self.fc_stack

    def parameters(self):
        """All tensors in checkpoint order, including BatchNorm running stats."""
        return [p for layer in self.layers for p in layer.params()]

    def trainable(self):
        return [p for p in self.parameters() if p.trainable]

    def parameter_count(self):
        return sum(p.value.size for p in self.trainable())

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise DimensionError(
                f"network input must be N x 1 x {IMAGE_SIZE} x {IMAGE_SIZE}, got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, training=False, trace=None):
        """Embed a batch ``x`` of shape (N, 1, 100, 100) into (N, 5).

        With ``training=True`` the BatchNorm layers use batch statistics
        (and update their running stats) and activations are cached for
        :meth:`backward`. If ``trace`` is a list, the per-sample shape after
        every block is appended to it.
        """
        h = self._check_input(x)
        if trace is not None:
            trace.append(h.shape[1:])
        for i, layer in enumerate(self.conv_stack):
            h = layer.forward(h, training)
            if trace is not None and i % 4 == 3:
                trace.append(h.shape[1:])
        self._conv_out_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        if h.shape[1] != FLAT_FEATURES:
            raise DimensionError(f"flattened features {h.shape[1]} != {FLAT_FEATURES}")
        if trace is not None:
            trace.append(h.shape[1:])
        for layer in self.fc_stack:
            h = layer.forward(h, training)
            if trace is not None and isinstance(layer, Linear):
                trace.append(h.shape[1:])
        return h

    def backward(self, grad):
        """Back-propagate d(loss)/d(output) and leave grads on every Param."""
        g = np.asarray(grad, dtype=self.dtype)
        for layer in reversed(self.fc_stack):
            g = layer.backward(g)
        g = g.reshape(self._conv_out_shape)
        for layer in reversed(self.conv_stack):
            g = layer.backward(g)
        return g

    def embed(self, images):
        """Inference-mode embeddings for a sequence of FaceImages or arrays."""
        return self.forward(_stack(images), training=False)

    def astype(self, dtype):
        twin = SiameseNet(seed=0, dtype=dtype)
        for dst, src in zip(twin.parameters(), self.parameters()):
            dst.value[...] = src.value
        return twin

    def copy_from(self, other):
        for dst, src in zip(self.parameters(), other.parameters()):
            np.copyto(dst.value, src.value)

    def snapshot(self):
        return {p.name: p.value.copy() for p in self.parameters()}

    def restore(self, snap):
        for p in self.parameters():
            np.copyto(p.value, snap[p.name])


def new_siamese(seed=0):
    return SiameseNet(seed=seed)


def forward_once(net, img, mode="infer"):
    return net.forward(_stack([img]), training=(mode == "train"))[0]


def forward_pair(net, img_a, img_b, mode="infer"):
    """Embed both images with the shared weights.

    In train mode the two images form one batch of two so that BatchNorm
    statistics span the pair.
    """
    out = net.forward(_stack([img_a, img_b]), training=(mode == "train"))
    return out[0], out[1]


# -- checkpoints ------------------------------------------------------------
#
# Layout: b"SIAMNET1" | u64 LE header length | UTF-8 JSON header | payload.
# The header lists every tensor's name, shape and byte offset into the
# payload; tensors are stored as raw little-endian float32.

def save_checkpoint(net, path):
    tensors, offset = [], 0
    for p in net.parameters():
        nbytes = p.value.size * 4
        tensors.append({"name": p.name, "shape": list(p.value.shape),
                        "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = json.dumps({"version": CHECKPOINT_VERSION, "dtype": "<f4",
                         "tensors": tensors}).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for p in net.parameters():
            f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a siamface checkpoint", "magic")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointFormatError(f"{path}: header length {hlen} exceeds file size", "header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})", "header") from None
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported checkpoint version {version!r}", "version")
    if header.get("dtype") != "<f4":
        raise CheckpointFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}", "dtype")

    payload = memoryview(data)[16 + hlen:]
    entries = {t.get("name"): t for t in header.get("tensors", [])}
    net = SiameseNet(seed=0)
    for p in net.parameters():
        entry = entries.pop(p.name, None)
        if entry is None:
            raise CheckpointFormatError(f"{path}: missing tensor {p.name}", p.name)
        if tuple(entry["shape"]) != p.value.shape:
            raise CheckpointFormatError(
                f"{path}: tensor {p.name} has shape {entry['shape']}, expected {list(p.value.shape)}",
                p.name)
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != p.value.size * 4 or start < 0 or start + nbytes > len(payload):
            raise CheckpointFormatError(f"{path}: tensor {p.name} truncated or out of range", p.name)
        p.value[...] = np.frombuffer(payload[start:start + nbytes], dtype="<f4").reshape(p.value.shape)
    if entries:
        name = sorted(entries)[0]
        raise CheckpointFormatError(f"{path}: unexpected tensor {name}", name)
    return net
