"""Small convolutional classifier and its binary checkpoint format.

Layout (default widths)::

    conv(3->8, 3x3) + relu -> maxpool2 -> conv(8->16, 3x3) + relu  [tap "last_conv"]
    -> global average pool -> dropout -> dense(16->C) -> softmax

Checkpoint container (all integers little-endian)::

    magic      8 bytes  b"EGATCKPT"
    version    u32
    step       u64
    val_acc    f64
    cfg_hash   32 bytes (sha256 digest, zero-filled when absent)
    meta_len   u32, then meta_len bytes of UTF-8 JSON (arch, num_classes, widths, ...)
    n_tensors  u32
    per tensor: name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
                prod(dims) float64 values
    checksum   32 bytes sha256 of everything above
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, ops

IMAGE_SHAPE = (3, 32, 32)
MAGIC = b"EGATCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class ModelOutput(NamedTuple):
    logits: Tensor
    taps: dict


class ConvClassifier:
    """Two-conv classifier with a named activation tap for Grad-CAM.

    Parameters live in ``self.params`` as leaf Tensors with
    ``requires_grad=True``. Calling the model returns logits plus the
    ``"last_conv"`` activation tensor.
    """

    tap_name = "last_conv"

    def __init__(self, num_classes: int, widths=(8, 16), dropout_rate: float = 0.1,
                 in_channels: int = 3, seed: int | None = 0):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        self.num_classes = int(num_classes)
        self.widths = tuple(int(w) for w in widths)
        self.dropout_rate = float(dropout_rate)
        self.in_channels = int(in_channels)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c1, c2 = self.widths
        self._init("conv1.w", (c1, in_channels, 3, 3), rng)
        self._init("conv1.b", (c1,), rng)
        self._init("conv2.w", (c2, c1, 3, 3), rng)
        self._init("conv2.b", (c2,), rng)
        self._init("fc.w", (num_classes, c2), rng)
        self._init("fc.b", (num_classes,), rng)

    def _init(self, name, shape, rng):
        if len(shape) == 1:
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)  # He-uniform
            value = rng.uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def features(self, x) -> Tensor:
        """Activation map at the ``last_conv`` tap, shape (N, c2, H/2, W/2)."""
        p = self.params
        h = ops.relu(ops.conv2d(x, p["conv1.w"], p["conv1.b"], padding=1))
        h = ops.maxpool2d(h)
        return ops.relu(ops.conv2d(h, p["conv2.w"], p["conv2.b"], padding=1))

    def head(self, a: Tensor, dropout_mask: np.ndarray | None = None) -> Tensor:
        pooled = ops.mean(a, axis=(2, 3))
        if dropout_mask is not None:
            pooled = pooled * Tensor(dropout_mask)
        return ops.dense(pooled, self.params["fc.w"], self.params["fc.b"])

    def __call__(self, x, dropout_mask: np.ndarray | None = None) -> ModelOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x.shape)
        a = self.features(x)
        return ModelOutput(self.head(a, dropout_mask), {self.tap_name: a})

    def _check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ValueError(f"expected input (N, {self.in_channels}, H, W), got {tuple(shape)}")

    def dropout_mask(self, n: int, rng: np.random.Generator) -> np.ndarray | None:
        """Inverted-dropout mask for the pooled features of a batch of ``n``."""
        if self.dropout_rate == 0.0:
            return None
        keep = rng.random((n, self.widths[1])) >= self.dropout_rate
        return keep / (1.0 - self.dropout_rate)

    # -- convenience
    def logits(self, x) -> np.ndarray:
        from .autodiff import no_grad

        with no_grad():
            return self(x).logits.data

    def predict(self, x) -> np.ndarray:
        """Class probabilities in eval mode (dropout off)."""
        return predict(self, x)

    # -- state
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)

    def copy(self) -> ConvClassifier:
        m = ConvClassifier(self.num_classes, self.widths, self.dropout_rate, self.in_channels, seed=None)
        m.load_state_dict(self.state_dict())
        return m

    def meta(self) -> dict:
        return {
            "arch": "conv",
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "dropout_rate": self.dropout_rate,
            "in_channels": self.in_channels,
        }


class LinearClassifier:
    """softmax(W vec(x) + b): a reference model whose input Hessians have closed forms.

    Has no convolutional tap, so Grad-CAM is unavailable for it.
    """

    tap_name = None

    def __init__(self, num_classes: int, in_shape=IMAGE_SHAPE, seed: int | None = 0, scale: float = 0.05):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.num_classes = int(num_classes)
        self.in_shape = tuple(int(s) for s in in_shape)
        d = int(np.prod(self.in_shape))
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {
            "fc.w": Tensor(rng.normal(0.0, scale / np.sqrt(d), size=(num_classes, d)), requires_grad=True, name="fc.w"),
            "fc.b": Tensor(np.zeros(num_classes), requires_grad=True, name="fc.b"),
        }

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x, dropout_mask=None) -> ModelOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != self.in_shape:
            raise ValueError(f"expected input (N, {self.in_shape}), got {tuple(x.shape)}")
        flat = ops.reshape(x, (x.shape[0], -1))
        return ModelOutput(ops.dense(flat, self.params["fc.w"], self.params["fc.b"]), {})

    def dropout_mask(self, n, rng):
        return None

    def predict(self, x) -> np.ndarray:
        return predict(self, x)

    state_dict = ConvClassifier.state_dict
    load_state_dict = ConvClassifier.load_state_dict

    def meta(self) -> dict:
        return {"arch": "linear", "num_classes": self.num_classes, "in_shape": list(self.in_shape)}


def predict(model, x, batch_size: int = 256) -> np.ndarray:
    """Row-stochastic class-probability matrix for a batch of images."""
    from .autodiff import no_grad

    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(ops.softmax(model(x[i:i + batch_size]).logits).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict
    step: int = 0
    val_accuracy: float = 0.0
    config_hash: bytes = b""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ConvClassifier, step=0, val_accuracy=0.0, config_hash=b"") -> Checkpoint:
        return cls(model.state_dict(), model.meta(), int(step), float(val_accuracy), config_hash)

    def build_model(self):
        m = self.meta
        if m.get("arch", "conv") == "linear":
            model = LinearClassifier(m["num_classes"], tuple(m["in_shape"]), seed=None)
            model.load_state_dict(self.params)
            return model
        model = ConvClassifier(m["num_classes"], tuple(m["widths"]), m["dropout_rate"],
                               m.get("in_channels", 3), seed=None)
        model.load_state_dict(self.params)
        return model

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        digest = self.config_hash or b""
        if len(digest) not in (0, 32):
            raise CheckpointError("config_hash must be a 32-byte digest")
        buf.write(MAGIC)
        buf.write(struct.pack("<IQd", FORMAT_VERSION, self.step, self.val_accuracy))
        buf.write(digest.ljust(32, b"\0"))
        meta = json.dumps(self.meta, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        buf.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, raw: bytes) -> Checkpoint:
        if len(raw) < 32 + len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, checksum = raw[:-32], raw[-32:]
        if hashlib.sha256(body).digest() != checksum:
            raise CheckpointError("checksum mismatch: checkpoint is corrupt")
        off = len(MAGIC)
        version, step, val_acc = struct.unpack_from("<IQd", body, off)
        off += struct.calcsize("<IQd")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = body[off:off + 32]
        off += 32
        (mlen,) = struct.unpack_from("<I", body, off)
        off += 4
        meta = json.loads(body[off:off + mlen].decode())
        off += mlen
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        params = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nl].decode()
            off += nl
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
        if off != len(body):
            raise CheckpointError("trailing bytes in checkpoint")
        return cls(params, meta, int(step), float(val_acc), digest if digest.strip(b"\0") else b"")


def save_checkpoint(model_or_ckpt, path, step: int = 0, val_accuracy: float = 0.0,
                    config_hash: bytes = b"") -> Path:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else \
        Checkpoint.from_model(model_or_ckpt, step, val_accuracy, config_hash)
    path = Path(path)
    path.write_bytes(ckpt.to_bytes())
    return path


def read_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def load_checkpoint(path, num_classes: int | None = None):
    ckpt = read_checkpoint(path)
    if num_classes is not None and ckpt.meta["num_classes"] != num_classes:
        raise CheckpointError(
            f"checkpoint has {ckpt.meta['num_classes']} classes, expected {num_classes}"
        )
    return ckpt.build_model()
