"""Miniature dropout-capable encoder/decoder segmenter and its checkpoint format."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, FormatError

MAGIC = b"UQD1"


@dataclass(frozen=True)
class ArchConfig:
    """Channel widths per resolution level; the bottleneck width is the representation size."""

    width1: int = 8
    width2: int = 16
    width3: int = 32
    in_channels: int = 1

    @property
    def representation_dim(self) -> int:
        return self.width3

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in sorted(fields(self), key=lambda f: f.name))

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep or key not in known:
                raise FormatError(f"bad arch_config line {line!r}")
            kw[key] = int(value)
        return cls(**kw)


def _layer_specs(arch: ArchConfig) -> list[tuple[str, int, int, int]]:
    w1, w2, w3 = arch.width1, arch.width2, arch.width3
    return [
        ("enc1a", arch.in_channels, w1, 3), ("enc1b", w1, w1, 3),
        ("enc2a", w1, w2, 3), ("enc2b", w2, w2, 3),
        ("mid_a", w2, w3, 3), ("mid_b", w3, w3, 3),
        ("dec2a", w3 + w2, w2, 3), ("dec2b", w2, w2, 3),
        ("dec1a", w2 + w1, w1, 3), ("dec1b", w1, w1, 3),
        ("head", w1, 1, 1),
    ]


def init_params(arch: ArchConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights, zero biases."""
    params = {}
    for name, cin, cout, k in _layer_specs(arch):
        bound = np.sqrt(6.0 / (cin * k * k))
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)
    return params


class SegNet:
    """Two-stage mini-UNet producing per-pixel logits and a pooled bottleneck vector.

    Dropout follows each encoder block (and the bottleneck).  ``mode`` is
    ``"train"`` or ``"eval"``; in eval mode dropout is off unless the caller
    asks for Monte-Carlo sampling with ``mc=True``.
    """

    def __init__(self, arch: ArchConfig | None = None, dropout_rate: float = 0.0,
                 params: dict[str, Tensor] | None = None, seed: int | None = None):
        if not 0.0 <= dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        self.arch = arch or ArchConfig()
        self.dropout_rate = float(dropout_rate)
        if params is None:
            params = init_params(self.arch, np.random.default_rng(seed))
        self.params = params
        self.mode = "train"

    def train(self) -> "SegNet":
        self.mode = "train"
        return self

    def eval(self) -> "SegNet":
        self.mode = "eval"
        return self

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "SegNet":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        net = SegNet(self.arch, self.dropout_rate, params)
        net.mode = self.mode
        return net

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data, dtype="<f8").tobytes())
        return h.hexdigest()

    def forward(self, images, rng: np.random.Generator | None = None,
                params: dict[str, Tensor] | None = None, mc: bool = False) -> tuple[Tensor, Tensor]:
        """Return ``(logits, rep)``.

        ``images`` is ``H x W`` or ``N x H x W`` with values in [0, 1].
        Logits come back as ``N x H x W`` and ``rep`` as ``N x width3``.
        """
        p = self.params if params is None else params
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 3:
            raise DimensionError(f"expected HxW or NxHxW image, got shape {x.shape}")
        n, h, w = x.shape
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise DimensionError(f"image sides must be positive multiples of 4, got {h}x{w}")
        active = self.dropout_rate > 0 and (self.mode == "train" or mc)
        if active and rng is None:
            raise ContractError("a seeded generator is required when dropout is active")
        x = ad.reshape(x, (n, 1, h, w))

        def block(t, a, b):
            t = ad.silu(ad.conv2d(t, p[f"{a}.w"], p[f"{a}.b"]))
            return ad.silu(ad.conv2d(t, p[f"{b}.w"], p[f"{b}.b"]))

        def drop(t):
            return ad.dropout(t, self.dropout_rate, rng) if active else t

        s1 = drop(block(x, "enc1a", "enc1b"))
        s2 = drop(block(ad.avg_pool2(s1), "enc2a", "enc2b"))
        mid = block(ad.avg_pool2(s2), "mid_a", "mid_b")
        rep = ad.mean(mid, axis=(2, 3))
        mid = drop(mid)
        d2 = block(ad.concat([ad.upsample2(mid), s2], axis=1), "dec2a", "dec2b")
        d1 = block(ad.concat([ad.upsample2(d2), s1], axis=1), "dec1a", "dec1b")
        logits = ad.conv2d(d1, p["head.w"], p["head.b"])
        return ad.reshape(logits, (n, h, w)), rep

    __call__ = forward

    def predict_prob(self, images) -> np.ndarray:
        """Eval-mode foreground probabilities, same leading shape as the logits."""
        if self.mode != "eval":
            raise ContractError("predict_prob requires an eval-mode network")
        logits, _ = self.forward(images)
        return ad.sigmoid(logits).data

    # flat parameter vector helpers used by gradient checks
    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].data.reshape(-1) for k in sorted(self.params)])

    def unflatten(self, flat: Tensor) -> dict[str, Tensor]:
        out, off = {}, 0
        for k in sorted(self.params):
            shape = self.params[k].shape
            n = int(np.prod(shape))
            out[k] = ad.reshape(flat[off:off + n], shape)
            off += n
        return out


def save_checkpoint(net: SegNet, path: str | Path) -> None:
    """Write ``net`` in the UQD1 layout (all integers little-endian uint32).

    The arch text block carries ``dropout_rate`` too so a reloaded network
    behaves identically.
    """
    text = (net.arch.to_text() + f"dropout_rate={net.dropout_rate!r}\n").encode()
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", len(text)) + text
    buf += struct.pack("<I", len(net.params))
    for name in sorted(net.params):
        arr = np.ascontiguousarray(net.params[name].data, dtype="<f8")
        nb = name.encode()
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> SegNet:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated at offset {off}, needed {n} more bytes")
        chunk = raw[off:off + n]
        off += n
        return chunk

    (tlen,) = struct.unpack("<I", take(4))
    lines = take(tlen).decode().splitlines()
    rate_lines = [ln for ln in lines if ln.startswith("dropout_rate=")]
    rate = float(rate_lines[0].split("=", 1)[1]) if rate_lines else 0.0
    arch = ArchConfig.from_text("\n".join(ln for ln in lines if not ln.startswith("dropout_rate=")))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = Tensor(data, requires_grad=True)
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    expected = {f"{name}.{kind}" for name, *_ in _layer_specs(arch) for kind in "wb"}
    if set(params) != expected:
        raise FormatError(f"{path}: parameter names do not match arch_config")
    net = SegNet(arch, rate, params)
    return net.eval()
