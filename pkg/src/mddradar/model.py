"""Twin-branch convolutional feature extractor with a main and an adversarial head.

Layout (``MDDNet``)::

    x_r ─ conv/relu x3 ─┐
                        ├─ concat ─ bottleneck(relu) ─┬─ head      -> f(x)
    x_d ─ conv/relu x3 ─┘                             └─ GRL ─ adv_head -> f'(x)

Checkpoints are written in a small binary format, see :func:`save_checkpoint`.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import ContractError, DimensionError, Tensor

CHECKPOINT_MAGIC = b"MDDNET01"
CHECKPOINT_VERSION = 1

DESK_SHAPE = (16, 32)
FULL_SHAPE = (64, 128)


class CheckpointFormatError(ValueError):
    pass


@dataclass
class ArchConfig:
    input_shape: tuple[int, int] = DESK_SHAPE
    # (out_channels, kernel, stride) per stage
    stages: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (16, 3, 2), (32, 3, 2))
    bottleneck: int = 128
    n_classes: int = 5
    head_hidden: int | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        if self.head_hidden is None:
            self.head_hidden = max(self.bottleneck // 2, 1)
        if self.n_classes < 2:
            raise ContractError(f"need at least 2 classes, got {self.n_classes}")

    @classmethod
    def full(cls, n_classes: int = 5) -> "ArchConfig":
        return cls(input_shape=FULL_SHAPE, bottleneck=512, n_classes=n_classes)

    def branch_output(self) -> int:
        h, w = self.input_shape
        c = 1
        for out_c, k, s in self.stages:
            if k > h or k > w:
                raise DimensionError(f"input {self.input_shape} too small for stage kernel {k}")
            h, w, c = (h - k) // s + 1, (w - k) // s + 1, out_c
        return c * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["stages"] = [list(s) for s in self.stages]
        return d


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Conv2d:
    def __init__(self, in_c: int, out_c: int, kernel: int, stride: int, rng: np.random.Generator):
        self.stride = stride
        self.weight = Tensor(
            _glorot(rng, (out_c, in_c, kernel, kernel), in_c * kernel * kernel, out_c * kernel * kernel),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros((out_c, 1, 1)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add(nx.conv2d(x, self.weight, self.stride), self.bias)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.weight
        yield "bias", self.bias


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Tensor(_glorot(rng, (n_in, n_out), n_in, n_out), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add(nx.matmul(x, self.weight), self.bias)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.weight
        yield "bias", self.bias


class Module:
    """Parameter bookkeeping shared by the composite layers."""

    def _children(self) -> list[tuple[str, object]]:
        return []

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, child in self._children():
            for name, p in child.named_parameters():
                yield f"{prefix}.{name}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Branch(Module):
    """Three valid conv + relu stages, flattened to a vector per sample."""

    def __init__(self, stages, rng: np.random.Generator):
        self.convs = []
        in_c = 1
        for out_c, k, s in stages:
            self.convs.append(Conv2d(in_c, out_c, k, s, rng))
            in_c = out_c

    def _children(self):
        return [(str(i), c) for i, c in enumerate(self.convs)]

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = nx.relu(conv(x))
        return nx.flatten(x, 1)


class FeatureExtractor(Module):
    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        self.arch = arch
        self.branch_r = Branch(arch.stages, rng)
        self.branch_d = Branch(arch.stages, rng)
        self.bottleneck = Linear(2 * arch.branch_output(), arch.bottleneck, rng)

    def _children(self):
        return [("range", self.branch_r), ("doppler", self.branch_d), ("bottleneck", self.bottleneck)]

    def __call__(self, x_r, x_d) -> Tensor:
        """Batched features: ``x_r`` and ``x_d`` are ``(n, H, W)`` arrays."""
        x_r = np.asarray(x_r.data if isinstance(x_r, Tensor) else x_r, dtype=np.float64)
        x_d = np.asarray(x_d.data if isinstance(x_d, Tensor) else x_d, dtype=np.float64)
        h, w = self.arch.input_shape
        if x_r.ndim != 3 or x_r.shape[1:] != (h, w) or x_d.shape != x_r.shape:
            raise DimensionError(
                f"expected range/Doppler batches of shape (n, {h}, {w}), got {x_r.shape} and {x_d.shape}"
            )
        fr = self.branch_r(Tensor(x_r[:, None]))
        fd = self.branch_d(Tensor(x_d[:, None]))
        return nx.relu(self.bottleneck(nx.concat([fr, fd], axis=1)))


class ClassifierHead(Module):
    """affine(B -> hidden) + relu + affine(hidden -> k)."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        self.hidden = Linear(arch.bottleneck, arch.head_hidden, rng)
        self.out = Linear(arch.head_hidden, arch.n_classes, rng)

    def _children(self):
        return [("hidden", self.hidden), ("out", self.out)]

    def __call__(self, feats: Tensor) -> Tensor:
        return self.out(nx.relu(self.hidden(feats)))


class GradientReversal:
    """Identity on the forward pass, gradient times ``-eta`` on the way back."""

    def __init__(self, eta: float = 0.0):
        self.eta = eta

    def __call__(self, x: Tensor) -> Tensor:
        return nx.grad_reverse(x, self.eta)


def grl_apply(features: Tensor, eta: float) -> Tensor:
    return nx.grad_reverse(features, eta)


class MDDNet(Module):
    def __init__(self, arch: ArchConfig | None = None, seed: int = 0):
        self.arch = arch or ArchConfig()
        self.seed = seed
        rng = np.random.default_rng(self.seed)
        self.psi = FeatureExtractor(self.arch, rng)
        self.head = ClassifierHead(self.arch, rng)
        self.adv_head = ClassifierHead(self.arch, rng)
        self.grl = GradientReversal()

    def _children(self):
        return [("psi", self.psi), ("head", self.head), ("adv_head", self.adv_head)]

    def features(self, x_r, x_d) -> Tensor:
        return self.psi(x_r, x_d)

    def scores(self, x_r, x_d) -> np.ndarray:
        """Main-head scores, no graph recorded."""
        with nx.no_grad():
            return self.head(self.psi(x_r, x_d)).data

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}


def forward_features(net: MDDNet, sample) -> Tensor:
    """Bottleneck features of a single spectrogram sample, shape ``(B,)``."""
    x_r = np.asarray(sample.x_r, dtype=np.float64)
    x_d = np.asarray(sample.x_d, dtype=np.float64)
    return nx.reshape(net.features(x_r[None], x_d[None]), (-1,))


# --- checkpoint format ---------------------------------------------------
#
#   magic "MDDNET01" | u32 version | u32 len + arch JSON (utf-8) | u32 seed
#   u32 n_params | per param: u16 len + name, u8 ndim, u32 dims...
#   then every parameter as little-endian float64, manifest order.


def save_checkpoint(net: MDDNet, path) -> None:
    arch = json.dumps(net.arch.to_dict(), sort_keys=True).encode()
    params = list(net.named_parameters())
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(arch)) + arch
    buf += struct.pack("<II", net.seed & 0xFFFFFFFF, len(params))
    for name, p in params:
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.ndim)
        buf += struct.pack(f"<{p.ndim}I", *p.shape)
    for _, p in params:
        buf += p.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> MDDNet:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, alen = struct.unpack_from("<II", blob, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        arch = json.loads(blob[off : off + alen].decode())
        off += alen
        seed, count = struct.unpack_from("<II", blob, off)
        off += 8
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            name = blob[off + 2 : off + 2 + nlen].decode()
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            shape = struct.unpack_from(f"<{ndim}I", blob, off + 1)
            off += 1 + 4 * ndim
            manifest.append((name, shape))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: truncated or corrupt header") from exc
    net = MDDNet(ArchConfig(**arch), seed=seed)
    params = dict(net.named_parameters())
    if [n for n, _ in manifest] != list(params):
        raise CheckpointFormatError(f"{path}: parameter manifest does not match architecture")
    for name, shape in manifest:
        n = int(np.prod(shape))
        if off + 8 * n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated parameter block {name}")
        params[name].data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: trailing bytes after parameter blocks")
    return net
