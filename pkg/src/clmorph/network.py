"""Siamese registration network: shared encoder, projection head, single decoder.

The encoder runs on both images with the *same* parameter tensors.  Its
deepest level is average-pooled and linearly projected to a unit vector used
by the contrastive loss.  The decoder concatenates same-resolution features
of both branches, refines coarse-to-fine with trilinear upsampling and skip
connections, and ends in two 3x3x3 heads for the mean and log-variance of the
displacement field.

Input roles are asymmetric: ``decode(moving, fixed)`` predicts a field on
the fixed grid that pulls the moving image onto the fixed one.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndtensor as nt
from .errors import ConfigurationError, DimensionError, FormatError
from .ndtensor import Tensor

__all__ = [
    "NetworkConfig",
    "ProbabilisticField",
    "Network",
    "reparam_sample",
    "save_checkpoint_file",
    "load_checkpoint_file",
    "save_network",
    "load_network",
]

CHECKPOINT_MAGIC = b"CLMP"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    proj_dim: int = 64
    in_channels: int = 1
    slope: float = 0.2
    mu_init_std: float = 1e-5
    logvar_init_std: float = 1e-5
    logvar_init_bias: float = -10.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ConfigurationError(f"channels must be a non-empty list of positive ints, got {self.channels}")
        if self.proj_dim < 1:
            raise ConfigurationError(f"proj_dim must be >= 1, got {self.proj_dim}")

    @property
    def levels(self) -> int:
        return len(self.channels)


@dataclass
class ProbabilisticField:
    """Per-voxel Gaussian over displacements; tensors are [N, 3, D, H, W]."""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise DimensionError(f"mu {self.mu.shape} and logvar {self.logvar.shape} differ")

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.logvar.data)


def reparam_sample(field: ProbabilisticField, noise) -> Tensor:
    """z = mu + exp(logvar / 2) * noise, differentiable in mu and logvar."""
    noise = nt._as_tensor(noise)
    if noise.shape != field.mu.shape:
        raise DimensionError(f"noise {noise.shape} does not match field {field.mu.shape}")
    return field.mu + nt.exp(field.logvar * 0.5) * noise


@dataclass
class Pyramid:
    levels: list[Tensor] = field(default_factory=list)

    def select(self, rows) -> Pyramid:
        return Pyramid([nt.gather(t, rows) for t in self.levels])


class Network:
    """Parameters plus forward passes.  Parameter tensors are created zero-filled.

    Normalisation layers keep running statistics in ``buffers``; they are
    updated in training mode and used in evaluation mode.
    """

    def __init__(self, config: NetworkConfig | None = None):
        self.config = NetworkConfig() if config is None else config
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.training = True
        ch = self.config.channels
        prev = self.config.in_channels
        for lvl, c in enumerate(ch):
            self._conv(f"enc{lvl}", prev, c)
            self._norm(f"enc{lvl}", c)
            prev = c
        self._param("proj.w", (self.config.proj_dim, ch[-1]))
        self._param("proj.b", (self.config.proj_dim,))
        for lvl in reversed(range(len(ch))):
            c_in = 2 * ch[lvl] + (ch[lvl + 1] if lvl + 1 < len(ch) else 0)
            self._conv(f"dec{lvl}", c_in, ch[lvl])
            self._norm(f"dec{lvl}", ch[lvl])
        self._conv("head.mu", ch[0], 3)
        self._conv("head.logvar", ch[0], 3)

    def _param(self, name, shape):
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    def _conv(self, prefix, c_in, c_out, k=3):
        self._param(f"{prefix}.w", (c_out, c_in, k, k, k))
        self._param(f"{prefix}.b", (c_out,))

    def _norm(self, prefix, c):
        self._param(f"{prefix}.scale", (c,))
        self._param(f"{prefix}.shift", (c,))
        self.buffers[f"{prefix}.running_mean"] = np.zeros(c)
        self.buffers[f"{prefix}.running_var"] = np.ones(c)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def train(self, mode: bool = True) -> Network:
        self.training = mode
        return self

    def eval(self) -> Network:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward -----------------------------------------------------------
    def _block(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        x = nt.conv3d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], stride=1, pad=1)
        running = {"mean": self.buffers[f"{prefix}.running_mean"], "var": self.buffers[f"{prefix}.running_var"]}
        x = nt.batch_norm(x, p[f"{prefix}.scale"], p[f"{prefix}.shift"], running, training=self.training)
        return nt.leaky_relu(x, self.config.slope)

    def check_shape(self, spatial) -> None:
        step = 2 ** (self.config.levels - 1)
        if any(s % step for s in spatial):
            raise ConfigurationError(
                f"image extents {tuple(spatial)} must be divisible by {step} for {self.config.levels} levels"
            )

    def encode(self, images) -> Pyramid:
        """Feature pyramid of a batch [N, C, D, H, W], finest level first."""
        images = nt._as_tensor(images)
        if images.ndim == 3:
            images = nt.reshape(images, (1, 1, *images.shape))
        if images.ndim != 5 or images.shape[1] != self.config.in_channels:
            raise DimensionError(f"encode: expected [N,{self.config.in_channels},D,H,W], got {images.shape}")
        self.check_shape(images.shape[2:])
        levels = []
        x = images
        for lvl in range(self.config.levels):
            if lvl > 0:
                x = nt.avg_pool3d(x, 2)
            x = self._block(f"enc{lvl}", x)
            levels.append(x)
        return Pyramid(levels)

    def project(self, pyramid: Pyramid) -> Tensor:
        """Unit-norm projection [N, P] of the pooled deepest features."""
        pooled = nt.reduce_mean(pyramid.levels[-1], axis=(2, 3, 4))
        return nt.normalize(nt.linear(pooled, self.params["proj.w"], self.params["proj.b"]), axis=1)

    def decode(self, moving: Pyramid, fixed: Pyramid) -> ProbabilisticField:
        if len(moving.levels) != len(fixed.levels):
            raise DimensionError("decode: pyramids have different depths")
        for a, b in zip(moving.levels, fixed.levels):
            if a.shape != b.shape:
                raise DimensionError(f"decode: pyramid level shapes {a.shape} and {b.shape} differ")
        x = None
        for lvl in reversed(range(self.config.levels)):
            parts = [moving.levels[lvl], fixed.levels[lvl]]
            if x is not None:
                parts = [nt.upsample_trilinear(x, 2)] + parts
            x = self._block(f"dec{lvl}", nt.concat(parts, axis=1))
        p = self.params
        # both heads share one convolution pass
        w = nt.concat([p["head.mu.w"], p["head.logvar.w"]], axis=0)
        b = nt.concat([p["head.mu.b"], p["head.logvar.b"]], axis=0)
        out = nt.conv3d(x, w, b, stride=1, pad=1)
        mu = nt.take(out, (slice(None), slice(0, 3)))
        logvar = nt.take(out, (slice(None), slice(3, 6)))
        return ProbabilisticField(mu, logvar)

    def register(self, moving, fixed) -> ProbabilisticField:
        """Encode both images (one shared-weight pass) and decode the field on the fixed grid."""
        moving, fixed = nt._as_tensor(moving), nt._as_tensor(fixed)
        if moving.shape != fixed.shape:
            raise DimensionError(f"register: moving {moving.shape} and fixed {fixed.shape} differ")
        n = moving.shape[0]
        pyr = self.encode(nt.concat([moving, fixed], axis=0))
        return self.decode(pyr.select(range(n)), pyr.select(range(n, 2 * n)))

    # -- state -------------------------------------------------------------
    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        """Parameters followed by normalisation buffers, as copies."""
        out = OrderedDict((k, v.data.copy()) for k, v in self.params.items())
        out.update((k, v.copy()) for k, v in self.buffers.items())
        return out

    def load_state_dict(self, arrays) -> None:
        missing = [k for k in [*self.params, *self.buffers] if k not in arrays]
        if missing:
            raise FormatError(f"checkpoint lacks parameters: {', '.join(missing)}")
        for name in [*self.params, *self.buffers]:
            arr = np.asarray(arrays[name], dtype=np.float64)
            expected = self.params[name].shape if name in self.params else self.buffers[name].shape
            if arr.shape != expected:
                raise FormatError(f"parameter {name}: checkpoint shape {arr.shape} != expected {expected}")
            if name in self.params:
                self.params[name].data = arr.copy()
            else:
                self.buffers[name][...] = arr


# -- checkpoint files ------------------------------------------------------


def save_checkpoint_file(path, arrays, meta: dict) -> None:
    """Write named float64 arrays and a JSON metadata block.

    Layout (little-endian): magic b"CLMP", u16 version, u32 metadata length,
    UTF-8 JSON metadata, u32 tensor count, then per tensor: u16 name length,
    UTF-8 name, u8 rank, rank x u32 extents, raw f64 payload.
    """
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated while reading {what}", len(self.raw))
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint_file(path):
    """Return ``(meta, OrderedDict[name, array])`` from a CLMP file."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a CLMP checkpoint", 0)
    (version,) = r.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", 4)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata ({exc})", meta_at) from None
    (count,) = r.unpack("<I", "tensor count")
    arrays = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode()
        (ndim,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(nbytes, f"data of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes", r.pos)
    return meta, arrays


def save_network(path, network: Network, extra: dict | None = None) -> None:
    meta = {"kind": "network", "network": asdict(network.config)}
    if extra:
        meta.update(extra)
    save_checkpoint_file(path, network.state_dict(), meta)


def load_network(path) -> Network:
    """Rebuild a network from a network or training-state checkpoint."""
    meta, arrays = load_checkpoint_file(path)
    if "network" not in meta:
        raise FormatError(f"{path}: checkpoint has no network configuration", 10)
    net = Network(NetworkConfig(**meta["network"]))
    net.load_state_dict({k: v for k, v in arrays.items() if "/" not in k})
    return net
