"""Training loop: initialisation, Adam, step learning-rate decay, checkpoints.

Every random draw (shuffling, pair orientation, augmentation, reparameterisation
noise) comes from the single generator held in ``TrainState``, so a run is a
pure function of its configuration and seed, and a resumed run continues
bit-identically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import ndtensor as nt
from .errors import ConfigurationError, FormatError, NumericalError
from .losses import LossConfig, contrastive_loss, gradient_penalty, kl_smooth_loss, recon_loss, total_loss
from .network import Network, NetworkConfig, load_checkpoint_file, reparam_sample, save_checkpoint_file
from .synthdata import apply_augmentation, normalize_image, read_volume, sample_augmentation, sample_paths
from .warp import warp_trilinear

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainState",
    "Dataset",
    "load_dataset",
    "init_parameters",
    "adam_step",
    "lr_at",
    "train_step",
    "train_epoch",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "LOG_COLUMNS",
]

LOG_COLUMNS = ("epoch", "step", "lr", "L_total", "L_recon", "L_smooth", "L_contrast", "grad_norm")
PAIR_MODES = ("atlas", "random")
DIRECTIONS = ("atlas_to_sample", "sample_to_atlas", "both")


@dataclass
class TrainConfig:
    lr0: float = 3e-3
    lr_decay: float = 0.1
    decay_every: int = 20
    epochs: int = 60
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 7
    use_recon: bool = True
    use_smooth: bool = True
    use_contrast: bool = True
    grad_clip: float = 10.0
    sample_z: bool = True
    pair_mode: str = "atlas"
    direction: str = "atlas_to_sample"
    augment: bool = False
    crop: tuple[int, int, int] | None = None
    max_angle: float = 10.0
    train_samples: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.use_contrast and self.batch_size < 2:
            raise ConfigurationError("contrastive loss needs batch_size >= 2 (or disable it)")
        if self.pair_mode not in PAIR_MODES:
            raise ConfigurationError(f"pair_mode must be one of {PAIR_MODES}, got {self.pair_mode!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigurationError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if not self.lr0 > 0 or self.decay_every < 1:
            raise ConfigurationError("lr0 must be > 0 and decay_every >= 1")
        if not (self.use_recon or self.use_smooth or self.use_contrast):
            raise ConfigurationError("at least one loss term must be enabled")


@dataclass
class TrainState:
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    adam_t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, seed: int) -> TrainState:
        return cls(rng=np.random.default_rng([seed, 100]))


@dataclass
class Dataset:
    """Normalised images; labels and ground-truth fields kept for evaluation."""

    atlas: np.ndarray
    atlas_labels: np.ndarray
    images: list[np.ndarray]
    labels: list[np.ndarray]
    fields: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


def load_dataset(root, indices=None) -> Dataset:
    root = Path(root)
    atlas = read_volume(root / "atlas.clmv").data
    atlas_labels = read_volume(root / "atlas_labels.clmv").data
    if indices is None:
        indices = []
        while sample_paths(root, len(indices))[0].exists():
            indices.append(len(indices))
    images, labels, fields = [], [], []
    for i in indices:
        p_img, p_lab, p_field = sample_paths(root, i)
        images.append(normalize_image(read_volume(p_img).data))
        labels.append(read_volume(p_lab).data)
        if p_field.exists():
            fields.append(read_volume(p_field).data)
    return Dataset(normalize_image(atlas), atlas_labels, images, labels, fields)


# -- parameters and optimiser --------------------------------------------------


def init_parameters(network: Network, seed: int) -> Network:
    """He-normal convolutions, N(1, 0.1)/N(0, 0.1) norm affine, near-silent output heads."""
    cfg = network.config
    rng = np.random.default_rng([seed, 200])
    for name, p in network.params.items():
        shape = p.shape
        if name == "head.mu.w":
            p.data = rng.normal(0.0, cfg.mu_init_std, shape) if cfg.mu_init_std > 0 else np.zeros(shape)
        elif name == "head.logvar.w":
            p.data = rng.normal(0.0, cfg.logvar_init_std, shape) if cfg.logvar_init_std > 0 else np.zeros(shape)
        elif name == "head.logvar.b":
            p.data = np.full(shape, float(cfg.logvar_init_bias))
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            p.data = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        elif name.endswith(".scale"):
            p.data = 1.0 + rng.normal(0.0, 0.1, shape)
        elif name.endswith(".shift"):
            p.data = rng.normal(0.0, 0.1, shape)
        else:
            p.data = np.zeros(shape)
        p.grad = None
    for name, buf in network.buffers.items():
        buf[...] = 1.0 if name.endswith("running_var") else 0.0
    return network


def adam_step(params: dict, grads: dict, state: TrainState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update, in place; a missing gradient counts as zero."""
    state.adam_t += 1
    t = state.adam_t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_decay ** (epoch // config.decay_every)


# -- training ------------------------------------------------------------------


def _batch_inputs(dataset: Dataset, batch, state: TrainState, config: TrainConfig):
    """Unique images to encode, moving/fixed rows, and contrastive (anchor, positive) rows."""
    b = len(batch)
    if config.pair_mode == "random":
        pool = [dataset.atlas] + [dataset.images[i] for i in range(len(dataset))]
        firsts, seconds = [], []
        for _ in range(b):
            i, j = state.rng.choice(len(pool), size=2, replace=False)
            firsts.append(pool[i])
            seconds.append(pool[j])
        images = firsts + seconds
        pairs = [(k, b + k) for k in range(b)]
        return images, list(range(b)), list(range(b, 2 * b)), pairs

    samples = [dataset.images[i] for i in batch]
    if config.augment:
        images_s, images_a = [], []
        for img in samples:
            params = sample_augmentation(state.rng.integers(2**63), img.shape, config.crop, config.max_angle)
            dummy = np.zeros(img.shape, dtype=np.uint8)
            images_s.append(apply_augmentation(img, dummy, params)[0])
            images_a.append(apply_augmentation(dataset.atlas, dummy, params)[0])
        images = images_s + images_a
        atlas_rows = list(range(b, 2 * b))
    else:
        images = samples + [dataset.atlas]
        atlas_rows = [b] * b
    pairs = [(k, atlas_rows[k]) for k in range(b)]
    moving, fixed = [], []
    for k in range(b):
        if config.direction == "atlas_to_sample":
            to_atlas = False
        elif config.direction == "sample_to_atlas":
            to_atlas = True
        else:
            to_atlas = bool(state.rng.random() < 0.5)
        moving.append(k if to_atlas else atlas_rows[k])
        fixed.append(atlas_rows[k] if to_atlas else k)
    return images, moving, fixed, pairs


def train_step(dataset: Dataset, batch, network: Network, state: TrainState, config: TrainConfig) -> dict:
    """One optimiser step on ``batch`` (sample indices); returns the log record."""
    lr = lr_at(state.epoch, config)
    loss_cfg = config.loss
    images, moving, fixed, pairs = _batch_inputs(dataset, batch, state, config)
    b = len(moving)
    stack = nt.Tensor(np.stack(images)[:, None])
    network.train()
    network.zero_grad()
    pyramid = network.encode(stack)
    prob = network.decode(pyramid.select(moving), pyramid.select(fixed))
    if config.sample_z:
        noise = state.rng.standard_normal(prob.mu.shape)
        z = reparam_sample(prob, noise)
    else:
        z = prob.mu
    scale = 1.0 / b
    recon = smooth = contrast = penalty = None
    if config.use_recon:
        warped = warp_trilinear(nt.gather(stack, moving), z)
        recon = recon_loss(stack.data[fixed], warped, loss_cfg.sigma2) * scale
    if config.use_smooth:
        smooth = kl_smooth_loss(prob.mu, prob.logvar) * scale
    if config.use_contrast:
        proj = network.project(pyramid)
        contrast = contrastive_loss(proj, pairs, loss_cfg.tau, loss_cfg.symmetric)
    if loss_cfg.grad_penalty > 0:
        penalty = gradient_penalty(prob.mu) * scale
    loss, parts = total_loss(recon, smooth, contrast, loss_cfg, penalty)
    if not all(math.isfinite(v) for v in parts.values()):
        raise NumericalError(
            "non-finite loss at epoch {} step {}: {}".format(
                state.epoch, state.step, ", ".join(f"{k}={v!r}" for k, v in parts.items())
            )
        )
    loss.backward()

    grads = {k: p.grad for k, p in network.params.items()}
    sq = sum(float((g * g).sum()) for g in grads.values() if g is not None)
    grad_norm = math.sqrt(sq)
    if config.grad_clip and grad_norm > config.grad_clip:
        log.info("step %d: clipping gradient norm %.4g to %.4g", state.step, grad_norm, config.grad_clip)
        factor = config.grad_clip / grad_norm
        grads = {k: (None if g is None else g * factor) for k, g in grads.items()}
    adam_step(network.params, grads, state, lr, config.beta1, config.beta2, config.eps)
    network.zero_grad()

    record = {
        "epoch": state.epoch,
        "step": state.step,
        "lr": lr,
        "L_total": parts["total"],
        "L_recon": parts["recon"],
        "L_smooth": parts["smooth"],
        "L_contrast": parts["contrast"],
        "grad_norm": grad_norm,
    }
    state.step += 1
    state.history.append(record)
    return record


def _train_indices(dataset: Dataset, config: TrainConfig) -> int:
    n = len(dataset) if config.train_samples <= 0 else min(config.train_samples, len(dataset))
    if n < 1:
        raise ConfigurationError("dataset has no training samples")
    return n


def train_epoch(dataset: Dataset, network: Network, state: TrainState, config: TrainConfig, on_step=None) -> list:
    """One shuffled pass over the training samples; returns the epoch's log records."""
    n = _train_indices(dataset, config)
    order = state.rng.permutation(n)
    min_batch = 2 if config.use_contrast else 1
    records = []
    for start in range(0, n, config.batch_size):
        batch = [int(i) for i in order[start : start + config.batch_size]]
        if len(batch) < min_batch:
            continue
        rec = train_step(dataset, batch, network, state, config)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    state.epoch += 1
    return records


def fit(
    dataset: Dataset,
    config: TrainConfig,
    network: Network | None = None,
    state: TrainState | None = None,
    on_step: Callable | None = None,
    on_epoch: Callable | None = None,
):
    """Train from scratch (or resume ``state``) until ``config.epochs``; returns (network, state)."""
    if network is None:
        network = init_parameters(Network(config.network), config.seed)
    if state is None:
        state = TrainState.fresh(config.seed)
    network.check_shape(dataset.atlas.shape)
    while state.epoch < config.epochs:
        records = train_epoch(dataset, network, state, config, on_step)
        if on_epoch is not None:
            on_epoch(state.epoch, records)
    return network, state


# -- checkpoints -----------------------------------------------------------------


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    loss = LossConfig(**d.pop("loss", {}))
    net = NetworkConfig(**d.pop("network", {}))
    if d.get("crop") is not None:
        d["crop"] = tuple(d["crop"])
    return TrainConfig(loss=loss, network=net, **d)


def save_checkpoint(path, network: Network, state: TrainState, config: TrainConfig) -> None:
    arrays = dict(network.state_dict())
    for name in network.params:
        if name in state.m:
            arrays[f"adam_m/{name}"] = state.m[name]
            arrays[f"adam_v/{name}"] = state.v[name]
    meta = {
        "kind": "train_state",
        "network": asdict(network.config),
        "train": config_to_dict(config),
        "step": state.step,
        "epoch": state.epoch,
        "adam_t": state.adam_t,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
    }
    save_checkpoint_file(path, arrays, meta)


def load_checkpoint(path):
    """Return ``(network, state, config)`` from a training-state checkpoint."""
    meta, arrays = load_checkpoint_file(path)
    if meta.get("kind") != "train_state":
        raise FormatError(f"{path}: not a training-state checkpoint", 10)
    config = config_from_dict(meta["train"])
    network = Network(NetworkConfig(**meta["network"]))
    network.load_state_dict({k: v for k, v in arrays.items() if "/" not in k})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(
        rng=rng,
        step=meta["step"],
        epoch=meta["epoch"],
        adam_t=meta["adam_t"],
        m={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v/")},
        history=list(meta["history"]),
    )
    return network, state, config
