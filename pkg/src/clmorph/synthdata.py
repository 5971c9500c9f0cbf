"""Synthetic ellipsoid anatomy, smooth ground-truth deformations, augmentation and CLMV files.

Every generator is a pure function of its SyntheticSpec and seed.

CLMV layout (little-endian)::

    offset 0   4s   magic b"CLMV"
    offset 4   u16  format version (1)
    offset 6   u8   dtype code: 0 = f64 image, 1 = u8 labels, 2 = f64 3-vector field
    offset 7   3u32 extents D, H, W
    offset 19  3f32 spacing in mm (metadata only)
    offset 31  payload, C-order; fields store 3 components of D*H*W each
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DimensionError, FormatError, GenerationError
from .warp import identity_grid, jacobian_determinant, warp_image, warp_nearest

__all__ = [
    "Volume",
    "SyntheticSpec",
    "AugmentParams",
    "make_atlas",
    "make_smooth_field",
    "deform_sample",
    "sample_augmentation",
    "apply_augmentation",
    "augment",
    "normalize_image",
    "read_volume",
    "write_volume",
    "make_dataset",
    "write_dataset",
    "sample_paths",
]

MAGIC = b"CLMV"
VERSION = 1
IMAGE, LABELS, FIELD = 0, 1, 2
_HEADER = struct.Struct("<4sHB3I3f")


@dataclass
class Volume:
    """A 3-D image, label map or displacement field with voxel spacing metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape[-3:]

    @property
    def kind(self) -> int:
        if self.data.dtype == np.uint8:
            return LABELS
        return FIELD if self.data.ndim == 4 else IMAGE


@dataclass
class SyntheticSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    n_structures: int = 16
    axis_range: tuple[float, float] = (0.05, 0.1)
    center_range: float = 0.3
    intensity_range: tuple[float, float] = (0.3, 1.0)
    noise_std: float = 0.005
    blur_sigma: float = 1.0
    amplitude: float = 3.0
    radius: float = 4.0
    min_visible: float = 0.3
    max_retries: int = 50
    seed: int = 7

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigurationError(f"shape must be three positive extents, got {self.shape}")
        if not 1 <= self.n_structures <= 255:
            raise ConfigurationError(f"n_structures must be in 1..255, got {self.n_structures}")
        lo, hi = self.axis_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"axis_range must satisfy 0 < lo <= hi, got {self.axis_range}")
        if self.amplitude < 0 or self.radius < 0 or self.noise_std < 0 or self.blur_sigma < 0:
            raise ConfigurationError("amplitude, radius, noise_std and blur_sigma must be >= 0")


# -- atlas -------------------------------------------------------------------


def _ellipsoid_mask(shape, center, axes) -> np.ndarray:
    grid = identity_grid(shape)
    r2 = sum(((grid[i] - center[i]) / axes[i]) ** 2 for i in range(3))
    return r2 <= 1.0


def render_atlas(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free atlas image in [0, 1] and its uint8 label map."""
    shape = np.array(spec.shape, dtype=np.float64)
    centre = (shape - 1) / 2
    k = spec.n_structures
    lo_i, hi_i = spec.intensity_range
    intensities = np.linspace(hi_i, lo_i, k) if k > 1 else np.array([hi_i])
    intensities = rng.permutation(intensities)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    for lab in range(1, k + 1):
        for _ in range(spec.max_retries):
            offset = rng.uniform(-spec.center_range, spec.center_range, 3) * shape
            axes = rng.uniform(*spec.axis_range, 3) * shape
            mask = _ellipsoid_mask(spec.shape, centre + offset, axes)
            if not mask.any():
                continue
            trial = labels.copy()
            trial[mask] = lab
            # earlier structures must keep a visible share of their voxels
            if all(
                (trial == prev).sum() >= spec.min_visible * max((labels == prev).sum(), 1)
                for prev in range(1, lab)
            ):
                labels = trial
                break
        else:
            raise GenerationError(f"could not place structure {lab} after {spec.max_retries} attempts")
    image = np.zeros(spec.shape)
    for lab in range(1, k + 1):
        image[labels == lab] = intensities[lab - 1]
    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.blur_sigma, mode="nearest")
    return image, labels


def _add_noise(image: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    if std > 0:
        image = image + rng.normal(0.0, std, image.shape)
    return np.clip(image, 0.0, 1.0)


def make_atlas(spec: SyntheticSpec, seed: int | None = None) -> tuple[Volume, Volume]:
    """Atlas image and labels with ``n_structures`` ellipsoids of distinct intensity."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    image, labels = render_atlas(spec, rng)
    return Volume(_add_noise(image, spec.noise_std, rng)), Volume(labels)


# -- deformations ------------------------------------------------------------


def make_smooth_field(spec: SyntheticSpec, seed: int | None = None, index: int = 0) -> np.ndarray:
    """Gaussian-smoothed random displacement field [3,D,H,W] with max norm ``amplitude``.

    Redrawn until the Jacobian determinant exceeds 0.1 everywhere.
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1, index])
    if spec.amplitude == 0:
        return np.zeros((3, *spec.shape))
    for _ in range(spec.max_retries):
        noise = rng.standard_normal((3, *spec.shape))
        smooth = np.stack([ndimage.gaussian_filter(c, spec.radius, mode="reflect") for c in noise])
        peak = np.sqrt((smooth**2).sum(axis=0)).max()
        if peak == 0:
            continue
        z = smooth * (spec.amplitude / peak)
        if min(spec.shape) < 3 or jacobian_determinant(z).min() > 0.1:
            return z
    raise GenerationError(
        f"no field with Jacobian determinant > 0.1 after {spec.max_retries} draws "
        f"(amplitude {spec.amplitude}, radius {spec.radius})"
    )


def deform_sample(image: Volume, labels: Volume, field: np.ndarray) -> tuple[Volume, Volume]:
    """Pull-warp an atlas by ``field``: trilinear for the image, nearest for the labels."""
    return (
        Volume(warp_image(image.data, field), image.spacing),
        Volume(warp_nearest(labels.data, field), labels.spacing),
    )


def make_dataset(spec: SyntheticSpec, n: int):
    """Atlas plus ``n`` (image, labels, field) triplets, each a pure function of (spec, index)."""
    if n < 0:
        raise ConfigurationError(f"number of samples must be >= 0, got {n}")
    rng = np.random.default_rng([spec.seed, 0])
    clean, labels = render_atlas(spec, rng)
    atlas = Volume(_add_noise(clean, spec.noise_std, rng))
    atlas_labels = Volume(labels)
    samples = []
    for i in range(n):
        z = make_smooth_field(spec, index=i)
        img, lab = deform_sample(Volume(clean), atlas_labels, z)
        noisy = _add_noise(img.data, spec.noise_std, np.random.default_rng([spec.seed, 2, i]))
        samples.append((Volume(noisy), lab, Volume(z)))
    return atlas, atlas_labels, samples


def sample_paths(root, index: int) -> tuple[Path, Path, Path]:
    root = Path(root)
    stem = f"sample_{index:04d}"
    return root / f"{stem}.clmv", root / f"{stem}_labels.clmv", root / f"{stem}_field.clmv"


def write_dataset(root, spec: SyntheticSpec, n: int) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    atlas, atlas_labels, samples = make_dataset(spec, n)
    write_volume(root / "atlas.clmv", atlas)
    write_volume(root / "atlas_labels.clmv", atlas_labels)
    for i, (img, lab, z) in enumerate(samples):
        p_img, p_lab, p_field = sample_paths(root, i)
        write_volume(p_img, img)
        write_volume(p_lab, lab)
        write_volume(p_field, z)


# -- augmentation ------------------------------------------------------------


@dataclass
class AugmentParams:
    flip: bool = False
    angle: float = 0.0  # degrees
    axis: int = 0
    origin: tuple[int, int, int] = (0, 0, 0)
    crop: tuple[int, int, int] | None = None


def sample_augmentation(seed, shape, crop=None, max_angle: float = 10.0) -> AugmentParams:
    """Draw a y-flip, a rotation about one random axis, and a crop origin."""
    shape = tuple(shape)
    crop = shape if crop is None else tuple(crop)
    if any(c > s for c, s in zip(crop, shape)) or min(crop) < 1:
        raise ConfigurationError(f"crop {crop} does not fit volume {shape}")
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-max_angle, max_angle))
    axis = int(rng.integers(3))
    origin = tuple(int(rng.integers(s - c + 1)) for s, c in zip(shape, crop))
    return AugmentParams(flip=flip, angle=angle, axis=axis, origin=origin, crop=crop)


def _rotation_field(shape, angle_deg: float, axis: int) -> np.ndarray:
    grid = identity_grid(shape)
    centre = np.array([(n - 1) / 2 for n in shape]).reshape(3, 1, 1, 1)
    rel = grid - centre
    a, b = [i for i in range(3) if i != axis]
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    rotated = rel.copy()
    rotated[a] = c * rel[a] - s * rel[b]
    rotated[b] = s * rel[a] + c * rel[b]
    return rotated - rel


def apply_augmentation(image: np.ndarray, labels: np.ndarray, params: AugmentParams):
    """Apply flip, then rotation, then crop identically to an image and its labels."""
    if image.shape != labels.shape:
        raise DimensionError(f"image {image.shape} and labels {labels.shape} differ")
    if params.flip:
        image, labels = image[:, ::-1, :], labels[:, ::-1, :]
    if params.angle:
        z = _rotation_field(image.shape, params.angle, params.axis)
        image, labels = warp_image(image, z), warp_nearest(labels, z)
    crop = image.shape if params.crop is None else tuple(params.crop)
    if any(o + c > s for o, c, s in zip(params.origin, crop, image.shape)):
        raise ConfigurationError(f"crop {crop} at {params.origin} does not fit volume {image.shape}")
    sl = tuple(slice(o, o + c) for o, c in zip(params.origin, crop))
    return np.ascontiguousarray(image[sl]), np.ascontiguousarray(labels[sl])


def augment(image: np.ndarray, labels: np.ndarray, seed, crop=None, max_angle: float = 10.0):
    params = sample_augmentation(seed, image.shape, crop, max_angle)
    return apply_augmentation(image, labels, params)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance (constant images are only centred)."""
    image = np.asarray(image, dtype=np.float64)
    centred = image - image.mean()
    std = centred.std()
    return centred / std if std > 0 else centred


# -- CLMV files --------------------------------------------------------------


def write_volume(path, volume: Volume) -> None:
    data = volume.data
    kind = volume.kind
    if kind == FIELD and data.shape[0] != 3:
        raise DimensionError(f"vector fields must have 3 components, got {data.shape}")
    if kind != FIELD and data.ndim != 3:
        raise DimensionError(f"volumes must be 3-D, got {data.shape}")
    dtype = "<u1" if kind == LABELS else "<f8"
    header = _HEADER.pack(MAGIC, VERSION, kind, *volume.shape, *(float(s) for s in volume.spacing))
    Path(path).write_bytes(header + np.ascontiguousarray(data, dtype=dtype).tobytes())


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a CLMV volume", 0)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", len(raw))
    _, version, kind, d, h, w, sd, sh, sw = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    if kind not in (IMAGE, LABELS, FIELD):
        raise FormatError(f"{path}: unknown dtype code {kind}", 6)
    shape = (d, h, w) if kind != FIELD else (3, d, h, w)
    itemsize = 1 if kind == LABELS else 8
    expected = _HEADER.size + itemsize * int(np.prod(shape))
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes", len(raw))
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes", expected)
    dtype = "<u1" if kind == LABELS else "<f8"
    data = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(shape)
    data = data.astype(np.uint8 if kind == LABELS else np.float64)
    return Volume(data, (float(sd), float(sh), float(sw)))
