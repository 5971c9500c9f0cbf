"""Test-time use of a trained network: atlas-based segmentation and registration.

Both operations use the mean field only; no displacement is sampled.
Images are normalised to zero mean and unit variance before encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .errors import DimensionError
from .network import Network
from .synthdata import normalize_image
from .warp import jacobian_determinant, warp_image, warp_nearest

__all__ = ["predict_field", "segment_volume", "RegistrationResult", "register_volume"]


def predict_field(network: Network, moving: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """Mean displacement [3, D, H, W] on the grid of ``fixed`` that pulls ``moving`` onto it."""
    moving, fixed = np.asarray(moving, dtype=np.float64), np.asarray(fixed, dtype=np.float64)
    if moving.ndim != 3 or moving.shape != fixed.shape:
        raise DimensionError(f"expected two volumes of equal 3-D shape, got {moving.shape} and {fixed.shape}")
    was_training = network.training
    network.eval()
    try:
        prob = network.register(
            nt.Tensor(normalize_image(moving)[None, None]), nt.Tensor(normalize_image(fixed)[None, None])
        )
    finally:
        network.train(was_training)
    return prob.mu.data[0]


def segment_volume(network: Network, unaligned, atlas, atlas_labels, zero_field: bool = False) -> np.ndarray:
    """Labels for ``unaligned`` obtained by warping the atlas label map onto it.

    The atlas is the moving image, so the field lives on the unaligned grid and
    ``warp_nearest`` pulls atlas labels to every unaligned voxel.  With
    ``zero_field`` the network is skipped and the atlas labels are copied.
    """
    atlas_labels = np.asarray(atlas_labels)
    if atlas_labels.shape != np.shape(unaligned):
        raise DimensionError(f"atlas labels {atlas_labels.shape} and image {np.shape(unaligned)} differ")
    if zero_field:
        field = np.zeros((3, *atlas_labels.shape))
    else:
        field = predict_field(network, atlas, unaligned)
    return warp_nearest(atlas_labels, field)


@dataclass
class RegistrationResult:
    warped: np.ndarray
    field: np.ndarray
    jacobian_min: float
    jacobian_max: float
    folding_fraction: float

    def report(self) -> str:
        return (
            f"jacobian_min {self.jacobian_min:.6g}\n"
            f"jacobian_max {self.jacobian_max:.6g}\n"
            f"folding_fraction {self.folding_fraction:.6g}\n"
        )


def register_volume(network: Network, unaligned, atlas) -> RegistrationResult:
    """Warp ``unaligned`` into atlas space; the field lives on the atlas grid."""
    unaligned = np.asarray(unaligned, dtype=np.float64)
    field = predict_field(network, unaligned, atlas)
    det = jacobian_determinant(field)
    return RegistrationResult(
        warped=warp_image(unaligned, field),
        field=field,
        jacobian_min=float(det.min()),
        jacobian_max=float(det.max()),
        folding_fraction=float((det <= 0).mean()),
    )
