"""Spatial transformer: resample volumes at ``p + z(p)``.

Displacements are in voxel units with component order (d, h, w).  Sample
positions falling outside the volume are clamped onto its border.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DimensionError
from .ndtensor import Tensor, _as_tensor, _make

__all__ = ["warp_trilinear", "warp_image", "warp_nearest", "jacobian_determinant", "identity_grid"]


def identity_grid(shape) -> np.ndarray:
    """Voxel coordinates of a (D, H, W) grid as an array [3, D, H, W]."""
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"))


def _cell(coord: np.ndarray, n: int):
    """Clamp sample coordinates along one axis and split them into cell index + fraction."""
    inside = (coord >= 0) & (coord <= n - 1)
    c = np.clip(coord, 0, n - 1)
    i0 = np.clip(np.floor(c), 0, max(n - 2, 0)).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, c - i0, inside


def warp_trilinear(vol, field) -> Tensor:
    """Pull-warp ``vol`` [N,C,D,H,W] by ``field`` [N,3,D,H,W]; differentiable in both."""
    vol, field = _as_tensor(vol), _as_tensor(field)
    if vol.ndim != 5 or field.ndim != 5:
        raise DimensionError(f"warp_trilinear: expected 5-D vol and field, got {vol.shape}, {field.shape}")
    n, c, d, h, w = vol.shape
    if field.shape != (n, 3, d, h, w):
        raise DimensionError(f"warp_trilinear: field {field.shape} does not match volume {vol.shape}")
    v = d * h * w
    grid = identity_grid((d, h, w))
    flat_vol = vol.data.reshape(n, c, v)

    out = np.empty((n, c, v))
    saved = []
    for b in range(n):
        pos = grid + field.data[b]
        (d0, d1, td, md), (h0, h1, th, mh), (w0, w1, tw, mw) = (
            _cell(pos[0], d),
            _cell(pos[1], h),
            _cell(pos[2], w),
        )
        corners = []
        for a, di, wd in ((0, d0, 1 - td), (1, d1, td)):
            for bb, hi, wh in ((0, h0, 1 - th), (1, h1, th)):
                for cc, wi, ww in ((0, w0, 1 - tw), (1, w1, tw)):
                    idx = ((di * h + hi) * w + wi).reshape(-1)
                    corners.append((a, bb, cc, idx, (wd * wh * ww).reshape(-1)))
        acc = np.zeros((c, v))
        for _, _, _, idx, wt in corners:
            acc += flat_vol[b][:, idx] * wt
        out[b] = acc
        saved.append((td, th, tw, md, mh, mw, corners))

    def backward(g):
        gflat = g.reshape(n, c, v)
        gvol = np.zeros((n, c, v)) if vol.requires_grad else None
        gfield = np.zeros((n, 3, d, h, w)) if field.requires_grad else None
        for b in range(n):
            td, th, tw, md, mh, mw, corners = saved[b]
            if gvol is not None:
                for _, _, _, idx, wt in corners:
                    for ch in range(c):
                        gvol[b, ch] += np.bincount(idx, weights=gflat[b, ch] * wt, minlength=v)
            if gfield is not None:
                weights_1d = (
                    (1 - td.reshape(-1), td.reshape(-1)),
                    (1 - th.reshape(-1), th.reshape(-1)),
                    (1 - tw.reshape(-1), tw.reshape(-1)),
                )
                dd = np.zeros(v)
                dh = np.zeros(v)
                dw = np.zeros(v)
                for a, bb, cc, idx, _ in corners:
                    val = (gflat[b] * flat_vol[b][:, idx]).sum(axis=0)
                    sd, sh, sw = (1.0 if a else -1.0), (1.0 if bb else -1.0), (1.0 if cc else -1.0)
                    dd += sd * weights_1d[1][bb] * weights_1d[2][cc] * val
                    dh += sh * weights_1d[0][a] * weights_1d[2][cc] * val
                    dw += sw * weights_1d[0][a] * weights_1d[1][bb] * val
                gfield[b, 0] = dd.reshape(d, h, w) * md
                gfield[b, 1] = dh.reshape(d, h, w) * mh
                gfield[b, 2] = dw.reshape(d, h, w) * mw
        return (None if gvol is None else gvol.reshape(vol.shape), gfield)

    return _make(out.reshape(n, c, d, h, w), (vol, field), backward)


def warp_image(image: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Trilinear pull-warp of a single (D,H,W) array by a [3,D,H,W] field."""
    image = np.asarray(image, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (3, *image.shape):
        raise DimensionError(f"warp_image: field {field.shape} does not match image {image.shape}")
    return warp_trilinear(image[None, None], field[None]).data[0, 0]


def warp_nearest(labels: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Nearest-neighbour pull-warp of an integer label map; never invents labels.

    Sample positions are rounded half-up then clamped to the volume.
    """
    labels = np.asarray(labels)
    field = np.asarray(field, dtype=np.float64)
    if labels.ndim != 3 or field.shape != (3, *labels.shape):
        raise DimensionError(f"warp_nearest: field {field.shape} does not match labels {labels.shape}")
    pos = identity_grid(labels.shape) + field
    idx = [
        np.clip(np.floor(pos[a] + 0.5), 0, labels.shape[a] - 1).astype(np.intp) for a in range(3)
    ]
    return labels[idx[0], idx[1], idx[2]]


def jacobian_determinant(field: np.ndarray) -> np.ndarray:
    """det(I + grad z) per voxel; central differences inside, one-sided on the border."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 4 or field.shape[0] != 3:
        raise DimensionError(f"jacobian_determinant: expected [3,D,H,W], got {field.shape}")
    if min(field.shape[1:]) < 3:
        raise ConfigurationError(f"jacobian_determinant: extents {field.shape[1:]} must be >= 3")
    jac = np.empty(field.shape[1:] + (3, 3))
    for comp in range(3):
        grads = np.gradient(field[comp], axis=(0, 1, 2))
        for ax in range(3):
            jac[..., comp, ax] = grads[ax] + (1.0 if comp == ax else 0.0)
    return np.linalg.det(jac)
