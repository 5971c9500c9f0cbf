import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clmorph import ndtensor as nt
from clmorph.errors import ConfigurationError, DimensionError
from clmorph.ndtensor import Tensor
from clmorph.warp import identity_grid, jacobian_determinant, warp_image, warp_nearest, warp_trilinear


def shift_field(shape, offset):
    field = np.zeros((3, *shape))
    for a in range(3):
        field[a] = offset[a]
    return field


def test_zero_field_is_bit_exact_identity():
    rng = np.random.default_rng(0)
    vol = rng.standard_normal((2, 3, 5, 6, 7))
    out = warp_trilinear(Tensor(vol), Tensor(np.zeros((2, 3, 5, 6, 7)))).data
    assert np.array_equal(out, vol)
    labels = rng.integers(0, 5, (5, 6, 7)).astype(np.uint8)
    assert np.array_equal(warp_nearest(labels, np.zeros((3, 5, 6, 7))), labels)


@pytest.mark.parametrize("offset", [(1, 0, 0), (0, -2, 1), (2, 1, -1)])
def test_integer_shift_exact_on_interior(offset):
    rng = np.random.default_rng(1)
    img = rng.standard_normal((8, 8, 8))
    out = warp_image(img, shift_field(img.shape, offset))
    labels = rng.integers(0, 4, img.shape)
    lab_out = warp_nearest(labels, shift_field(img.shape, offset))
    inner = tuple(slice(2, -2) for _ in range(3))
    src = tuple(slice(2 + o, 6 + o) for o in offset)
    assert np.array_equal(out[inner], img[src])
    assert np.array_equal(lab_out[inner], labels[src])


def test_trilinear_exact_on_affine_ramp():
    rng = np.random.default_rng(2)
    shape = (9, 10, 11)
    grid = identity_grid(shape)
    coef, const = rng.standard_normal(3), rng.standard_normal()
    ramp = np.tensordot(coef, grid, axes=1) + const
    field = rng.uniform(-1.5, 1.5, (3, *shape))
    out = warp_image(ramp, field)
    pos = grid + field
    inside = np.all([(pos[a] >= 0) & (pos[a] <= shape[a] - 1) for a in range(3)], axis=0)
    expected = np.tensordot(coef, pos, axes=1) + const
    assert inside.sum() > 0.5 * inside.size
    assert np.max(np.abs(out[inside] - expected[inside])) < 1e-12


def test_clamping_outside():
    img = np.arange(4.0)[:, None, None] * np.ones((4, 2, 2))
    out = warp_image(img, shift_field(img.shape, (10, 0, 0)))
    assert np.all(out == 3.0)


def test_nearest_rounds_half_up_and_never_invents_labels():
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    labels[2] = 7
    out = warp_nearest(labels, shift_field(labels.shape, (0.5, 0, 0)))
    assert np.all(out[1] == 7) and np.all(out[2] == 0)
    rng = np.random.default_rng(3)
    out = warp_nearest(labels, rng.uniform(-3, 3, (3, 4, 4, 4)))
    assert set(np.unique(out)) <= {0, 7}


def test_shape_errors():
    with pytest.raises(DimensionError):
        warp_trilinear(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 3, 3, 3, 2))))
    with pytest.raises(DimensionError):
        warp_nearest(np.ones((3, 3, 3)), np.ones((2, 3, 3, 3)))


def test_gradients_volume_and_field():
    rng = np.random.default_rng(4)
    vol = Tensor(rng.standard_normal((2, 2, 4, 5, 4)), requires_grad=True)
    # keep samples off the cell boundaries where the interpolant has kinks
    field = Tensor(rng.uniform(-0.4, 0.4, (2, 3, 4, 5, 4)) + 0.25, requires_grad=True)
    probe = rng.standard_normal(vol.shape)
    err = nt.gradcheck(lambda v, f: nt.reduce_sum(warp_trilinear(v, f) * probe), [vol, field], n_coords=30, h=1e-6, rng=rng)
    assert err < 1e-4


def test_jacobian_of_translation_is_one():
    det = jacobian_determinant(shift_field((5, 6, 7), (1.3, -2.0, 0.4)))
    assert np.allclose(det, 1.0, atol=1e-15)


def test_jacobian_of_linear_field():
    shape = (6, 6, 6)
    a = np.array([[0.1, 0.2, 0.0], [0.0, -0.3, 0.1], [0.05, 0.0, 0.2]])
    field = np.tensordot(a, identity_grid(shape), axes=1)
    assert np.allclose(jacobian_determinant(field), np.linalg.det(np.eye(3) + a))


def test_jacobian_small_extent():
    with pytest.raises(ConfigurationError):
        jacobian_determinant(np.zeros((3, 2, 5, 5)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-2, 2), st.integers(-2, 2), st.integers(-2, 2))
def test_integer_shift_property(seed, a, b, c):
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((7, 7, 7))
    out = warp_image(img, shift_field(img.shape, (a, b, c)))
    ref = img[
        np.clip(np.arange(7) + a, 0, 6)[:, None, None],
        np.clip(np.arange(7) + b, 0, 6)[None, :, None],
        np.clip(np.arange(7) + c, 0, 6)[None, None, :],
    ]
    assert np.array_equal(out, ref)
