import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clmorph.errors import ConfigurationError, FormatError, GenerationError
from clmorph.synthdata import (
    AugmentParams,
    SyntheticSpec,
    Volume,
    apply_augmentation,
    augment,
    deform_sample,
    make_atlas,
    make_dataset,
    make_smooth_field,
    normalize_image,
    read_volume,
    sample_augmentation,
    write_dataset,
    write_volume,
)
from clmorph.warp import identity_grid, jacobian_determinant


def dice(a, b):
    return 2 * np.count_nonzero(a & b) / (a.sum() + b.sum())


class TestAtlas:
    def test_single_centred_sphere_matches_analytic_mask(self):
        spec = SyntheticSpec(shape=(17, 17, 17), n_structures=1, axis_range=(0.25, 0.25), center_range=0.0, noise_std=0.0)
        _, labels = make_atlas(spec)
        grid = identity_grid(spec.shape)
        r = 0.25 * 17
        analytic = (((grid - 8.0) / r) ** 2).sum(axis=0) <= 1.0
        assert np.array_equal(labels.data == 1, analytic)

    def test_deterministic(self):
        spec = SyntheticSpec(shape=(16, 16, 16), n_structures=4, axis_range=(0.1, 0.2))
        a1, l1 = make_atlas(spec, 3)
        a2, l2 = make_atlas(spec, 3)
        assert np.array_equal(a1.data, a2.data) and np.array_equal(l1.data, l2.data)
        a3, _ = make_atlas(spec, 4)
        assert not np.array_equal(a1.data, a3.data)

    def test_labels_intensities_and_range(self):
        spec = SyntheticSpec(shape=(24, 24, 24), n_structures=5)
        image, labels = make_atlas(spec)
        assert set(np.unique(labels.data)) <= set(range(6))
        assert labels.data.dtype == np.uint8
        assert 0.0 <= image.data.min() and image.data.max() <= 1.0

    def test_label_voxel_counts_within_bounds(self):
        spec = SyntheticSpec(shape=(20, 20, 20), n_structures=3, axis_range=(0.1, 0.2))
        lo, hi = spec.axis_range
        cap = 4 / 3 * np.pi * (hi * 20) ** 3 + 1
        for seed in range(50):
            _, labels = make_atlas(spec, seed)
            first = labels.data == 1
            counts = [np.count_nonzero(labels.data == k) for k in range(1, 4)]
            assert all(0 < c <= cap for c in counts)
            assert first.sum() >= 1

    def test_unplaceable_structures(self):
        spec = SyntheticSpec(shape=(8, 8, 8), n_structures=3, axis_range=(2.0, 2.0), center_range=0.0, max_retries=3)
        with pytest.raises(GenerationError):
            make_atlas(spec)

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            SyntheticSpec(n_structures=0)
        with pytest.raises(ConfigurationError):
            SyntheticSpec(axis_range=(0.3, 0.1))
        with pytest.raises(ConfigurationError):
            SyntheticSpec(amplitude=-1)


class TestFields:
    def test_zero_amplitude(self):
        assert not make_smooth_field(SyntheticSpec(shape=(8, 8, 8), amplitude=0.0)).any()

    def test_max_norm_equals_amplitude(self):
        z = make_smooth_field(SyntheticSpec(shape=(16, 16, 16), amplitude=2.0))
        assert np.sqrt((z**2).sum(axis=0)).max() == pytest.approx(2.0)

    def test_jacobian_over_seeds_at_defaults(self):
        spec = SyntheticSpec()
        for seed in range(20):
            assert jacobian_determinant(make_smooth_field(spec, seed)).min() > 0.1

    def test_regeneration_gives_up(self):
        spec = SyntheticSpec(shape=(12, 12, 12), amplitude=30.0, radius=1.0, max_retries=2)
        with pytest.raises(GenerationError):
            make_smooth_field(spec)

    def test_deform_zero_field_copies(self):
        spec = SyntheticSpec(shape=(12, 12, 12), n_structures=3, axis_range=(0.15, 0.25))
        img, lab = make_atlas(spec)
        out_img, out_lab = deform_sample(img, lab, np.zeros((3, 12, 12, 12)))
        assert np.array_equal(out_img.data, img.data) and np.array_equal(out_lab.data, lab.data)

    def test_deformation_changes_labels(self):
        spec = SyntheticSpec()
        _, lab = make_atlas(spec)
        _, out = deform_sample(Volume(np.zeros(spec.shape)), lab, make_smooth_field(spec))
        scores = [dice(out.data == k, lab.data == k) for k in range(1, spec.n_structures + 1)]
        assert np.mean(scores) < 1.0

    def test_dataset_is_pure_function_of_spec(self):
        spec = SyntheticSpec(shape=(12, 12, 12), n_structures=3, axis_range=(0.15, 0.25))
        a = make_dataset(spec, 2)
        b = make_dataset(spec, 3)
        assert np.array_equal(a[0].data, b[0].data)
        for (i1, l1, z1), (i2, l2, z2) in zip(a[2], b[2]):
            assert np.array_equal(i1.data, i2.data) and np.array_equal(z1.data, z2.data)


class TestAugment:
    def test_identity_params_give_sub_block(self):
        rng = np.random.default_rng(0)
        img, lab = rng.random((8, 8, 8)), rng.integers(0, 3, (8, 8, 8)).astype(np.uint8)
        out_img, out_lab = apply_augmentation(img, lab, AugmentParams(crop=(4, 5, 6)))
        assert np.array_equal(out_img, img[:4, :5, :6]) and np.array_equal(out_lab, lab[:4, :5, :6])

    def test_double_flip_is_identity(self):
        rng = np.random.default_rng(1)
        img, lab = rng.random((6, 7, 8)), rng.integers(0, 3, (6, 7, 8)).astype(np.uint8)
        p = AugmentParams(flip=True)
        once = apply_augmentation(img, lab, p)
        twice = apply_augmentation(*once, p)
        assert np.array_equal(twice[0], img) and np.array_equal(twice[1], lab)
        assert np.array_equal(once[0], img[:, ::-1, :])

    def test_crop_too_large(self):
        with pytest.raises(ConfigurationError):
            sample_augmentation(0, (8, 8, 8), crop=(9, 8, 8))

    def test_angles_bounded_and_deterministic(self):
        for seed in range(30):
            p = sample_augmentation(seed, (16, 16, 16), max_angle=10.0)
            assert -10.0 <= p.angle <= 10.0 and p.axis in (0, 1, 2)
            assert p == sample_augmentation(seed, (16, 16, 16), max_angle=10.0)

    def test_label_set_preserved_or_shrunk(self):
        spec = SyntheticSpec(shape=(16, 16, 16), n_structures=4, axis_range=(0.1, 0.2))
        img, lab = make_atlas(spec)
        before = set(np.unique(lab.data))
        for seed in range(100):
            _, out = augment(img.data, lab.data, seed, crop=(12, 12, 12))
            assert set(np.unique(out)) <= before


class TestFiles:
    @pytest.mark.parametrize(
        "volume",
        [
            Volume(np.random.default_rng(0).random((3, 4, 5)), (0.5, 1.0, 2.0)),
            Volume(np.random.default_rng(1).integers(0, 9, (4, 4, 2)).astype(np.uint8)),
            Volume(np.random.default_rng(2).standard_normal((3, 2, 3, 4))),
            Volume(np.array([[[7.25]]])),
        ],
    )
    def test_round_trip_bit_exact(self, tmp_path, volume):
        path = tmp_path / "v.clmv"
        write_volume(path, volume)
        back = read_volume(path)
        assert back.data.dtype == volume.data.dtype
        assert np.array_equal(back.data, volume.data) and back.spacing == volume.spacing
        write_volume(tmp_path / "again.clmv", back)
        assert (tmp_path / "again.clmv").read_bytes() == path.read_bytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "v.clmv"
        write_volume(path, Volume(np.zeros((2, 3, 4), dtype=np.uint8)))
        raw = path.read_bytes()
        assert raw[:4] == b"CLMV"
        assert struct.unpack_from("<HB3I3f", raw, 4) == (1, 1, 2, 3, 4, 1.0, 1.0, 1.0)
        assert len(raw) == 31 + 24

    def _corrupt(self, tmp_path, edit):
        path = tmp_path / "v.clmv"
        write_volume(path, Volume(np.ones((2, 2, 2))))
        raw = bytearray(path.read_bytes())
        path.write_bytes(bytes(edit(raw)))
        with pytest.raises(FormatError) as info:
            read_volume(path)
        return info.value

    def test_bad_magic(self, tmp_path):
        err = self._corrupt(tmp_path, lambda r: b"XLMV" + r[4:])
        assert err.offset == 0 and "byte offset 0" in str(err)

    def test_bad_version(self, tmp_path):
        err = self._corrupt(tmp_path, lambda r: r[:4] + struct.pack("<H", 9) + r[6:])
        assert err.offset == 4

    def test_bad_dtype(self, tmp_path):
        err = self._corrupt(tmp_path, lambda r: r[:6] + b"\x07" + r[7:])
        assert err.offset == 6

    def test_truncated(self, tmp_path):
        err = self._corrupt(tmp_path, lambda r: r[:-3])
        assert err.offset == 31 + 64 - 3
        err = self._corrupt(tmp_path, lambda r: r[:10])
        assert err.offset == 10

    def test_trailing_bytes(self, tmp_path):
        assert self._corrupt(tmp_path, lambda r: r + b"\x00").offset == 31 + 64

    def test_dataset_layout_and_determinism(self, tmp_path):
        spec = SyntheticSpec(shape=(8, 8, 8), n_structures=2, axis_range=(0.2, 0.3))
        write_dataset(tmp_path / "a", spec, 2)
        write_dataset(tmp_path / "b", spec, 2)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == [
            "atlas.clmv",
            "atlas_labels.clmv",
            "sample_0000.clmv",
            "sample_0000_field.clmv",
            "sample_0000_labels.clmv",
            "sample_0001.clmv",
            "sample_0001_field.clmv",
            "sample_0001_labels.clmv",
        ]
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_normalize_image():
    out = normalize_image(np.arange(10.0))
    assert out.mean() == pytest.approx(0.0, abs=1e-15) and out.std() == pytest.approx(1.0)
    assert not normalize_image(np.full(4, 3.0)).any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans(), st.integers(0, 2))
def test_augmentation_flip_rotation_label_property(seed, flip, axis):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 4, (6, 6, 6)).astype(np.uint8)
    img = lab.astype(float)
    params = AugmentParams(flip=flip, angle=float(rng.uniform(-10, 10)), axis=axis)
    out_img, out_lab = apply_augmentation(img, lab, params)
    assert out_img.shape == lab.shape
    assert set(np.unique(out_lab)) <= set(np.unique(lab))
