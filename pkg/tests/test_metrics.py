import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clmorph.errors import DimensionError, UndefinedMetricError
from clmorph.metrics import CSV_HEADER, RegionReport, assd, dice, evaluate, hausdorff, surface_voxels


def brute_surface(mask):
    padded = np.pad(mask, 1)
    out = []
    for idx in np.argwhere(mask):
        p = idx + 1
        for axis in range(3):
            for step in (-1, 1):
                q = p.copy()
                q[axis] += step
                if not padded[tuple(q)]:
                    out.append(tuple(idx))
                    break
            else:
                continue
            break
    return np.array(sorted(out)).reshape(-1, 3)


def brute_distances(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1), d.min(axis=0)


def random_mask(rng, shape=(7, 7, 7), p=0.3):
    m = rng.random(shape) < p
    m[tuple(rng.integers(0, s) for s in shape)] = True
    return m


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    a[:2] = True
    b[1:3] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(3), np.zeros(3)) == 1.0
    lab = np.array([0, 1, 2, 2])
    assert dice(lab, np.array([0, 2, 2, 2]), label=2) == pytest.approx(0.8)


def test_cube_surface_count():
    mask = np.zeros((5, 5, 5), bool)
    mask[1:4, 1:4, 1:4] = True
    surf = surface_voxels(mask)
    assert len(surf) == 26
    assert (2, 2, 2) not in set(map(tuple, surf))


def test_touching_border_counts_as_surface():
    assert len(surface_voxels(np.ones((3, 3, 3), bool))) == 26


def test_against_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(40):
        p, g = random_mask(rng), random_mask(rng)
        sp, sg = brute_surface(p), brute_surface(g)
        assert np.array_equal(np.array(sorted(map(tuple, surface_voxels(p)))).reshape(-1, 3), sp)
        d_pg, d_gp = brute_distances(sp, sg)
        assert hausdorff(p, g) == pytest.approx(max(d_pg.max(), d_gp.max()), abs=1e-12)
        assert assd(p, g) == pytest.approx(0.5 * (d_pg.mean() + d_gp.mean()), abs=1e-12)
        assert dice(p, g) == pytest.approx(2 * (p & g).sum() / (p.sum() + g.sum()), abs=1e-15)


def test_distances_of_shifted_cube():
    a = np.zeros((10, 10, 10), bool)
    a[2:5, 2:5, 2:5] = True
    b = np.roll(a, 3, axis=0)
    assert hausdorff(a, b) == 3.0
    assert hausdorff(a, a) == 0.0 and assd(a, a) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3))
def test_translation_invariance(seed, dx, dy, dz):
    rng = np.random.default_rng(seed)
    p = np.zeros((12, 12, 12), bool)
    g = p.copy()
    p[2:8, 2:8, 2:8] = random_mask(rng, (6, 6, 6), 0.6)
    g[2:8, 2:8, 2:8] = random_mask(rng, (6, 6, 6), 0.6)
    shift = lambda m: np.roll(m, (dx, dy, dz), axis=(0, 1, 2))
    assert dice(shift(p), shift(g)) == dice(p, g)
    assert hausdorff(shift(p), shift(g)) == pytest.approx(hausdorff(p, g), abs=1e-12)
    assert assd(shift(p), shift(g)) == pytest.approx(assd(p, g), abs=1e-12)


def test_undefined_and_shape_errors():
    empty = np.zeros((3, 3, 3), bool)
    full = ~empty
    with pytest.raises(UndefinedMetricError):
        hausdorff(empty, full)
    with pytest.raises(UndefinedMetricError):
        assd(full, empty)
    with pytest.raises(DimensionError):
        dice(np.zeros(3), np.zeros(4))


def _three_sample_report():
    gts, preds = [], []
    for k in range(3):
        g = np.zeros((6, 6, 6), np.uint8)
        g[1:4, 1:4, 1:4] = 1
        g[4:6, 4:6, 4:6] = 2
        p = g.copy()
        p[1 : 1 + k, 1:4, 1:4] = 0
        gts.append(g)
        preds.append(p)
    return evaluate(preds, gts), preds, gts


def test_macro_mean_and_std_by_hand():
    report, preds, gts = _three_sample_report()
    assert report.labels == [1, 2] and report.samples == ["0000", "0001", "0002"]
    # label 1 loses k of 3 slices; label 2 is exact
    d1 = [1.0, 2 * 18 / (18 + 27), 2 * 9 / (9 + 27)]
    per_sample = [(x + 1.0) / 2 for x in d1]
    mean, std = report.macro("dice")
    assert mean == pytest.approx(np.mean(per_sample), abs=1e-15)
    assert std == pytest.approx(math.sqrt(np.mean((np.array(per_sample) - np.mean(per_sample)) ** 2)), abs=1e-15)
    assert report.per_label("dice")[2] == (1.0, 0.0)
    assert report.per_label("dice")[1][0] == pytest.approx(np.mean(d1))


def test_missing_label_gives_nan_distance():
    g = np.zeros((5, 5, 5), np.uint8)
    g[1:3, 1:3, 1:3] = 1
    report = evaluate([np.zeros_like(g)], [g])
    assert report.rows[0][2] == 0.0 and math.isnan(report.rows[0][3])
    assert report.missing() == 1
    assert "undefined distances 1" in report.to_text()


def test_csv_round_trip():
    report, _, _ = _three_sample_report()
    g = np.zeros((5, 5, 5), np.uint8)
    g[1:3, 1:3, 1:3] = 1
    report.add("empty", np.zeros_like(g), g)
    text = report.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    back = RegionReport.from_csv(text)
    assert back.labels == report.labels
    for a, b in zip(back.rows, report.rows):
        assert a[:3] == b[:3]
        assert all((x == y) or (math.isnan(x) and math.isnan(y)) for x, y in zip(a[3:], b[3:]))
    assert back.to_csv() == text


def test_evaluate_length_mismatch():
    with pytest.raises(DimensionError):
        evaluate([np.zeros((2, 2, 2))], [])
