import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dabench.volume import (
    Mask,
    Slice2D,
    Volume,
    extract_axial_slice,
    load_native,
    random_crop,
    resample_mask,
    resample_to_isotropic,
    rescale_intensity,
    save_native,
)


def test_identity_resample_is_exact(rng):
    v = Volume(rng.random((5, 6, 7)), (1.0, 1.0, 1.0))
    out = resample_to_isotropic(v)
    assert out.shape == v.shape
    np.testing.assert_array_equal(out.data, v.data)


def test_resample_linear_ramp_matches_analytic_values():
    # A ramp along x is reproduced exactly by trilinear interpolation away
    # from the clamped edges, at the centered output sample positions.
    n, s = 8, 2.0
    ramp = np.arange(n, dtype=np.float32)[:, None, None] * np.ones((1, 3, 3), np.float32)
    out = resample_to_isotropic(Volume(ramp, (s, 1.0, 1.0)))
    assert out.shape == (16, 3, 3)
    expected = np.clip((np.arange(16) + 0.5) / s - 0.5, 0, n - 1)
    np.testing.assert_allclose(out.data[:, 1, 1], expected, atol=1e-6)


def test_resample_downsample_shape_and_constant():
    v = Volume(np.full((9, 10, 3), 4.0), (0.5, 0.5, 3.0))
    out = resample_to_isotropic(v)
    assert out.shape == (4, 5, 9)
    assert out.spacing == (1.0, 1.0, 1.0)
    np.testing.assert_allclose(out.data, 4.0)


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(1, 6)),
       st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.0, 3.0])] * 3))
def test_resample_shape_rule(shape, spacing):
    out = resample_to_isotropic(Volume(np.zeros(shape), spacing))
    assert out.shape == tuple(max(1, round(n * s)) for n, s in zip(shape, spacing))


def test_mask_resample_stays_binary(rng):
    m = Mask(rng.random((6, 6, 4)) > 0.5, (1.0, 1.0, 2.5))
    out = resample_mask(m)
    assert out.shape == (6, 6, 10)
    assert set(np.unique(out.data)) <= {0, 1}
    # each output z maps to the nearest input z
    np.testing.assert_array_equal(out.data[:, :, 0], m.data[:, :, 0])
    np.testing.assert_array_equal(out.data[:, :, 9], m.data[:, :, 3])


def test_rescale_intensity_range_and_idempotence(rng):
    v = Volume(rng.normal(50, 20, (4, 4, 4)))
    r = rescale_intensity(v)
    assert r.data.min() == 0.0 and r.data.max() == 1.0
    np.testing.assert_allclose(rescale_intensity(r).data, r.data, atol=1e-7)


def test_rescale_constant_and_nonfinite():
    np.testing.assert_array_equal(rescale_intensity(Volume(np.full((2, 2, 2), 3.0))).data, 0.0)
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        rescale_intensity(Volume(bad))


def test_volume_and_mask_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        Mask(np.full((2, 2, 2), 2))


def test_extract_axial_slice_with_label(rng):
    v = Volume(rng.random((4, 5, 3)), (0.8, 0.9, 2.0))
    m = Mask(rng.random((4, 5, 3)) > 0.5, v.spacing)
    s = extract_axial_slice(v, 2, m)
    np.testing.assert_array_equal(s.data, v.data[:, :, 2])
    np.testing.assert_array_equal(s.label, m.data[:, :, 2])
    assert s.pixel_spacing == (0.8, 0.9)
    assert s.source_index == 2
    with pytest.raises(IndexError):
        extract_axial_slice(v, 3)


def test_random_crop_offsets_are_uniform_and_deterministic():
    s = Slice2D(np.arange(36, dtype=np.float32).reshape(6, 6))
    offsets = []
    rng = np.random.default_rng(0)
    for _ in range(900):
        c = random_crop(s, (4, 4), rng)
        offsets.append(int(c.data[0, 0]) // 6)
    counts = np.bincount(offsets, minlength=3)
    # three possible row offsets, each expected 300 times
    assert np.all(np.abs(counts - 300) < 3 * np.sqrt(900 * (1 / 3) * (2 / 3)))
    a = random_crop(s, (3, 3), np.random.default_rng(7))
    b = random_crop(s, (3, 3), np.random.default_rng(7))
    np.testing.assert_array_equal(a.data, b.data)


def test_random_crop_pads_small_slices():
    s = Slice2D(np.ones((3, 4)), label=np.ones((3, 4), np.uint8))
    c = random_crop(s, (6, 4), np.random.default_rng(0))
    assert c.data.shape == (6, 4)
    # pad of 3 rows: 1 before, 2 after
    np.testing.assert_array_equal(c.data[:, 0], [0, 1, 1, 1, 0, 0])
    np.testing.assert_array_equal(c.label, c.data)


def test_native_round_trip(tmp_path, rng):
    v = Volume(rng.random((3, 4, 5)), (0.5, 1.0, 2.0))
    m = Mask(rng.random((3, 4, 5)) > 0.3, v.spacing)
    v2 = load_native(save_native(v, tmp_path / "v"))
    m2 = load_native(save_native(m, tmp_path / "m.json"))
    assert isinstance(v2, Volume) and isinstance(m2, Mask)
    np.testing.assert_array_equal(v2.data, v.data)
    np.testing.assert_array_equal(m2.data, m.data)
    assert v2.spacing == v.spacing and m2.matches(v2)
    with pytest.raises(FileNotFoundError):
        load_native(tmp_path / "missing")


def trilinear_oracle(data, spacing, target_shape):
    """Direct trilinear interpolation at each output voxel center, edge-clamped."""
    out = np.zeros(target_shape)
    for idx in np.ndindex(*target_shape):
        pos = [np.clip((i + 0.5) / s - 0.5, 0, n - 1) for i, s, n in zip(idx, spacing, data.shape)]
        lo = [int(np.floor(p)) for p in pos]
        acc = 0.0
        for corner in np.ndindex(2, 2, 2):
            w = 1.0
            src = []
            for p, l, c, n in zip(pos, lo, corner, data.shape):
                j = min(l + c, n - 1)
                w *= (p - l) if c else (1 - (p - l))
                src.append(j)
            acc += w * data[tuple(src)]
        out[idx] = acc
    return out


def test_ramp_four_voxels_at_2mm_against_trilinear_oracle(rng):
    data = np.tile(np.arange(4, dtype=np.float32)[:, None, None], (1, 2, 2))
    out = resample_to_isotropic(Volume(data, (2.0, 1.0, 1.0)))
    assert out.shape == (8, 2, 2)
    np.testing.assert_allclose(out.data, trilinear_oracle(data, (2.0, 1.0, 1.0), (8, 2, 2)), atol=1e-6)
    noisy = rng.random((3, 4, 2)).astype(np.float32)
    got = resample_to_isotropic(Volume(noisy, (2.0, 1.5, 3.0)))
    np.testing.assert_allclose(got.data, trilinear_oracle(noisy, (2.0, 1.5, 3.0), got.shape), atol=1e-6)


def test_constant_upsample_and_round_trip_shape():
    out = resample_to_isotropic(Volume(np.full((3, 3, 3), 0.7), (2.0, 2.0, 2.0)))
    assert out.shape == (6, 6, 6)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-6)
    back = resample_to_isotropic(out, (2.0, 2.0, 2.0))
    assert back.shape == (3, 3, 3)


def test_rescale_examples():
    v = rescale_intensity(Volume(np.array([2.0, 4.0]).reshape(1, 1, 2)))
    np.testing.assert_array_equal(v.data.ravel(), [0.0, 1.0])
    w = rescale_intensity(Volume(np.array([0.0, 0.5, 1.0]).reshape(1, 1, 3)))
    np.testing.assert_array_equal(w.data.ravel(), [0.0, 0.5, 1.0])


def test_axial_slice_of_z_ramp():
    v = Volume(np.broadcast_to(np.arange(3, dtype=np.float32), (4, 4, 3)).copy())
    np.testing.assert_array_equal(extract_axial_slice(v, 2).data, np.full((4, 4), 2.0))


def test_crop_offset_range_for_large_slices():
    s = Slice2D(np.arange(300 * 300, dtype=np.float32).reshape(300, 300))
    rng = np.random.default_rng(11)
    rows, cols = set(), set()
    for _ in range(3000):
        c = random_crop(s, (256, 256), rng)
        r0, c0 = divmod(int(c.data[0, 0]), 300)
        rows.add(r0)
        cols.add(c0)
    assert rows == set(range(45)) and cols == set(range(45))
    full = Slice2D(np.ones((256, 256)))
    np.testing.assert_array_equal(random_crop(full, (256, 256), rng).data, full.data)
    small = random_crop(Slice2D(np.ones((100, 100))), (256, 256), rng)
    assert small.data.shape == (256, 256)
    assert small.data.sum() == 100 * 100
    np.testing.assert_array_equal(small.data[78:178, 78:178], 1.0)
