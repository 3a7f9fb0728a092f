import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dabench.metrics import (
    dice,
    extract_surface,
    surface_dice,
    surface_dice_bruteforce,
    surface_voxels,
)
from dabench.volume import Mask

from oracles import loop_surface, loop_surface_dice


def test_cube_surface_count():
    arr = np.zeros((5, 5, 5), np.uint8)
    arr[1:4, 1:4, 1:4] = 1
    assert extract_surface(Mask(arr)).count == 26
    assert int(surface_voxels(arr).sum()) == len(loop_surface(arr))


def test_array_edge_counts_as_background():
    arr = np.ones((3, 3, 3), np.uint8)
    assert extract_surface(Mask(arr)).count == 26


def test_surface_points_scale_with_spacing():
    arr = np.zeros((3, 3, 3), np.uint8)
    arr[1, 2, 1] = 1
    pts = extract_surface(Mask(arr, (0.5, 2.0, 3.0))).points
    np.testing.assert_array_equal(pts, [[0.5, 4.0, 3.0]])


def test_dice_subset_fixture():
    a = np.zeros((4, 4, 4), np.uint8)
    b = np.zeros_like(a)
    a[0, 0, :4] = 1
    b[0, :2, :4] = 1
    assert a.sum() == 4 and b.sum() == 8
    assert dice(Mask(a), Mask(b)).value == 2 / 3


def test_dice_empty_conventions():
    z = Mask(np.zeros((2, 2, 2)))
    o = Mask(np.ones((2, 2, 2)))
    assert dice(z, z).value == 1.0
    assert dice(z, o).value == 0.0
    assert surface_dice(z, z).value == 1.0
    assert surface_dice(z, o).value == 0.0
    assert surface_dice(o, z).value == 0.0


def test_shape_and_spacing_mismatch_raise():
    with pytest.raises(ValueError):
        dice(Mask(np.zeros((2, 2, 2))), Mask(np.zeros((2, 2, 3))))
    with pytest.raises(ValueError):
        surface_dice(Mask(np.zeros((2, 2, 2))), Mask(np.zeros((2, 2, 2)), (1.0, 1.0, 2.0)))
    with pytest.raises(ValueError):
        surface_dice(Mask(np.zeros((2, 2, 2))), Mask(np.zeros((2, 2, 2))), -1.0)


def test_shifted_cube_against_hand_count():
    # Two 3x3x3 cubes shifted by one voxel along x: at tolerance 0, only
    # surface voxels present in both surfaces match.
    a = np.zeros((6, 5, 5), np.uint8)
    b = np.zeros_like(a)
    a[1:4, 1:4, 1:4] = 1
    b[2:5, 1:4, 1:4] = 1
    sa, sb = set(loop_surface(a)), set(loop_surface(b))
    expected = 2 * len(sa & sb) / (len(sa) + len(sb))
    assert surface_dice(Mask(a), Mask(b), 0.0).value == pytest.approx(expected, abs=1e-12)
    assert surface_dice(Mask(a), Mask(b), 1.0).value == 1.0


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("tol", [0.0, 0.5, 1.0, 2.0])
def test_edt_matches_loop_oracle(seed, tol):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 7, size=3))
    spacing = tuple(rng.choice([0.5, 1.0, 1.5], size=3))
    a = rng.random(shape) > 0.5
    b = rng.random(shape) > 0.6
    got = surface_dice(Mask(a, spacing), Mask(b, spacing), tol).value
    assert got == pytest.approx(loop_surface_dice(a, b, tol, spacing), abs=1e-9)


masks = arrays(np.bool_, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)))


@settings(max_examples=60, deadline=None)
@given(masks, st.data(), st.sampled_from([0.0, 0.5, 1.0, 2.0]))
def test_surface_dice_properties(a, data, tol):
    b = data.draw(arrays(np.bool_, a.shape))
    ma, mb = Mask(a), Mask(b)
    v = surface_dice(ma, mb, tol).value
    assert 0.0 <= v <= 1.0
    assert v == surface_dice(mb, ma, tol).value
    assert surface_dice(ma, ma, tol).value == 1.0
    assert v == pytest.approx(surface_dice_bruteforce(ma, mb, tol).value, abs=1e-9)
    # a looser tolerance never matches fewer points
    assert surface_dice(ma, mb, tol + 1.0).value >= v


@settings(max_examples=60, deadline=None)
@given(masks, st.data())
def test_dice_properties(a, data):
    b = data.draw(arrays(np.bool_, a.shape))
    d = dice(Mask(a), Mask(b)).value
    assert 0.0 <= d <= 1.0
    assert d == dice(Mask(b), Mask(a)).value
    assert dice(Mask(a), Mask(a)).value == 1.0
