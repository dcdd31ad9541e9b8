import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, mpf
from oracles import brute_boundary, brute_membership

from fuzzycurriculum.errors import DegenerateVolume, InvalidParameter
from fuzzycurriculum.fuzzy_label import boundary_mask, compute_membership, fuzzify
from fuzzycurriculum.volume import LabelVolume


def test_uniform_interior_is_crisp():
    vol = LabelVolume(np.ones((5, 5, 5), dtype=np.uint8), 2)
    mu = compute_membership(vol, 1)
    assert mu[2, 2, 2, 1] == 1.0 and mu[2, 2, 2, 0] == 0.0


def test_flat_boundary_voxel(flat_boundary):
    mu = compute_membership(flat_boundary, 1)
    oracle = brute_membership(flat_boundary.data, 2, 1)
    assert mu[2, 1, 1, 1] == oracle[2, 1, 1, 1] == 17 / 26
    assert mu[2, 1, 1, 0] == 9 / 26


def test_corner_uses_seven_neighbours():
    vol = LabelVolume(np.zeros((3, 3, 3), dtype=np.uint8), 2)
    mu = compute_membership(vol, 1)
    assert mu[0, 0, 0, 0] == 1.0
    data = np.zeros((3, 3, 3), dtype=np.uint8)
    data[1, 1, 1] = 1
    mu = compute_membership(LabelVolume(data, 2), 1)
    assert mu[0, 0, 0, 1] == 1 / 7


def test_single_voxel_volume_is_degenerate():
    with pytest.raises(DegenerateVolume):
        compute_membership(LabelVolume(np.zeros((1, 1, 1), dtype=np.uint8), 2), 1)


def test_fuzzify_values(flat_boundary):
    fz = fuzzify(flat_boundary, 1, 0.5)
    mp.dps = 30
    mu = mpf(17) / 26
    nu = (1 - mu) * mpf("0.5")
    pi = 1 - mu - nu
    assert fz.nu[2, 1, 1, 1] == pytest.approx(float(nu), abs=1e-7)
    assert fz.pi[2, 1, 1, 1] == pytest.approx(float(pi), abs=1e-7)
    assert float(nu) == pytest.approx(9 / 52) and float(mu + nu) == pytest.approx(43 / 52)
    # crisp voxel: mu = 1 gives nu = pi = 0
    assert fz.mu[0, 0, 0, 0] == 1.0 and fz.nu[0, 0, 0, 0] == 0.0 and fz.pi[0, 0, 0, 0] == 0.0


def test_rho2_one_is_classical(rng):
    vol = LabelVolume(rng.integers(0, 3, size=(4, 4, 4)), 3)
    fz = fuzzify(vol, 1, 1.0)
    np.testing.assert_allclose(fz.nu, 1.0 - fz.mu, atol=1e-7)
    np.testing.assert_allclose(fz.pi, 0.0, atol=1e-7)


@pytest.mark.parametrize("rho2", [0.0, -0.1, 1.5])
def test_rho2_out_of_range(flat_boundary, rho2):
    with pytest.raises(InvalidParameter):
        fuzzify(flat_boundary, 1, rho2)


def test_boundary_mask_uniform():
    fz = fuzzify(LabelVolume(np.zeros((3, 4, 5), dtype=np.uint8), 2), 1, 0.5)
    assert not boundary_mask(fz).data.any()


def test_boundary_mask_flat(flat_boundary):
    mask = boundary_mask(fuzzify(flat_boundary, 1, 0.5)).data
    assert np.array_equal(mask, boundary_mask(fuzzify(flat_boundary, 1, 0.5), flat_boundary).data)
    expected = np.zeros((4, 4, 4))
    expected[1:3] = 1
    assert np.array_equal(mask, expected)
    assert np.array_equal(mask, brute_boundary(flat_boundary.data, 1))


def test_boundary_mask_single_voxel():
    data = np.zeros((5, 5, 5), dtype=np.uint8)
    data[2, 2, 2] = 1
    vol = LabelVolume(data, 2)
    mask = boundary_mask(fuzzify(vol, 1, 0.5), vol).data
    expected = np.zeros((5, 5, 5))
    expected[1:4, 1:4, 1:4] = 1
    assert np.array_equal(mask, expected)
    assert np.array_equal(mask, brute_boundary(data, 1))
    # without labels the isolated voxel looks crisp: all its neighbours agree
    unlabeled = boundary_mask(fuzzify(vol, 1, 0.5)).data
    assert unlabeled.sum() == 26 and unlabeled[2, 2, 2] == 0


small_volumes = st.tuples(
    st.tuples(*[st.integers(1, 6)] * 3), st.integers(2, 4), st.integers(1, 2), st.integers(0, 2**32 - 1)
).filter(lambda t: np.prod(t[0]) > 1)


@settings(max_examples=60, deadline=None)
@given(small_volumes)
def test_matches_brute_force(case):
    dims, classes, r, seed = case
    data = np.random.default_rng(seed).integers(0, classes, size=dims)
    mu = compute_membership(LabelVolume(data, classes), r)
    assert np.array_equal(mu, brute_membership(data, classes, r))


@settings(max_examples=30, deadline=None)
@given(small_volumes)
def test_threaded_matches_serial(case):
    dims, classes, r, seed = case
    vol = LabelVolume(np.random.default_rng(seed).integers(0, classes, size=dims), classes)
    assert np.array_equal(compute_membership(vol, r, workers=3), compute_membership(vol, r))


def test_label_permutation_equivariance(rng):
    data = rng.integers(0, 4, size=(5, 4, 6))
    perm = np.array([2, 0, 3, 1])
    a = fuzzify(LabelVolume(data, 4), 1, 0.4)
    b = fuzzify(LabelVolume(perm[data], 4), 1, 0.4)
    # class c in the original becomes perm[c]
    for ch in ("mu", "nu", "pi"):
        np.testing.assert_array_equal(getattr(b, ch)[..., perm], getattr(a, ch))


def test_translation_equivariance_interior(rng):
    data = rng.integers(0, 2, size=(8, 8, 8))
    shifted = np.roll(data, shift=(1, 2, 1), axis=(0, 1, 2))
    mu = compute_membership(LabelVolume(data, 2), 1)
    mu_s = compute_membership(LabelVolume(shifted, 2), 1)
    # voxels whose neighbourhoods (and their shifted copies) avoid the wrapped seam and the edges
    np.testing.assert_array_equal(mu_s[3:7, 4:7, 3:7], mu[2:6, 2:5, 2:6])


def test_homogeneous_neighbourhoods_give_hard_labels():
    data = np.zeros((6, 6, 6), dtype=np.uint8)
    vol = LabelVolume(data, 3)
    mu = compute_membership(vol, 2)
    np.testing.assert_array_equal(mu, vol.one_hot())


def test_invariants_on_random(rng):
    for _ in range(10):
        data = rng.integers(0, 3, size=tuple(rng.integers(2, 7, size=3)))
        rho2 = float(rng.uniform(0.01, 1.0))
        fz = fuzzify(LabelVolume(data, 3), int(rng.integers(1, 3)), rho2)
        mu, nu, pi = (a.astype(np.float64) for a in (fz.mu, fz.nu, fz.pi))
        assert np.all(mu + nu <= 1 + 1e-6) and np.all(mu + nu >= 0)
        np.testing.assert_allclose(pi, 1 - mu - nu, atol=1e-6)
        np.testing.assert_allclose(mu.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(nu, (1 - mu) * rho2, atol=1e-6)
