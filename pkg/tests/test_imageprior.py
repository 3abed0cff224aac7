from collections import deque

import numpy as np
import pytest
from scipy import ndimage
from skimage.feature import canny as sk_canny

from robox.imageprior import (
    PriorConfig,
    boundary_map,
    build_stack,
    canny,
    check_gray,
    fft_highpass,
    slic,
)


def step_image(n=32):
    img = np.zeros((n, n))
    img[:, n // 2:] = 1.0
    return img


def smooth_random(rng, n=32):
    base = ndimage.zoom(rng.random((4, 4)), n / 4, order=1)
    img = base + 0.05 * rng.normal(size=(n, n))
    return np.clip(img, 0, 1)


def components_4(mask):
    """Number of 4-connected components by BFS flood fill."""
    seen = np.zeros_like(mask, bool)
    count = 0
    h, w = mask.shape
    for r0, c0 in zip(*np.nonzero(mask)):
        if seen[r0, c0]:
            continue
        count += 1
        q = deque([(r0, c0)])
        seen[r0, c0] = True
        while q:
            r, c = q.popleft()
            for rr, cc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    q.append((rr, cc))
    return count


# -- Canny ---------------------------------------------------------------------

def test_canny_constant_is_empty():
    assert not canny(np.full((20, 20), 0.4)).any()


def test_canny_step_edge_localised():
    e = canny(step_image(), 1.0, 0.1, 0.3)
    cols = np.nonzero(e[3:29])[1]
    assert cols.size > 0
    assert np.all(np.abs(cols - 16) <= 1)
    # no horizontal edge: every edge row in the interior holds the same column set
    assert all(set(np.nonzero(e[r])[0]) == set(np.nonzero(e[3])[0]) for r in range(3, 29))


def test_canny_agrees_with_reference_on_step():
    img = step_image()
    ours = canny(img, 1.0, 0.1, 0.3).astype(bool)
    ref = sk_canny(img, sigma=1.0)
    r_cols = set(np.nonzero(ref[3:29])[1])
    o_cols = set(np.nonzero(ours[3:29])[1])
    assert o_cols and o_cols <= {c + d for c in r_cols for d in (-1, 0, 1)}


def test_canny_checkerboard_edges_near_borders():
    n = 32
    yy, xx = np.mgrid[:n, :n]
    img = (((yy // 8) + (xx // 8)) % 2).astype(float)
    e = canny(img, 1.0, 0.1, 0.3).astype(bool)
    ref = sk_canny(img, sigma=1.0)
    border = ((xx % 8 == 0) | (xx % 8 == 7) | (yy % 8 == 0) | (yy % 8 == 7))
    near = ndimage.binary_dilation(border, iterations=1)
    assert e.any()
    assert not (e & ~near).any()
    assert not (ref & ~near).any()


def test_canny_edges_exceed_low_threshold():
    rng = np.random.default_rng(0)
    for _ in range(10):
        img = smooth_random(rng)
        e = canny(img, 1.0, 0.1, 0.3).astype(bool)
        blurred = ndimage.gaussian_filter(img, 1.0, mode="mirror", truncate=3.0)
        mag = np.hypot(ndimage.sobel(blurred, axis=1, mode="nearest"), ndimage.sobel(blurred, axis=0, mode="nearest"))
        assert np.all(mag[e] >= 0.1 * mag.max() - 1e-12)


def test_canny_rejects_bad_parameters():
    with pytest.raises(ValueError):
        canny(np.zeros((16, 16)), 1.0, 0.3, 0.1)
    with pytest.raises(ValueError):
        canny(np.zeros((5, 5)), 1.0)


# -- SLIC ----------------------------------------------------------------------

def test_slic_single_cluster():
    lab = slic(np.random.default_rng(0).random((16, 16)), k=1)
    assert lab.k_actual == 1 and np.all(lab.labels == 0)


def test_slic_constant_image_regular_tiling():
    lab = slic(np.full((64, 64), 0.5), k=16, compactness=10, iters=10)
    s2 = 64 * 64 / 16
    sizes = np.bincount(lab.labels.ravel())
    assert lab.k_actual == 16
    assert sizes.min() >= s2 / 2 and sizes.max() <= 2 * s2


def test_slic_two_regions_split_at_boundary():
    img = np.full((64, 64), 0.2)
    img[:, 32:] = 0.8
    lab = slic(img, k=2, compactness=10, iters=10).labels
    # two-means oracle on intensity alone: columns < 32 are dark
    for row in lab:
        switch = np.nonzero(row[1:] != row[:-1])[0]
        assert len(switch) == 1 and abs(switch[0] + 1 - 32) <= 2


def test_slic_partition_and_connectivity_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        img = smooth_random(rng)
        lab = slic(img, k=16, compactness=10, iters=5)
        labels = lab.labels
        assert labels.shape == img.shape and labels.min() >= 0
        ids = np.unique(labels)
        assert len(ids) == lab.k_actual
        for i in ids:
            assert components_4(labels == i) == 1


def test_slic_rejects_k_too_large():
    with pytest.raises(ValueError):
        slic(np.zeros((8, 8)), k=65)


# -- boundary map -----------------------------------------------------------------

def test_boundary_map_examples():
    assert not boundary_map(np.zeros((6, 6), int)).any()
    lab = np.zeros((6, 8), int)
    lab[:, 5:] = 1
    b = boundary_map(lab)
    assert set(np.nonzero(b)[1]) == {4, 5} and b[:, 4].all() and b[:, 5].all()


def test_boundary_map_matches_scan():
    rng = np.random.default_rng(2)
    lab = rng.integers(0, 3, (12, 12))
    b = boundary_map(lab)
    for r in range(12):
        for c in range(12):
            diff = any(0 <= rr < 12 and 0 <= cc < 12 and lab[rr, cc] != lab[r, c]
                       for rr, cc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)))
            assert b[r, c] == diff


# -- frequency channel --------------------------------------------------------------

def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def test_fft_round_trip_and_parseval():
    rng = np.random.default_rng(3)
    img = rng.random((64, 64))
    assert np.max(np.abs(fft_highpass(img, None) - img)) <= 1e-9
    F = dft_matrix(64) @ img @ dft_matrix(64).T
    assert abs((np.abs(F) ** 2).sum() / img.size - (img ** 2).sum()) <= 1e-9 * (img ** 2).sum()


def test_fft_constant_gives_zero():
    assert np.max(np.abs(fft_highpass(np.full((32, 32), 0.7), 0.1))) <= 1e-12


def test_fft_high_cosine_untouched():
    n = 64
    x = np.arange(n)
    img = 0.5 * np.cos(2 * np.pi * 20 * x / n)[None, :] * np.ones((n, 1))
    assert np.max(np.abs(fft_highpass(img, 0.1) - img)) <= 1e-9


def test_fft_highpass_matches_dft_oracle():
    rng = np.random.default_rng(4)
    img = rng.random((16, 16)) * 0.5
    Fm = dft_matrix(16)
    F = Fm @ img @ Fm.T
    k = np.array([i if i < 8 else i - 16 for i in range(16)])
    dist = np.hypot(k[:, None], k[None, :])
    F[dist <= 0.1 * 16] = 0
    ref = np.clip((np.conj(Fm) @ F @ np.conj(Fm).T / 256).real, -1, 1)
    assert np.max(np.abs(fft_highpass(img, 0.1) - ref)) <= 1e-12


def test_fft_radius_validation():
    with pytest.raises(ValueError):
        fft_highpass(np.zeros((8, 8)), 0.5)


# -- stack ---------------------------------------------------------------------

def test_build_stack_invariants_and_determinism():
    img = smooth_random(np.random.default_rng(5), 64)
    a, b = build_stack(img), build_stack(img)
    arr = a.as_array()
    assert arr.shape == (3, 64, 64)
    assert set(np.unique(a.edge)) <= {0, 1} and set(np.unique(a.superpixel_boundary)) <= {0, 1}
    assert np.all(np.abs(a.highpass) <= 1)
    assert np.array_equal(arr, b.as_array())


def test_build_stack_constant_image():
    s = build_stack(np.full((64, 64), 0.3))
    assert not s.edge.any()
    assert np.max(np.abs(s.highpass)) <= 1e-12
    # superpixel boundaries of a constant image run along straight grid lines
    rows_full = np.nonzero(s.superpixel_boundary.all(axis=1))[0]
    cols_full = np.nonzero(s.superpixel_boundary.all(axis=0))[0]
    assert len(rows_full) >= 6 and len(cols_full) >= 6


def test_prior_config_overrides():
    cfg = PriorConfig.from_dict({"slic_k": 4, "highpass_radius_frac": 0.2})
    assert cfg.slic_k == 4 and cfg.canny_sigma == 1.0


def test_check_gray_validation():
    with pytest.raises(ValueError):
        check_gray(np.zeros((4, 16)))
    with pytest.raises(ValueError):
        check_gray(np.full((8, 8), 1.5))
