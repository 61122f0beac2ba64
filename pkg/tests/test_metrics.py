import math

import numpy as np
import pytest
from scipy import ndimage

from ctdiffseg.metrics import (
    MetricError,
    MetricReport,
    dice,
    evaluate_labels,
    frechet_proxy,
    hd95,
    psnr,
    report_table_csv,
    ssim,
    surface_mask,
    _gaussian_kernel2d,
)

from oracles import hd95_bruteforce, surface_voxels_bruteforce


def cube_mask(shape, lo, size):
    m = np.zeros(shape, dtype=bool)
    m[lo[0]:lo[0] + size, lo[1]:lo[1] + size, lo[2]:lo[2] + size] = True
    return m


# -- dice ---------------------------------------------------------------------

def test_dice_identical():
    m = cube_mask((8, 8, 8), (1, 1, 1), 4)
    assert dice(m, m) == 1.0


def test_dice_disjoint():
    a = cube_mask((8, 8, 8), (0, 0, 0), 3)
    b = cube_mask((8, 8, 8), (5, 5, 5), 3)
    assert dice(a, b) == 0.0


def test_dice_half_overlap_counted_instance():
    g = np.zeros((2, 2, 2), dtype=bool)
    g[:] = True                       # |G| = 8
    p = np.zeros((2, 2, 2), dtype=bool)
    p[0] = True                       # |P| = 4, all inside G
    assert dice(p, g) == pytest.approx(2 * 4 / (4 + 8))


def test_dice_both_empty_is_one():
    z = np.zeros((4, 4, 4), dtype=bool)
    assert dice(z, z) == 1.0


def test_dice_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(0)
    a = rng.random((6, 6, 6)) > 0.5
    b = rng.random((6, 6, 6)) > 0.5
    assert dice(a, b) == dice(b, a)
    perm = rng.permutation(a.size)
    assert dice(a.ravel()[perm], b.ravel()[perm]) == pytest.approx(dice(a, b))


def test_dice_shape_mismatch():
    with pytest.raises(MetricError):
        dice(np.zeros((2, 2, 2)), np.zeros((3, 3, 3)))


# -- hd95 ----------------------------------------------------------------------

def test_hd95_identical_masks_zero():
    m = cube_mask((8, 8, 8), (2, 2, 2), 3)
    assert hd95(m, m, (0.6, 0.6, 0.6)) == 0.0


def test_hd95_shifted_cube_matches_bruteforce():
    a = cube_mask((10, 10, 10), (1, 1, 1), 3)
    b = cube_mask((10, 10, 10), (1, 1, 4), 3)   # shifted 3 voxels along x
    got = hd95(a, b, (0.6, 0.6, 0.6))
    oracle = hd95_bruteforce(a, b, (0.6, 0.6, 0.6))
    assert got == pytest.approx(oracle, abs=1e-9)
    assert got == pytest.approx(1.8)  # every surface pair is 3 voxels * 0.6 mm


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hd95_matches_bruteforce_random_blobs(seed):
    rng = np.random.default_rng(seed)
    a = ndimage.binary_dilation(rng.random((7, 7, 7)) > 0.93, iterations=1)
    b = ndimage.binary_dilation(rng.random((7, 7, 7)) > 0.93, iterations=1)
    if not a.any() or not b.any():
        pytest.skip("degenerate draw")
    got = hd95(a, b, (0.6, 0.8, 1.0))
    oracle = hd95_bruteforce(a, b, (0.6, 0.8, 1.0))
    assert got == pytest.approx(oracle, abs=1e-9)


def test_hd95_symmetric():
    a = cube_mask((10, 10, 10), (1, 1, 1), 4)
    b = cube_mask((10, 10, 10), (3, 2, 2), 4)
    sp = (0.6, 0.6, 0.6)
    assert hd95(a, b, sp) == pytest.approx(hd95(b, a, sp))


def test_hd95_empty_mask_error():
    m = cube_mask((6, 6, 6), (1, 1, 1), 2)
    with pytest.raises(MetricError, match="undefined"):
        hd95(np.zeros((6, 6, 6), dtype=bool), m, (1, 1, 1))


def test_hd95_shifted_cube_family_nonincreasing_toward_gt():
    sp = (0.6, 0.6, 0.6)
    gt = cube_mask((14, 14, 14), (4, 4, 8), 4)
    values = []
    for offset in (2, 4, 6, 8):  # pred cube slides toward the gt position
        pred = cube_mask((14, 14, 14), (4, 4, offset), 4)
        values.append(hd95(pred, gt, sp))
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))
    assert values[-1] == 0.0


def test_surface_mask_matches_bruteforce():
    rng = np.random.default_rng(4)
    m = ndimage.binary_dilation(rng.random((6, 6, 6)) > 0.9)
    got = sorted(map(tuple, np.argwhere(surface_mask(m))))
    oracle = sorted(surface_voxels_bruteforce(m))
    assert got == oracle


# -- ssim / psnr -----------------------------------------------------------------

def test_ssim_identical_is_one():
    rng = np.random.default_rng(0)
    a = rng.uniform(-1000, 600, size=(3, 20, 20))
    assert ssim(a, a) == pytest.approx(1.0)


def test_psnr_identical_is_inf():
    a = np.zeros((2, 8, 8))
    assert math.isinf(psnr(a, a))


def test_psnr_constant_offset_closed_form():
    a = np.zeros((2, 8, 8))
    c = 16.24
    assert psnr(a, a + c, data_range=1624.0) == pytest.approx(20 * np.log10(1624.0 / c))


def test_psnr_golden_direct_formula():
    rng = np.random.default_rng(5)
    a = rng.uniform(-1000, 600, size=(2, 6, 6))
    b = a + rng.normal(0, 30, size=a.shape)
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (a[idx] - b[idx]) ** 2
    mse = total / a.size
    assert psnr(a, b) == pytest.approx(10 * np.log10(1624.0 ** 2 / mse), rel=1e-12)


def test_ssim_golden_against_windowed_loops():
    rng = np.random.default_rng(6)
    a = rng.uniform(-1000, 600, size=(2, 16, 16))
    b = a + rng.normal(0, 80, size=a.shape)
    got = ssim(a, b, data_range=1624.0)

    K = _gaussian_kernel2d(11, 1.5)
    C1 = (0.01 * 1624.0) ** 2
    C2 = (0.03 * 1624.0) ** 2
    vals = []
    for z in range(a.shape[0]):
        for cy in range(5, 11):
            for cx in range(5, 11):
                wa = a[z, cy - 5:cy + 6, cx - 5:cx + 6]
                wb = b[z, cy - 5:cy + 6, cx - 5:cx + 6]
                mu_a = (K * wa).sum()
                mu_b = (K * wb).sum()
                va = (K * wa * wa).sum() - mu_a ** 2
                vb = (K * wb * wb).sum() - mu_b ** 2
                cov = (K * wa * wb).sum() - mu_a * mu_b
                vals.append(((2 * mu_a * mu_b + C1) * (2 * cov + C2))
                            / ((mu_a ** 2 + mu_b ** 2 + C1) * (va + vb + C2)))
    assert got == pytest.approx(float(np.mean(vals)), rel=1e-10)


def test_ssim_shape_mismatch():
    with pytest.raises(MetricError):
        ssim(np.zeros((2, 8, 8)), np.zeros((2, 9, 9)))


# -- frechet proxy ------------------------------------------------------------------

def test_frechet_identical_sets_zero():
    rng = np.random.default_rng(1)
    F = rng.standard_normal((50, 8))
    assert frechet_proxy(F, F) <= 1e-6


def test_frechet_mean_shift_closed_form():
    rng = np.random.default_rng(2)
    F = rng.standard_normal((200, 6))
    v = np.arange(6, dtype=np.float64) / 3.0
    assert frechet_proxy(F, F + v) == pytest.approx(float((v ** 2).sum()), abs=1e-9)


def test_frechet_diagonal_case_matches_analytic_oracle():
    # Feature sets engineered so sample covariances are exactly diagonal.
    def diag_set(mu, a, b, reps=3):
        rows = []
        for _ in range(reps):
            rows += [mu + np.array([a, 0.0]), mu - np.array([a, 0.0]),
                     mu + np.array([0.0, b]), mu - np.array([0.0, b])]
        return np.stack(rows)

    F1 = diag_set(np.array([0.0, 0.0]), 1.0, 2.0)
    F2 = diag_set(np.array([0.5, -1.0]), 1.5, 0.7)
    got = frechet_proxy(F1, F2, shrinkage=0.1)

    def shrunk_diag(F):
        cov = np.cov(F, rowvar=False)
        assert abs(cov[0, 1]) < 1e-12
        d = np.diag(cov)
        return 0.9 * d + 0.1 * d.mean()

    d1, d2 = shrunk_diag(F1), shrunk_diag(F2)
    mu_diff = F1.mean(axis=0) - F2.mean(axis=0)
    golden = float((mu_diff ** 2).sum()
                   + np.sum(d1 + d2 - 2.0 * np.sqrt(d1 * d2)))
    assert got == pytest.approx(golden, rel=1e-9)


def test_frechet_dim_mismatch():
    with pytest.raises(MetricError):
        frechet_proxy(np.zeros((5, 3)), np.zeros((5, 4)))


# -- reports ------------------------------------------------------------------------

def test_evaluate_labels_and_csv(tmp_path):
    gt = np.zeros((8, 8, 8), dtype=np.uint8)
    gt[2:6, 2:6, 2:6] = 1
    pred = gt.copy()
    rep = evaluate_labels(pred, gt, (0.6, 0.6, 0.6), {1: "healthy"})
    assert rep.per_class_dsc["healthy"] == 1.0
    assert rep.per_class_hd95["healthy"] == 0.0
    assert rep.mean_dsc == 1.0

    text = report_table_csv([("ours", rep)], tmp_path / "t.csv")
    assert "dsc_healthy" in text.splitlines()[0]
    assert (tmp_path / "t.csv").exists()


def test_report_json_serializes_infinite_psnr():
    rep = MetricReport(psnr=math.inf)
    d = rep.to_dict()
    assert d["psnr"] == "+inf"
    rep2 = MetricReport(psnr=31.8)
    assert rep2.to_dict()["psnr"] == pytest.approx(31.8)
