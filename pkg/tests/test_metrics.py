import math

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from hazegan.io import Manifest, Record, save_image
from hazegan.metrics import evaluate_dataset, psnr, ssim


def _textured(seed=0, shape=(32, 40, 3)):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    base = 0.5 + 0.3 * np.sin(xx / 3.0)[..., None] * np.cos(yy / 5.0)[..., None]
    return np.clip(base + 0.05 * rng.normal(size=shape), 0, 1)


def test_psnr_examples():
    a = np.full((8, 8, 3), 0.3)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-3)
    b = np.zeros((4, 4, 3))
    assert psnr(b, b + 0.5) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_matches_skimage():
    a, b = _textured(0), _textured(1)
    assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), abs=1e-9)


def test_psnr_monotone_in_noise():
    a = _textured(2)
    noise = np.random.default_rng(0).uniform(-1, 1, size=a.shape)
    vals = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_examples():
    a = _textured(3)
    assert ssim(a, a) == 1.0
    c1, c2 = np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.6)
    expect = (2 * 0.2 * 0.6 + 1e-4) / (0.2**2 + 0.6**2 + 1e-4)
    assert ssim(c1, c2) == pytest.approx(expect, abs=1e-9)
    assert ssim(c1, c2) == pytest.approx(0.6001, abs=1e-3)
    assert ssim(a, 1 - a) < 0.5


def test_ssim_matches_skimage_gaussian():
    a, b = _textured(4), _textured(5)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_symmetric_and_bounded():
    a, b = _textured(6), _textured(7)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    assert -1 <= ssim(a, b) <= 1


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def _pairs(tmp_path, n=3, identical=True):
    m = Manifest(root=tmp_path)
    for i in range(n):
        img = _textured(10 + i, (16, 16, 3))
        save_image(img, tmp_path / f"c{i}.png")
        save_image(img if identical else img * 0.8, tmp_path / f"h{i}.png")
        m.append(Record(clean_path=f"c{i}.png", hazy_path=f"h{i}.png"))
    return m


def test_identity_on_identical_pairs(tmp_path):
    rep = evaluate_dataset(_pairs(tmp_path), lambda hazy, rec: hazy)
    assert rep.count == 3 and rep.mean_ssim == 1.0 and rep.baseline_ssim == 1.0


def test_report_means_are_arithmetic(tmp_path):
    rep = evaluate_dataset(_pairs(tmp_path, identical=False), lambda hazy, rec: np.clip(hazy * 1.1, 0, 1))
    assert abs(rep.mean_psnr - np.mean([s.psnr for s in rep.scores])) < 1e-9
    assert abs(rep.mean_ssim - np.mean([s.ssim for s in rep.scores])) < 1e-9
    assert rep.lines()[0].startswith("name")


def test_unreadable_pairs_are_skipped(tmp_path):
    m = _pairs(tmp_path, identical=False)
    (tmp_path / "h1.png").write_bytes(b"not a png")
    m.append(Record(clean_path="c0.png", hazy_path="missing.png"))
    rep = evaluate_dataset(m, lambda hazy, rec: hazy)
    assert len(rep.skipped) == 2
    assert rep.count == len(m) - len(rep.skipped)


def test_analytic_inverse_scores_above_60db():
    from hazegan.physics import compose_haze, invert_haze, sample_haze_params, transmission_from_depth

    rng = np.random.default_rng(8)
    for _ in range(5):
        J = _textured(int(rng.integers(100)), (24, 24, 3))
        p = sample_haze_params(rng)
        t = transmission_from_depth(rng.uniform(size=(24, 24)), p.beta)
        out = invert_haze(compose_haze(J, t, p), t, p)
        mask = t >= 0.05
        assert psnr(J[mask], out[mask]) >= 60
