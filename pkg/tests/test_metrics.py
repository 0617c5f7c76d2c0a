import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from visctrl.editing import composite
from visctrl.errors import InputError, ShapeError
from visctrl.metrics import MetricReport, bg_error, latent_mse, masked_latent_mse, ssim

images16 = arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1))


def gradient_pair():
    yy, xx = np.mgrid[0:16, 0:16] / 15.0
    a = np.stack([xx, yy, 0.5 * (xx + yy)], axis=2)
    b = np.stack([xx ** 2, 1 - yy, np.abs(xx - yy)], axis=2)
    return a, b


def ssim_oracle(a, b):
    """Loop over every 8x8 window and evaluate the SSIM formula directly."""
    def gray(img):
        return [[255.0 * (0.299 * img[i][j][0] + 0.587 * img[i][j][1] + 0.114 * img[i][j][2])
                 for j in range(len(img[0]))] for i in range(len(img))]

    x, y = gray(a.tolist()), gray(b.tolist())
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    total, count = 0.0, 0
    for i in range(len(x) - 7):
        for j in range(len(x[0]) - 7):
            wx = [x[i + p][j + q] for p in range(8) for q in range(8)]
            wy = [y[i + p][j + q] for p in range(8) for q in range(8)]
            mx, my = sum(wx) / 64, sum(wy) / 64
            vx = sum((v - mx) ** 2 for v in wx) / 64
            vy = sum((v - my) ** 2 for v in wy) / 64
            cxy = sum((u - mx) * (v - my) for u, v in zip(wx, wy)) / 64
            total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
            count += 1
    return total / count


def test_ssim_matches_direct_oracle():
    a, b = gradient_pair()
    assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-9


def test_ssim_identity_and_symmetry():
    a, b = gradient_pair()
    assert abs(ssim(a, a) - 1.0) < 1e-9
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(images16, images16)
def test_ssim_bounded_and_symmetric(a, b):
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0 + 1e-12
    assert abs(s - ssim(b, a)) < 1e-12


def test_ssim_errors():
    with pytest.raises(InputError):
        ssim(np.zeros((7, 9, 3)), np.zeros((7, 9, 3)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8, 3)), np.zeros((9, 8, 3)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8, 4)), np.zeros((8, 8, 4)))


def test_bg_error_cases():
    rng = np.random.default_rng(0)
    a = rng.random((6, 6, 3))
    m = np.zeros((6, 6), dtype=bool)
    m[1:3, 1:4] = True
    assert bg_error(a, a, m) == 0.0
    assert bg_error(a, rng.random((6, 6, 3)), np.ones((6, 6), bool)) == 0.0
    inside = a.copy()
    inside[m] += 0.3
    assert bg_error(inside, a, m) == 0.0
    one = a.copy()
    one[5, 5] += 10 / 255
    n_bg = 36 - 6
    assert abs(bg_error(one, a, m) - 10 / (255 * n_bg)) < 1e-15
    with pytest.raises(ShapeError):
        bg_error(a, a, np.zeros((5, 6), bool))


@settings(max_examples=30, deadline=None)
@given(images16, images16, arrays(np.bool_, (16, 16)))
def test_composite_closes_bg_contract(e, s, m):
    assert bg_error(composite(e, s, m), s, m) == 0.0


def test_bg_error_permutation_stable():
    rng = np.random.default_rng(1)
    a, b = rng.random((5, 5, 3)), rng.random((5, 5, 3))
    m = rng.random((5, 5)) > 0.5
    perm = rng.permutation(25)

    def shuffle(x):
        return x.reshape(25, *x.shape[2:])[perm].reshape(x.shape)

    assert abs(bg_error(shuffle(a), shuffle(b), shuffle(m)) - bg_error(a, b, m)) < 1e-15


def test_latent_mse():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 4, 2))
    assert latent_mse(a, a) == 0.0
    assert latent_mse(a + 1.0, a) == pytest.approx(1.0, abs=1e-15)
    b = rng.standard_normal((3, 4, 2))
    acc = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        acc += (x - y) ** 2
    assert abs(latent_mse(a, b) - acc / a.size) < 1e-12
    with pytest.raises(ShapeError):
        latent_mse(a, b[:2])


def test_masked_latent_mse():
    a, b = np.zeros((2, 2, 1)), np.ones((2, 2, 1))
    m = np.array([[True, False], [False, False]])
    assert masked_latent_mse(a, b, m) == 1.0
    assert masked_latent_mse(a, b, np.zeros((2, 2), bool)) == 0.0


def test_report_formats():
    r = MetricReport(0.5, 0.0, 0.25, [0.4, 0.5], [0.0, 0.0], [0.5, 0.25], subject_latent_distance=1.5)
    lines = r.lines()
    assert lines[:4] == ["ssim=0.5", "bg_mad=0", "latent_mse=0.25", "subject_latent_distance=1.5"]
    assert "iter2.latent_mse=0.25" in lines
    assert r.csv() == "iteration,ssim,bg_mad,latent_mse\n1,0.4,0,0.5\n2,0.5,0,0.25\n"
