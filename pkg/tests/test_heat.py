"""Spectral dissipation solver: transform exactness, semigroup structure,
the blur correspondence, and the explicit Euler sharpening probe."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy.ndimage import convolve1d

from heatgen.heat import (
    dct2,
    dissipate,
    dissipate_batch,
    euler_sharpen_step,
    frequency_grid,
    idct2,
)

from conftest import FIXTURES


def _rand_image(seed, h=16, w=16, c=1):
    return np.random.default_rng(seed).random((h, w, c))


def _load_gray(path):
    with Image.open(path) as im:
        a = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return a[:, :, None]


# --- transform ---


def test_dct2_matches_basis_sum():
    h, w = 6, 8
    u = _rand_image(0, h, w)[:, :, 0]
    got = dct2(u[:, :, None])[:, :, 0]
    ys, xs = np.arange(h), np.arange(w)
    brute = np.empty((h, w))
    for m in range(h):
        for n in range(w):
            cy = np.cos(np.pi * m * (2 * ys + 1) / (2 * h)) * np.sqrt((1 if m == 0 else 2) / h)
            cx = np.cos(np.pi * n * (2 * xs + 1) / (2 * w)) * np.sqrt((1 if n == 0 else 2) / w)
            brute[m, n] = (u * cy[:, None] * cx[None, :]).sum()
    assert np.abs(got - brute).max() < 1e-12


def test_dct2_constant_image_concentrates_in_zero_mode():
    u = np.full((4, 4, 1), 0.7)
    coeffs = dct2(u)
    # orthonormal scaling: the zero coefficient is mean * sqrt(H*W)
    assert coeffs[0, 0, 0] == pytest.approx(0.7 * 4.0, abs=1e-14)
    rest = coeffs.copy()
    rest[0, 0, 0] = 0.0
    assert np.abs(rest).max() < 1e-14


def test_idct2_zero_mode_gives_constant():
    coeffs = np.zeros((4, 4, 1))
    coeffs[0, 0, 0] = 2.0
    u = idct2(coeffs)
    assert np.abs(u - 2.0 / 4.0).max() < 1e-14


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_transform_roundtrip(seed):
    u = _rand_image(seed)
    assert np.abs(idct2(dct2(u)) - u).max() < 1e-10


# --- eigenvalue grid ---


def test_frequency_grid_two_by_two():
    lam = frequency_grid(2, 2).lambdas
    q = np.pi**2 / 4.0
    assert lam[0, 0] == 0.0
    assert lam[0, 1] == pytest.approx(q, rel=1e-15)
    assert lam[1, 0] == pytest.approx(q, rel=1e-15)
    assert lam[1, 1] == pytest.approx(2 * q, rel=1e-15)


def test_frequency_grid_monotone_and_peaked():
    g = frequency_grid(28, 28)
    assert g.lambdas[0, 0] == 0.0
    assert np.all(np.diff(g.lambdas, axis=0) > 0)
    assert np.all(np.diff(g.lambdas, axis=1) > 0)
    assert g.lambdas.max() == pytest.approx(np.pi**2 * 2 * 27**2 / 28**2, rel=1e-15)
    assert g.freqs[0, 0] == 0.0
    assert g.freqs.max() == pytest.approx(np.sqrt(g.lambdas.max()) / np.pi, rel=1e-15)


def test_frequency_grid_rejects_empty():
    with pytest.raises(ValueError):
        frequency_grid(0, 4)


# --- dissipation ---


def test_dissipate_time_zero_is_identity():
    u = _rand_image(1)
    assert np.abs(dissipate(u, 0.0) - u).max() < 1e-10


def test_dissipate_constant_image_fixed_point():
    u = np.full((8, 8, 1), 0.3)
    for t in (0.1, 5.0, 1e4):
        assert np.abs(dissipate(u, t) - 0.3).max() < 1e-12


def test_dissipate_rejects_negative_time():
    with pytest.raises(ValueError):
        dissipate(_rand_image(2), -0.5)


def test_dissipate_rejects_non_finite():
    u = _rand_image(3)
    u[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        dissipate(u, 1.0)


def _gaussian_blur_reference(u, sigma_b):
    r = int(np.ceil(4.0 * sigma_b))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma_b**2))
    k /= k.sum()
    out = np.empty_like(u)
    for c in range(u.shape[2]):
        tmp = convolve1d(u[:, :, c], k, axis=0, mode="nearest")
        out[:, :, c] = convolve1d(tmp, k, axis=1, mode="nearest")
    return out


@pytest.mark.parametrize("sigma_b", [1.0, 1.5, 2.0])
def test_dissipation_matches_gaussian_convolution_interior(sigma_b):
    camera = _load_gray(FIXTURES / "camera.png")[200:264, 200:264]
    noise = _rand_image(4, 64, 64)
    m = int(np.ceil(4.0 * sigma_b))
    for u in (camera, noise):
        spectral = dissipate(u, sigma_b**2 / 2.0)[m:-m, m:-m]
        direct = _gaussian_blur_reference(u, sigma_b)[m:-m, m:-m]
        assert np.abs(spectral - direct).max() < 1e-2


def test_dissipation_matches_convolution_subpixel_on_bandlimited_content():
    # A sampled Gaussian kernel below sigma_b ~ 1 aliases: its own frequency
    # response near Nyquist is off by tens of percent, so sub-pixel blurs can
    # only be cross-checked on content without energy up there.
    smooth = dissipate(_rand_image(5, 64, 64), 1.5**2 / 2.0)
    spectral = dissipate(smooth, 0.125)[4:-4, 4:-4]
    direct = _gaussian_blur_reference(smooth, 0.5)[4:-4, 4:-4]
    assert np.abs(spectral - direct).max() < 1e-2


@given(
    st.integers(0, 2**32 - 1),
    st.floats(0.0, 100.0),
    st.floats(0.0, 100.0),
)
@settings(max_examples=25, deadline=None)
def test_semigroup_property(seed, t1, t2):
    u = _rand_image(seed)
    two_hops = dissipate(dissipate(u, t1), t2)
    one_hop = dissipate(u, t1 + t2)
    assert np.abs(two_hops - one_hop).max() < 1e-8


def test_steady_state_reaches_channel_mean():
    u = _rand_image(6, 32, 32, 3)
    out = dissipate(u, 1e6)
    for c in range(3):
        assert np.abs(out[:, :, c] - u[:, :, c].mean()).max() < 1e-6


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 50.0), st.floats(0.01, 50.0))
@settings(max_examples=25, deadline=None)
def test_contraction_per_mode(seed, t1, dt):
    u = _rand_image(seed, 8, 8)
    a = np.abs(dct2(dissipate(u, t1)))
    b = np.abs(dct2(dissipate(u, t1 + dt)))
    mask = np.ones((8, 8, 1), dtype=bool)
    mask[0, 0, 0] = False
    assert np.all(b[mask] <= a[mask] + 1e-15)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1000.0))
@settings(max_examples=25, deadline=None)
def test_mean_conservation(seed, t):
    u = _rand_image(seed, 12, 9, 3)
    out = dissipate(u, t)
    for c in range(3):
        assert abs(out[:, :, c].mean() - u[:, :, c].mean()) < 1e-12


def test_linearity():
    rng = np.random.default_rng(7)
    u, v = rng.random((2, 16, 16, 1))
    a, b = 1.7, -0.6
    lhs = dissipate(a * u + b * v, 3.0)
    rhs = a * dissipate(u, 3.0) + b * dissipate(v, 3.0)
    assert np.abs(lhs - rhs).max() < 1e-10


def test_dissipate_batch_matches_per_item_calls():
    rng = np.random.default_rng(8)
    stack = rng.random((5, 12, 12, 1))
    times = np.array([0.0, 0.5, 2.0, 2.0, 40.0])
    batched = dissipate_batch(stack, times)
    for i in range(5):
        assert np.abs(batched[i] - dissipate(stack[i], times[i])).max() < 1e-12


def test_dissipate_batch_scalar_time_broadcast():
    rng = np.random.default_rng(9)
    stack = rng.random((3, 8, 8, 1))
    assert np.array_equal(dissipate_batch(stack, 1.5), dissipate_batch(stack, np.full(3, 1.5)))


def test_dissipate_batch_rejects_wrong_time_shape():
    with pytest.raises(ValueError):
        dissipate_batch(np.zeros((3, 8, 8, 1)), np.zeros(4))


# --- Euler sharpening probe ---


def test_euler_step_constant_unchanged():
    u = np.full((8, 8, 1), 0.5)
    assert np.array_equal(euler_sharpen_step(u, 2.0), u)


def test_euler_step_impulse_stencil():
    u = np.zeros((7, 7, 1))
    u[3, 3, 0] = 1.0
    out = euler_sharpen_step(u, 0.1)
    assert out[3, 3, 0] == pytest.approx(1.4, abs=1e-15)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        assert out[3 + dy, 3 + dx, 0] == pytest.approx(-0.1, abs=1e-15)
    touched = np.zeros((7, 7, 1), dtype=bool)
    touched[2:5, 2:5] = True
    assert np.abs(out[~touched]).max() == 0.0


def test_euler_step_rejects_non_positive_dt():
    with pytest.raises(ValueError):
        euler_sharpen_step(np.zeros((4, 4, 1)), 0.0)


def test_euler_step_inverts_dissipation_at_second_order():
    coeffs = np.zeros((32, 32))
    coeffs[1, 0], coeffs[0, 1], coeffs[1, 1], coeffs[2, 1] = 1.0, 0.8, 0.6, 0.4
    smooth = idct2(coeffs[:, :, None])
    errs = []
    for dt in (4.0, 2.0, 1.0, 0.5):
        errs.append(np.abs(euler_sharpen_step(dissipate(smooth, dt), dt) - smooth).max())
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    # error per mode is (theta^4/12) dt + (lambda^2/2) dt^2: halving dt cuts it
    # by a hair under 4x, and the exact ratio drifts down as dt shrinks
    for r in ratios:
        assert 3.2 < r < 4.5
