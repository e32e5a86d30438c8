import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from sne.codec import (QuantTable, assemble_blocks, baseline_decode, dct_forward, dct_inverse, encode_image,
                       entropy_bits, grid_dims, load_rep, quantize, rep_from_bytes, rep_to_bytes,
                       save_rep)
from sne.corpus import desk_corpus
from sne.errors import FormatError, GeometryError, ParameterError, ShapeError
from sne.metrics import psnr

QUALITIES = (1.0, 0.8, 0.6, 0.4, 0.3, 0.2, 0.15, 0.1, 0.05, 0.02)

blocks = arrays(np.float64, (8, 8), elements=st.floats(-300, 300, allow_nan=False))


@pytest.fixture(scope="module")
def corpus():
    return desk_corpus()


def test_dct_constant_block():
    c = dct_forward(np.full((8, 8), 3.0))
    assert c[0, 0] == pytest.approx(24.0, abs=1e-12)
    c[0, 0] = 0.0
    assert_allclose(c, 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(x=blocks)
def test_dct_round_trip_and_parseval(x):
    c = dct_forward(x)
    assert_allclose(dct_inverse(c), x, atol=1e-9)
    assert abs(np.linalg.norm(c) - np.linalg.norm(x)) <= 1e-9 * max(1.0, np.linalg.norm(x))


def test_dct_matches_matrix_oracle():
    n = 8
    k, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    basis = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    basis[0] /= np.sqrt(2.0)
    x = np.random.default_rng(4).uniform(0, 255, (n, n))
    assert_allclose(dct_forward(x), basis @ x @ basis.T, atol=1e-9)


def test_dct_rejects_non_square():
    with pytest.raises(ShapeError):
        dct_forward(np.zeros((4, 8)))


def test_quantize_rules():
    unit = QuantTable.unit(2)
    assert_array_equal(quantize(np.array([[0.4, -0.5], [1.5, -2.6]]), unit), [[0, -1], [2, -3]])
    t = QuantTable(np.full((1, 1), 5.0))
    assert quantize(np.array([[7.5]]), t)[0, 0] == 2
    assert quantize(np.array([[-7.5]]), t)[0, 0] == -2
    assert_array_equal(quantize(np.zeros((8, 8)), QuantTable.standard()), 0)


def test_quant_table_validation():
    with pytest.raises(ParameterError):
        QuantTable(np.full((2, 2), 0.5))
    with pytest.raises(ParameterError):
        QuantTable.standard(8, 0.0)
    with pytest.raises(ShapeError):
        QuantTable(np.ones((2, 3)))
    t = QuantTable.standard(8, 0.1)
    assert (t.entries >= 1).all()
    assert t.entries[0, 0] == pytest.approx(160.0)
    assert QuantTable.standard(4).entries.shape == (4, 4)


def test_grid_geometry():
    assert grid_dims(64, 64, 8, "aligned") == (8, 8)
    assert grid_dims(64, 64, 8, "overlapping") == (15, 15)
    with pytest.raises(GeometryError):
        grid_dims(63, 64, 8, "aligned")
    rep = encode_image(np.zeros((64, 64)), QuantTable.standard(), "overlapping")
    assert rep.grid_shape == (15, 15)


def test_constant_image_exact_and_zero_rate():
    img = np.full((32, 32), 0.5)
    rep = encode_image(img, QuantTable.standard())
    # one DC symbol against 63 zero ACs per block: binary entropy of 1/64, near zero
    p = 1 / 64
    h = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    assert rep.bpp_estimate == pytest.approx(h, abs=1e-12)
    assert rep.bpp_estimate < 0.12
    exact = encode_image(np.full((16, 16), 64 / 255), QuantTable.unit(8))
    assert_allclose(baseline_decode(exact), 64 / 255, atol=1e-12)


def test_unit_table_integer_coefficients_lossless():
    rng = np.random.default_rng(8)
    coeffs = rng.integers(-40, 40, (2, 2, 8, 8)).astype(np.float64)
    coeffs[..., 0, 0] = rng.integers(400, 1600, (2, 2))
    img = assemble_blocks(dct_inverse(coeffs), 16, 16, "aligned") / 255.0
    rep = encode_image(img, QuantTable.unit(8))
    assert_array_equal(rep.coeffs[0], coeffs.astype(np.int16))
    assert_allclose(baseline_decode(rep), np.clip(img, 0, 1), atol=1e-9)


def test_overlapping_mode_averages_back_to_input():
    img = np.random.default_rng(1).uniform(size=(24, 24))
    rep = encode_image(img, QuantTable.unit(8), "overlapping")
    assert psnr(baseline_decode(rep), img) > 45.0


def test_baseline_psnr_regression(corpus):
    values = [psnr(baseline_decode(encode_image(im, QuantTable.standard(8, 1.0))), im) for im in corpus]
    assert min(values) > 20.0
    assert_allclose(values[0], 35.6161, atol=1e-3)


def test_bpp_non_increasing_with_quality(corpus):
    for img in corpus:
        bpp = [encode_image(img, QuantTable.standard(8, q)).bpp_estimate for q in QUALITIES]
        assert all(a >= b for a, b in zip(bpp, bpp[1:])), bpp


def test_entropy_bits():
    assert entropy_bits(np.zeros(10)) == 0.0
    assert entropy_bits(np.array([0, 1, 2, 3])) == pytest.approx(2.0)


def test_encoder_deterministic(corpus):
    t = QuantTable.standard(8, 0.3)
    assert rep_to_bytes(encode_image(corpus[2], t)) == rep_to_bytes(encode_image(corpus[2], t))


def test_rgb_channels_independent():
    rng = np.random.default_rng(3)
    rgb = rng.uniform(size=(16, 16, 3))
    rep = encode_image(rgb, QuantTable.standard(8, 0.5))
    assert rep.channels == 3
    one = encode_image(rgb[:, :, 1], QuantTable.standard(8, 0.5))
    assert_array_equal(rep.coeffs[1], one.coeffs[0])
    assert baseline_decode(rep).shape == (16, 16, 3)


@pytest.mark.parametrize("mode", ["aligned", "overlapping"])
def test_container_round_trip(tmp_path, corpus, mode):
    rep = encode_image(corpus[0], QuantTable.standard(8, 0.15), mode)
    path = tmp_path / "x.sneq"
    save_rep(path, rep)
    back = load_rep(path)
    assert (back.height, back.width, back.mode) == (64, 64, mode)
    assert back.bpp_estimate == rep.bpp_estimate
    assert_array_equal(back.table.entries, rep.table.entries)
    assert_array_equal(back.coeffs, rep.coeffs)
    assert path.read_bytes()[:5] == b"SNEQ1"


def test_container_rejects_damage(corpus):
    data = rep_to_bytes(encode_image(corpus[0], QuantTable.standard()))
    with pytest.raises(FormatError):
        rep_from_bytes(b"XXXXX" + data[5:])
    with pytest.raises(FormatError):
        rep_from_bytes(data[:-3])
    with pytest.raises(FormatError):
        rep_from_bytes(data + b"\0")
