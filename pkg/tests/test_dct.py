import math

import pytest
import torch

from freqdoor.dct import (
    band_flat_indices,
    block_dct,
    block_idct,
    dct_matrix,
    middle_band,
    pad_to_multiple,
    zigzag_order,
)
from freqdoor.errors import ConfigError, ShapeError


def brute_force_dct2(block):
    """Independent double-sum orthonormal DCT-II oracle."""
    b = block.shape[0]
    out = torch.zeros(b, b, dtype=torch.float64)
    for u in range(b):
        for v in range(b):
            su = math.sqrt(1.0 / b) if u == 0 else math.sqrt(2.0 / b)
            sv = math.sqrt(1.0 / b) if v == 0 else math.sqrt(2.0 / b)
            acc = 0.0
            for n in range(b):
                for m in range(b):
                    acc += (
                        float(block[n, m])
                        * math.cos(math.pi * (2 * n + 1) * u / (2 * b))
                        * math.cos(math.pi * (2 * m + 1) * v / (2 * b))
                    )
            out[u, v] = su * sv * acc
    return out


def test_dct_matrix_is_orthonormal():
    for b in (2, 4, 8, 16):
        c = dct_matrix(b)
        eye = c @ c.T
        assert torch.allclose(eye, torch.eye(b, dtype=torch.float64), atol=1e-12)


def test_constant_block_has_dc_only():
    for b, c in ((4, 0.25), (16, 0.8)):
        x = torch.full((1, 3, b, b), c)
        coeffs = block_dct(x, b)
        assert coeffs[0, 0, 0, 0, 0, 0].item() == pytest.approx(c * b, abs=1e-6)
        coeffs_flat = coeffs.reshape(3, -1)
        assert coeffs_flat[:, 1:].abs().max().item() < 1e-6


def test_round_trip_identity():
    torch.manual_seed(0)
    x = torch.rand(2, 3, 32, 48)
    back = block_idct(block_dct(x, 16))
    assert (back - x).abs().max().item() < 1e-6


def test_matches_brute_force_oracle_4x4():
    torch.manual_seed(1)
    block = torch.rand(4, 4, dtype=torch.float64)
    x = block.view(1, 1, 4, 4).expand(1, 3, 4, 4).contiguous()
    got = block_dct(x, 4)[0, 0, 0, 0]
    want = brute_force_dct2(block)
    assert (got - want).abs().max().item() < 1e-8


def test_block_dct_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        block_dct(torch.rand(1, 3, 30, 30), 16)
    with pytest.raises(ConfigError):
        dct_matrix(0)


def test_pad_to_multiple_round_trip():
    x = torch.rand(1, 3, 30, 41)
    padded, (ph, pw) = pad_to_multiple(x, 16)
    assert padded.shape[-2] % 16 == 0 and padded.shape[-1] % 16 == 0
    assert (ph, pw) == (2, 7)
    assert torch.equal(padded[..., :30, :41], x)


def test_zigzag_prefix_matches_jpeg_scan():
    # First entries of the standard scan for any block size >= 4.
    order = zigzag_order(4)
    assert order[:8] == (
        (0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2), (0, 3), (1, 2))
    assert len(set(zigzag_order(16))) == 256


def test_middle_band_b2_n1():
    assert middle_band(2, 1) == ((0, 1),)


def test_middle_band_b16_n64():
    band = middle_band(16, 64)
    assert len(band) == 64
    assert len(set(band)) == 64
    assert (0, 0) not in band
    # Centered: starts at zigzag position (256 - 64) // 2 = 96.
    assert band[0] == zigzag_order(16)[96]


def test_middle_band_never_contains_dc():
    for b in (2, 3, 4, 8):
        for n in range(1, b * b):
            assert (0, 0) not in middle_band(b, n)


def test_middle_band_deterministic_and_validated():
    assert middle_band(16, 64) == middle_band(16, 64)
    with pytest.raises(ConfigError):
        middle_band(4, 16)  # N > B^2 - 1


def test_band_flat_indices_match_pairs():
    flat = band_flat_indices(8, 10)
    pairs = middle_band(8, 10)
    assert flat.tolist() == [u * 8 + v for u, v in pairs]
