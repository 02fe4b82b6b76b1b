import math

import pytest
import torch

from freqdoor.codec import HyperpriorCodec, RateReport
from freqdoor.errors import ConfigError, DataError
from freqdoor.evaluation import (
    DefenseGrid,
    EvaluationReport,
    bpp_of,
    defense_sweep,
    evaluate_codec,
    gaussian_blur,
    psnr,
    quantize_8bit,
    rd_curve,
    squeeze_bits,
)
from freqdoor.trigger import TriggerInjector


def tiny_codec(quality=3, seed=0):
    torch.manual_seed(seed)
    return HyperpriorCodec(quality=quality, base=8, latent_channels=8,
                           hyper_channels=4)


def test_psnr_identical_images_capped():
    x = torch.rand(1, 3, 16, 16)
    assert psnr(x, x) == pytest.approx(100.0)


def test_psnr_direct_values():
    x = torch.zeros(1, 3, 10, 10)
    y = torch.full_like(x, 0.1)  # MSE 0.01 -> 20 dB
    assert psnr(x, y, eight_bit=False) == pytest.approx(20.0, rel=1e-6)
    z = torch.full_like(x, 0.005)  # MSE = eps^2 = 2.5e-5 -> ~46.02 dB
    assert psnr(x, z, eight_bit=False) == pytest.approx(
        10 * math.log10(1 / 2.5e-5), rel=1e-6)
    assert psnr(x, z, eight_bit=False) == pytest.approx(46.02, abs=0.01)


def test_psnr_eight_bit_quantizes_first():
    x = torch.zeros(1, 3, 8, 8)
    y = torch.full_like(x, 1e-4)  # rounds to 0 at 8 bits
    assert psnr(x, y) == pytest.approx(100.0)
    assert psnr(x, y, eight_bit=False) < 100.0


def test_quantize_8bit_preserves_8bit_data():
    k = torch.arange(256).view(1, 1, 16, 16).float() / 255.0
    x = k.expand(1, 3, 16, 16)
    assert torch.equal(quantize_8bit(x), x)


def test_bpp_of_example():
    rates = RateReport(bits_y=torch.tensor(400.0), bits_z=torch.tensor(112.0),
                       num_pixels=256)
    assert bpp_of(rates, 16, 16, 1) == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        bpp_of(rates, 0, 16, 1)


def test_bpp_additive_over_batches():
    r1 = RateReport(torch.tensor(100.0), torch.tensor(20.0), 256)
    r2 = RateReport(torch.tensor(60.0), torch.tensor(12.0), 256)
    merged = RateReport(r1.bits_y + r2.bits_y, r1.bits_z + r2.bits_z, 512)
    assert bpp_of(merged, 16, 16, 2) == pytest.approx(
        (bpp_of(r1, 16, 16, 1) + bpp_of(r2, 16, 16, 1)) / 2)


def test_gaussian_blur_sigma_zero_identity():
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(gaussian_blur(x, 0.0), x)


def test_gaussian_blur_impulse_recovers_kernel():
    sigma = 0.8
    radius = math.ceil(3 * sigma)
    x = torch.zeros(1, 3, 33, 33)
    x[:, :, 16, 16] = 1.0
    out = gaussian_blur(x, sigma)
    # direct kernel construction oracle
    coords = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k1 = torch.exp(-coords ** 2 / (2 * sigma * sigma))
    k1 = k1 / k1.sum()
    want = k1.view(-1, 1) * k1.view(1, -1)
    got = out[0, 0, 16 - radius : 16 + radius + 1, 16 - radius : 16 + radius + 1]
    assert torch.allclose(got, want, atol=1e-6)
    assert float(out[0, 0].sum()) == pytest.approx(1.0, abs=1e-6)


def test_gaussian_blur_rejects_negative_sigma():
    with pytest.raises(ConfigError):
        gaussian_blur(torch.rand(1, 3, 8, 8), -0.1)


def test_squeeze_bits_depth8_identity():
    k = torch.arange(256).view(1, 1, 16, 16).float() / 255.0
    x = k.expand(1, 3, 16, 16).contiguous()
    assert torch.equal(squeeze_bits(x, 8), x)


def test_squeeze_bits_depth1_level_centers():
    x = torch.tensor([0.0, 0.2, 0.49, 0.5, 0.8, 1.0]).view(1, 1, 1, 6)
    out = squeeze_bits(x.expand(1, 3, 1, 6), 1)
    assert set(out.unique().tolist()) == {0.25, 0.75}
    assert out[0, 0, 0].tolist() == [0.25, 0.25, 0.25, 0.75, 0.75, 0.75]


def test_squeeze_bits_depth_validation():
    with pytest.raises(ConfigError):
        squeeze_bits(torch.rand(1, 3, 4, 4), 0)
    with pytest.raises(ConfigError):
        squeeze_bits(torch.rand(1, 3, 4, 4), 9)


def test_evaluate_codec_rows_and_aggregates():
    codec = tiny_codec()
    images = torch.rand(3, 3, 32, 32)
    rep = evaluate_codec(codec, images, batch_size=2)
    assert len(rep.rows) == 3
    assert rep.aggregates["bpp"] == pytest.approx(
        sum(r["bpp"] for r in rep.rows) / 3)
    assert rep.aggregates == rep.recompute_aggregates()


def test_evaluate_codec_empty_errors():
    with pytest.raises(DataError):
        evaluate_codec(tiny_codec(), torch.empty(0, 3, 32, 32))


def test_rd_curve_rows_sorted_by_quality():
    codecs = [tiny_codec(quality=q, seed=q) for q in (3, 1, 2)]
    images = torch.rand(2, 3, 32, 32)
    rep = rd_curve(codecs, images, mode="clean")
    assert [r["quality"] for r in rep.rows] == [1, 2, 3]


def test_rd_curve_single_image_aggregates_equal_row():
    codec = tiny_codec()
    images = torch.rand(1, 3, 32, 32)
    per_image = evaluate_codec(codec, images)
    curve = rd_curve([codec], images)
    assert curve.rows[0]["bpp"] == pytest.approx(per_image.rows[0]["bpp"])
    assert curve.rows[0]["psnr"] == pytest.approx(per_image.rows[0]["psnr"])


def test_rd_curve_validations():
    with pytest.raises(DataError):
        rd_curve([tiny_codec()], torch.empty(0, 3, 32, 32))
    with pytest.raises(ConfigError):
        rd_curve([tiny_codec()], torch.rand(1, 3, 32, 32), mode="poisoned")


def test_defense_sweep_identity_settings_match_baseline():
    torch.manual_seed(1)
    codec = tiny_codec(seed=1)
    codec.eval()
    trigger = TriggerInjector(block_size=8, band_size=16, top_k=4)
    images = torch.rand(2, 3, 32, 32)
    grid = DefenseGrid(blur_sigmas=(0.0,), squeeze_depths=(8,))
    rep = defense_sweep(codec, trigger, images, grid)
    agg = rep.aggregates
    for variant in ("clean", "attacked", "amplified"):
        base = agg[("none", 0.0, variant)]
        assert agg[("blur", 0.0, variant)]["psnr"] == pytest.approx(base["psnr"])
        assert agg[("squeeze", 8.0, variant)]["psnr"] == pytest.approx(base["psnr"])
        assert agg[("blur", 0.0, variant)]["bpp"] == pytest.approx(base["bpp"])


def test_defense_sweep_empty_grid_baseline_only():
    torch.manual_seed(2)
    codec = tiny_codec(seed=2)
    trigger = TriggerInjector(block_size=8, band_size=16, top_k=4)
    images = torch.rand(1, 3, 32, 32)
    rep = defense_sweep(codec, trigger, images,
                        DefenseGrid(blur_sigmas=(), squeeze_depths=()))
    assert {r["defense"] for r in rep.rows} == {"none"}


def test_report_csv_round_trip(tmp_path):
    rep = EvaluationReport(rows=[{"index": 0, "bpp": 1.5, "psnr": 30.0}])
    rep.aggregates = rep.recompute_aggregates()
    path = tmp_path / "rows.csv"
    rep.to_csv(path)
    text = path.read_text()
    assert "estimated entropy" in text
    assert "1.5" in text
