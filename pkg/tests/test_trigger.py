import math

import pytest
import torch

from freqdoor.audit import finite_difference_audit
from freqdoor.dct import middle_band
from freqdoor.errors import ConfigError
from freqdoor.trigger import BaselineInjector, TriggerInjector, amplify


def make_injector(seed=0, **kwargs):
    torch.manual_seed(seed)
    return TriggerInjector(**kwargs)


def test_topk_keeps_k_largest_magnitudes():
    inj = make_injector(band_size=4, top_k=2, block_size=4)
    with torch.no_grad():
        inj.g_raw.copy_(torch.tensor([[3.0, -5.0, 1.0, 2.0]]).expand(3, 4))
    g = inj.general_trigger()
    # sort-by-magnitude oracle: keep 3 and -5
    assert g[0].tolist() == [3.0, -5.0, 0.0, 0.0]


def test_topk_equals_band_size_is_identity():
    inj = make_injector(band_size=8, top_k=8, block_size=4)
    assert torch.equal(inj.general_trigger(), inj.g_raw)


def test_topk_exact_sparsity_random():
    torch.manual_seed(3)
    inj = make_injector(band_size=64, top_k=16)
    with torch.no_grad():
        inj.g_raw.copy_(torch.randn(3, 64))  # distinct magnitudes a.s.
    g = inj.general_trigger()
    assert ((g != 0).sum(dim=1) == 16).all()


def test_topk_tie_break_lowest_index():
    inj = make_injector(band_size=4, top_k=2, block_size=4)
    with torch.no_grad():
        inj.g_raw.copy_(torch.tensor([[2.0, -2.0, 2.0, 1.0]]).expand(3, 4))
    g = inj.general_trigger()
    assert g[0].tolist() == [2.0, -2.0, 0.0, 0.0]


def test_topk_gradient_straight_through():
    inj = make_injector(band_size=4, top_k=2, block_size=4)
    with torch.no_grad():
        inj.g_raw.copy_(torch.tensor([[3.0, -5.0, 1.0, 2.0]]).expand(3, 4))
    g = inj.general_trigger()
    g.sum().backward()
    # gradient ones on survivors, zero on masked entries
    assert inj.g_raw.grad[0].tolist() == [1.0, 1.0, 0.0, 0.0]


def test_patch_weights_constant_at_init():
    inj = make_injector()
    x = torch.rand(2, 3, 64, 64)
    w = inj.patch_weights(x)
    assert w.shape == (2, 3, 4, 4)
    assert torch.allclose(w, torch.full_like(w, math.log(2.0)), atol=1e-6)


def test_patch_weights_batch_equivariant():
    torch.manual_seed(1)
    inj = make_injector(seed=1)
    with torch.no_grad():  # non-trivial head
        torch.nn.init.normal_(inj.weight_net.project.weight, std=0.5)
    x = torch.rand(4, 3, 64, 64)
    w = inj.patch_weights(x)
    perm = torch.tensor([2, 0, 3, 1])
    w_perm = inj.patch_weights(x[perm])
    assert torch.allclose(w[perm], w_perm, atol=1e-6)


def test_patch_weights_positive():
    torch.manual_seed(2)
    inj = make_injector(seed=2)
    with torch.no_grad():
        torch.nn.init.normal_(inj.weight_net.project.weight, std=1.0)
        torch.nn.init.normal_(inj.weight_net.project.bias, std=1.0)
    w = inj.patch_weights(torch.rand(2, 3, 64, 64))
    assert (w > 0).all()


def test_inject_zero_trigger_is_identity():
    inj = make_injector()
    with torch.no_grad():
        inj.g_raw.zero_()
    x = torch.rand(1, 3, 64, 64)
    out = inj.inject(x)
    assert (out.x_p - x).abs().max().item() < 1e-6
    assert out.measured_mse < 1e-14


def test_inject_zero_weights_is_identity():
    inj = make_injector()
    # keep g_raw nonzero; zero the weight net head and bias to -inf-ish
    with torch.no_grad():
        inj.g_raw.copy_(torch.randn(3, inj.band_size))
        inj.weight_net.project.bias.fill_(-40.0)  # softplus(-40) == 0 in f32
    x = torch.rand(1, 3, 64, 64)
    out = inj.inject(x)
    assert (out.x_p - x).abs().max().item() < 1e-6


def test_inject_single_basis_function_oracle():
    # One band index with g = delta and w = 1 adds exactly that DCT basis
    # function to the block pixels.
    b = 8
    inj = make_injector(block_size=b, band_size=1, top_k=1)
    with torch.no_grad():
        inj.g_raw.copy_(torch.tensor([[1.0], [0.0], [0.0]]))
        inj.weight_net.project.weight.zero_()
        # softplus(bias) == 1  =>  bias = ln(e - 1)
        inj.weight_net.project.bias.fill_(math.log(math.e - 1.0))
    (u, v) = middle_band(b, 1)[0]
    x = torch.rand(1, 3, b, b, dtype=torch.float64)
    inj = inj.double()
    out = inj.inject(x)
    delta = out.x_p - x
    # explicit basis-function synthesis
    su = math.sqrt(1.0 / b) if u == 0 else math.sqrt(2.0 / b)
    sv = math.sqrt(1.0 / b) if v == 0 else math.sqrt(2.0 / b)
    n = torch.arange(b, dtype=torch.float64)
    basis = (
        su * sv
        * torch.cos(math.pi * (2 * n + 1) * u / (2 * b)).view(-1, 1)
        * torch.cos(math.pi * (2 * n + 1) * v / (2 * b)).view(1, -1)
    )
    # the masked channels had zero g, so only channel 0 moves
    assert (delta[0, 0] - basis).abs().max().item() < 1e-6
    assert delta[0, 1:].abs().max().item() < 1e-12


def test_inject_locality_out_of_band_untouched():
    from freqdoor.dct import band_flat_indices, block_dct

    torch.manual_seed(4)
    inj = make_injector(seed=4)
    with torch.no_grad():
        inj.g_raw.copy_(0.3 * torch.randn(3, 64))
        torch.nn.init.normal_(inj.weight_net.project.weight, std=0.3)
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        out = inj.inject(x)
    spec_before = block_dct(x, 16).reshape(1, 3, 4, 4, 256)
    spec_after = block_dct(out.x_p, 16).reshape(1, 3, 4, 4, 256)
    band = set(band_flat_indices(16, 64).tolist())
    outside = [i for i in range(256) if i not in band]
    diff = (spec_after[..., outside] - spec_before[..., outside]).abs().max()
    assert float(diff) < 1e-6
    # DC untouched in particular
    assert float((spec_after[..., 0] - spec_before[..., 0]).abs().max()) < 1e-6


def test_inject_pure_function_of_input_and_params():
    torch.manual_seed(5)
    inj = make_injector(seed=5)
    x = torch.rand(2, 3, 64, 64)
    a = inj.inject(x)
    b = inj.inject(x)
    assert torch.equal(a.x_p, b.x_p)


def test_inject_pads_non_divisible_sizes():
    torch.manual_seed(6)
    inj = make_injector(seed=6)
    x = torch.rand(1, 3, 48, 56)  # 56 not divisible by 16
    out = inj.inject(x)
    assert out.x_p.shape == x.shape


def test_inject_clip_only_on_request():
    torch.manual_seed(7)
    inj = make_injector(seed=7)
    with torch.no_grad():
        inj.g_raw.mul_(200.0)  # force excursions outside [0, 1]
    x = torch.rand(1, 3, 64, 64)
    raw = inj.inject(x, clip=False)
    clipped = inj.inject(x, clip=True)
    assert float(raw.x_p.max()) > 1.0 or float(raw.x_p.min()) < 0.0
    assert 0.0 <= float(clipped.x_p.min()) and float(clipped.x_p.max()) <= 1.0


def test_injector_validates_topk_config():
    with pytest.raises(ConfigError):
        TriggerInjector(band_size=4, top_k=5)
    with pytest.raises(ConfigError):
        TriggerInjector(block_size=4, band_size=16)


def test_measured_mse_matches_stored_tensor():
    torch.manual_seed(8)
    inj = make_injector(seed=8)
    x = torch.rand(1, 3, 64, 64)
    out = inj.inject(x, clip=True)
    assert out.measured_mse == float(((out.x_p - x) ** 2).mean())


def test_baseline_zero_epsilon_identity():
    torch.manual_seed(9)
    base = BaselineInjector(epsilon=0.0)
    x = torch.rand(1, 3, 32, 32)
    out = base.inject(x)
    assert torch.equal(out.x_p, x)


def test_baseline_preclip_mse_equals_epsilon_squared():
    torch.manual_seed(10)
    base = BaselineInjector(epsilon=0.005).double()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    out = base.inject(x, clip=False)
    per_image = ((out.x_p - x) ** 2).mean(dim=(1, 2, 3))
    assert torch.allclose(per_image, torch.full_like(per_image, 0.005 ** 2),
                          atol=1e-9)


def test_baseline_zero_residual_returns_input():
    base = BaselineInjector(epsilon=0.005)
    with torch.no_grad():
        for p in base.net.parameters():
            p.zero_()
    x = torch.rand(1, 3, 32, 32)
    out = base.inject(x)
    assert torch.equal(out.x_p, x)


def test_amplify_factor_one_matches_inject():
    torch.manual_seed(11)
    inj = make_injector(seed=11)
    x = torch.rand(1, 3, 64, 64)
    a = amplify(x, inj, 1.0, clip=False)
    b = inj.inject(x, clip=False)
    assert torch.allclose(a.x_p, b.x_p, atol=1e-7)


def test_amplify_mse_scales_quadratically():
    torch.manual_seed(12)
    inj = make_injector(seed=12).double()
    with torch.no_grad():
        inj.g_raw.copy_(0.05 * torch.randn(3, 64, dtype=torch.float64))
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    base = inj.inject(x, clip=False)
    amp = amplify(x, inj, 3.0, clip=False)
    assert amp.measured_mse == pytest.approx(9.0 * base.measured_mse, abs=1e-9)


def test_amplify_budget_value():
    # factor 3 with epsilon 0.005 -> budget 2.25e-4
    assert (3.0 * 0.005) ** 2 == pytest.approx(2.25e-4)


def test_amplify_rejects_small_factor():
    inj = make_injector()
    with pytest.raises(ConfigError):
        amplify(torch.rand(1, 3, 64, 64), inj, 0.5)


def test_trigger_gradients_match_finite_differences():
    torch.manual_seed(13)
    inj = make_injector(seed=13).double()
    with torch.no_grad():
        inj.g_raw.copy_(0.2 * torch.randn(3, 64, dtype=torch.float64))
        torch.nn.init.normal_(inj.weight_net.project.weight, std=0.2)
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    target = torch.rand(1, 3, 64, 64, dtype=torch.float64)

    def loss_fn():
        return ((inj.inject(x).x_p - target) ** 2).mean()

    named = {
        "g_raw": inj.g_raw,
        "head.weight": inj.weight_net.project.weight,
        "head.bias": inj.weight_net.project.bias,
        "conv0.weight": inj.weight_net.features[0].weight,
    }
    report = finite_difference_audit(loss_fn, named, probes_per_tensor=3, rtol=1e-3)
    assert report.passed, report.failures
