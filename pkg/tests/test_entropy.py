#!/usr/bin/env python3
"""
Tests for quantization, likelihoods, the context model and CDF tables.
"""

import math

import numpy as np
import pytest
import torch
from scipy.integrate import quad
from scipy.special import ndtr

from constants import LIKELIHOOD_FLOOR, SCALES_LEVELS
from entropy import (
    FactorizedPrior,
    build_gaussian_cdf_tables,
    checkerboard_mask,
    default_gaussian_tables,
    factorized_cdf_tables,
    factorized_likelihood,
    gaussian_likelihood,
    keep_anchors,
    latent_forward,
    positive_scale,
    quantize,
    quantize_ste,
    rate_estimate,
    round_half_away,
    scale_indexes,
    scale_table,
    scctx_parameters,
)
from errors import CodingError, ContextOrderError
from transforms import assemble_model


class TestQuantization:
    """Rounding, noise and straight-through quantizers."""

    def test_round_half_away_from_zero(self):
        v = torch.tensor([-1.5, -0.5, 0.5, 1.5, 2.4, -2.6])
        assert round_half_away(v).tolist() == [-2.0, -1.0, 1.0, 2.0, 2.0, -3.0]

    def test_eval_quantizer_centers_on_mu(self):
        y = torch.tensor([1.2, -0.7, 3.49])
        mu = torch.tensor([0.5, 0.5, 0.0])
        assert torch.allclose(quantize(y, mu, "eval"), torch.tensor([1.5, -0.5, 3.0]))

    def test_train_quantizer_noise_bounded(self):
        y = torch.randn(1000)
        y_tilde = quantize(y, torch.zeros_like(y), "train")
        assert torch.all((y_tilde - y).abs() <= 0.5)
        assert not torch.equal(y_tilde, y)

    def test_ste_gradient_is_identity(self):
        y = torch.randn(10, requires_grad=True)
        quantize_ste(y, torch.zeros(10)).sum().backward()
        assert torch.equal(y.grad, torch.ones(10))

    def test_ste_forward_rounds(self):
        y = torch.tensor([0.4, 0.6])
        assert quantize_ste(y, torch.zeros(2)).tolist() == pytest.approx([0.0, 1.0], abs=1e-6)

    def test_positive_scale_floor(self):
        assert positive_scale(torch.tensor([-100.0])).item() == pytest.approx(1e-6)

    def test_eval_sweep(self):
        """Every value lands on mu + integer, at most half a bin away."""
        y = torch.linspace(-60.0, 60.0, 200001, dtype=torch.float64)
        mu = torch.rand(y.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(2)) * 4 - 2
        q = quantize(y, mu, "eval")
        offset = q - mu
        assert torch.all((offset - offset.round()).abs() < 1e-9)
        assert torch.all((q - y).abs() <= 0.5 + 1e-9)

    def test_round_half_away_sweep(self):
        v = np.arange(-4000, 4001) / 8
        expected = np.where(v >= 0, np.floor(v + 0.5), np.ceil(v - 0.5))
        assert np.array_equal(round_half_away(torch.from_numpy(v)).numpy(), expected)


class TestGaussianLikelihood:
    """Discretized Gaussian bin masses."""

    def test_bin_mass_at_zero(self):
        p = gaussian_likelihood(torch.zeros(1), torch.zeros(1), torch.ones(1))
        assert p.item() == pytest.approx(ndtr(0.5) - ndtr(-0.5), abs=1e-6)

    def test_sums_to_one(self):
        k = torch.arange(-60, 61, dtype=torch.float64)
        mu = torch.full_like(k, 0.3)
        p = gaussian_likelihood(k, mu, torch.full_like(k, 3.0), floor=0)
        assert p.sum().item() == pytest.approx(1.0, abs=1e-9)

    def test_floor(self):
        p = gaussian_likelihood(torch.tensor([50.0]), torch.zeros(1), torch.ones(1))
        assert p.item() == LIKELIHOOD_FLOOR

    def test_symmetric_in_offset(self):
        sigma = torch.full((1,), 2.0)
        a = gaussian_likelihood(torch.tensor([1.0]), torch.zeros(1), sigma)
        b = gaussian_likelihood(torch.tensor([-1.0]), torch.zeros(1), sigma)
        assert torch.equal(a, b)

    def test_rejects_non_positive_sigma(self):
        with pytest.raises(CodingError):
            gaussian_likelihood(torch.zeros(2), torch.zeros(2), torch.tensor([1.0, 0.0]))

    @pytest.mark.parametrize("sigma", [0.11, 0.5, 1.0, 3.7, 40.0])
    @pytest.mark.parametrize("offset", [0.0, 0.3, 2.0, -5.0])
    def test_matches_quadrature(self, sigma, offset):
        def pdf(t):
            return math.exp(-0.5 * (t / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))

        expected, _ = quad(pdf, offset - 0.5, offset + 0.5, epsabs=1e-13)
        p = gaussian_likelihood(torch.tensor([offset], dtype=torch.float64), torch.zeros(1, dtype=torch.float64),
                                torch.tensor([sigma], dtype=torch.float64), floor=0)
        assert p.item() == pytest.approx(expected, abs=1e-6)

    def test_half_sigma_central_bin(self):
        p = gaussian_likelihood(torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64),
                                torch.full((1,), 0.5, dtype=torch.float64))
        assert p.item() == pytest.approx(0.682689, abs=1e-6)


class TestFactorizedPrior:
    """Learned monotone CDF for the hyper-latent."""

    def test_symmetric_at_init(self):
        prior = FactorizedPrior(4)
        cdf = prior.cdf(torch.zeros(4, 1))
        assert torch.allclose(cdf, torch.full((4, 1), 0.5))

    def test_monotone(self):
        prior = FactorizedPrior(2)
        t = torch.linspace(-30, 30, 61).repeat(2, 1)
        assert torch.all(prior.cdf(t).diff(dim=1) >= 0)

    def test_mass_sums_to_one(self):
        prior = FactorizedPrior(3)
        z = torch.arange(-300, 301, dtype=torch.float32).view(1, 1, 1, -1).repeat(1, 3, 1, 1)
        p = prior.likelihood(z, floor=0)
        assert torch.allclose(p.sum(dim=-1), torch.ones(1, 3, 1), atol=1e-4)

    def test_median_bin_is_most_likely(self):
        prior = FactorizedPrior(2)
        z = torch.arange(-20, 21, dtype=torch.float32).view(1, 1, 1, -1).repeat(1, 2, 1, 1)
        p = factorized_likelihood(z, prior)
        assert torch.equal(p.argmax(dim=-1), torch.full((1, 2, 1), 20))

    def test_quantiles_bracket_zero(self):
        lower, upper = FactorizedPrior(3).quantiles()
        assert torch.all(lower < 0)
        assert torch.all(upper > 0)
        assert torch.allclose(lower, -upper, atol=1e-3)


class TestContextModel:
    """Decoding-order guarantees of the space-channel context."""

    @pytest.fixture
    def model(self, tiny_config):
        return assemble_model(tiny_config, seed=0).eval()

    @pytest.fixture
    def z_hat(self):
        return torch.round(torch.randn(1, 16, 2, 2) * 3)

    def test_checkerboard_mask(self):
        mask = checkerboard_mask(4, 4)[0, 0]
        assert mask[0, 0] and mask[1, 1] and not mask[0, 1]
        assert int(mask.sum()) == 8

    def test_keep_anchors(self):
        t = torch.ones(1, 2, 2, 2)
        kept = keep_anchors(t, checkerboard_mask(2, 2))
        assert kept.sum().item() == 4

    @torch.no_grad()
    def test_non_anchor_values_are_invisible(self, model, z_hat):
        mask = checkerboard_mask(8, 8)
        anchors = torch.randn(1, 4, 8, 8)
        other = torch.where(mask, anchors, torch.randn(1, 4, 8, 8))
        a = scctx_parameters([], z_hat, model, anchor_hat=anchors)
        b = scctx_parameters([], z_hat, model, anchor_hat=other)
        assert torch.equal(a[0], b[0])
        assert torch.equal(a[1], b[1])

    @torch.no_grad()
    def test_group_depends_on_earlier_groups(self, model, z_hat):
        first = torch.randn(1, 4, 8, 8)
        a = scctx_parameters([first], z_hat, model)
        b = scctx_parameters([first + 1.0], z_hat, model)
        assert not torch.allclose(a[0], b[0])
        assert a[0].shape == (1, 4, 8, 8)

    def test_out_of_order_groups(self, model, z_hat):
        with pytest.raises(ContextOrderError):
            scctx_parameters([torch.zeros(1, 8, 8, 8)], z_hat, model)

    def test_all_groups_decoded(self, model, z_hat):
        decoded = [torch.zeros(1, w, 8, 8) for w in (4, 4, 8, 16)]
        with pytest.raises(ContextOrderError):
            scctx_parameters(decoded, z_hat, model)

    def test_anchor_width_checked(self, model, z_hat):
        with pytest.raises(ContextOrderError):
            scctx_parameters([], z_hat, model, anchor_hat=torch.zeros(1, 8, 8, 8))

    def test_anchor_phase_without_checkerboard(self, tiny_config_factory, z_hat):
        model = assemble_model(tiny_config_factory(checkerboard=False), seed=0)
        with pytest.raises(ContextOrderError):
            scctx_parameters([], z_hat, model, anchor_hat=torch.zeros(1, 4, 8, 8))

    @torch.no_grad()
    def test_hyperprior_only_uses_hyper_output(self, tiny_config_factory, z_hat):
        model = assemble_model(tiny_config_factory(context_mode="hyperprior_only"), seed=0)
        assert model.context is None
        mu, sigma = scctx_parameters([], z_hat, model)
        assert mu.shape == sigma.shape == (1, 32, 8, 8)
        assert torch.equal(mu, model.h_s(z_hat).chunk(2, dim=1)[0])

    @torch.no_grad()
    def test_forward_uses_causal_parameters(self, model):
        y = model.g_a(torch.rand(1, 3, 128, 128))
        bundle = latent_forward(model, y, num_pixels=128 * 128, noisy=False)
        mask = checkerboard_mask(8, 8).expand(1, 4, 8, 8)
        mu_anchor, _ = scctx_parameters([], bundle.z_hat, model)
        assert torch.allclose(bundle.mu[:, :4][mask], mu_anchor[mask], atol=1e-6)
        anchors = keep_anchors(bundle.y_hat[:, :4], checkerboard_mask(8, 8))
        mu_rest, _ = scctx_parameters([], bundle.z_hat, model, anchor_hat=anchors)
        assert torch.allclose(bundle.mu[:, :4][~mask], mu_rest[~mask], atol=1e-6)

    @torch.no_grad()
    @pytest.mark.parametrize("group", [0, 1, 2, 3])
    @pytest.mark.parametrize("phase", ["anchor", "non_anchor"])
    def test_undecoded_values_never_reach_parameters(self, model, z_hat, group, phase):
        """Changing anything the decoder has not seen yet leaves (mu, sigma) bit-identical."""
        widths = (4, 4, 8, 16)
        mask = checkerboard_mask(8, 8)
        gen = torch.Generator().manual_seed(group)
        y_hat = torch.round(torch.randn(1, 32, 8, 8, generator=gen) * 4)
        unseen = y_hat.clone()
        start = sum(widths[:group])
        if phase == "anchor":
            unseen[:, start:] = torch.round(torch.randn(1, 32 - start, 8, 8, generator=gen) * 4)
        else:
            noise = torch.round(torch.randn(1, 32 - start, 8, 8, generator=gen) * 4)
            current = torch.where(mask, unseen[:, start:start + widths[group]], noise[:, :widths[group]])
            unseen[:, start:start + widths[group]] = current
            unseen[:, start + widths[group]:] = noise[:, widths[group]:]

        def parameters(full):
            groups = list(torch.split(full, list(widths), dim=1))
            anchors = keep_anchors(groups[group], mask) if phase == "non_anchor" else None
            return scctx_parameters(groups[:group], z_hat, model, anchor_hat=anchors)

        (mu_a, sigma_a), (mu_b, sigma_b) = parameters(y_hat), parameters(unseen)
        assert torch.equal(mu_a, mu_b)
        assert torch.equal(sigma_a, sigma_b)
        if group > 0:
            seen = y_hat.clone()
            seen[:, :start] += 1.0
            assert not torch.equal(parameters(seen)[0], mu_a)

    @torch.no_grad()
    def test_forward_matches_decoder_order_for_every_group(self, model):
        y = model.g_a(torch.rand(1, 3, 128, 128))
        bundle = latent_forward(model, y, num_pixels=128 * 128, noisy=False)
        mask = checkerboard_mask(8, 8)
        groups = list(torch.split(bundle.y_hat, [4, 4, 8, 16], dim=1))
        mus = torch.split(bundle.mu, [4, 4, 8, 16], dim=1)
        for g, current in enumerate(groups):
            anchor_mu, _ = scctx_parameters(groups[:g], bundle.z_hat, model)
            rest_mu, _ = scctx_parameters(groups[:g], bundle.z_hat, model, anchor_hat=keep_anchors(current, mask))
            expected = torch.where(mask, anchor_mu, rest_mu)
            assert torch.allclose(mus[g], expected, atol=1e-6), g

    @torch.no_grad()
    def test_rate_estimate(self, model):
        y = model.g_a(torch.rand(2, 3, 64, 64))
        bundle = latent_forward(model, y, num_pixels=64 * 64, noisy=True)
        bpp_y, bpp_z = rate_estimate(bundle)
        expected = -torch.log2(bundle.y_likelihoods).sum() / (2 * 64 * 64)
        assert bpp_y.item() == pytest.approx(expected.item())
        assert bpp_z.item() > 0


class TestCDFTables:
    """Quantized tables used by the range coder."""

    def test_scale_table_range(self):
        scales = scale_table()
        assert len(scales) == SCALES_LEVELS
        assert scales[0] == pytest.approx(0.11)
        assert scales[-1] == pytest.approx(256.0)

    def test_scale_indexes_clip(self):
        idx = scale_indexes(np.array([1e-9, 0.11, 256.0, 1e9]))
        assert idx.tolist() == [0, 0, SCALES_LEVELS - 1, SCALES_LEVELS - 1]

    def test_scale_indexes_nearest(self):
        scales = scale_table()
        assert scale_indexes(torch.tensor([scales[17] * 1.01]))[0] == 17

    def test_gaussian_tables(self):
        tables = default_gaussian_tables()
        assert len(tables) == SCALES_LEVELS
        # smallest scale: support -1..1 plus the escape symbol
        assert tables.offsets[0] == -1
        assert len(tables.cdfs[0]) == 5
        assert tables.escape_symbol(0) == 3
        for cdf in tables.cdfs:
            assert cdf[0] == 0 and cdf[-1] == 1 << 16
            assert all(b > a for a, b in zip(cdf, cdf[1:]))

    def test_support_covers_six_sigma(self):
        tables = build_gaussian_cdf_tables(np.array([2.0]))
        assert tables.offsets[0] == -12
        assert len(tables.cdfs[0]) == 2 * 12 + 1 + 2

    def test_factorized_tables(self):
        prior = FactorizedPrior(3)
        tables = factorized_cdf_tables(prior)
        assert len(tables) == 3
        lower, _ = prior.quantiles()
        for c in range(3):
            assert tables.offsets[c] == math.floor(lower[c].item())
            assert tables.cdfs[c][-1] == 1 << 16

    def test_non_finite_scales_use_widest_table(self):
        idx = scale_indexes(np.array([np.nan, np.inf, 0.0]))
        assert idx.tolist() == [SCALES_LEVELS - 1, SCALES_LEVELS - 1, 0]
