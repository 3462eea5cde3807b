"""Loss oracles: every formula checked against a brute-force reimplementation."""

import math

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from rasalore.config import LossWeights
from rasalore.losses import (alignment_loss, decoder_loss, eldice,
                             gaussian_weight, inverse_gaussian_weight,
                             point_activation_loss, structural_loss,
                             total_loss)


def eldice_oracle(pred, gt, eps=1e-5, phi=0.3):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    inter = float((pred * gt).sum())
    union = float(pred.sum() + gt.sum())
    ratio = min((2 * inter + eps) / (union + eps), 1.0)
    return (-math.log(ratio)) ** phi if ratio < 1.0 else 0.0


class TestELDice:
    def test_worked_example(self):
        # all-ones prediction vs a single-pixel target: I=1, U=5,
        # (-ln(2.00001/5.00001))^0.3 = 0.974113...
        pred = [[1.0, 1.0], [1.0, 1.0]]
        gt = [[1.0, 0.0], [0.0, 0.0]]
        val = float(eldice(torch.tensor(pred), torch.tensor(gt)))
        assert val == pytest.approx(0.97411, abs=1e-4)
        assert val == pytest.approx(eldice_oracle(pred, gt), abs=1e-7)

    def test_perfect_overlap_is_zero(self):
        m = torch.rand(8, 8) > 0.5
        assert float(eldice(m.float(), m.float())) == 0.0

    def test_both_empty_is_zero(self):
        z = torch.zeros(4, 4)
        assert float(eldice(z, z)) == 0.0

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pred = rng.random((6, 6))
            gt = (rng.random((6, 6)) > 0.6).astype(np.float64)
            got = float(eldice(torch.tensor(pred, dtype=torch.float64),
                               torch.tensor(gt, dtype=torch.float64)))
            assert got == pytest.approx(eldice_oracle(pred, gt), rel=1e-6)

    def test_nonnegative_and_finite(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pred = torch.tensor(rng.random((5, 5)))
            gt = torch.tensor((rng.random((5, 5)) > 0.8).astype(float))
            v = float(eldice(pred, gt))
            assert v >= 0.0 and math.isfinite(v)

    def test_gradient_finite_at_perfect_overlap(self):
        pred = torch.ones(4, 4, requires_grad=True)
        gt = torch.ones(4, 4)
        loss = eldice(pred, gt)
        loss.backward()
        assert torch.isfinite(pred.grad).all()

    def test_gradient_finite_on_empty_gt(self):
        pred = torch.full((4, 4), 0.3, requires_grad=True)
        loss = eldice(pred, torch.zeros(4, 4))
        loss.backward()
        assert torch.isfinite(pred.grad).all()

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            eldice(torch.full((2, 2), 1.5), torch.zeros(2, 2))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            eldice(torch.zeros(2, 2), torch.zeros(3, 3))


class TestMaskWeighting:
    def _disc(self, n=64, r=10):
        yy, xx = np.mgrid[:n, :n]
        return ((yy - n // 2) ** 2 + (xx - n // 2) ** 2 <= r * r)

    def test_gaussian_weight_oracle(self):
        m = self._disc().astype(np.float64)
        got = gaussian_weight(m, sigma=3.0).numpy()
        blurred = gaussian_filter(m, sigma=3.0, mode="reflect") * m
        expected = blurred / blurred.max()
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_gaussian_center_heavier_than_rim(self):
        m = self._disc()
        w = gaussian_weight(m.astype(float), sigma=3.0).numpy()
        assert w[32, 32] == pytest.approx(1.0, abs=1e-6)
        rim = w[32, 42]   # on the support boundary
        assert 0.0 < rim < 0.7
        assert w[~m].max() == 0.0

    def test_inverse_gaussian_complement(self):
        m = self._disc()
        w = inverse_gaussian_weight(m.astype(float), sigma=3.0).numpy()
        assert w[32, 32] < 0.05            # center nearly unweighted
        assert w.max() == pytest.approx(1.0, abs=1e-6)
        assert w[~m].max() == 0.0          # zero off-support

    def test_empty_mask_gives_zeros(self):
        z = np.zeros((8, 8))
        assert gaussian_weight(z, 2.0).abs().sum() == 0
        assert inverse_gaussian_weight(z, 2.0).abs().sum() == 0

    def test_single_pixel_support(self):
        m = np.zeros((9, 9))
        m[4, 4] = 1
        g = gaussian_weight(m, 2.0).numpy()
        assert g[4, 4] == pytest.approx(1.0)
        assert inverse_gaussian_weight(m, 2.0).abs().sum() == 0

    def test_full_mask_is_all_ones(self):
        # all-ones support must renormalize to exactly 1 everywhere, which
        # keeps the healthy-slice loss fixed point exact
        m = np.ones((16, 16))
        g = gaussian_weight(m, 5.0).numpy()
        np.testing.assert_allclose(g, 1.0, atol=1e-7)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            gaussian_weight(np.ones((4, 4)), 0.0)


def decoder_loss_oracle(m_ano, m_ddpt, m_sam, w):
    """Literal four-term recomputation with python loops kept simple."""
    m_ano = np.asarray(m_ano, dtype=np.float64)
    m_ddpt = np.asarray(m_ddpt, dtype=np.float64)
    g = gaussian_weight(m_ddpt, w.sigma).numpy().astype(np.float64)
    total = eldice_oracle(m_ano, g, w.eps, w.phi)
    if m_sam is not None:
        m_sam = np.asarray(m_sam, dtype=np.float64)
        inter = (m_sam * m_ddpt).sum()
        denom = m_sam.sum() + m_ddpt.sum()
        gamma = 1.0 if denom == 0 else 2 * inter / denom
        ginv = inverse_gaussian_weight(m_sam, w.sigma).numpy().astype(np.float64)
        total += gamma * eldice_oracle(m_ano, ginv, w.eps, w.phi)
    total += (w.alpha / m_ano.size) * float((m_ano * (1 - m_ddpt)).sum())
    comp = gaussian_weight(1 - m_ddpt, w.sigma).numpy().astype(np.float64)
    total += w.beta * eldice_oracle((1 - m_ano) * (1 - m_ddpt), comp,
                                    w.eps, w.phi)
    return total


class TestDecoderLoss:
    def _masks(self, seed=0, n=32):
        rng = np.random.default_rng(seed)
        yy, xx = np.mgrid[:n, :n]
        cy, cx, r = rng.integers(10, 22), rng.integers(10, 22), rng.integers(4, 8)
        m_ddpt = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)
        m_sam = ((yy - cy) ** 2 + (xx - cx - 1) ** 2 <= r * r).astype(np.float64)
        m_ano = np.clip(gaussian_filter(m_ddpt, 2.0) + rng.random((n, n)) * 0.1,
                        0, 1)
        return m_ano, m_ddpt, m_sam

    def test_matches_oracle(self):
        w = LossWeights()
        for seed in range(5):
            m_ano, m_ddpt, m_sam = self._masks(seed)
            got = float(decoder_loss(torch.tensor(m_ano), m_ddpt, m_sam, w))
            assert got == pytest.approx(
                decoder_loss_oracle(m_ano, m_ddpt, m_sam, w), rel=1e-5)

    def test_matches_oracle_without_boundary_mask(self):
        w = LossWeights()
        m_ano, m_ddpt, _ = self._masks(3)
        got = float(decoder_loss(torch.tensor(m_ano), m_ddpt, None, w))
        assert got == pytest.approx(
            decoder_loss_oracle(m_ano, m_ddpt, None, w), rel=1e-5)

    def test_healthy_fixed_point_exact_zero(self):
        # empty weak masks + empty prediction must cost exactly 0
        z = np.zeros((32, 32))
        assert float(decoder_loss(torch.tensor(z), z, z)) == 0.0

    def test_gamma_equals_weak_mask_agreement(self):
        m_ano, m_ddpt, m_sam = self._masks(1)
        terms = decoder_loss(torch.tensor(m_ano), m_ddpt, m_sam,
                             return_terms=True)
        inter = (m_ddpt * m_sam).sum()
        expected = 2 * inter / (m_ddpt.sum() + m_sam.sum())
        assert terms.gamma == pytest.approx(expected, rel=1e-6)

    def test_boundary_term_dropped_without_sam(self):
        m_ano, m_ddpt, _ = self._masks(2)
        terms = decoder_loss(torch.tensor(m_ano), m_ddpt, None,
                             return_terms=True)
        assert terms.gamma == 0.0
        assert float(terms.boundary) == 0.0

    def test_gamma_carries_no_gradient(self):
        m_ano, m_ddpt, m_sam = self._masks(4)
        pred = torch.tensor(m_ano, requires_grad=True)
        loss = decoder_loss(pred, m_ddpt, m_sam)
        loss.backward()
        assert torch.isfinite(pred.grad).all()

    def test_requires_binary_weak_masks(self):
        m_ano, m_ddpt, _ = self._masks(0)
        with pytest.raises(ValueError):
            decoder_loss(torch.tensor(m_ano), m_ddpt * 0.5)


class TestPointActivationLoss:
    def test_uniform_half_against_empty(self):
        m_ffn = torch.full((32, 32), 0.5)
        m_pa = torch.zeros(32, 32)
        got = float(point_activation_loss(m_ffn, m_pa))
        # formula oracle: I=0, U=512 -> (-ln(1e-5/512.00001))^0.3
        expected = (-math.log(1e-5 / 512.00001)) ** 0.3
        assert got == pytest.approx(expected, abs=1e-4)
        assert got == pytest.approx(2.3701, abs=1e-3)

    def test_perfect_grid_match(self):
        m = (torch.rand(8, 8) > 0.5).float()
        assert float(point_activation_loss(m, m)) == 0.0


class TestStructuralLoss:
    def loss_oracle(self, xi, m_pa):
        xi = np.asarray(xi, dtype=np.float64)
        act = np.asarray(m_pa).reshape(-1) > 0.5
        total = 0.0
        if act.any():
            total += np.mean((xi[act] - 1.0) ** 2)
        if (~act).any():
            total += np.mean((xi[~act] + 1.0) ** 2)
        return total

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        xi = rng.normal(size=(16, 8))
        m_pa = (rng.random((4, 4)) > 0.5).astype(np.float64)
        got = float(structural_loss(torch.tensor(xi), m_pa))
        assert got == pytest.approx(self.loss_oracle(xi, m_pa), rel=1e-6)

    def test_zero_at_target_embeddings(self):
        m_pa = np.zeros((2, 2))
        m_pa[0, 0] = 1
        xi = np.where(m_pa.reshape(-1, 1) > 0, 1.0, -1.0) * np.ones((4, 6))
        assert float(structural_loss(torch.tensor(xi), m_pa)) == 0.0

    def test_all_active(self):
        xi = np.zeros((4, 3))
        got = float(structural_loss(torch.tensor(xi), np.ones((2, 2))))
        assert got == pytest.approx(1.0)

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError):
            structural_loss(torch.zeros(5, 3), np.zeros((2, 2)))


class TestAlignmentLoss:
    def test_sum_of_squared_distances(self):
        rng = np.random.default_rng(1)
        bridge = rng.normal(size=(8, 4))
        xis = {"T1": rng.normal(size=(8, 4)), "FLAIR": rng.normal(size=(8, 4))}
        got = float(alignment_loss(
            {k: torch.tensor(v) for k, v in xis.items()}, torch.tensor(bridge)))
        expected = sum(((v - bridge) ** 2).sum() for v in xis.values())
        assert got == pytest.approx(expected, rel=1e-6)

    def test_zero_when_aligned(self):
        b = torch.randn(8, 4)
        assert float(alignment_loss({"T1": b.clone()}, b)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            alignment_loss({"T1": torch.zeros(4, 4)}, torch.zeros(8, 4))


class TestTotalLoss:
    def test_single_modality_sum(self):
        t = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0))
        assert float(t) == pytest.approx(6.0)

    def test_alignment_only_in_multimodal(self):
        base = (torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0))
        off = total_loss(*base, l_align=torch.tensor(10.0), multimodal=False)
        on = total_loss(*base, l_align=torch.tensor(10.0), lambda_align=0.1,
                        multimodal=True)
        assert float(off) == pytest.approx(6.0)
        assert float(on) == pytest.approx(7.0)
