"""Attention block, noise behavior and the per-modality registry."""

import numpy as np
import pytest
import torch

from rasalore.config import ConfigError
from rasalore.rasa import (ModalityRegistry, MultiHeadAttention, RASA,
                           extract_bridge_embeddings, load_bridge_table,
                           lookup_bridge, save_bridge_table)


class TestMultiHeadAttention:
    def test_softmax_rows_sum_to_one(self):
        attn = MultiHeadAttention(16, 4)
        q, kv = torch.rand(2, 5, 16), torch.rand(2, 7, 16)
        attn(q, kv, kv)
        rows = attn.last_attention.sum(-1)
        assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)

    def test_head_count_must_divide_dim(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 3)

    def test_output_shape_follows_queries(self):
        attn = MultiHeadAttention(16, 2)
        out = attn(torch.rand(1, 3, 16), torch.rand(1, 9, 16),
                   torch.rand(1, 9, 16))
        assert out.shape == (1, 3, 16)

    def test_locality_bias_concentrates_diagonal(self):
        attn = MultiHeadAttention(16, 4, locality_bias=6.0)
        x = torch.rand(1, 8, 16)
        attn(x, x, x)
        a = attn.last_attention[0]                     # (heads, 8, 8)
        diag = a.diagonal(dim1=-2, dim2=-1).mean()
        assert diag > 0.5                              # vs 1/8 uniform

    def test_no_bias_when_lengths_differ(self):
        attn = MultiHeadAttention(16, 4, locality_bias=6.0)
        out = attn(torch.rand(1, 4, 16), torch.rand(1, 9, 16),
                   torch.rand(1, 9, 16))
        assert out.shape == (1, 4, 16)

    def test_key_permutation_covariance(self):
        # permuting keys+values together leaves the output unchanged
        # (softmax attention is a set operation over k/v pairs)
        attn = MultiHeadAttention(16, 4, locality_bias=0.0).eval()
        q = torch.rand(1, 3, 16)
        kv = torch.rand(1, 6, 16)
        perm = torch.randperm(6)
        with torch.no_grad():
            a = attn(q, kv, kv)
            b = attn(q, kv[:, perm], kv[:, perm])
        assert torch.allclose(a, b, atol=1e-5)


class TestRASA:
    def test_residual_identity_with_zero_out_proj(self):
        rasa = RASA(16, 4)
        with torch.no_grad():
            rasa.attn.out_proj.weight.zero_()
            rasa.attn.out_proj.bias.zero_()
        e = torch.rand(8, 16)
        out = rasa(e, torch.rand(2, 8, 16), training=False)
        assert torch.allclose(out.xi_espe, e.unsqueeze(0).expand(2, -1, -1))

    def test_residual_dominant_at_init(self):
        torch.manual_seed(0)
        rasa = RASA(32, 4).eval()
        e = torch.rand(64, 32) * 2 - 1
        tokens = torch.rand(1, 64, 32)
        out = rasa(e, tokens, training=False).xi_espe.squeeze(0)
        assert (out - e).norm() / e.norm() < 1.0

    def test_noise_only_when_training(self):
        rasa = RASA(16, 4).eval()
        e, tokens = torch.rand(4, 16), torch.rand(1, 4, 16)
        with torch.no_grad():
            a = rasa(e, tokens, training=False).xi_espe
            b = rasa(e, tokens, training=False).xi_espe
        assert torch.equal(a, b)
        g1 = torch.Generator().manual_seed(0)
        g2 = torch.Generator().manual_seed(1)
        with torch.no_grad():
            c = rasa(e, tokens, training=True, generator=g1).xi_espe
            d = rasa(e, tokens, training=True, generator=g2).xi_espe
        assert not torch.equal(c, d)
        assert rasa(e, tokens, training=True,
                    generator=torch.Generator().manual_seed(0)).noise_applied

    def test_noise_zero_mean_monte_carlo(self):
        # averaging many noisy passes converges to the clean pass
        torch.manual_seed(1)
        rasa = RASA(16, 4).eval()
        e, tokens = torch.rand(4, 16), torch.rand(1, 4, 16)
        gen = torch.Generator().manual_seed(7)
        with torch.no_grad():
            clean = rasa(e, tokens, training=False).xi_espe
            noisy = torch.stack([
                rasa(e, tokens, training=True, generator=gen).xi_espe
                for _ in range(400)]).mean(0)
        assert (noisy - clean).abs().max() < 0.12

    def test_width_mismatch_raises(self):
        rasa = RASA(16, 4)
        with pytest.raises(ValueError):
            rasa(torch.rand(4, 16), torch.rand(1, 4, 8), training=False)


class TestModalityRegistry:
    def _registry(self):
        reg = ModalityRegistry(k=16, image_size=64, dim=16, num_heads=4)
        reg.register_modality("T2", seed=0)
        reg.register_modality("T1", seed=1)
        return reg

    def test_distinct_codebooks_per_modality(self):
        reg = self._registry()
        assert not np.array_equal(reg.codebooks["T2"].E_cpp,
                                  reg.codebooks["T1"].E_cpp)

    def test_duplicate_registration_rejected(self):
        reg = self._registry()
        with pytest.raises(ValueError):
            reg.register_modality("T2", seed=5)

    def test_unknown_modality_rejected(self):
        reg = self._registry()
        with pytest.raises(KeyError):
            reg.enrich("FLAIR", torch.rand(1, 16, 16), training=False)

    def test_separate_attention_weights(self):
        reg = self._registry()
        w2 = reg.rasa["T2"].attn.q_proj.weight
        w1 = reg.rasa["T1"].attn.q_proj.weight
        assert not torch.equal(w1, w2)

    def test_e_cpp_registered_as_buffer(self):
        reg = self._registry()
        names = dict(reg.named_buffers())
        assert "e_cpp_T2" in names and "e_cpp_T1" in names
        # buffers persist through state_dict round trips
        sd = reg.state_dict()
        assert "e_cpp_T2" in sd


class TestBridgeTable:
    def test_round_trip(self, tmp_path):
        table = {"vol0_0015_T2": np.random.rand(16, 8).astype(np.float32)}
        path = tmp_path / "bridge.npz"
        save_bridge_table(table, path)
        loaded = load_bridge_table(path)
        np.testing.assert_array_equal(loaded["vol0_0015_T2"],
                                      table["vol0_0015_T2"])

    def test_lookup_missing_slice(self):
        with pytest.raises(KeyError):
            lookup_bridge({}, "nope")

    def test_extract_is_noise_free_and_keyed_by_slice(self):
        from rasalore.config import toy_config
        from rasalore.data import synth_dataset
        from rasalore.model import SegmentationModel
        cfg = toy_config()
        model = SegmentationModel(cfg)
        split = synth_dataset(8, 0.5, seed=0, image_size=64,
                              slices_per_volume=2)
        slices = split.train[:2]
        t1 = extract_bridge_embeddings(model, slices)
        t2 = extract_bridge_embeddings(model, slices)
        assert set(t1) == {s.slice_id for s in slices}
        for k in t1:
            np.testing.assert_array_equal(t1[k], t2[k])
