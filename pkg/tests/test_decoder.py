"""Captioning decoder: causality, cross-attention wiring, weight tying, decoding."""

import pytest
import torch

from ecgtext.decoder import CaptionDecoder, DecoderConfig, build_decoder, greedy_decode
from ecgtext.layers import TransformerBlock
from ecgtext.losses import captioning_loss
from ecgtext.text_encoder import BOS_ID, EOS_ID

CONFIG = DecoderConfig(layers=2, heads=2, width=16, max_len=16, vocab_size=23, cross_dim=8)


def toy_inputs(batch: int = 2, text_len: int = 10, ecg_len: int = 6, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    ecg = torch.randn(batch, ecg_len, CONFIG.cross_dim, generator=gen)
    ids = torch.randint(5, CONFIG.vocab_size, (batch, text_len), generator=gen)
    ids[:, 0] = BOS_ID
    return ecg, ids


class TestCausality:
    def test_future_token_perturbation_leaves_earlier_logits_unchanged(self):
        decoder = build_decoder(CONFIG, seed=0)
        decoder.eval()
        ecg, ids = toy_inputs()
        cut = 6
        tampered = ids.clone()
        tampered[:, cut:] = (tampered[:, cut:] + 7) % CONFIG.vocab_size
        with torch.no_grad():
            base = decoder(ecg, ids)
            poked = decoder(ecg, tampered)
        assert torch.allclose(base[:, :cut], poked[:, :cut], atol=1e-6)
        assert not torch.allclose(base[:, cut:], poked[:, cut:], atol=1e-3)

    def test_prefix_logits_match_full_sequence_logits(self):
        decoder = build_decoder(CONFIG, seed=0)
        decoder.eval()
        ecg, ids = toy_inputs(batch=1)
        with torch.no_grad():
            full = decoder(ecg, ids)
            for L in (1, 4, 8):
                prefix = decoder(ecg, ids[:, :L])
                assert torch.allclose(prefix, full[:, :L], atol=1e-6)


class TestCrossAttention:
    def test_signal_tokens_influence_logits(self):
        decoder = build_decoder(CONFIG, seed=0)
        decoder.eval()
        ecg, ids = toy_inputs()
        with torch.no_grad():
            a = decoder(ecg, ids)
            b = decoder(ecg + 1.0, ids)
        assert not torch.allclose(a, b, atol=1e-3)

    def test_zeroed_cross_attention_ignores_signal(self):
        """With cross-attention projections zeroed the decoder is text-only."""
        decoder = build_decoder(CONFIG, seed=0)
        decoder.eval()
        with torch.no_grad():
            for block in decoder.blocks:
                block.cross_attn.out_proj.weight.zero_()
                block.cross_attn.out_proj.bias.zero_()
        ecg_a, ids = toy_inputs()
        ecg_b = torch.randn_like(ecg_a) * 5
        with torch.no_grad():
            assert torch.allclose(decoder(ecg_a, ids), decoder(ecg_b, ids), atol=1e-6)

    def test_blocks_have_cross_attention(self):
        decoder = build_decoder(CONFIG, seed=0)
        for block in decoder.blocks:
            assert isinstance(block, TransformerBlock)
            assert block.cross_attn is not None


class TestWeightTying:
    def test_logit_projection_shares_embedding_storage(self):
        decoder = build_decoder(CONFIG, seed=0)
        ecg, ids = toy_inputs(batch=1)
        before = decoder(ecg, ids).detach().clone()
        with torch.no_grad():
            decoder.token_emb.weight[7] += 10.0
        after = decoder(ecg, ids).detach()
        assert not torch.allclose(before[..., 7], after[..., 7])

    def test_no_separate_output_matrix_in_parameters(self):
        decoder = build_decoder(CONFIG, seed=0)
        shapes = [tuple(p.shape) for p in decoder.parameters()]
        assert shapes.count((CONFIG.vocab_size, CONFIG.width)) == 1


class TestGreedyDecode:
    def test_starts_with_bos_and_respects_max_len(self):
        decoder = build_decoder(CONFIG, seed=0)
        ecg = torch.randn(1, 6, CONFIG.cross_dim)
        ids = greedy_decode(decoder, ecg, max_len=5)
        assert ids[0] == BOS_ID
        assert len(ids) <= 5

    def test_accepts_unbatched_tokens_and_rejects_batches(self):
        decoder = build_decoder(CONFIG, seed=0)
        assert greedy_decode(decoder, torch.randn(6, CONFIG.cross_dim), max_len=4)
        with pytest.raises(ValueError, match="single signal"):
            greedy_decode(decoder, torch.randn(2, 6, CONFIG.cross_dim))

    def test_matches_stepwise_argmax_oracle(self):
        decoder = build_decoder(CONFIG, seed=1)
        decoder.eval()
        ecg = torch.randn(1, 6, CONFIG.cross_dim)
        got = greedy_decode(decoder, ecg, max_len=8)
        ids = [BOS_ID]
        with torch.no_grad():
            while len(ids) < 8:
                nxt = int(decoder(ecg, torch.tensor([ids]))[0, -1].argmax())
                ids.append(nxt)
                if nxt == EOS_ID:
                    break
        assert got == ids


class TestLearning:
    def test_overfits_one_caption(self):
        """A tiny decoder must be able to memorize a single (signal, text) pair."""
        torch.manual_seed(0)
        decoder = build_decoder(CONFIG, seed=0)
        ecg = torch.randn(1, 6, CONFIG.cross_dim)
        target = torch.tensor([[BOS_ID, 9, 12, 7, 15, EOS_ID]])
        optimizer = torch.optim.Adam(decoder.parameters(), lr=3e-3)
        for _ in range(300):
            optimizer.zero_grad()
            loss = captioning_loss(decoder(ecg, target), target)
            loss.backward()
            optimizer.step()
        assert float(loss.detach()) < 0.1
        assert greedy_decode(decoder, ecg, max_len=6) == target[0].tolist()


class TestValidation:
    def test_rejects_bad_shapes(self):
        decoder = build_decoder(CONFIG, seed=0)
        ecg, ids = toy_inputs()
        with pytest.raises(ValueError, match="max_len"):
            decoder(ecg, torch.zeros(2, 40, dtype=torch.long))
        with pytest.raises(ValueError, match="batch sizes"):
            decoder(ecg[:1], ids)
        with pytest.raises(ValueError, match="cross_dim"):
            decoder(torch.randn(2, 6, 5), ids)
        with pytest.raises(ValueError, match="special tokens"):
            CaptionDecoder(DecoderConfig(vocab_size=2))
