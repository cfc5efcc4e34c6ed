"""UNet topology, embeddings, attention oracle, and block wiring."""

import math

import numpy as np
import pytest
import torch

from conftest import tiny_backbone
from controldiff.backbone import (CrossAttention, UNetBackbone, build_backbone,
                                  freeze, timestep_embedding)
from controldiff.errors import (ConfigurationError, ContractViolation,
                                DomainError, NumericsError)


@pytest.fixture(scope="module")
def cfg():
    return tiny_backbone()


@pytest.fixture(scope="module")
def model(cfg):
    return build_backbone(cfg, seed=3)


def tokens_for(model, batch):
    ids = torch.randint(1, model.cfg.vocab_size, (batch, model.cfg.text_len),
                        generator=torch.Generator().manual_seed(0))
    return model.encode_text(ids)


def test_timestep_embedding_matches_formula():
    dim = 32
    t = torch.tensor([0, 1, 17, 999])
    emb = timestep_embedding(t, dim)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) / half * np.arange(half))
    angles = t.numpy()[:, None] * freqs[None, :]
    want = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    np.testing.assert_allclose(emb.numpy(), want, rtol=1e-6, atol=1e-7)
    # first channel oscillates at unit frequency
    assert emb[1, 0] == pytest.approx(math.sin(1.0))


def test_timestep_embedding_literal_small_cases():
    assert torch.equal(timestep_embedding(0, 4), torch.tensor([0.0, 0.0, 1.0, 1.0]))
    e1 = timestep_embedding(1, 2)
    assert e1[0] == pytest.approx(math.sin(1.0))
    assert e1[1] == pytest.approx(math.cos(1.0))


def test_timestep_embedding_scalar_and_batch_agree():
    vec = timestep_embedding(42, 16)
    assert vec.shape == (16,)
    batch = timestep_embedding(torch.tensor([42, 42]), 16)
    assert torch.equal(batch[0], vec)
    assert torch.equal(batch[1], vec)


def test_timestep_embedding_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        timestep_embedding(3, 15)
    with pytest.raises(DomainError):
        timestep_embedding(torch.tensor([-1]), 16)
    with pytest.raises(DomainError):
        timestep_embedding(torch.tensor([10]), 16, max_steps=10)


def test_attention_matches_bruteforce_oracle():
    torch.manual_seed(0)
    attn = CrossAttention(channels=8, token_dim=6).double()
    x = torch.randn(2, 8, 3, 3, dtype=torch.float64)
    tok = torch.randn(2, 5, 6, dtype=torch.float64)
    got = attn(x, tok)

    wq = attn.to_q.weight.detach().numpy()
    wk = attn.to_k.weight.detach().numpy()
    wv = attn.to_v.weight.detach().numpy()
    for b in range(2):
        flat = x[b].reshape(8, 9).T.numpy()  # (HW, C)
        q, k, v = flat @ wq.T, tok[b].numpy() @ wk.T, tok[b].numpy() @ wv.T
        scores = q @ k.T / np.sqrt(8.0)
        w = np.exp(scores - scores.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        want = flat + w @ v
        np.testing.assert_allclose(got[b].reshape(8, 9).T.detach().numpy(),
                                   want, rtol=1e-10, atol=1e-12)


def test_attention_with_all_zero_tokens_is_identity():
    # zero tokens give zero keys and values under bias-free projections
    attn = CrossAttention(channels=8, token_dim=6)
    x = torch.randn(1, 8, 4, 4, generator=torch.Generator().manual_seed(1))
    out = attn(x, torch.zeros(1, 3, 6))
    assert torch.equal(out, x)


def test_attention_single_token_broadcasts_its_value():
    # one key gets softmax weight exactly 1, so every position adds v
    torch.manual_seed(9)
    attn = CrossAttention(channels=8, token_dim=6)
    x = torch.randn(2, 8, 3, 3)
    tok = torch.randn(2, 1, 6)
    with torch.no_grad():
        out = attn(x, tok)
        v = attn.to_v(tok)  # (2, 1, 8)
    want = x + v.transpose(1, 2).unsqueeze(-1)
    assert torch.equal(out, want)


def test_attention_duplicate_token_equals_single():
    # two equal keys split the softmax 0.5/0.5 over identical values
    torch.manual_seed(10)
    attn = CrossAttention(channels=8, token_dim=6)
    x = torch.randn(1, 8, 4, 4)
    tok = torch.randn(1, 1, 6)
    with torch.no_grad():
        one = attn(x, tok)
        two = attn(x, torch.cat([tok, tok], dim=1))
    torch.testing.assert_close(two, one, rtol=0, atol=1e-6)


def test_attention_contract_errors():
    attn = CrossAttention(channels=8, token_dim=6)
    x = torch.zeros(1, 8, 2, 2)
    with pytest.raises(ContractViolation):
        attn(x, torch.zeros(1, 6))
    with pytest.raises(ContractViolation):
        attn(x, torch.zeros(1, 0, 6))
    with pytest.raises(ConfigurationError):
        attn(x, torch.zeros(1, 3, 7))


def test_block_counts_and_channels(cfg, model):
    assert len(model.encoder_blocks) == 12
    assert len(model.decoder_blocks) == 12
    kinds = [b.kind for b in model.encoder_blocks]
    assert kinds == ["in", "res", "res", "down", "res", "res", "down",
                     "res", "res", "down", "res", "res"]
    out_channels = [b.out_channels for b in model.encoder_blocks]
    c = cfg.channels
    assert out_channels == [cfg.base_channels, c[0], c[0], c[0], c[1], c[1],
                            c[1], c[2], c[2], c[2], c[3], c[3]]


def test_attention_sits_at_two_lowest_resolutions(cfg, model):
    low = set(sorted(cfg.resolutions)[:2])
    for block in model.encoder_blocks:
        if block.kind == "res":
            assert (block.attn is not None) == (block.resolution in low)
    for block in model.decoder_blocks:
        assert (block.attn is not None) == (block.resolution in low)
    assert model.middle.attn is not None  # lowest resolution


def test_skip_pairing_mirrors_encoder(model):
    x = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    model(x, torch.tensor([5]), tokens_for(model, 1))
    assert model.last_skip_pairing == [(i, 13 - i) for i in range(1, 13)]


def test_fresh_model_predicts_exactly_zero(model):
    # the output conv starts at zero so an untrained model is the zero map
    x = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        out = model(x, torch.tensor([3, 500]), tokens_for(model, 2))
    assert out.shape == x.shape
    assert float(out.abs().max()) == 0.0


def test_forward_deterministic_and_nonzero_after_perturbation(cfg):
    from conftest import perturb_output_layer
    m1 = perturb_output_layer(build_backbone(cfg, seed=3))
    m2 = perturb_output_layer(build_backbone(cfg, seed=3))
    x = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(4))
    ids = torch.randint(0, cfg.vocab_size, (2, cfg.text_len),
                        generator=torch.Generator().manual_seed(5))
    with torch.no_grad():
        a = m1(x, torch.tensor([7, 90]), m1.encode_text(ids))
        b = m2(x, torch.tensor([7, 90]), m2.encode_text(ids))
    assert torch.equal(a, b)
    assert float(a.abs().max()) > 0


def test_same_seed_same_parameters(cfg):
    sd1 = build_backbone(cfg, seed=11).state_dict()
    sd2 = build_backbone(cfg, seed=11).state_dict()
    assert sd1.keys() == sd2.keys()
    for key in sd1:
        assert torch.equal(sd1[key], sd2[key]), key


def test_prompt_changes_output(cfg):
    from conftest import perturb_output_layer
    model = perturb_output_layer(build_backbone(cfg, seed=3))
    x = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(6))
    t = torch.tensor([100])
    a = model(x, t, model.encode_text(torch.tensor([[1, 9, 0, 0, 0, 0, 0, 0]])))
    b = model(x, t, model.encode_text(torch.tensor([[2, 10, 0, 0, 0, 0, 0, 0]])))
    assert not torch.equal(a, b)


def test_encode_text_is_embedding_lookup(model):
    ids = torch.tensor([[0, 3, 7, 0, 0, 0, 0, 0]])
    emb = model.encode_text(ids)
    assert emb.shape == (1, model.cfg.text_len, model.cfg.token_dim)
    assert torch.equal(emb[0, 1], model.token_embedding.weight[3])
    assert torch.equal(emb[0, 0], model.token_embedding.weight[0])


def test_wrong_image_size_rejected(model):
    with pytest.raises(ContractViolation):
        model(torch.zeros(1, 3, 8, 8), torch.tensor([0]), tokens_for(model, 1))


def test_wrong_skip_count_rejected(model):
    t_emb = model.time_embedding(torch.tensor([0]))
    tok = tokens_for(model, 1)
    skips, m = model.encoder_forward(torch.zeros(1, 3, 16, 16), t_emb, tok)
    with pytest.raises(ContractViolation):
        model.decoder_forward(m, skips[:-1], t_emb, tok)


def test_encoder_forward_is_batch_equivariant(model):
    xs = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(13))
    t_emb = model.time_embedding(torch.tensor([11, 11]))
    tok = tokens_for(model, 2)
    with torch.no_grad():
        skips, m = model.encoder_forward(xs, t_emb, tok)
        skips0, m0 = model.encoder_forward(xs[:1], t_emb[:1], tok[:1])
        skips1, m1 = model.encoder_forward(xs[1:], t_emb[1:], tok[1:])
    # conv kernels may differ between batch sizes, so allow float32 slack
    for s, s0, s1 in zip(skips, skips0, skips1):
        torch.testing.assert_close(s, torch.cat([s0, s1]))
    torch.testing.assert_close(m, torch.cat([m0, m1]))


def test_decoder_on_zero_inputs_is_deterministic(cfg, model):
    t_emb = model.time_embedding(torch.tensor([0]))
    tok = torch.zeros(1, cfg.text_len, cfg.token_dim)
    low = min(cfg.resolutions)
    m = torch.zeros(1, cfg.channels[-1], low, low)
    skips = [torch.zeros(1, b.out_channels, b.resolution, b.resolution)
             for b in model.encoder_blocks]
    with torch.no_grad():
        a = model.decoder_forward(m, skips, t_emb, tok)
        b = model.decoder_forward(m, skips, t_emb, tok)
    assert a.shape == (1, 3, 16, 16)
    assert torch.equal(a, b)


def test_full_forward_matches_hand_wired_blocks(cfg):
    # recompose the network block by block with explicit skip indices
    from conftest import perturb_output_layer
    import torch.nn.functional as F

    model = perturb_output_layer(build_backbone(cfg, seed=3))
    x = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(12))
    t = torch.tensor([40, 700])
    tok = tokens_for(model, 2)
    e = model.encoder_blocks
    d = model.decoder_blocks
    with torch.no_grad():
        want = model(x, t, tok)

        t_emb = model.time_embedding(t)
        f1 = e[0](x, t_emb, tok)
        f2 = e[1](f1, t_emb, tok)
        f3 = e[2](f2, t_emb, tok)
        f4 = e[3](f3, t_emb, tok)
        f5 = e[4](f4, t_emb, tok)
        f6 = e[5](f5, t_emb, tok)
        f7 = e[6](f6, t_emb, tok)
        f8 = e[7](f7, t_emb, tok)
        f9 = e[8](f8, t_emb, tok)
        f10 = e[9](f9, t_emb, tok)
        f11 = e[10](f10, t_emb, tok)
        f12 = e[11](f11, t_emb, tok)
        m = model.middle(f12, t_emb, tok)
        g = d[0](m, f12, t_emb, tok)
        g = d[1](g, f11, t_emb, tok)
        g = d[2](g, f10, t_emb, tok)
        g = d[3](g, f9, t_emb, tok)
        g = d[4](g, f8, t_emb, tok)
        g = d[5](g, f7, t_emb, tok)
        g = d[6](g, f6, t_emb, tok)
        g = d[7](g, f5, t_emb, tok)
        g = d[8](g, f4, t_emb, tok)
        g = d[9](g, f3, t_emb, tok)
        g = d[10](g, f2, t_emb, tok)
        g = d[11](g, f1, t_emb, tok)
        got = model.out_conv(F.silu(model.out_norm(g)))

    assert float((want - got).abs().max()) <= 1e-6
    assert float(want.abs().max()) > 0


def test_non_finite_input_flagged(model):
    x = torch.full((1, 3, 16, 16), float("inf"))
    with pytest.raises(NumericsError):
        model(x, torch.tensor([1]), tokens_for(model, 1))


def test_freeze_disables_gradients(cfg):
    model = freeze(build_backbone(cfg, seed=0))
    assert all(not p.requires_grad for p in model.parameters())
    out = model(torch.zeros(1, 3, 16, 16), torch.tensor([0]),
                tokens_for(model, 1))
    assert not out.requires_grad
