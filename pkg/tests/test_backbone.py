import math

import numpy as np
import pytest
import torch

from ccad import backbone as bb
from ccad.fine_compression import ConfigurationError

TINY_V = (8, 16, 16)
TINY_FC = (8, 16)


def model(variant, seed=0, dtype=torch.float32, **kw):
    widths = TINY_V if variant == "V" else TINY_FC
    m = bb.DenoiserModel(variant, in_ch=3 if variant == "V" else 4, bank_dim=6, widths=widths, heads=2,
                         image_ch=3, hint_factor=4, seed=seed, **kw)
    return m.to(dtype)


def inputs(variant, size=16, batch=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    if variant == "V":
        x = torch.randn(batch, 3, size, size, generator=g, dtype=dtype)
        return x, None
    z = torch.randn(batch, 4, size // 4, size // 4, generator=g, dtype=dtype)
    return z, torch.rand(batch, 3, size, size, generator=g, dtype=dtype) * 2 - 1


def randomize_cross(m, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for ca in m.cross_attentions():
            ca.w_o.copy_(torch.randn(ca.w_o.shape, generator=g, dtype=ca.w_o.dtype) * 0.3)


@pytest.mark.parametrize("variant", ["V", "C", "F"])
def test_zero_init_conditioning_is_inert(variant):
    m = model(variant)
    x, lc = inputs(variant)
    b1 = torch.randn(5, 6)
    b2 = torch.randn(9, 6) * 10
    a = bb.denoise_eps(m, x, 7, lc, b1)
    b = bb.denoise_eps(m, x, 7, lc, b2)
    assert torch.equal(a, b)
    randomize_cross(m)
    assert not torch.allclose(bb.denoise_eps(m, x, 7, lc, b1), bb.denoise_eps(m, x, 7, lc, b2))


def test_v_gcb_sits_at_three_coarsest_levels():
    net = bb.DenoiserModel("V", widths=(8, 16, 16, 16), bank_dim=6, heads=2).net
    kinds = [isinstance(b, bb.GCBlockV) for b in net.down]
    assert kinds == [False, True, True, True]
    assert isinstance(net.mid1, bb.GCBlockV)


@pytest.mark.parametrize("variant", ["V", "C"])
def test_determinism(variant):
    x, lc = inputs(variant)
    bank = torch.randn(4, 6)
    outs = []
    for _ in range(2):
        m = model(variant, seed=3)
        randomize_cross(m)
        outs.append(bb.denoise_eps(m, x, torch.tensor([5, 900]), lc, bank))
    assert torch.equal(*outs)


@pytest.mark.parametrize("variant", ["V", "C", "F"])
@pytest.mark.parametrize("size", [16, 32, 64])
def test_output_shape_tracks_input(variant, size):
    m = model(variant)
    x, lc = inputs(variant, size=size, batch=1)
    out = bb.denoise_eps(m, x, 1, lc, torch.randn(3, 6))
    assert out.shape == x.shape and torch.isfinite(out).all()


def test_missing_or_extra_condition_is_a_configuration_error():
    m = model("C")
    z, lc = inputs("C")
    with pytest.raises(ConfigurationError, match="local_cond"):
        bb.denoise_eps(m, z, 1, None, torch.randn(3, 6))
    with pytest.raises(ConfigurationError, match="bank"):
        bb.denoise_eps(m, z, 1, lc, None)
    v = model("V")
    x, _ = inputs("V")
    with pytest.raises(ConfigurationError):
        bb.denoise_eps(v, x, 1, torch.zeros_like(x), torch.randn(3, 6))
    with pytest.raises(ValueError, match="dim"):
        bb.denoise_eps(v, x, 1, None, torch.randn(3, 5))


def test_empty_bank_is_accepted_and_inert():
    m = model("V")
    randomize_cross(m)
    x, _ = inputs("V")
    out = bb.denoise_eps(m, x, 3, None, torch.zeros(0, 6))
    with torch.no_grad():
        for ca in m.cross_attentions():
            ca.w_o.zero_()
    assert torch.equal(out, bb.denoise_eps(m, x, 3, None, torch.randn(4, 6)))


# -- gcb_forward ------------------------------------------------------------------

def test_gcb_forward_zero_init_is_bitwise_identity():
    v = bb.GCBlockV(8, 8, 16, bank_dim=6, heads=2)
    h = torch.randn(2, 8, 4, 4)
    assert torch.equal(bb.gcb_forward(v, h, torch.randn(3, 6)), h)
    fc = bb.GCBlockFC(8, bank_dim=6, heads=2)
    tok = torch.randn(2, 16, 8)
    assert torch.equal(bb.gcb_forward(fc, tok, torch.randn(3, 6)), tok)


def test_gcb_forward_bank_row_permutation():
    torch.manual_seed(0)
    for blk, feats in ((bb.GCBlockV(8, 8, 16, 6, 2, out_proj_zero_init=False), torch.randn(2, 8, 4, 4)),
                       (bb.GCBlockFC(8, 6, 2, out_proj_zero_init=False), torch.randn(2, 16, 8))):
        bank = torch.randn(7, 6)
        a = bb.gcb_forward(blk, feats, bank)
        b = bb.gcb_forward(blk, feats, bank[torch.randperm(7)])
        assert not torch.equal(a, feats)
        torch.testing.assert_close(a, b, atol=1e-6, rtol=0)


def loop_cross(tok, bank, ca):
    """Dense loops over query, head and key; tok (L, C) and bank (xi, d) as float64 arrays."""
    wq, wk, wv, wo = (getattr(ca, n).detach().double().numpy() for n in ("w_q", "w_k", "w_v", "w_o"))
    Q, K, V = tok @ wq, bank @ wk, bank @ wv
    inner, H = wq.shape[1], ca.heads
    dh = inner // H
    concat = np.zeros((tok.shape[0], inner))
    for h in range(H):
        c = slice(h * dh, (h + 1) * dh)
        for i in range(tok.shape[0]):
            logits = [float(Q[i, c] @ K[j, c]) / math.sqrt(dh) for j in range(len(bank))]
            top = max(logits)
            ex = [math.exp(l - top) for l in logits]
            for j in range(len(bank)):
                concat[i, c] += ex[j] / sum(ex) * V[j, c]
    return concat @ wo


def test_gcb_fc_matches_loop_oracle():
    torch.manual_seed(1)
    blk = bb.GCBlockFC(4, 3, heads=2, out_proj_zero_init=False).double()
    tok = torch.randn(1, 5, 4, dtype=torch.float64)
    bank = torch.randn(3, 3, dtype=torch.float64)
    out = bb.gcb_forward(blk, tok, bank)[0].detach().numpy()
    normed = torch.nn.functional.layer_norm(tok[0], (4,), blk.ln2.weight, blk.ln2.bias).detach().numpy()
    expected = tok[0].numpy() + loop_cross(normed, bank.numpy(), blk.cross_attn)
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_gcb_forward_shape_errors():
    v = bb.GCBlockV(8, 8, 16, 6, 2)
    with pytest.raises(ValueError):
        bb.gcb_forward(v, torch.randn(2, 4, 4, 4), torch.randn(3, 6))
    with pytest.raises(ValueError):
        bb.gcb_forward(bb.GCBlockFC(8, 6, 2), torch.randn(2, 16, 4), torch.randn(3, 6))
    with pytest.raises(ValueError, match="bank"):
        bb.gcb_forward(v, torch.randn(2, 8, 4, 4), torch.randn(3, 5))


# -- gradients and numerics ----------------------------------------------------------

@pytest.mark.parametrize("variant", ["V", "C"])
def test_gradients_finite_and_match_finite_differences(variant):
    m = model(variant, dtype=torch.float64)
    randomize_cross(m)
    # open the zero convolutions too, so every path carries signal
    with torch.no_grad():
        for mod in m.modules():
            if isinstance(mod, torch.nn.Conv2d) and not mod.weight.any():
                mod.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(2))
    x, lc = inputs(variant, size=16, dtype=torch.float64)
    bank = torch.randn(4, 6, dtype=torch.float64)
    R = torch.randn(x.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64)

    def loss():
        return (R * bb.denoise_eps(m, x, torch.tensor([3, 600]), lc, bank)).sum()

    params = m.trainable_parameters()
    m.zero_grad()
    loss().backward()
    assert all(p.grad is not None and torch.isfinite(p.grad).all() for p in params)
    rng = np.random.default_rng(0)
    h = 1e-6
    for k in range(10):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss().item()
            p[idx] = orig - h
            down = loss().item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        g = p.grad[idx].item()
        assert abs(g - fd) <= 1e-3 * max(abs(g), abs(fd)) + 1e-8, (k, g, fd)


def test_no_nan_over_random_trials():
    m = model("V")
    randomize_cross(m)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(20):  # 20 batches x 50 = 1000 trials
            x = torch.rand(50, 3, 16, 16, generator=g) * 6 - 3
            t = torch.randint(1, 1001, (50,), generator=g)
            bank = (torch.rand(8, 6, generator=g) * 6 - 3)
            assert torch.isfinite(bb.denoise_eps(m, x, t, None, bank)).all()


# -- frozen blocks and codec ------------------------------------------------------------

def test_frozen_blocks_have_no_trainable_parameters():
    m = model("F")
    frozen = {id(p) for mod in m.frozen_modules() for p in mod.parameters()}
    assert frozen and not frozen & {id(p) for p in m.trainable_parameters()}
    h = bb.frozen_hash(m)
    assert h == bb.frozen_hash(model("F"))
    with torch.no_grad():
        m.frozen_modules()[1].conv_in.weight[0, 0, 0, 0] += 1
    assert bb.frozen_hash(m) != h


def test_import_frozen_hook():
    m, other = model("C", seed=0), model("C", seed=1)
    state = {k: v for k, v in other.net.state_dict().items() if k.startswith("sdeb.")}
    m.import_frozen(state)
    torch.testing.assert_close(m.net.sdeb.conv_in.weight, other.net.sdeb.conv_in.weight)
    with pytest.raises(ConfigurationError):
        model("V").import_frozen({})


def test_identity_codec_round_trip():
    c = bb.LatentCodec("identity")
    x = torch.rand(2, 3, 8, 8)
    assert torch.equal(bb.latent_decode(bb.latent_encode(x, c), c), x)
    zero = torch.zeros(1, 3, 8, 8)
    assert torch.equal(bb.latent_decode(bb.latent_encode(zero, c), c), zero)
    with pytest.raises(ValueError):
        bb.latent_encode(torch.rand(2, 1, 8, 8), c)


def test_tiny_codec_shapes():
    c = bb.LatentCodec("tiny-conv-ae", latent_ch=8)
    z = c.encode(torch.rand(2, 3, 32, 32))
    assert z.shape == (2, 8, 8, 8) and c.factor == 4
    assert c.decode(z).shape == (2, 3, 32, 32)
    with pytest.raises(ValueError):
        c.decode(torch.rand(2, 4, 8, 8))


def test_timestep_embedding_shape_and_range():
    e = bb.timestep_embedding(torch.tensor([0, 1, 999]), 16)
    assert e.shape == (3, 16) and e.abs().max() <= 1
