"""Toy-scale denoisers with Global feature Conditioned Blocks (GCBs).

Variant V is a pixel-space UNet whose attention stages at the three coarsest
resolutions are GCBlockV (ResBlock -> self-attention -> bank cross-attention).

Variants F and C run in a latent space. Frozen encoder/middle blocks (SDEB,
SDMB) form the main path; a trainable ControlNet-style branch (GCEB) reads the
noisy latent plus the local image condition and adds zero-initialised
residuals into the frozen skips, and a trainable decoder (GCDB) produces the
noise estimate. Both trainable stacks use GCBlockFC transformer blocks whose
cross-attention consumes bank tokens.

Bank tokens are either a shared ``(n, d)`` matrix or per-sample ``(B, n, d)``.
A bank with zero rows makes every cross-attention contribute exactly zero.
"""

from __future__ import annotations

import hashlib
import math

import torch
import torch.nn.functional as F
from torch import nn

from .fine_compression import ConfigurationError, multihead_attention


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(c: int) -> int:
    return math.gcd(8, c)


def _matrix(rows: int, cols: int, zero: bool = False) -> nn.Parameter:
    if zero:
        return nn.Parameter(torch.zeros(rows, cols))
    return nn.Parameter(torch.randn(rows, cols) / math.sqrt(rows))


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _tokens(x):
    return x.flatten(2).transpose(1, 2)  # (B, HW, C)


def _untokens(tok, like):
    return tok.transpose(1, 2).reshape(like.shape)


class SelfAttention(nn.Module):
    """Pre-norm spatial self-attention with residual."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads if channels % heads == 0 else 1
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.w_q, self.w_k, self.w_v, self.w_o = (_matrix(channels, channels) for _ in range(4))

    def forward(self, x):
        tok = _tokens(self.norm(x))
        out = multihead_attention(tok, tok, self.w_q, self.w_k, self.w_v, self.w_o, self.heads, fused=True)
        return x + _untokens(out, x)


class CrossAttention(nn.Module):
    """Queries from spatial tokens, keys/values from bank tokens.

    The output projection starts at zero so the block is an exact identity
    until training moves it.
    """

    def __init__(self, channels: int, bank_dim: int, inner: int | None = None, heads: int = 4,
                 zero_init: bool = True):
        super().__init__()
        inner = inner or channels
        self.heads = heads if inner % heads == 0 else 1
        self.bank_dim = bank_dim
        self.w_q = _matrix(channels, inner)
        self.w_k = _matrix(bank_dim, inner)
        self.w_v = _matrix(bank_dim, inner)
        self.w_o = _matrix(inner, channels, zero=zero_init)

    def forward(self, tokens, bank):
        if bank.shape[-1] != self.bank_dim:
            raise ValueError(f"bank_tokens: dim {bank.shape[-1]} != cross-attention key dim {self.bank_dim}")
        return multihead_attention(tokens, bank.to(tokens.dtype), self.w_q, self.w_k, self.w_v, self.w_o,
                                   self.heads, fused=True)


class GCBlockV(nn.Module):
    """ResBlock + self-attention followed by a bank cross-attention stage."""

    def __init__(self, cin: int, cout: int, temb_dim: int, bank_dim: int, heads: int = 4,
                 out_proj_zero_init: bool = True):
        super().__init__()
        self.res = ResBlock(cin, cout, temb_dim)
        self.self_attn = SelfAttention(cout, heads)
        self.cross_norm = nn.GroupNorm(_groups(cout), cout)
        self.cross_attn = CrossAttention(cout, bank_dim, heads=heads, zero_init=out_proj_zero_init)

    def condition(self, h, bank):
        return h + _untokens(self.cross_attn(_tokens(self.cross_norm(h)), bank), h)

    def forward(self, x, temb, bank):
        return self.condition(self.self_attn(self.res(x, temb)), bank)


class GCBlockFC(nn.Module):
    """Transformer block whose cross-attention reads bank tokens instead of text."""

    def __init__(self, channels: int, bank_dim: int, heads: int = 4, out_proj_zero_init: bool = True):
        super().__init__()
        self.norm_in = nn.GroupNorm(_groups(channels), channels)
        self.proj_in = nn.Linear(channels, channels)
        self.ln1 = nn.LayerNorm(channels)
        self.heads = heads if channels % heads == 0 else 1
        self.sa = nn.ParameterList([_matrix(channels, channels) for _ in range(4)])
        self.ln2 = nn.LayerNorm(channels)
        self.cross_attn = CrossAttention(channels, bank_dim, heads=heads, zero_init=out_proj_zero_init)
        self.ln3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))
        self.proj_out = nn.Linear(channels, channels)

    def condition(self, tok, bank):
        return tok + self.cross_attn(self.ln2(tok), bank)

    def forward(self, x, bank):
        tok = self.proj_in(_tokens(self.norm_in(x)))
        h = self.ln1(tok)
        tok = tok + multihead_attention(h, h, *self.sa, self.heads, fused=True)
        tok = self.condition(tok, bank)
        tok = tok + self.ff(self.ln3(tok))
        return x + _untokens(self.proj_out(tok), x)


def gcb_forward(block: GCBlockV | GCBlockFC, features: torch.Tensor, bank_tokens: torch.Tensor) -> torch.Tensor:
    """Apply a block's bank cross-attention stage: ``features + cross_attention(features, bank)``.

    ``features`` is a ``(B, C, H, W)`` map for GCBlockV and ``(B, L, C)`` tokens for GCBlockFC.
    """
    if isinstance(block, GCBlockV):
        if features.ndim != 4 or features.shape[1] != block.cross_norm.num_channels:
            raise ValueError(f"features: expected (B, {block.cross_norm.num_channels}, H, W), got {tuple(features.shape)}")
        return block.condition(features, bank_tokens)
    if features.ndim != 3 or features.shape[-1] != block.ln2.normalized_shape[0]:
        raise ValueError(f"features: expected (B, L, {block.ln2.normalized_shape[0]}), got {tuple(features.shape)}")
    return block.condition(features, bank_tokens)


class TimeEmbed(nn.Module):
    def __init__(self, base: int, dim: int):
        super().__init__()
        self.base = base
        self.mlp = nn.Sequential(nn.Linear(base, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.base).to(self.mlp[0].weight.dtype))


class UNetV(nn.Module):
    """Pixel-space UNet; GCBlockV at the three coarsest resolutions."""

    def __init__(self, in_ch=3, widths=(32, 64, 128, 128), bank_dim=64, heads=4, n_gcb_levels=3):
        super().__init__()
        temb = widths[0] * 4
        self.time_embed = TimeEmbed(widths[0], temb)
        self.conv_in = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        n = len(widths)
        self.gcb_levels = set(range(max(0, n - n_gcb_levels), n))
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        skips = [prev]
        for i, w in enumerate(widths):
            blk = GCBlockV(prev, w, temb, bank_dim, heads) if i in self.gcb_levels else ResBlock(prev, w, temb)
            self.down.append(blk)
            prev = w
            skips.append(w)
            if i < n - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid1 = GCBlockV(prev, prev, temb, bank_dim, heads)
        self.mid2 = ResBlock(prev, prev, temb)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(n)):
            w = widths[i]
            cin = prev + skips.pop()
            blk = GCBlockV(cin, w, temb, bank_dim, heads) if i in self.gcb_levels else ResBlock(cin, w, temb)
            self.up.append(blk)
            prev = w
            if i > 0:
                self.upsample.append(nn.Conv2d(w, w, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, in_ch, 3, padding=1)

    @staticmethod
    def _run(blk, h, temb, bank):
        return blk(h, temb, bank) if isinstance(blk, GCBlockV) else blk(h, temb)

    def forward(self, x, t, bank):
        n = len(self.down)
        temb = self.time_embed(t)
        h = self.conv_in(x)
        hs = [h]
        for i, blk in enumerate(self.down):
            h = self._run(blk, h, temb, bank)
            hs.append(h)
            if i < n - 1:
                h = self.downsample[i](h)
        h = self.mid2(self.mid1(h, temb, bank), temb)
        for j, blk in enumerate(self.up):
            h = self._run(blk, torch.cat([h, hs.pop()], dim=1), temb, bank)
            if j < n - 1:
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


class SDEncoder(nn.Module):
    """Encoder-shaped stack (ResBlocks + optional GCB) returning skip features."""

    def __init__(self, in_ch, widths, temb, bank_dim=None, heads=4):
        super().__init__()
        self.conv_in = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.gcbs = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.blocks.append(ResBlock(prev, w, temb))
            self.gcbs.append(GCBlockFC(w, bank_dim, heads) if bank_dim and i > 0 else nn.Identity())
            prev = w
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.out_ch = prev

    def forward(self, h, temb, bank=None, hint=None):
        h = self.conv_in(h)
        if hint is not None:
            h = h + hint
        skips = [h]
        for i, blk in enumerate(self.blocks):
            h = blk(h, temb)
            g = self.gcbs[i]
            h = g(h, bank) if isinstance(g, GCBlockFC) else h
            skips.append(h)
            if i < len(self.blocks) - 1:
                h = self.downsample[i](h)
        return h, skips


class MiddleBlock(nn.Module):
    def __init__(self, ch, temb, heads=4):
        super().__init__()
        self.res1 = ResBlock(ch, ch, temb)
        self.attn = SelfAttention(ch, heads)
        self.res2 = ResBlock(ch, ch, temb)

    def forward(self, h, temb):
        return self.res2(self.attn(self.res1(h, temb)), temb)


class ControlUNetFC(nn.Module):
    """Frozen SDEB/SDMB main path + trainable GCEB control branch and GCDB decoder."""

    def __init__(self, latent_ch=4, image_ch=3, widths=(32, 64, 64), bank_dim=64, heads=4, hint_factor=4):
        super().__init__()
        temb = widths[0] * 4
        # frozen
        self.sd_time = TimeEmbed(widths[0], temb)
        self.sdeb = SDEncoder(latent_ch, widths, temb)
        self.sdmb = MiddleBlock(widths[-1], temb, heads)
        # trainable
        self.time_embed = TimeEmbed(widths[0], temb)
        hint = []
        c = image_ch
        for _ in range(int(math.log2(hint_factor))):
            hint += [nn.Conv2d(c, 16, 3, stride=2, padding=1), nn.SiLU()]
            c = 16
        hint.append(zero_module(nn.Conv2d(c, widths[0], 3, padding=1)))
        self.hint = nn.Sequential(*hint)
        self.gceb = SDEncoder(latent_ch, widths, temb, bank_dim, heads)
        self.gceb_mid = GCBlockFC(widths[-1], bank_dim, heads)
        self.zero_convs = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c in [widths[0], *widths])
        self.mid_zero = zero_module(nn.Conv2d(widths[-1], widths[-1], 1))
        self.up = nn.ModuleList()
        self.up_gcb = nn.ModuleList()
        self.upsample = nn.ModuleList()
        skips = [widths[0], *widths]
        prev = widths[-1]
        n = len(widths)
        for i in reversed(range(n)):
            w = widths[i]
            self.up.append(ResBlock(prev + skips.pop(), w, temb))
            self.up_gcb.append(GCBlockFC(w, bank_dim, heads))
            prev = w
            if i > 0:
                self.upsample.append(nn.Conv2d(w, w, 3, padding=1))
        self.final = ResBlock(prev + skips.pop(), prev, temb)
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, latent_ch, 3, padding=1)
        for m in self.frozen_modules():
            m.requires_grad_(False)

    def frozen_modules(self):
        return [self.sd_time, self.sdeb, self.sdmb]

    def forward(self, z, t, bank, local_cond):
        temb_sd = self.sd_time(t)
        temb = self.time_embed(t)
        h, skips = self.sdeb(z, temb_sd)
        h = self.sdmb(h, temb_sd)
        c, cskips = self.gceb(z, temb, bank, hint=self.hint(local_cond))
        c = self.gceb_mid(c, bank)
        h = h + self.mid_zero(c)
        skips = [s + zc(cs) for s, cs, zc in zip(skips, cskips, self.zero_convs)]
        n = len(self.up)
        for j, (blk, gcb) in enumerate(zip(self.up, self.up_gcb)):
            h = gcb(blk(torch.cat([h, skips.pop()], dim=1), temb), bank)
            if j < n - 1:
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.final(torch.cat([h, skips.pop()], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class DenoiserModel(nn.Module):
    def __init__(self, variant: str, in_ch: int = 3, bank_dim: int = 64, widths=None, heads: int = 4,
                 image_ch: int = 3, hint_factor: int = 4, seed: int = 0):
        super().__init__()
        variant = variant.upper()
        if variant not in ("V", "C", "F"):
            raise ConfigurationError(f"variant: expected one of V, C, F, got {variant!r}")
        self.variant = variant
        self.bank_dim = bank_dim
        torch.manual_seed(seed)
        if variant == "V":
            self.net = UNetV(in_ch, tuple(widths or (32, 64, 128, 128)), bank_dim, heads)
        else:
            self.net = ControlUNetFC(in_ch, image_ch, tuple(widths or (32, 64, 64)), bank_dim, heads, hint_factor)

    def frozen_modules(self) -> list[nn.Module]:
        return [] if self.variant == "V" else self.net.frozen_modules()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def cross_attentions(self) -> list[CrossAttention]:
        return [m for m in self.modules() if isinstance(m, CrossAttention)]

    def import_frozen(self, state_dict: dict) -> None:
        """Load externally supplied weights into the frozen blocks (F/C only)."""
        if self.variant == "V":
            raise ConfigurationError("variant V has no frozen blocks")
        self.net.load_state_dict(state_dict, strict=False)

    def forward(self, x, t, bank, local_cond=None):
        if self.variant == "V":
            return self.net(x, t, bank)
        return self.net(x, t, bank, local_cond)


def frozen_hash(model: DenoiserModel) -> str:
    h = hashlib.sha256()
    for m in model.frozen_modules():
        for name, p in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def denoise_eps(model: DenoiserModel, x_or_z: torch.Tensor, t, local_cond=None, bank_tokens=None) -> torch.Tensor:
    """Noise estimate for a batch at timestep(s) ``t`` (int or length-B tensor)."""
    if bank_tokens is None:
        raise ConfigurationError("bank_tokens: a bank condition is required (use an empty bank to ablate)")
    if model.variant in ("F", "C") and local_cond is None:
        raise ConfigurationError(f"local_cond: required for variant {model.variant}")
    if model.variant == "V" and local_cond is not None:
        raise ConfigurationError("local_cond: variant V takes no local condition")
    bank_tokens = torch.as_tensor(bank_tokens)
    if bank_tokens.shape[-1] != model.bank_dim:
        raise ValueError(f"bank_tokens: dim {bank_tokens.shape[-1]} != model bank dim {model.bank_dim}")
    B = x_or_z.shape[0]
    if not torch.is_tensor(t):
        t = torch.full((B,), int(t), dtype=torch.long)
    dtype = next(model.parameters()).dtype
    out = model(x_or_z.to(dtype), t, bank_tokens.to(dtype),
                None if local_cond is None else local_cond.to(dtype))
    return out


class LatentCodec(nn.Module):
    """Pixel <-> latent mapping; ``identity`` or a tiny conv autoencoder (4x downsampling)."""

    def __init__(self, mode: str = "identity", in_ch: int = 3, latent_ch: int = 8, hidden: int = 32,
                 seed: int = 0):
        super().__init__()
        if mode not in ("identity", "tiny-conv-ae"):
            raise ValueError(f"mode: unknown codec {mode!r}")
        self.mode = mode
        self.in_ch, self.latent_ch = in_ch, latent_ch if mode != "identity" else in_ch
        self.register_buffer("scale", torch.ones(()))
        if mode == "tiny-conv-ae":
            torch.manual_seed(seed)
            self.enc = nn.Sequential(
                nn.Conv2d(in_ch, hidden, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(hidden, latent_ch, 3, padding=1))
            self.dec = nn.Sequential(
                nn.Conv2d(latent_ch, hidden, 3, padding=1), nn.SiLU(),
                nn.Upsample(scale_factor=2), nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
                nn.Upsample(scale_factor=2), nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
                nn.Conv2d(hidden, in_ch, 3, padding=1))

    @property
    def factor(self) -> int:
        return 1 if self.mode == "identity" else 4

    def encode(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"x: expected (B, {self.in_ch}, H, W), got {tuple(x.shape)}")
        if self.mode == "identity":
            return x
        return self.enc(x.to(self.scale.dtype)) * self.scale

    def decode(self, z):
        if z.ndim != 4 or z.shape[1] != self.latent_ch:
            raise ValueError(f"z: expected (B, {self.latent_ch}, h, w), got {tuple(z.shape)}")
        if self.mode == "identity":
            return z
        return self.dec(z.to(self.scale.dtype) / self.scale)

    def fit(self, images: torch.Tensor, steps: int = 1500, lr: float = 2e-3, batch_size: int = 16,
            seed: int = 0) -> float:
        """Train the autoencoder on ``images`` (B, C, H, W); returns the final per-pixel MAE."""
        if self.mode == "identity":
            return 0.0
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(list(self.enc.parameters()) + list(self.dec.parameters()), lr=lr)
        self.scale.fill_(1.0)
        for _ in range(steps):
            idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=gen)
            x = images[idx]
            rec = self.dec(self.enc(x))
            loss = F.mse_loss(rec, x) + 0.5 * F.l1_loss(rec, x)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            z = self.enc(images)
            self.scale.fill_(1.0 / float(z.std().clamp_min(1e-6)))
            return float((self.decode(self.encode(images)) - images).abs().mean())


def latent_encode(x, codec: LatentCodec):
    return codec.encode(x)


def latent_decode(z, codec: LatentCodec):
    return codec.decode(z)
