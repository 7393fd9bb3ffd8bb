"""Fine Compression Module: cross-attention from batch features onto the coarse bank."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .feature_bank import CoarseFeatureBank, ExtractorConfig, extract_features


class ConfigurationError(ValueError):
    pass


def multihead_attention(q_in, kv_in, w_q, w_k, w_v, w_o, heads: int, return_weights: bool = False,
                        fused: bool = False):
    """softmax(Q K^T / sqrt(d_head)) V W_o with heads split over the inner dim.

    ``q_in`` is ``(..., n_q, d_q)``, ``kv_in`` is ``(..., n_kv, d_kv)`` (batch
    dims broadcast). With zero keys the output is all zeros. ``fused`` hands
    the softmax to torch's fused kernel; the default path subtracts the row max
    explicitly.
    """
    d_inner = w_q.shape[1]
    if d_inner % heads:
        raise ValueError(f"inner dim {d_inner} not divisible by heads={heads}")
    if kv_in.shape[-2] == 0:
        out = q_in.new_zeros(q_in.shape[:-1] + (w_o.shape[1],))
        return (out, None) if return_weights else out
    dh = d_inner // heads

    def split(x):
        return x.unflatten(-1, (heads, dh)).transpose(-3, -2)  # (..., heads, n, dh)

    q, k, v = split(q_in @ w_q), split(kv_in @ w_k), split(kv_in @ w_v)
    if fused and not return_weights:
        if k.ndim < q.ndim:
            k, v = k.expand(q.shape[:-2] + k.shape[-2:]), v.expand(q.shape[:-2] + v.shape[-2:])
        out = F.scaled_dot_product_attention(q, k, v)
        return out.transpose(-3, -2).flatten(-2) @ w_o
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ v).transpose(-3, -2).flatten(-2) @ w_o
    return (out, weights) if return_weights else out


class AttentionParams(nn.Module):
    """theta_Q, theta_W, theta_V (d x d_k) and theta_B (d_k x d); no biases."""

    def __init__(self, d: int, d_k: int = 64, heads: int = 4, seed: int = 0, dtype=torch.float32):
        super().__init__()
        if d_k % heads:
            raise ValueError(f"d_k={d_k} must be divisible by heads={heads}")
        gen = torch.Generator().manual_seed(seed)

        def init(rows, cols):
            return nn.Parameter(torch.randn(rows, cols, generator=gen, dtype=torch.float64).to(dtype) / math.sqrt(rows))

        self.heads = heads
        self.d, self.d_k = d, d_k
        self.theta_Q = init(d, d_k)
        self.theta_W = init(d, d_k)
        self.theta_V = init(d, d_k)
        self.theta_B = init(d_k, d)

    def forward(self, dbs: torch.Tensor, bank: torch.Tensor, return_weights: bool = False):
        for name, m in (("dbs", dbs), ("bank", bank)):
            if m.shape[-1] != self.d:
                raise ValueError(f"{name}: feature dim {m.shape[-1]} != params d={self.d}")
        return multihead_attention(dbs, bank, self.theta_Q, self.theta_W, self.theta_V, self.theta_B,
                                   self.heads, return_weights)


@dataclass(frozen=True)
class BatchFeatureSpace:
    vectors: np.ndarray
    produced_by: str

    @property
    def zeta(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class FineFeatureBank:
    vectors: torch.Tensor


def build_batch_space(batch, encoder: ExtractorConfig, bank: CoarseFeatureBank | None = None) -> BatchFeatureSpace:
    """Batch-wise feature space; pass ``bank`` to enforce encoder/bank consistency."""
    fp = encoder.fingerprint()
    if bank is not None and bank.extractor_fingerprint != fp:
        raise ConfigurationError(
            f"encoder fingerprint {fp} does not match bank fingerprint {bank.extractor_fingerprint}")
    space = extract_features(batch, encoder)
    return BatchFeatureSpace(space.vectors, fp)


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, (BatchFeatureSpace, CoarseFeatureBank)):
        x = x.vectors
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=like.dtype)


def fcm_forward(dbs, bank, p: AttentionParams) -> FineFeatureBank:
    ref = p.theta_Q
    q, kv = _as_tensor(dbs, ref), _as_tensor(bank, ref)
    for name, m in (("dbs", q), ("bank", kv)):
        if m.ndim != 2:
            raise ValueError(f"{name}: expected a 2-D matrix, got shape {tuple(m.shape)}")
    return FineFeatureBank(p(q, kv))


def fcm_gradients(loss_head, dbs, bank, p: AttentionParams) -> dict[str, torch.Tensor]:
    """Gradients of ``loss_head(B_f)`` w.r.t. the four projection matrices."""
    names = ("theta_Q", "theta_W", "theta_V", "theta_B")
    params = [getattr(p, n) for n in names]
    loss = loss_head(fcm_forward(dbs, bank, p).vectors)
    if not torch.is_tensor(loss) or not loss.requires_grad:
        return {n: torch.zeros_like(w) for n, w in zip(names, params)}
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: torch.zeros_like(w) if g is None else g for n, g, w in zip(names, grads, params)}
