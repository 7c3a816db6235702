"""Noise-prediction network for conditional CSI imputation.

Every RIS element is one token of width 2M.  The noisy full channel and the
partial estimate are embedded separately; full tokens cross-attend to the
observed ones, a self-attention stack mixes information across elements, and
a conv/residual/linear head emits the noise estimate.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


def vector_to_tokens_t(x: torch.Tensor, N: int, M: int) -> torch.Tensor:
    half = N * M
    re = x[..., :half].reshape(*x.shape[:-1], M, N).transpose(-1, -2)
    im = x[..., half:].reshape(*x.shape[:-1], M, N).transpose(-1, -2)
    return torch.cat([re, im], dim=-1)


def tokens_to_vector_t(tokens: torch.Tensor) -> torch.Tensor:
    M = tokens.shape[-1] // 2
    re = tokens[..., :M].transpose(-1, -2).flatten(-2)
    im = tokens[..., M:].transpose(-1, -2).flatten(-2)
    return torch.cat([re, im], dim=-1)


def step_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = k.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class Denoiser(nn.Module):
    def __init__(self, N: int, M: int, width: int = 64, heads: int = 4, layers: int = 2,
                 dropout: float = 0.0):
        super().__init__()
        self.N, self.M, self.width = N, M, width
        tok = 2 * M
        self.input_embed = nn.Linear(2 * tok + 1, width)
        self.cond_embed = nn.Linear(tok, width)
        self.element_pos = nn.Embedding(N, width)
        self.cond_pos = nn.Embedding(N, width)
        self.null_cond = nn.Parameter(torch.zeros(1, 1, width))
        self.step_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.cross_q = nn.LayerNorm(width)
        self.cross_kv = nn.LayerNorm(width)
        self.cross_attn = nn.MultiheadAttention(width, heads, dropout=dropout, batch_first=True)
        layer = nn.TransformerEncoderLayer(width, heads, 2 * width, dropout, activation="gelu",
                                           batch_first=True, norm_first=True)
        self.spatial = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.conv = nn.Conv1d(width, width, kernel_size=3, padding=1)
        self.out_ln = nn.LayerNorm(width)
        self.out = nn.Linear(width, tok)

    def forward(self, x_k, cond_full, indicator, k):
        """``x_k (B, 2NM)``, ``cond_full (B, N, 2M)`` zero-filled, ``indicator (B, N)``, ``k (B,)``."""
        B = x_k.shape[0]
        if x_k.shape[-1] != 2 * self.N * self.M or cond_full.shape[1:] != (self.N, 2 * self.M):
            raise ValueError("input shapes do not match the model's N, M")
        ind = indicator[..., None]
        tokens = vector_to_tokens_t(x_k, self.N, self.M)
        pos = self.element_pos.weight[None]
        h = self.input_embed(torch.cat([tokens, cond_full * ind, ind], dim=-1)) + pos
        h = h + self.step_mlp(step_embedding(k, self.width))[:, None]

        # condition tokens keyed by element index, so their order is irrelevant
        c = self.cond_embed(cond_full) + self.cond_pos.weight[None]
        keys = torch.cat([self.null_cond.expand(B, -1, -1), c], dim=1)
        pad = torch.cat([torch.zeros(B, 1, dtype=torch.bool), indicator <= 0], dim=1)
        kv = self.cross_kv(keys)
        attn, _ = self.cross_attn(self.cross_q(h), kv, kv, key_padding_mask=pad, need_weights=False)
        h = self.spatial(h + attn)

        h = h + F.gelu(self.conv(h.transpose(1, 2)).transpose(1, 2))
        return tokens_to_vector_t(self.out(self.out_ln(h)))


def scatter_condition(tokens: np.ndarray, indices: np.ndarray, N: int):
    full = np.zeros((N, tokens.shape[-1]))
    full[indices] = tokens
    ind = np.zeros(N)
    ind[indices] = 1.0
    return full, ind


@torch.no_grad()
def denoiser_forward(model: Denoiser, x_k, condition, k) -> np.ndarray:
    """Evaluation-mode noise prediction for one slot.

    ``condition`` is a :class:`~dedt.diffusion.Condition` in the model's
    (normalized) units.
    """
    x_k = np.asarray(x_k, dtype=float)
    if x_k.shape != (2 * model.N * model.M,):
        raise ValueError(f"expected x_k of length {2 * model.N * model.M}, got {x_k.shape}")
    if condition.N != model.N:
        raise ValueError("condition is for a different element count")
    full, ind = scatter_condition(condition.tokens, condition.indices, model.N)
    model.eval()
    out = model(torch.as_tensor(x_k[None], dtype=torch.float32),
                torch.as_tensor(full[None], dtype=torch.float32),
                torch.as_tensor(ind[None], dtype=torch.float32),
                torch.as_tensor([k]))
    return out[0].double().numpy()
