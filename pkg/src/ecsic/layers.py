"""Row-restricted cross attention for rectified stereo features.

In a rectified pair, the match for any pixel lies on the same image row of
the other view, so attention is computed independently per row: each width
position of a row in one stream attends to all width positions of the same
row in the other stream. Score storage is O(w^2 h) instead of O((wh)^2).
"""

import math

import torch
import torch.nn as nn

from .errors import ConfigError, DimensionError


class EpipolarCrossAttention(nn.Module):
    """Multi-head cross attention between corresponding rows of two streams.

    Queries/keys/values are 1D convolutions along the width (kernel
    `kernel`, not pointwise linears), layer norm is applied to queries and
    keys only, and there is no positional encoding. The attended values pass
    through an output projection and are added residually, so zeroed
    value/output weights make the module an exact identity; they are
    zero-initialized for that reason.

    One instance serves both directions with shared weights: forward()
    returns (left + attn(left->right), right + attn(right->left)).
    """

    def __init__(self, channels: int, embed_dim: int, heads: int, kernel: int = 3):
        super().__init__()
        if embed_dim % heads != 0:
            raise ConfigError(f"embed_dim {embed_dim} not divisible by heads {heads}")
        if kernel % 2 != 1:
            raise ConfigError(f"kernel {kernel} must be odd")
        self.heads = heads
        self.embed_dim = embed_dim
        self.head_dim = embed_dim // heads
        pad = kernel // 2
        # q sits alone on the query stream; k and v share one fused conv on
        # the key/value stream
        self.proj_q = nn.Conv1d(channels, embed_dim, kernel, padding=pad)
        self.proj_kv = nn.Conv1d(channels, 2 * embed_dim, kernel, padding=pad)
        self.proj_out = nn.Conv1d(embed_dim, channels, kernel, padding=pad)
        self.norm_q = nn.LayerNorm(embed_dim)
        self.norm_k = nn.LayerNorm(embed_dim)
        with torch.no_grad():
            self.proj_kv.weight[embed_dim:].zero_()  # value half
            self.proj_kv.bias[embed_dim:].zero_()
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)
        # diagnostics: score elements materialized by the last forward, and
        # (only when keep_attn is set) the attention weights themselves
        self.last_score_numel = 0
        self.keep_attn = False
        self.last_attn = None

    def attend(self, f_q, f_kv):
        """One direction: f_q's rows query the matching rows of f_kv."""
        if f_q.shape != f_kv.shape:
            raise DimensionError(f"stream shapes differ: {tuple(f_q.shape)} vs {tuple(f_kv.shape)}")
        B, C, h, w = f_q.shape
        n, H, d = self.heads, B * h, self.head_dim
        # rows become batch entries; nothing below ever mixes rows
        rq = f_q.permute(0, 2, 1, 3).reshape(H, C, w)
        rkv = f_kv.permute(0, 2, 1, 3).reshape(H, C, w)

        q = self.norm_q(self.proj_q(rq).transpose(1, 2))
        kv = self.proj_kv(rkv)
        k = self.norm_k(kv[:, : self.embed_dim].transpose(1, 2))
        v = kv[:, self.embed_dim :].transpose(1, 2)

        # (H, w, E) -> (H, heads, w, d)
        q = q.view(H, w, n, d).transpose(1, 2)
        k = k.view(H, w, n, d).transpose(1, 2)
        v = v.view(H, w, n, d).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(d)
        self.last_score_numel = scores.numel()
        attn = torch.softmax(scores, dim=-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        ctx = (attn @ v).transpose(1, 2).reshape(H, w, n * d)
        out = self.proj_out(ctx.transpose(1, 2))  # (H, C, w)
        out = out.view(B, h, C, w).permute(0, 2, 1, 3)
        return f_q + out

    def forward(self, f_l, f_r):
        return self.attend(f_l, f_r), self.attend(f_r, f_l)
