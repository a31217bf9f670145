"""Shifted-window self-attention with a continuous relative-position bias.

Token grids are ``[N, ty, tx, D]`` (batch and SC channels folded into ``N``).
Windows are formed after a cyclic roll by ``-shift``; on periodic axes the
roll is exactly a periodic boundary, on non-periodic axes the pairs that
only became neighbours through the wrap are masked out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Parameter, Tensor

MASKED = -1e9  # finite stand-in for -inf so fully padded rows stay finite


@dataclass(frozen=True)
class WindowAttentionConfig:
    window_size: int = 8
    num_heads: int = 16
    head_dim: int = 6
    shifted: bool = False
    periodic: tuple = (True, True)
    qk_norm: bool = True

    @property
    def shift(self):
        return self.window_size // 2 if self.shifted else 0


def window_geometry(grid, w, shifted):
    """Effective per-axis window, shift and padded grid for a ``ty x tx`` token grid.

    Axes no longer than the window collapse to a single unshifted window.
    """
    wins, shifts, padded = [], [], []
    for n in grid:
        if n <= w:
            wins.append(n)
            shifts.append(0)
            padded.append(n)
        else:
            wins.append(w)
            shifts.append(w // 2 if shifted else 0)
            padded.append(-(-n // w) * w)
    return tuple(wins), tuple(shifts), tuple(padded)


def window_partition(x, window, shift=(0, 0)):
    """``[N, H, W, D] -> [N * nW, wy * wx, D]`` after rolling by ``-shift``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if isinstance(window, int):
        window = (window, window)
    if isinstance(shift, int):
        shift = (shift, shift)
    n, h, w, d = x.shape
    wy, wx = window
    if h % wy or w % wx:
        raise ValueError(f"grid {h}x{w} is not divisible by window {wy}x{wx}")
    if shift[0] or shift[1]:
        x = T.roll(x, (-shift[0], -shift[1]), (1, 2))
    x = x.reshape(n, h // wy, wy, w // wx, wx, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n * (h // wy) * (w // wx), wy * wx, d)


def window_reverse(windows, window, grid, shift=(0, 0)):
    """Inverse of :func:`window_partition`."""
    if isinstance(window, int):
        window = (window, window)
    if isinstance(shift, int):
        shift = (shift, shift)
    h, w = grid
    wy, wx = window
    nw = (h // wy) * (w // wx)
    d = windows.shape[-1]
    n = windows.shape[0] // nw
    x = windows.reshape(n, h // wy, w // wx, wy, wx, d).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, d)
    if shift[0] or shift[1]:
        x = T.roll(x, shift, (1, 2))
    return x


def _rolled_labels(n_pad, n_valid, shift, periodic):
    """Per rolled position: segment label for the seam mask and a validity flag."""
    orig = (np.arange(n_pad) + shift) % n_pad
    valid = orig < n_valid
    if periodic or shift == 0:
        seg = np.zeros(n_pad, dtype=int)
    else:
        seg = (np.arange(n_pad) + shift >= n_pad).astype(int)
    return seg, valid


@lru_cache(maxsize=64)
def _attention_mask(grid, padded, window, shift, periodic):
    (ty, tx), (hp, wp), (wy, wx), (sy, sx) = grid, padded, window, shift
    seg_y, val_y = _rolled_labels(hp, ty, sy, periodic[0])
    seg_x, val_x = _rolled_labels(wp, tx, sx, periodic[1])
    seg = seg_y[:, None] * 2 + seg_x[None, :]
    valid = val_y[:, None] & val_x[None, :]

    def part(a):
        return a.reshape(hp // wy, wy, wp // wx, wx).transpose(0, 2, 1, 3).reshape(-1, wy * wx)

    seg_w, valid_w = part(seg), part(valid)
    allowed = (seg_w[:, :, None] == seg_w[:, None, :]) & valid_w[:, None, :]
    mask = np.where(allowed, 0.0, MASKED)
    mask.setflags(write=False)
    return mask


def boundary_mask(w, shift, periodic, grid):
    """Additive mask ``[nW, w*w, w*w]`` for a ``grid`` split into ``w x w`` windows.

    Entries are ``-inf`` between tokens that sit in one window only because
    of the cyclic roll across a non-periodic edge, else 0.
    """
    if isinstance(w, int):
        w = (w, w)
    if isinstance(shift, int):
        shift = (shift, shift)
    grid = tuple(grid)
    mask = _attention_mask(grid, grid, tuple(w), tuple(shift), tuple(bool(p) for p in periodic))
    return np.where(mask < 0, -np.inf, 0.0)


def relative_offsets(window):
    """Integer offsets ``[n, n, 2]`` between every pair of positions in a window."""
    wy, wx = window
    ys, xs = np.meshgrid(np.arange(wy), np.arange(wx), indexing="ij")
    pos = np.stack([ys.ravel(), xs.ravel()], axis=-1)
    return pos[:, None, :] - pos[None, :, :]


def log_spaced(delta, max_offset=8):
    return np.sign(delta) * np.log2(1.0 + np.abs(delta)) / np.log2(max_offset)


class RelativePositionBias(Module):
    """Two-layer MLP from log-spaced ``(dy, dx)`` to one bias per head."""

    def __init__(self, num_heads, hidden=512, *, rng, dtype=np.float32):
        self.num_heads = num_heads
        self.fc1 = Linear(2, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, num_heads, rng=rng, dtype=dtype)

    def forward(self, window):
        wy, wx = window
        dy, dx = np.meshgrid(np.arange(-wy + 1, wy), np.arange(-wx + 1, wx), indexing="ij")
        table_in = np.stack([log_spaced(dy), log_spaced(dx)], axis=-1).reshape(-1, 2)
        table = self.fc2(T.relu(self.fc1(Tensor(table_in.astype(self.fc1.weight.dtype)))))
        rel = relative_offsets(window)
        idx = (rel[..., 0] + wy - 1) * (2 * wx - 1) + (rel[..., 1] + wx - 1)
        bias = table[idx.ravel()].reshape(wy * wx, wy * wx, self.num_heads)
        return bias.transpose(2, 0, 1)  # [heads, n, n]


def scaled_dot_attention(q, k, v, bias=None, mask=None, q_gamma=None, k_gamma=None, qk_norm=True):
    """``softmax(q k^T / sqrt(hd) + bias + mask) v`` on ``[..., heads, n, hd]``."""
    hd = q.shape[-1]
    if qk_norm:
        q = T.rmsnorm(q, q_gamma)
        k = T.rmsnorm(k, k_gamma)
    logits = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = logits + mask
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("non-finite attention logits")
    return T.matmul(T.softmax(logits, axis=-1), v)


class _HeadsMixin:
    def _qkv(self, x):
        *lead, n, dim = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(*lead, n, 3, h, dim // h)
        nl = len(lead)
        qkv = qkv.transpose(*range(nl), nl + 1, nl + 2, nl, nl + 3)  # [..., 3, h, n, hd]
        return qkv[(slice(None),) * nl + (0,)], qkv[(slice(None),) * nl + (1,)], qkv[(slice(None),) * nl + (2,)]

    def _merge(self, out):
        *lead, h, n, hd = out.shape
        nl = len(lead)
        return out.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, h * hd)


class WindowAttention(Module, _HeadsMixin):
    """Multi-head self-attention inside (optionally shifted) windows of a token grid."""

    def __init__(self, dim, num_heads, window_size=8, *, shifted=False, periodic=(True, True),
                 qk_norm=True, qkv_bias=True, bias_hidden=512, rng, dtype=np.float32):
        if dim % num_heads:
            raise ValueError(f"width {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.shifted = shifted
        self.periodic = tuple(bool(p) for p in periodic)
        self.qk_norm = qk_norm
        hd = dim // num_heads
        self.qkv = Linear(dim, 3 * dim, bias=qkv_bias, rng=rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng=rng, dtype=dtype)
        self.q_gamma = Parameter(np.ones(hd, dtype=dtype))
        self.k_gamma = Parameter(np.ones(hd, dtype=dtype))
        self.rel_bias = RelativePositionBias(num_heads, bias_hidden, rng=rng, dtype=dtype)

    @property
    def config(self):
        return WindowAttentionConfig(self.window_size, self.num_heads, self.dim // self.num_heads,
                                     self.shifted, self.periodic, self.qk_norm)

    def forward(self, x, periodic=None):
        periodic = self.periodic if periodic is None else tuple(bool(p) for p in periodic)
        n, ty, tx, dim = x.shape
        window, shift, padded = window_geometry((ty, tx), self.window_size, self.shifted)
        if padded != (ty, tx):
            x = T.pad(x, [(0, 0), (0, padded[0] - ty), (0, padded[1] - tx), (0, 0)])
        wins = window_partition(x, window, shift)  # [n * nW, L, dim]
        nw = (padded[0] // window[0]) * (padded[1] // window[1])
        length = window[0] * window[1]
        wins = wins.reshape(n, nw, length, dim)
        q, k, v = self._qkv(wins)  # [n, nW, h, L, hd]
        mask = _attention_mask((ty, tx), padded, window, shift, periodic)
        if not np.any(mask):
            mask = None
        else:
            mask = mask[:, None].astype(x.dtype)  # [nW, 1, L, L]
        out = scaled_dot_attention(q, k, v, self.rel_bias(window), mask,
                                   self.q_gamma, self.k_gamma, self.qk_norm)
        out = self.proj(self._merge(out)).reshape(n * nw, length, dim)
        out = window_reverse(out, window, padded, shift)
        if padded != (ty, tx):
            out = out[:, :ty, :tx]
        return out


class ChannelAxialAttention(Module, _HeadsMixin):
    """Attention across the channel axis of ``[B, C, ty, tx, D]``, one site at a time.

    Carries no positional bias: channels are told apart by their type embedding.
    """

    def __init__(self, dim, num_heads, *, qk_norm=True, qkv_bias=True, rng, dtype=np.float32):
        if dim % num_heads:
            raise ValueError(f"width {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.qk_norm = qk_norm
        hd = dim // num_heads
        self.qkv = Linear(dim, 3 * dim, bias=qkv_bias, rng=rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng=rng, dtype=dtype)
        self.q_gamma = Parameter(np.ones(hd, dtype=dtype))
        self.k_gamma = Parameter(np.ones(hd, dtype=dtype))

    def forward(self, x):
        if x.ndim != 5:
            raise ValueError(f"channel-axial attention needs SC tokens [B, C, ty, tx, D], got {x.shape}")
        b, c, ty, tx, dim = x.shape
        sites = x.transpose(0, 2, 3, 1, 4)  # [B, ty, tx, C, D]
        q, k, v = self._qkv(sites)
        out = scaled_dot_attention(q, k, v, None, None, self.q_gamma, self.k_gamma, self.qk_norm)
        out = self.proj(self._merge(out))
        return out.transpose(0, 3, 1, 2, 4)


def windowed_mhsa(x, attn: WindowAttention):
    return attn(x)


def channel_axial_mhsa(x, attn: ChannelAxialAttention, mode="SC"):
    if mode != "SC":
        raise ValueError("channel-axial attention is only defined for separate-channel tokens")
    return attn(x)
