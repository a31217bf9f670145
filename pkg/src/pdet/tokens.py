"""Patch embedding, mixed/separate-channel token layouts and token resampling.

Tokens are always laid out as ``[B, C', ty, tx, d]`` where ``C' = 1`` in
mixed-channel (MC) mode and ``C' = C`` in separate-channel (SC) mode, so the
transformer stages never need to branch on the mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("MC", "SC")


@dataclass
class TokenGrid:
    tokens: Tensor  # [B, C', ty, tx, d]
    patch_size: int
    time_depth: int
    mode: str
    height: int
    width: int
    channels: int
    field_types: list = field(default_factory=list)

    @property
    def grid(self):
        return self.tokens.shape[2], self.tokens.shape[3]

    @property
    def num_tokens(self):
        b, c, ty, tx, _ = self.tokens.shape
        return c * ty * tx


def expansion_rate(d, p, time_depth=1):
    """How much the embedding inflates the raw data of one token, ``d / (p^2 T)``."""
    return d / (p * p * time_depth)


def patch_features(p, time_depth, mode, c_max=2):
    """Number of raw values feeding one token."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return time_depth * p * p * (c_max if mode == "MC" else 1)


def _as_batched(u):
    u = u if isinstance(u, Tensor) else Tensor(u)
    if u.ndim == 4:
        return u.reshape((1,) + u.shape), True
    if u.ndim != 5:
        raise ValueError(f"expected [T, C, H, W] or [B, T, C, H, W], got shape {u.shape}")
    return u, False


def patchify(u, p, mode="MC", proj=None, c_max=2, field_types=None) -> TokenGrid:
    """Cut ``u`` into ``p x p`` patches over all ``T`` frames and embed them.

    ``proj`` maps the raw patch vector to the token width; without it the raw
    patch vectors are returned as tokens.
    """
    u, _ = _as_batched(u)
    b, t, c, h, w = u.shape
    if h % p or w % p:
        raise ValueError(f"resolution {h}x{w} is not divisible by patch size {p}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    ty, tx = h // p, w // p
    if mode == "MC":
        if c > c_max:
            raise ValueError(f"MC mode supports at most C_max={c_max} channels, got {c}")
        if c < c_max:
            u = T.pad(u, [(0, 0), (0, 0), (0, c_max - c), (0, 0), (0, 0)])
        x = u.reshape(b, t, c_max, ty, p, tx, p).transpose(0, 3, 5, 1, 2, 4, 6)
        x = x.reshape(b, 1, ty, tx, t * c_max * p * p)
    else:
        x = u.reshape(b, t, c, ty, p, tx, p).transpose(0, 2, 3, 5, 1, 4, 6)
        x = x.reshape(b, c, ty, tx, t * p * p)
    if proj is not None:
        x = proj(x)
    return TokenGrid(x, p, t, mode, h, w, c, list(field_types or []))


def unpatchify(g: TokenGrid, proj=None, time_depth=None, c_max=2):
    """Inverse of :func:`patchify`; returns ``[B, T, C, H, W]``.

    ``time_depth`` overrides the number of output frames (the prediction head
    emits one frame even when several were fed in).
    """
    x = g.tokens if proj is None else proj(g.tokens)
    b, cp, ty, tx, k = x.shape
    p = g.patch_size
    t = g.time_depth if time_depth is None else time_depth
    if (ty * p, tx * p) != (g.height, g.width):
        raise ValueError(f"token grid {ty}x{tx} with p={p} does not match {g.height}x{g.width}")
    if g.mode == "MC":
        if cp != 1 or k != t * c_max * p * p:
            raise ValueError(f"MC tokens of shape {x.shape} cannot hold T={t}, C_max={c_max}, p={p}")
        u = x.reshape(b, ty, tx, t, c_max, p, p).transpose(0, 3, 4, 1, 5, 2, 6)
        u = u.reshape(b, t, c_max, g.height, g.width)
        return u[:, :, :g.channels] if g.channels < c_max else u
    if cp != g.channels or k != t * p * p:
        raise ValueError(f"SC tokens of shape {x.shape} cannot hold C={g.channels}, T={t}, p={p}")
    u = x.reshape(b, cp, ty, tx, t, p, p).transpose(0, 4, 1, 2, 5, 3, 6)
    return u.reshape(b, t, cp, g.height, g.width)


def pixel_unshuffle_down(x, factor=2, proj=None):
    """Space-to-depth on ``[..., ty, tx, d]``: ``(ty, tx, d) -> (ty/f, tx/f, f^2 d)``, then ``proj``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    *lead, ty, tx, d = x.shape
    if ty % factor or tx % factor:
        raise ValueError(f"token grid {ty}x{tx} is not divisible by {factor}")
    n = len(lead)
    y = x.reshape(*lead, ty // factor, factor, tx // factor, factor, d)
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    y = y.transpose(axes).reshape(*lead, ty // factor, tx // factor, factor * factor * d)
    return proj(y) if proj is not None else y


def pixel_shuffle_up(x, factor=2, proj=None):
    """Depth-to-space on ``[..., ty, tx, D]``: ``(ty, tx, D) -> (f ty, f tx, D/f^2)``, then ``proj``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    *lead, ty, tx, dd = x.shape
    if dd % (factor * factor):
        raise ValueError(f"width {dd} is not divisible by {factor * factor}")
    d = dd // (factor * factor)
    n = len(lead)
    y = x.reshape(*lead, ty, tx, factor, factor, d)
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    y = y.transpose(axes).reshape(*lead, ty * factor, tx * factor, d)
    return proj(y) if proj is not None else y


def stage_width(d, stage, max_doublings=2):
    """Hidden width of resolution level ``stage``: ``d * 2^min(stage, max_doublings)``."""
    return d * 2 ** min(stage, max_doublings)


def token_pyramid(h, w, p, levels):
    """Token grid sizes from the finest to the coarsest level."""
    out = []
    ty, tx = h // p, w // p
    for _ in range(levels):
        out.append((ty, tx))
        ty, tx = ty // 2, tx // 2
    return out


def count_tokens(h, w, p, channels, mode, levels):
    factor = channels if mode == "SC" else 1
    return [factor * ty * tx for ty, tx in token_pyramid(h, w, p, levels)]


def pseudo_inverse_pair(d, p, time_depth, mode, c_max=2, rng=None, dtype=np.float64):
    """Random embedding ``[k, d]`` and its least-squares unembedding ``[d, k]``."""
    rng = rng or np.random.default_rng(0)
    k = patch_features(p, time_depth, mode, c_max)
    if d < k:
        raise ValueError(f"roundtrip needs d >= {k}, got d={d}")
    embed = rng.standard_normal((k, d)).astype(dtype)
    return embed, np.linalg.pinv(embed).astype(dtype)
