"""U-shaped shifted-window transformer with adaLN-Zero conditioning.

A stage list of length ``2k + 1`` runs ``k`` encoder stages, one bottleneck
and ``k`` decoder stages.  Tokens move down with PixelUnshuffle + Linear and
back up with PixelShuffle + Linear; decoder stages fuse the encoder tokens of
the same resolution by concatenation and a linear projection.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import ChannelAxialAttention, WindowAttention
from .nn import Linear, LoRALinear, Module
from .tensor import Parameter, Tensor
from .tokens import patch_features, patchify, pixel_shuffle_up, pixel_unshuffle_down, stage_width, unpatchify


@dataclass
class ModelConfig:
    d: int = 96
    depths: tuple = (2, 4, 4, 6, 4, 4, 2)
    num_heads: int = 16
    mlp_ratio: float = 4.0
    window_size: int = 8
    patch_size: int = 4
    class_dropout_prob: float = 0.1
    qkv_bias: bool = True
    mode: str = "MC"
    c_max: int = 2
    num_pde_classes: int = 16
    num_channel_types: int = 8
    time_depth: int = 1
    diffusion: bool = False
    max_doublings: int = 2
    bias_hidden: int = 512
    time_features: int = 256
    qk_norm: bool = True
    dtype: str = "float32"
    name: str = "custom"

    @property
    def levels(self):
        return len(self.depths) // 2

    @property
    def input_frames(self):
        # diffusion mode appends the noisy target x_t as an extra frame
        return self.time_depth + (1 if self.diffusion else 0)

    def width(self, level):
        return stage_width(self.d, level, self.max_doublings)

    def heads(self, level):
        return self.num_heads

    def validate(self):
        errors = []
        if len(self.depths) % 2 != 1 or len(self.depths) < 1:
            errors.append(f"depths must have odd length 2k+1, got {list(self.depths)}")
        if any(n < 1 for n in self.depths):
            errors.append(f"every stage needs at least one block, got {list(self.depths)}")
        if self.mode not in ("MC", "SC"):
            errors.append(f"mode must be MC or SC, got {self.mode!r}")
        if self.d < 1 or self.patch_size < 1 or self.window_size < 1:
            errors.append("d, patch_size and window_size must be positive")
        if not errors:
            for lv in range(self.levels + 1):
                if self.width(lv) % self.num_heads:
                    errors.append(f"stage width {self.width(lv)} (level {lv}) not divisible by "
                                  f"num_heads={self.num_heads}")
            for lv in range(1, self.levels + 1):
                if self.width(lv) % 4:
                    errors.append(f"stage width {self.width(lv)} must be divisible by 4 for PixelShuffle")
        if not 0.0 <= self.class_dropout_prob < 1.0:
            errors.append(f"class_dropout_prob must lie in [0, 1), got {self.class_dropout_prob}")
        if self.dtype not in ("float32", "float64"):
            errors.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if errors:
            raise ValueError("invalid model config: " + "; ".join(errors))
        return self

    def to_dict(self):
        out = asdict(self)
        out["depths"] = list(self.depths)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["depths"] = tuple(d["depths"])
        return cls(**d)


def preset(name, **overrides):
    """Named configs: S, B, L (d = 96, 192, 384) and the small TEST config."""
    table = {
        "S": dict(d=96),
        "B": dict(d=192),
        "L": dict(d=384),
        "TEST": dict(d=16, depths=(1, 1, 1), num_heads=2, window_size=4, bias_hidden=16,
                     time_features=16),
    }
    key = name.upper()
    if key not in table:
        raise ValueError(f"unknown model preset {name!r}; expected one of {sorted(table)}")
    return replace(ModelConfig(name=key, **table[key]), **overrides).validate()


# -- conditioning ------------------------------------------------------------------

@dataclass
class Conditioning:
    pde_class: Optional[object] = None     # int, per-sample ints, or None (unconditional)
    channel_types: Optional[Sequence[int]] = None
    t: Optional[object] = None             # diffusion time in [0, 1]
    periodic: tuple = (True, True)

    def permuted(self, perm):
        return replace(self, channel_types=[self.channel_types[i] for i in perm])


def drop_labels(labels, prob, null_id, rng):
    """Replace each label by ``null_id`` with probability ``prob``."""
    labels = np.asarray(labels)
    if prob <= 0:
        return labels
    return np.where(rng.random(labels.shape) < prob, null_id, labels)


def timestep_features(t, dim, max_period=10000.0):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None] * 1000.0
    feats = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((len(t), 1))], axis=-1)
    return feats


def _normal(rng, shape, std, dtype):
    return Parameter(rng.normal(0.0, std, size=shape).astype(dtype))


class ConditionEmbedding(Module):
    """Sum of PDE-class, diffusion-time and (SC) channel-type embeddings."""

    def __init__(self, cfg: ModelConfig, *, rng, dtype):
        d = cfg.d
        self.cfg = cfg
        self.class_table = _normal(rng, (cfg.num_pde_classes + 1, d), 0.02, dtype)  # last row = NULL
        if cfg.diffusion:
            self.time_fc1 = Linear(cfg.time_features, d, rng=rng, dtype=dtype)
            self.time_fc2 = Linear(d, d, rng=rng, dtype=dtype)
        if cfg.mode == "SC":
            self.channel_table = _normal(rng, (cfg.num_channel_types, d), 0.02, dtype)

    @property
    def null_id(self):
        return self.cfg.num_pde_classes

    def class_ids(self, pde_class, batch):
        if pde_class is None:
            ids = np.full(batch, self.null_id)
        else:
            ids = np.broadcast_to(np.asarray(pde_class), (batch,)).copy()
            ids = np.where(ids < 0, self.null_id, ids)
        if np.any(ids > self.null_id):
            raise ValueError(f"PDE class id out of range [0, {self.cfg.num_pde_classes}): {ids.max()}")
        return ids.astype(int)

    def forward(self, cond: Conditioning, batch, channels, training=False, rng=None):
        ids = self.class_ids(cond.pde_class, batch)
        if training and self.cfg.class_dropout_prob > 0:
            if rng is None:
                raise ValueError("label dropout in training mode needs an rng")
            ids = drop_labels(ids, self.cfg.class_dropout_prob, self.null_id, rng)
        emb = T.embedding(self.class_table, ids)  # [B, d]
        if self.cfg.diffusion:
            if cond.t is None:
                raise ValueError("diffusion-mode model needs a diffusion time t in the conditioning")
            t = np.broadcast_to(np.asarray(cond.t, dtype=np.float64).reshape(-1), (batch,))
            feats = Tensor(timestep_features(t, self.cfg.time_features).astype(self.class_table.dtype))
            emb = emb + self.time_fc2(T.silu(self.time_fc1(feats)))
        emb = emb.reshape(batch, 1, self.cfg.d)
        if self.cfg.mode == "SC":
            types = cond.channel_types
            if types is None or len(types) != channels:
                raise ValueError(f"SC mode needs one channel type per channel ({channels}), got {types}")
            types = np.asarray(types, dtype=int)
            if types.min() < 0 or types.max() >= self.cfg.num_channel_types:
                raise ValueError(f"channel type id out of range [0, {self.cfg.num_channel_types}): {types}")
            emb = emb + T.embedding(self.channel_table, types).reshape(1, channels, self.cfg.d)
        return emb  # [B, C', d]


# -- transformer blocks ---------------------------------------------------------------

def modulate(x, shift, scale):
    return x * (scale + 1.0) + shift


class Mlp(Module):
    def __init__(self, dim, hidden, *, rng, dtype):
        self.fc1 = Linear(dim, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class AdaLNZeroBlock(Module):
    """Window attention and MLP (plus channel-axial attention in SC mode), each gated.

    The modulation layer starts at zero, so every gate is zero and the block
    is exactly the identity at initialization.
    """

    def __init__(self, dim, cond_dim, num_heads, window_size, *, shifted, mlp_ratio=4.0, qkv_bias=True,
                 qk_norm=True, bias_hidden=512, channel_axial=False, rng, dtype):
        self.dim = dim
        self.channel_axial = channel_axial
        self.attn = WindowAttention(dim, num_heads, window_size, shifted=shifted, qk_norm=qk_norm,
                                    qkv_bias=qkv_bias, bias_hidden=bias_hidden, rng=rng, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng=rng, dtype=dtype)
        if channel_axial:
            self.axial = ChannelAxialAttention(dim, num_heads, qk_norm=qk_norm, qkv_bias=qkv_bias,
                                               rng=rng, dtype=dtype)
        self.n_mod = 9 if channel_axial else 6
        self.modulation = Linear(cond_dim, self.n_mod * dim, rng=rng, dtype=dtype, zero=True)

    def regress_modulation(self, c):
        """``c`` is ``[B, C', cond_dim]``; returns (shift, scale, gate) triples shaped ``[B, C', 1, 1, dim]``."""
        b, cp, _ = c.shape
        m = self.modulation(T.silu(c)).reshape(b, cp, 1, 1, self.n_mod * self.dim)
        chunks = [m[..., i * self.dim:(i + 1) * self.dim] for i in range(self.n_mod)]
        return [tuple(chunks[i:i + 3]) for i in range(0, self.n_mod, 3)]

    def forward(self, x, c, periodic=(True, True)):
        b, cp, ty, tx, dim = x.shape
        mods = self.regress_modulation(c)
        shift, scale, gate = mods[0]
        h = modulate(T.layernorm(x), shift, scale).reshape(b * cp, ty, tx, dim)
        x = x + self.attn(h, periodic).reshape(b, cp, ty, tx, dim) * gate
        if self.channel_axial:
            shift, scale, gate = mods[2]
            x = x + self.axial(modulate(T.layernorm(x), shift, scale)) * gate
        shift, scale, gate = mods[1]
        x = x + self.mlp(modulate(T.layernorm(x), shift, scale)) * gate
        return x


class Stage(Module):
    def __init__(self, depth, dim, cfg: ModelConfig, *, rng, dtype):
        self.blocks = [
            AdaLNZeroBlock(dim, cfg.d, cfg.num_heads, cfg.window_size, shifted=bool(i % 2),
                           mlp_ratio=cfg.mlp_ratio, qkv_bias=cfg.qkv_bias, qk_norm=cfg.qk_norm,
                           bias_hidden=cfg.bias_hidden, channel_axial=cfg.mode == "SC", rng=rng, dtype=dtype)
            for i in range(depth)
        ]

    def forward(self, x, c, periodic):
        for blk in self.blocks:
            x = blk(x, c, periodic)
        return x


class FinalLayer(Module):
    def __init__(self, dim, out_features, *, rng, dtype):
        self.modulation = Linear(dim, 2 * dim, rng=rng, dtype=dtype, zero=True)
        self.linear = Linear(dim, out_features, rng=rng, dtype=dtype, zero=True)
        self.dim = dim

    def forward(self, x, c):
        b, cp, _ = c.shape
        m = self.modulation(T.silu(c)).reshape(b, cp, 1, 1, 2 * self.dim)
        shift, scale = m[..., :self.dim], m[..., self.dim:]
        return self.linear(modulate(T.layernorm(x), shift, scale))


class PDETransformer(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        k = cfg.levels
        p = cfg.patch_size
        c_in = patch_features(p, cfg.input_frames, cfg.mode, cfg.c_max)
        c_out = patch_features(p, 1, cfg.mode, cfg.c_max)
        self.embed = Linear(c_in, cfg.d, rng=rng, dtype=dtype)
        self.cond = ConditionEmbedding(cfg, rng=rng, dtype=dtype)
        self.encoder = [Stage(cfg.depths[i], cfg.width(i), cfg, rng=rng, dtype=dtype) for i in range(k)]
        self.down = [Linear(4 * cfg.width(i), cfg.width(i + 1), rng=rng, dtype=dtype) for i in range(k)]
        self.bottleneck = Stage(cfg.depths[k], cfg.width(k), cfg, rng=rng, dtype=dtype)
        # decoder lists run from the coarsest level back to the finest
        self.up = [Linear(cfg.width(lv + 1) // 4, cfg.width(lv), rng=rng, dtype=dtype)
                   for lv in reversed(range(k))]
        self.fuse = [Linear(2 * cfg.width(lv), cfg.width(lv), rng=rng, dtype=dtype) for lv in reversed(range(k))]
        self.decoder = [Stage(cfg.depths[k + 1 + j], cfg.width(k - 1 - j), cfg, rng=rng, dtype=dtype)
                        for j in range(k)]
        self.final = FinalLayer(cfg.d, c_out, rng=rng, dtype=dtype)
        self.skip_scale = [1.0] * k  # set an entry to 0 to ablate that skip connection
        self._rng = np.random.default_rng([seed, 1])

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def _check_input(self, u):
        b, t, c, h, w = u.shape
        mult = self.cfg.patch_size * 2 ** self.cfg.levels
        if h % mult or w % mult:
            raise ValueError(f"resolution {h}x{w} must be divisible by patch_size*2^levels = {mult}")
        if self.cfg.mode == "MC" and c > self.cfg.c_max:
            raise ValueError(f"MC model takes at most C_max={self.cfg.c_max} channels, got {c}")
        if t != self.cfg.time_depth:
            raise ValueError(f"model expects T={self.cfg.time_depth} input frames, got {t}")

    def embed_conditioning(self, cond: Conditioning, batch=1, channels=1, rng=None):
        rng = self._rng if rng is None else rng
        return self.cond(cond, batch, channels if self.cfg.mode == "SC" else 1, self.training, rng)

    def forward(self, u_in, cond: Conditioning = None, x_t=None, rng=None):
        """``u_in`` is ``[B, T, C, H, W]`` (or unbatched); returns ``[B, 1, C, H, W]``."""
        cond = cond or Conditioning()
        u = u_in if isinstance(u_in, Tensor) else Tensor(u_in)
        unbatched = u.ndim == 4
        if unbatched:
            u = u.reshape((1,) + u.shape)
        if u.dtype != self.dtype:
            u = Tensor(u.data.astype(self.dtype)) if not u.requires_grad else u
        self._check_input(u)
        b, t, c, h, w = u.shape
        if self.cfg.diffusion:
            if x_t is None:
                raise ValueError("diffusion-mode model needs x_t")
            xt = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.dtype))
            xt = xt.reshape(b, 1, c, h, w)
            u = T.concat([u, xt], axis=1)
        elif x_t is not None:
            raise ValueError("supervised model does not take x_t")
        periodic = tuple(cond.periodic)

        grid = patchify(u, self.cfg.patch_size, self.cfg.mode, self.embed, self.cfg.c_max)
        cvec = self.embed_conditioning(cond, b, c, rng)
        x = grid.tokens
        skips = []
        for lv in range(self.cfg.levels):
            x = self.encoder[lv](x, cvec, periodic)
            skips.append(x)
            x = pixel_unshuffle_down(x, 2, self.down[lv])
        x = self.bottleneck(x, cvec, periodic)
        for j in range(self.cfg.levels):
            lv = self.cfg.levels - 1 - j
            x = pixel_shuffle_up(x, 2, self.up[j])
            skip = skips[lv] if self.skip_scale[lv] == 1.0 else skips[lv] * self.skip_scale[lv]
            x = self.fuse[j](T.concat([x, skip], axis=-1))
            x = self.decoder[j](x, cvec, periodic)
        grid.tokens = self.final(x, cvec)
        out = unpatchify(grid, time_depth=1, c_max=self.cfg.c_max)
        return out[0] if unbatched else out

    def blocks(self):
        return [m for m in self.modules() if isinstance(m, AdaLNZeroBlock)]


def build(cfg: ModelConfig, seed=0) -> PDETransformer:
    return PDETransformer(cfg, seed)


def forward(model, u_in, cond=None, x_t=None):
    return model(u_in, cond, x_t)


# -- LoRA -------------------------------------------------------------------------------

DEFAULT_LORA_TARGETS = ("attn.qkv", "attn.proj")


def attach_lora(model: Module, rank, alpha=None, targets=DEFAULT_LORA_TARGETS, seed=0):
    """Wrap every ``Linear`` whose dotted name ends with one of ``targets``.

    All other parameters are frozen, so only the low-rank factors train.
    Returns the list of adapted layer names.
    """
    rng = np.random.default_rng(seed)
    found = []

    def visit(mod, prefix):
        for name, value in list(mod.__dict__.items()):
            full = f"{prefix}{name}"
            if isinstance(value, Linear) and any(full == t or full.endswith("." + t) for t in targets):
                setattr(mod, name, LoRALinear(value, rank, alpha, rng=rng))
                found.append(full)
            elif isinstance(value, Module) and not isinstance(value, LoRALinear):
                visit(value, full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Linear) and any(f"{full}.{i}".endswith(t) for t in targets):
                        value[i] = LoRALinear(item, rank, alpha, rng=rng)
                        found.append(f"{full}.{i}")
                    elif isinstance(item, Module):
                        visit(item, f"{full}.{i}.")

    for p in model.parameters():
        p.requires_grad = False
    visit(model, "")
    if not found:
        raise KeyError(f"no linear layer matches LoRA targets {targets}")
    return found


def lora_parameter_count(model: Module):
    """Closed form ``sum r * (d + k)`` over adapted layers."""
    return sum(m.rank * (m.in_features + m.out_features) for m in model.modules() if isinstance(m, LoRALinear))
