"""Module container and the handful of layers the transformer is built from."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Parameter tree with dotted, insertion-ordered names.

    Attributes that are ``Parameter``, ``Module`` or lists of modules are
    discovered automatically, mirroring the usual deep-learning convention.
    """

    training = False

    def named_parameters(self, prefix=""):
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self):
        yield self
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self, trainable_only=False):
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.size for p in ps))

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state dict mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def xavier_uniform(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as ``[in, out]``."""

    def __init__(self, in_features, out_features, bias=True, *, rng, dtype=np.float32, zero=False):
        self.in_features = in_features
        self.out_features = out_features
        if zero:
            w = np.zeros((in_features, out_features), dtype=dtype)
        else:
            w = xavier_uniform(rng, in_features, out_features, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class LoRALinear(Module):
    """Frozen base projection plus a trainable low-rank update scaled by ``alpha / rank``.

    ``A`` is ``[rank, in]`` and ``B`` is ``[out, rank]`` so that the update is
    ``(alpha / rank) * B @ A @ x``; ``B`` starts at zero.
    """

    def __init__(self, base: Linear, rank: int, alpha=None, *, rng):
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        self.base = base
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        dtype = base.weight.dtype
        k, d = base.in_features, base.out_features
        bound = 1.0 / math.sqrt(k)
        self.A = Parameter(rng.uniform(-bound, bound, size=(rank, k)).astype(dtype))
        self.B = Parameter(np.zeros((d, rank), dtype=dtype))
        base.weight.requires_grad = False
        if base.bias is not None:
            base.bias.requires_grad = False

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    @property
    def scaling(self):
        return self.alpha / self.rank

    def forward(self, x):
        y = self.base(x)
        low = T.matmul(T.matmul(x, self.A.transpose(1, 0)), self.B.transpose(1, 0))
        return y + low * self.scaling

    def merged_weight(self):
        return self.base.weight.data + self.scaling * (self.B.data @ self.A.data).T
