"""Supervised and flow-matching training: AdamW, EMA weights, accumulation, EMA gradient clipping."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fields
from .model import Conditioning, PDETransformer
from .spectral import PDE_KINDS
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 4.0e-5
    weight_decay: float = 1e-15
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    effective_batch: int = 256
    micro_batch: int = 256
    epochs: int = 100
    max_steps: int = 0           # > 0 stops after this many optimizer steps
    ema_decay: float = 0.999
    objective: str = "mse"       # "mse" or "flow_matching"
    sigma_min: float = 1e-4
    clip: str = "ema"            # "ema" or "none"
    clip_literal: bool = False   # printed update rules instead of the corrected ones
    seed: int = 0

    @property
    def accumulation_steps(self):
        return self.effective_batch // self.micro_batch

    def validate(self):
        errors = []
        if self.lr <= 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            errors.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.micro_batch < 1 or self.effective_batch < 1:
            errors.append("effective_batch and micro_batch must be >= 1")
        elif self.effective_batch % self.micro_batch:
            errors.append(f"effective_batch ({self.effective_batch}) must be a multiple of "
                          f"micro_batch ({self.micro_batch})")
        if not 0.0 <= self.ema_decay < 1.0:
            errors.append(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.objective not in ("mse", "flow_matching"):
            errors.append(f"objective must be 'mse' or 'flow_matching', got {self.objective!r}")
        if self.clip not in ("ema", "none"):
            errors.append(f"clip must be 'ema' or 'none', got {self.clip!r}")
        if not 0.0 <= self.sigma_min < 1.0:
            errors.append(f"sigma_min must lie in [0, 1), got {self.sigma_min}")
        if errors:
            raise ValueError("invalid training config: " + "; ".join(errors))
        return self

    def to_dict(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


# -- objectives ---------------------------------------------------------------------

def flow_sample(u_out, t, eps, sigma_min=1e-4):
    """``x_t = t u_out + (1 - (1 - sigma_min) t) eps`` with ``t`` per batch item."""
    u_out = np.asarray(u_out)
    if np.ndim(t):
        t = np.asarray(t).reshape((-1,) + (1,) * (u_out.ndim - 1))
    # (1 - t) + sigma_min * t keeps both endpoints exact in floating point
    return t * u_out + ((1 - t) + sigma_min * t) * eps


def flow_target(u_out, eps, sigma_min=1e-4):
    return u_out - (1 - sigma_min) * eps


def mse(pred, target):
    """Mean of squared errors over every element."""
    diff = pred - target
    loss = (diff * diff).mean()
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss {loss.data}")
    return loss


def loss_supervised(model, u_in, cond, u_out):
    return mse(model(u_in, cond), np.asarray(u_out, dtype=model.dtype))


def loss_flow_matching(model, u_in, cond, u_out, sigma_min=1e-4, rng=None, t=None, eps=None):
    """Velocity regression on the straight noise-to-data path; ``t`` and ``eps`` drawn if absent."""
    u_out = np.asarray(u_out, dtype=model.dtype)
    b = u_out.shape[0]
    if t is None:
        t = rng.random(b)
    if eps is None:
        eps = rng.standard_normal(u_out.shape)
    eps = np.asarray(eps, dtype=model.dtype)
    x_t = flow_sample(u_out, np.asarray(t, dtype=np.float64), eps, sigma_min).astype(model.dtype)
    cond = replace(cond, t=np.asarray(t, dtype=np.float64))
    return mse(model(u_in, cond, x_t=x_t[:, 0]), flow_target(u_out, eps, sigma_min))


# -- EMA gradient clipping ------------------------------------------------------------

@dataclass
class EmaClipState:
    beta1: float = 0.99
    beta2: float = 0.999
    alpha: float = 2.0
    kappa: float = 1.1
    i: int = 0
    g1: float = 0.0
    g2: float = 0.0
    literal: bool = False

    def to_dict(self):
        return asdict(self)


def ema_clip_norm(state: EmaClipState, norm):
    """Advance ``state`` for one gradient of norm ``norm``; returns ``(scale, clipped)``.

    The gradient should be multiplied by ``scale``.  With ``literal`` the
    printed rules are used: the gradient is multiplied by ``kappa * g1_hat``
    and ``g2`` is updated with ``beta1``.
    """
    scale, clipped = 1.0, False
    if state.i != 0:
        g1_hat = state.g1 / (1 - state.beta1 ** state.i)
        g2_hat = state.g2 / (1 - state.beta2 ** state.i)
        if norm > state.alpha * g2_hat:
            clipped = True
            scale = state.kappa * g1_hat if state.literal else state.kappa * g1_hat / norm
    post = norm * scale
    state.g1 = state.beta1 * state.g1 + (1 - state.beta1) * post
    b2 = state.beta1 if state.literal else state.beta2
    state.g2 = b2 * state.g2 + (1 - b2) * post
    state.i += 1
    return scale, clipped


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def ema_grad_clip(state: EmaClipState, grads):
    """Clip a list of gradient arrays in place; returns ``(grads, norm, clipped)``."""
    norm = global_norm(grads)
    scale, clipped = ema_clip_norm(state, norm)
    if scale != 1.0:
        for g in grads:
            g *= scale
    return grads, norm, clipped


# -- optimizer and weight averaging ------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay: ``p -= lr*wd*p`` before the Adam step."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        grads = [p.grad for p in self.params] if grads is None else grads
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_arrays(self):
        return self.m + self.v


class EmaWeights:
    """Exponential moving average of parameter values."""

    def __init__(self, params, decay=0.999):
        self.params = list(params)
        self.decay = decay
        self.shadow = [p.data.copy() for p in self.params]

    def update(self):
        d = self.decay
        for s, p in zip(self.shadow, self.params):
            s *= d
            s += (1 - d) * p.data

    def swap(self):
        """Exchange live and averaged weights (call twice to restore)."""
        for i, p in enumerate(self.params):
            p.data, self.shadow[i] = self.shadow[i], p.data


# -- data ----------------------------------------------------------------------------------

class PairDataset:
    """Consecutive snapshot pairs ``(u[k : k+T], u[k+T])`` drawn from trajectories."""

    def __init__(self, trajs, time_depth=1, pde_class=None, stats=None):
        self.trajs = list(trajs)
        if not self.trajs:
            raise ValueError("dataset has no trajectories")
        self.time_depth = time_depth
        self.stats = stats
        self.data = [
            (fields.normalize_array(tr.data.astype(np.float64), stats) if stats is not None else tr.data)
            for tr in self.trajs]
        self.index = [(i, k) for i, tr in enumerate(self.trajs) for k in range(len(tr) - time_depth)]
        if not self.index:
            raise ValueError("trajectories are too short to form input/target pairs")
        self.field_types = list(self.trajs[0].field_types)
        classes = []
        for tr in self.trajs:
            if pde_class is not None:
                classes.append(pde_class)
            else:
                pde = tr.meta.get("pde")
                classes.append(PDE_KINDS.index(pde) if pde in PDE_KINDS else -1)
        self.classes = np.asarray(classes)

    @property
    def channel_types(self):
        return [fields.FIELD_TYPES.index(f) if f in fields.FIELD_TYPES else 0 for f in self.field_types]

    def __len__(self):
        return len(self.index)

    def batch(self, ids, dtype=np.float64):
        u_in, u_out, cls = [], [], []
        for j in ids:
            i, k = self.index[j]
            d = self.data[i]
            u_in.append(d[k:k + self.time_depth])
            u_out.append(d[k + self.time_depth:k + self.time_depth + 1])
            cls.append(self.classes[i])
        return np.stack(u_in).astype(dtype), np.stack(u_out).astype(dtype), np.asarray(cls)


# -- training loop -----------------------------------------------------------------------------

class Trainer:
    def __init__(self, model: PDETransformer, cfg: TrainConfig, metrics_path=None):
        cfg.validate()
        if (cfg.objective == "flow_matching") != model.cfg.diffusion:
            raise ValueError(f"objective {cfg.objective!r} does not match a model with diffusion={model.cfg.diffusion}")
        self.model = model
        self.cfg = cfg
        self.params = model.trainable_parameters()
        self.opt = AdamW(self.params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
        self.ema = EmaWeights(self.params, cfg.ema_decay)
        self.clip_state = EmaClipState(literal=cfg.clip_literal)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.history = []
        self._order = None  # permutation of the epoch in progress, kept so resume is exact
        self._pos = 0
        self.step_hooks = []  # called as hook(trainer, record) after every optimizer step
        self.metrics_path = Path(metrics_path) if metrics_path else None

    def _loss(self, u_in, u_out, cond, t=None, eps=None):
        if self.cfg.objective == "mse":
            return loss_supervised(self.model, u_in, cond, u_out)
        return loss_flow_matching(self.model, u_in, cond, u_out, self.cfg.sigma_min, t=t, eps=eps)

    def train_step(self, u_in, u_out, classes, channel_types=None, periodic=(True, True)):
        """One optimizer step on an effective batch, split into micro-batches."""
        cfg = self.cfg
        b = len(u_in)
        if b % cfg.micro_batch:
            raise ValueError(f"batch of {b} is not a multiple of micro_batch={cfg.micro_batch}")
        model = self.model
        null = model.cfg.num_pde_classes
        # every random draw happens once for the whole batch so that micro-batching
        # cannot change the result
        ids = np.where(np.asarray(classes) < 0, null, classes)
        ids = np.where(self.rng.random(b) < model.cfg.class_dropout_prob, null, ids)
        t = eps = None
        if cfg.objective == "flow_matching":
            t = self.rng.random(b)
            eps = self.rng.standard_normal(u_out.shape)
        for p in self.params:
            p.zero_grad()
        n_micro = b // cfg.micro_batch
        total = 0.0
        for j in range(n_micro):
            sl = slice(j * cfg.micro_batch, (j + 1) * cfg.micro_batch)
            cond = Conditioning(pde_class=ids[sl], channel_types=channel_types, periodic=periodic)
            loss = self._loss(u_in[sl], u_out[sl], cond,
                              None if t is None else t[sl], None if eps is None else eps[sl])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at step {self.step}, micro-batch {j}")
            (loss * (1.0 / n_micro)).backward()
            total += float(loss.data) / n_micro
        grads = [p.grad for p in self.params]
        if cfg.clip == "ema":
            _, norm, clipped = ema_grad_clip(self.clip_state, grads)
        else:
            norm, clipped = global_norm(grads), False
        self.opt.step(grads)
        self.ema.update()
        self.step += 1
        rec = {"step": self.step, "epoch": self.epoch, "loss": total, "grad_norm": norm, "clipped": bool(clipped)}
        self.history.append(rec)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        for hook in self.step_hooks:
            hook(self, rec)
        return rec

    def train_epoch(self, data: PairDataset, periodic=(True, True)):
        """One pass over ``data`` in a seeded order; a trailing partial batch is dropped."""
        eb = self.cfg.effective_batch
        if len(data) < eb:
            raise ValueError(f"dataset has {len(data)} pairs, fewer than one effective batch ({eb})")
        if self._order is None or len(self._order) != len(data):
            self._order, self._pos = self.rng.permutation(len(data)), 0
        types = data.channel_types if self.model.cfg.mode == "SC" else None
        self.model.eval()  # label dropout is drawn by the trainer
        recs = []
        while self._pos + eb <= len(data):
            if self.cfg.max_steps and self.step >= self.cfg.max_steps:
                return self._summary(recs)
            ids = self._order[self._pos:self._pos + eb]
            self._pos += eb
            u_in, u_out, cls = data.batch(ids, self.model.dtype)
            recs.append(self.train_step(u_in, u_out, cls, types, periodic))
        self._order, self._pos = None, 0
        self.epoch += 1
        return self._summary(recs)

    def _summary(self, recs):
        losses = [r["loss"] for r in recs]
        return {"epoch": self.epoch, "steps": len(recs), "loss": losses,
                "mean_loss": float(np.mean(losses)) if losses else float("nan")}

    def fit(self, data: PairDataset, periodic=(True, True), callback=None):
        while True:
            if self.cfg.max_steps and self.step >= self.cfg.max_steps:
                break
            if not self.cfg.max_steps and self.epoch >= self.cfg.epochs:
                break
            summary = self.train_epoch(data, periodic)
            if callback is not None:
                callback(self, summary)
        return self.history

    # -- checkpoints ---------------------------------------------------------------------
    def save(self, path, extra=None):
        names = [n for n, p in self.model.named_parameters()]
        trainable = [n for n, p in self.model.named_parameters() if p.requires_grad]
        manifest = {
            "kind": "checkpoint",
            "version": fields.FORMAT_VERSION,
            "model_config": self.model.cfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "param_names": names,
            "trainable": trainable,
            "step": self.step,
            "epoch": self.epoch,
            "opt_t": self.opt.t,
            "clip_state": self.clip_state.to_dict(),
            "rng_state": self.rng.bit_generator.state,
            "epoch_order": None if self._order is None else self._order.tolist(),
            "epoch_pos": self._pos,
            "model_rng_state": self.model._rng.bit_generator.state,
            "extra": extra or {},
        }
        blocks = [p.data for _, p in self.model.named_parameters()]
        blocks += self.opt.m + self.opt.v + self.ema.shadow
        fields.write_container(path, fields.CKPT_MAGIC, manifest, blocks)

    def load(self, path):
        manifest, blocks = read_checkpoint(path)
        check_compatible(manifest, self.model.cfg)
        names = [n for n, _ in self.model.named_parameters()]
        if manifest["param_names"] != names:
            raise ValueError("checkpoint parameter names do not match the model")
        n, k = len(names), len(self.params)
        self.model.load_state_dict(dict(zip(names, blocks[:n])))
        self.opt.m = [b.copy() for b in blocks[n:n + k]]
        self.opt.v = [b.copy() for b in blocks[n + k:n + 2 * k]]
        self.ema.shadow = [b.copy() for b in blocks[n + 2 * k:n + 3 * k]]
        self.opt.t = manifest["opt_t"]
        self.step = manifest["step"]
        self.epoch = manifest["epoch"]
        cs = manifest["clip_state"]
        self.clip_state = EmaClipState(**cs)
        self.rng.bit_generator.state = manifest["rng_state"]
        order = manifest.get("epoch_order")
        self._order = None if order is None else np.asarray(order)
        self._pos = manifest.get("epoch_pos", 0)
        self.model._rng.bit_generator.state = manifest["model_rng_state"]
        return manifest


def read_checkpoint(path):
    manifest, blocks = fields.read_container(path, fields.CKPT_MAGIC)
    if manifest.get("kind") != "checkpoint":
        raise fields.ManifestError(f"{path}: not a checkpoint manifest")
    return manifest, blocks


def check_compatible(manifest, cfg):
    """Raise listing every model-config field that differs from the checkpoint."""
    saved = manifest["model_config"]
    now = cfg.to_dict()
    diff = {k: (saved.get(k), now.get(k)) for k in sorted(set(saved) | set(now))
            if k != "name" and saved.get(k) != now.get(k)}
    if diff:
        lines = ", ".join(f"{k}: checkpoint={a!r} config={b!r}" for k, (a, b) in diff.items())
        raise ValueError(f"checkpoint/config mismatch: {lines}")


def load_model(path, use_ema=True):
    """Rebuild the model stored in a checkpoint, with EMA weights by default."""
    from .model import ModelConfig, build

    manifest, blocks = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = build(cfg, 0)
    names = manifest["param_names"]
    n = len(names)
    model.load_state_dict(dict(zip(names, blocks[:n])))
    if use_ema:
        params = dict(model.named_parameters())
        trainable = manifest["trainable"]
        k = len(trainable)
        for name, arr in zip(trainable, blocks[n + 2 * k:n + 3 * k]):
            params[name].data = arr.astype(params[name].dtype)
    return model, manifest
