"""Autoregressive rollout, Euler sampling of flow-matching models and nRMSE reports."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fields
from .model import Conditioning
from .spectral import PDE_KINDS
from .tensor import Tensor

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("dataset", "horizon", "nRMSE", "n_trajectories", "truncated_count")


def nrmse_items(pred, ref):
    """Per-item ``sqrt(MSE(pred, ref) / MSE(0, ref))`` over the leading axis."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match reference {ref.shape}")
    axes = tuple(range(1, ref.ndim))
    denom = np.mean(ref ** 2, axis=axes)
    zero = np.flatnonzero(denom == 0)
    if zero.size:
        raise ValueError(f"reference item {int(zero[0])} is identically zero; nRMSE is undefined")
    return np.sqrt(np.mean((pred - ref) ** 2, axis=axes) / denom)


def nrmse(pred, ref):
    """Mean over items of the normalized RMSE."""
    return float(np.mean(nrmse_items(pred, ref)))


# -- sampling ---------------------------------------------------------------------------

def euler_integrate(velocity, x0, n_steps):
    """Explicit Euler from t=0 to t=1: ``x += dt * velocity(x, t)``."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    x = np.array(x0, dtype=np.float64 if np.asarray(x0).dtype.kind != "f" else np.asarray(x0).dtype)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        x = x + dt * np.asarray(velocity(x, k * dt))
    return x


def _as_array(y):
    return y.data if isinstance(y, Tensor) else np.asarray(y)


def euler_sample(model, u_in, cond=None, n_steps=25, rng=None, x0=None):
    """Draw one sample of the next snapshot from a flow-matching model.

    ``u_in`` is ``[B, T, C, H, W]``; returns ``[B, 1, C, H, W]``.
    """
    cond = cond or Conditioning()
    u_in = np.asarray(u_in, dtype=model.dtype)
    b, _, c, h, w = u_in.shape
    if x0 is None:
        rng = np.random.default_rng(0) if rng is None else rng
        x0 = rng.standard_normal((b, 1, c, h, w))
    x0 = np.asarray(x0, dtype=model.dtype)

    def velocity(x, t):
        step = Conditioning(cond.pde_class, cond.channel_types, np.full(b, t), cond.periodic)
        return _as_array(model(u_in, step, x_t=x[:, 0].astype(model.dtype)))

    return euler_integrate(velocity, x0, n_steps)


def make_step_fn(model, cond=None, sampler_steps=25, rng=None):
    """Wrap a model as ``u_in -> next snapshot``; diffusion models draw one sample per call."""
    cond = cond or Conditioning()
    rng = np.random.default_rng(0) if rng is None else rng
    was_training = model.training
    model.eval()
    if was_training:
        log.info("rollout switches the model to eval mode")
    if model.cfg.diffusion:
        return lambda u: euler_sample(model, u, cond, sampler_steps, rng)
    return lambda u: _as_array(model(np.asarray(u, dtype=model.dtype), cond))


# -- rollout ---------------------------------------------------------------------------------

@dataclass
class RolloutResult:
    predictions: np.ndarray             # [B, steps, C, H, W]; NaN after truncation
    nrmse_items: np.ndarray = None      # [B, steps]; 1.0 after truncation
    truncated_at: np.ndarray = field(default=None)  # [B]; first bad step or -1

    @property
    def steps(self):
        return self.predictions.shape[1]

    @property
    def nrmse_series(self):
        return None if self.nrmse_items is None else self.nrmse_items.mean(axis=0)

    def nrmse_at(self, horizon):
        if self.nrmse_items is None:
            raise ValueError("rollout ran without a reference")
        if not 1 <= horizon <= self.steps:
            raise ValueError(f"horizon {horizon} outside rollout of {self.steps} steps")
        return float(self.nrmse_series[horizon - 1])

    @property
    def aggregates(self):
        return {h: self.nrmse_at(h) for h in (1, 10, 20) if h <= self.steps}

    @property
    def truncated_count(self):
        return int(np.sum(self.truncated_at >= 0))


def rollout(step_fn, initial, steps, reference=None, transform=None):
    """Feed each prediction back as input for ``steps`` steps.

    ``step_fn`` maps ``[B, T, C, H, W]`` to ``[B, 1, C, H, W]`` (see ``make_step_fn``);
    ``initial`` holds the ``T`` starting frames (a ``Snapshot`` or unbatched array
    also work).  ``reference`` ``[B, steps, C, H, W]`` enables nRMSE scoring, after
    ``transform`` is applied to the predictions (e.g. undoing normalization).
    Items whose state turns non-finite are truncated and score 1.0 afterwards.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if isinstance(initial, fields.Snapshot):
        initial = initial.values[None, None]
    u = np.asarray(initial)
    if u.ndim == 4:
        u = u[None]
        if reference is not None and np.ndim(reference) == 4:
            reference = np.asarray(reference)[None]
    b = u.shape[0]
    alive = np.ones(b, dtype=bool)
    truncated_at = np.full(b, -1)
    preds = np.full((b, steps) + u.shape[2:], np.nan)
    for k in range(steps):
        nxt = np.asarray(step_fn(u))
        bad = alive & ~np.all(np.isfinite(nxt.reshape(b, -1)), axis=1)
        if bad.any():
            log.warning("rollout truncated at step %d for items %s", k + 1, np.flatnonzero(bad).tolist())
            truncated_at[bad] = k
            alive &= ~bad
        nxt = np.where(alive[:, None, None, None, None], nxt, 0.0)
        preds[alive, k] = nxt[alive, 0]
        u = np.concatenate([u[:, 1:], nxt.astype(u.dtype)], axis=1)
        if not alive.any():
            break
    scores = None
    if reference is not None:
        ref = np.asarray(reference)[:, :steps]
        if ref.shape != preds.shape:
            raise ValueError(f"reference shape {ref.shape} does not match rollout {preds.shape}")
        shown = preds if transform is None else transform(preds)
        scores = np.ones((b, steps))
        for k in range(steps):
            ok = np.isfinite(shown[:, k].reshape(b, -1)).all(axis=1)
            if ok.any():
                scores[ok, k] = nrmse_items(shown[ok, k], ref[ok, k])
    return RolloutResult(preds, scores, truncated_at)


# -- evaluation suite ----------------------------------------------------------------------------

def conditioning_for(traj: fields.Trajectory, mode="MC"):
    pde = traj.meta.get("pde")
    pde_class = PDE_KINDS.index(pde) if pde in PDE_KINDS else None
    types = None
    if mode == "SC":
        types = [fields.FIELD_TYPES.index(f) if f in fields.FIELD_TYPES else 0 for f in traj.field_types]
    periodic = tuple(traj.meta.get("periodic", (True, True)))
    return Conditioning(pde_class=pde_class, channel_types=types, periodic=periodic)


def evaluate_trajectories(model, trajs, horizons=(1, 10, 20), stats=None, sampler_steps=25, seed=0,
                          batch_size=8):
    """Roll out every trajectory from its first frames; nRMSE is scored in physical units."""
    depth = model.cfg.time_depth
    max_h = max(horizons)
    usable = [tr for tr in trajs if len(tr) > depth]
    steps = min(max_h, min(len(tr) - depth for tr in usable)) if usable else 0
    if steps < max_h:
        log.warning("trajectories only allow %d rollout steps; longer horizons are skipped", steps)
    items, truncated = [], 0
    rng = np.random.default_rng(seed)
    transform = None
    if stats is not None:
        transform = lambda x: fields.denormalize_array(x, stats)  # noqa: E731
    for lo in range(0, len(usable), batch_size):
        chunk = usable[lo:lo + batch_size]
        cond = conditioning_for(chunk[0], model.cfg.mode)
        first = np.stack([tr.data[:depth] for tr in chunk]).astype(np.float64)
        if stats is not None:
            first = fields.normalize_array(first, stats)
        ref = np.stack([tr.data[depth:depth + steps] for tr in chunk]).astype(np.float64)
        step_fn = make_step_fn(model, cond, sampler_steps, rng)
        res = rollout(step_fn, first.astype(model.dtype), steps, ref, transform)
        items.append(res.nrmse_items)
        truncated += res.truncated_count
    per_item = np.concatenate(items) if items else np.zeros((0, 0))
    return {h: float(per_item[:, h - 1].mean()) for h in horizons if h <= steps}, len(usable), truncated


def evaluate_suite(model, datasets, horizons=(1, 10, 20), out_dir=None, stats=None, sampler_steps=25,
                   seed=0):
    """nRMSE at each horizon for every dataset; writes ``report.json`` and ``report.csv``.

    ``datasets`` maps a name to a list of trajectories or a ``.pdet`` path.  Missing
    files are skipped with a warning and listed under ``skipped``.
    """
    rows, skipped = [], []
    for name, src in datasets.items():
        if isinstance(src, (str, Path)):
            if not Path(src).exists():
                log.warning("dataset %s not found at %s; skipping", name, src)
                skipped.append({"dataset": name, "reason": f"missing file {src}"})
                continue
            src = fields.read_dataset(src)
        scores, n, truncated = evaluate_trajectories(model, src, horizons, stats, sampler_steps, seed)
        for h in horizons:
            if h not in scores:
                skipped.append({"dataset": name, "reason": f"horizon {h} exceeds trajectory length"})
                continue
            rows.append({"dataset": name, "horizon": h, "nRMSE": scores[h], "n_trajectories": n,
                         "truncated_count": truncated})
    report = {"columns": list(REPORT_COLUMNS), "rows": rows, "skipped": skipped}
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in report["rows"]:
            writer.writerow({k: row[k] for k in REPORT_COLUMNS})
    return out / "report.json", out / "report.csv"
