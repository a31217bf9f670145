import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdet import model as M
from pdet import training as TR
from pdet.fields import Trajectory
from pdet.tensor import Parameter, Tensor

from .gradcheck import check_gradients
from .test_model import tiny, wake


def reference_clip(norms, beta1=0.99, beta2=0.999, alpha=2.0, kappa=1.1):
    """Scalar EMA clipping written straight from the update rules, one norm at a time."""
    g1 = g2 = 0.0
    out = []
    for i, g in enumerate(norms):
        if i != 0 and g > alpha * g2 / (1 - beta2 ** i):
            g = kappa * g1 / (1 - beta1 ** i)
        g1 = beta1 * g1 + (1 - beta1) * g
        g2 = beta2 * g2 + (1 - beta2) * g
        out.append(g)
    return np.array(out)


def run_clip(norms, **kw):
    state = TR.EmaClipState(**kw)
    out, flags = [], []
    for n in norms:
        g = [np.array([n, 0.0])]
        _, _, clipped = TR.ema_grad_clip(state, g)
        out.append(np.linalg.norm(g[0]))
        flags.append(clipped)
    return np.array(out), np.array(flags), state


# -- flow matching ----------------------------------------------------------------------

def test_flow_sample_endpoints():
    rng = np.random.default_rng(0)
    u, eps = rng.standard_normal((3, 1, 1, 8, 8)), rng.standard_normal((3, 1, 1, 8, 8))
    assert np.array_equal(TR.flow_sample(u, np.zeros(3), eps), eps)
    np.testing.assert_array_equal(TR.flow_sample(u, np.ones(3), eps, 1e-4), u + 1e-4 * eps)
    half = TR.flow_sample(np.zeros(1), 0.5, np.ones(1), 1e-4)
    assert abs(half[0] - 0.50005) < 1e-15


def test_flow_target_zero_model_scores_unit_mse():
    m = M.build(tiny(diffusion=True), 0)
    u_out = np.zeros((4, 1, 1, 32, 32))
    loss = TR.loss_flow_matching(m, np.zeros_like(u_out), M.Conditioning(), u_out, sigma_min=0.0,
                                 rng=np.random.default_rng(0))
    assert abs(float(loss.data) - 1.0) < 0.05


def test_flow_matching_toy_recovers_least_squares():
    # v(x_t, t) = w . [1, x_t, t] regressed onto the velocity of a constant target
    rng = np.random.default_rng(0)
    c, n = 0.7, 4000
    t, eps = rng.random(n), rng.standard_normal(n)
    xt = TR.flow_sample(np.full(n, c), t, eps, 1e-4)
    feats = np.stack([np.ones(n), xt, t], axis=1)
    target = TR.flow_target(np.full(n, c), eps, 1e-4)
    w_ls = np.linalg.lstsq(feats, target, rcond=None)[0]

    w = Parameter(np.zeros((3, 1)))
    opt = TR.AdamW([w], lr=0.05)
    for _ in range(3000):
        w.zero_grad()
        TR.mse(Tensor(feats) @ w, target[:, None]).backward()
        opt.step()
    assert np.max(np.abs(w.data[:, 0] - w_ls)) < 1e-3


# -- supervised loss ----------------------------------------------------------------------

class Echo:
    dtype = np.float64

    def __call__(self, u_in, cond, x_t=None):
        return Tensor(np.asarray(u_in))


def test_supervised_loss_values():
    u = np.random.default_rng(0).standard_normal((2, 1, 1, 16, 16))
    assert float(TR.loss_supervised(Echo(), u, None, u).data) == 0.0
    m = M.build(tiny(), 0)
    u_out = np.random.default_rng(1).standard_normal((2, 1, 1, 32, 32))
    loss = TR.loss_supervised(m, u_out, M.Conditioning(), u_out)
    assert abs(float(loss.data) - np.mean(u_out ** 2)) < 1e-12


def test_supervised_loss_gradient():
    m = wake(M.build(tiny(), 0), scale=0.1)
    rng = np.random.default_rng(2)
    u_in, u_out = rng.standard_normal((1, 1, 1, 32, 32)), rng.standard_normal((1, 1, 1, 32, 32))
    params = [p for n, p in m.named_parameters() if n.endswith(("final.linear.weight", "embed.weight"))]
    assert params
    err = check_gradients(lambda: TR.loss_supervised(m, u_in, M.Conditioning(), u_out), params,
                          h=1e-6, entries=5)
    assert err < 1e-3


def test_non_finite_loss_raises():
    u = np.full((1, 1, 1, 4, 4), np.nan)
    with pytest.raises(FloatingPointError):
        TR.loss_supervised(Echo(), u, None, np.zeros_like(u))


# -- EMA gradient clipping ------------------------------------------------------------------

def test_clip_matches_scalar_reference_on_long_stream():
    rng = np.random.default_rng(0)
    norms = np.abs(rng.lognormal(0.0, 0.6, 1000))
    norms[rng.choice(1000, 30, replace=False)] *= 50.0
    got, flags, state = run_clip(norms)
    ref = reference_clip(norms)
    assert np.max(np.abs(got - ref)) < 1e-10
    assert flags.sum() > 0 and state.i == 1000


def test_spike_is_clipped():
    norms = [1.0] * 50 + [100.0]
    got, flags, _ = run_clip(norms)
    assert flags[-1] and not flags[:-1].any()
    assert abs(got[-1] - reference_clip(norms)[-1]) < 1e-12
    assert abs(got[-1] - 1.1) < 1e-9  # bias-corrected EMA of a constant stream is exact


def test_first_step_never_clips():
    got, flags, _ = run_clip([1e9])
    assert not flags[0] and got[0] == 1e9


def test_constant_stream_never_clips():
    _, flags, _ = run_clip([3.0] * 500)
    assert not flags.any()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=60))
def test_clip_never_raises_norm_beyond_bound(norms):
    state = TR.EmaClipState()
    for n in norms:
        g1_hat = state.g1 / (1 - state.beta1 ** state.i) if state.i else 0.0
        g = [np.array([n])]
        _, _, clipped = TR.ema_grad_clip(state, g)
        out = abs(g[0][0])
        assert out <= max(n, state.kappa * g1_hat) * (1 + 1e-12)
        if not clipped:
            assert out == n


def test_literal_variant_differs():
    norms = [1.0] * 20 + [100.0]
    state = TR.EmaClipState(literal=True)
    for n in norms[:-1]:
        TR.ema_clip_norm(state, n)
    g1_hat = state.g1 / (1 - state.beta1 ** state.i)
    scale, clipped = TR.ema_clip_norm(state, 100.0)
    assert clipped and abs(scale - 1.1 * g1_hat) < 1e-12
    # the literal rule updates g2 with beta1, so it tracks g1 exactly
    assert state.g2 == state.g1


# -- optimizer, EMA weights ---------------------------------------------------------------------

def test_adamw_matches_scalar_recurrence():
    p = Parameter(np.array([1.0, -2.0]))
    opt = TR.AdamW([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.5)
    x, m, v = np.array([1.0, -2.0]), 0.0, 0.0
    for k in range(1, 6):
        g = np.array([0.3 * k, -0.1])
        opt.step([g.copy()])
        x = x * (1 - 0.1 * 0.5)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    np.testing.assert_allclose(p.data, x, atol=1e-14)


def test_config_values_reach_optimizer():
    cfg = TR.TrainConfig(micro_batch=2, effective_batch=8)
    assert (cfg.lr, cfg.weight_decay, cfg.ema_decay, cfg.sigma_min) == (4.0e-5, 1e-15, 0.999, 1e-4)
    trainer = TR.Trainer(M.build(tiny(), 0), cfg)
    assert trainer.opt.lr == 4.0e-5 and trainer.opt.weight_decay == 1e-15
    assert trainer.opt.betas == (0.9, 0.999) and trainer.ema.decay == 0.999
    assert cfg.accumulation_steps == 4


def test_config_errors_listed_together():
    with pytest.raises(ValueError) as exc:
        TR.TrainConfig(lr=-1, effective_batch=10, micro_batch=4, objective="l1").validate()
    msg = str(exc.value)
    assert "lr" in msg and "multiple" in msg and "objective" in msg


def test_objective_must_match_model():
    with pytest.raises(ValueError):
        TR.Trainer(M.build(tiny(), 0), TR.TrainConfig(objective="flow_matching"))


def test_ema_weights_closed_form():
    p = Parameter(np.array([0.0]))
    ema = TR.EmaWeights([p], decay=0.9)
    snaps = [0.0]
    for k in range(1, 31):
        p.data = np.array([math.sin(k)])
        snaps.append(p.data[0])
        ema.update()
    n = len(snaps) - 1
    closed = 0.9 ** n * snaps[0] + sum(0.1 * 0.9 ** (n - k) * snaps[k] for k in range(1, n + 1))
    assert abs(ema.shadow[0][0] - closed) < 1e-7


# -- training loop ------------------------------------------------------------------------------

def diffusion_trajs(n=4, steps=6, res=32, seed=0):
    rng = np.random.default_rng(seed)
    k = 2 * np.pi * np.fft.fftfreq(res, 1.0 / res)
    decay = np.exp(-0.01 * (k[:, None] ** 2 + k[None, :] ** 2) * 0.01)
    out = []
    for _ in range(n):
        u = np.real(np.fft.ifft2(np.fft.fft2(rng.standard_normal((res, res))) * decay ** 10))
        frames = [u]
        for _ in range(steps - 1):
            frames.append(np.real(np.fft.ifft2(np.fft.fft2(frames[-1]) * decay)))
        data = np.stack(frames)[:, None] / np.abs(u).max()
        out.append(Trajectory(data, ["density"], 0.01, meta={"pde": "diff"}))
    return out


def make_trainer(micro, eff=8, objective="mse", seed=0, **kw):
    cfg = tiny(diffusion=objective == "flow_matching")
    m = wake(M.build(cfg, 0), scale=0.05)
    return TR.Trainer(m, TR.TrainConfig(lr=1e-3, micro_batch=micro, effective_batch=eff, clip="none",
                                        objective=objective, seed=seed, **kw))


@pytest.mark.parametrize("objective", ["mse", "flow_matching"])
def test_accumulation_matches_full_batch(objective):
    data = TR.PairDataset(diffusion_trajs())
    u_in, u_out, cls = data.batch(np.arange(8))
    a, b = make_trainer(2, objective=objective), make_trainer(8, objective=objective)
    ra = a.train_step(u_in, u_out, cls)
    rb = b.train_step(u_in, u_out, cls)
    assert abs(ra["loss"] - rb["loss"]) < 1e-10
    worst = max(np.max(np.abs(p.data - q.data)) for p, q in zip(a.params, b.params))
    assert worst < 1e-6


def test_training_is_deterministic():
    data = TR.PairDataset(diffusion_trajs())

    def run():
        tr = make_trainer(4, clip_literal=False)
        tr.cfg.clip = "ema"
        tr.cfg.max_steps = 4
        tr.fit(data)
        return [r["loss"] for r in tr.history]

    assert run() == run()


def test_loss_decreases_on_diffusion_toy():
    data = TR.PairDataset(diffusion_trajs(n=40, steps=6, seed=1))  # 200 pairs
    m = M.build(tiny(), 0)
    tr = TR.Trainer(m, TR.TrainConfig(lr=2e-3, micro_batch=8, effective_batch=8, max_steps=50, seed=0))
    tr.fit(data)
    loss = np.array([r["loss"] for r in tr.history])
    smooth = np.convolve(loss, np.ones(10) / 10, mode="valid")
    assert len(loss) == 50
    assert np.all(np.diff(smooth) < 0)


def test_metrics_jsonl(tmp_path):
    data = TR.PairDataset(diffusion_trajs())
    tr = make_trainer(8)
    tr.metrics_path = tmp_path / "metrics.jsonl"
    tr.cfg.max_steps = 2
    tr.fit(data)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) >= {"step", "loss", "grad_norm", "clipped"}


def test_checkpoint_resume_is_exact(tmp_path):
    data = TR.PairDataset(diffusion_trajs())

    full = make_trainer(4)
    full.cfg.clip = "ema"
    full.cfg.max_steps = 6
    full.fit(data)

    first = make_trainer(4)
    first.cfg.clip = "ema"
    first.cfg.max_steps = 3
    first.fit(data)
    first.save(tmp_path / "c.pdet-ckpt")

    resumed = make_trainer(4)
    resumed.cfg.clip = "ema"
    resumed.cfg.max_steps = 6
    resumed.load(tmp_path / "c.pdet-ckpt")
    resumed.fit(data)
    assert [r["loss"] for r in full.history[3:]] == [r["loss"] for r in resumed.history]
    for p, q in zip(full.params, resumed.params):
        assert np.array_equal(p.data, q.data)

    model, manifest = TR.load_model(tmp_path / "c.pdet-ckpt")
    assert manifest["step"] == 3
    loaded = dict(model.named_parameters())
    names = [n for n, p in first.model.named_parameters() if p.requires_grad]
    for n, shadow in zip(names, first.ema.shadow):
        assert np.array_equal(loaded[n].data, shadow)


def test_checkpoint_config_mismatch_lists_fields(tmp_path):
    tr = make_trainer(8)
    tr.save(tmp_path / "c.pdet-ckpt")
    other = TR.Trainer(M.build(tiny(d=32, num_heads=4), 0), TR.TrainConfig(micro_batch=8, effective_batch=8))
    with pytest.raises(ValueError, match="d: checkpoint=16 config=32"):
        other.load(tmp_path / "c.pdet-ckpt")


def test_pair_dataset_shapes():
    data = TR.PairDataset(diffusion_trajs(n=2, steps=5))
    assert len(data) == 8
    u_in, u_out, cls = data.batch([0, 7])
    assert u_in.shape == (2, 1, 1, 32, 32) and u_out.shape == (2, 1, 1, 32, 32)
    assert list(cls) == [0, 0]
