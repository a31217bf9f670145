"""Train the TEST model on the diffusion family and score its rollouts.

Generates 60 trajectories at 64x64, trains a supervised next-step model,
then rolls out every held-out trajectory from its first frame. The table
compares the model against two baselines that need no training: repeating
the initial frame (persistence) and predicting zero.
"""
import argparse
import time

import numpy as np

from pdet import fields, spectral
from pdet import inference as I
from pdet import model as M
from pdet import training as TR


def persistence_scores(trajs, horizons):
    out = {}
    for h in horizons:
        out[h] = float(np.mean([I.nrmse(tr.data[:1], tr.data[h:h + 1]) for tr in trajs]))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--traj", type=int, default=60)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    horizons = (1, 5, 10, 20)

    t0 = time.perf_counter()
    trajs = spectral.generate_dataset("diff", args.traj, num_steps=30, resolution=64, seed=args.seed)
    sp = fields.split(trajs, seed=args.seed)
    train = [trajs[i] for i in sp.train]
    test = [trajs[i] for i in sp.test]
    stats = fields.compute_stats(train)
    print(f"data: {len(train)} train / {len(test)} test trajectories ({time.perf_counter() - t0:.0f} s)")

    model = M.build(M.preset("TEST"), args.seed)
    cfg = TR.TrainConfig(lr=args.lr, micro_batch=args.batch, effective_batch=args.batch,
                         max_steps=args.steps, seed=args.seed)
    trainer = TR.Trainer(model, cfg)

    def report(rec):
        if rec["step"] % 50 == 0:
            print(f"step {rec['step']:5d}  loss {rec['loss']:.5f}  |g| {rec['grad_norm']:.3f}")

    trainer.step_hooks.append(lambda tr, rec: report(rec))
    t0 = time.perf_counter()
    trainer.fit(TR.PairDataset(train, stats=stats))
    print(f"trained {trainer.step} steps in {time.perf_counter() - t0:.0f} s")

    scores, n, truncated = I.evaluate_trajectories(model, test, horizons, stats)
    base = persistence_scores(test, horizons)
    print(f"\n{'h':>4s} {'model':>8s} {'persist':>8s} {'zero':>8s}")
    for h in horizons:
        print(f"{h:4d} {scores[h]:8.4f} {base[h]:8.4f} {1.0:8.4f}")
    if truncated:
        print(f"{truncated} rollouts went non-finite")


if __name__ == "__main__":
    main()
