"""How many Euler steps does a flow-matching surrogate need?

Trains a small diffusion-mode model with the flow-matching objective on the
diffusion family, then scores one-step and rollout nRMSE for a range of
sampler step counts. Results go to ``sampler_steps.csv``; plot them with
``plot_sampler_steps.py``.
"""
import argparse
import csv
import time

from pdet import fields, spectral
from pdet import inference as I
from pdet import model as M
from pdet import training as TR

STEP_COUNTS = (1, 2, 4, 8, 16, 25, 50)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--traj", type=int, default=30)
    ap.add_argument("--res", type=int, default=32)
    ap.add_argument("--train-steps", type=int, default=400)
    ap.add_argument("--out", default="sampler_steps.csv")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    trajs = spectral.generate_dataset("diff", args.traj, num_steps=12, resolution=args.res, seed=args.seed)
    sp = fields.split(trajs, seed=args.seed)
    train = [trajs[i] for i in sp.train]
    test = [trajs[i] for i in sp.test]
    stats = fields.compute_stats(train)

    model = M.build(M.preset("TEST", diffusion=True), args.seed)
    cfg = TR.TrainConfig(lr=3e-3, micro_batch=8, effective_batch=8, max_steps=args.train_steps,
                         objective="flow_matching", seed=args.seed)
    t0 = time.perf_counter()
    TR.Trainer(model, cfg).fit(TR.PairDataset(train, stats=stats))
    print(f"trained in {time.perf_counter() - t0:.0f} s")

    rows = []
    for n in STEP_COUNTS:
        t0 = time.perf_counter()
        scores, _, _ = I.evaluate_trajectories(model, test, (1, 5, 10), stats, sampler_steps=n, seed=1)
        sec = time.perf_counter() - t0
        rows.append({"sampler_steps": n, "nrmse_1": scores[1], "nrmse_5": scores[5],
                     "nrmse_10": scores[10], "seconds": sec})
        print(f"{n:3d} steps  nRMSE_1 {scores[1]:.4f}  nRMSE_10 {scores[10]:.4f}  ({sec:.1f} s)")

    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print("wrote", args.out)


if __name__ == "__main__":
    main()
