"""A quick look at every PDE family the solver knows.

One short trajectory per kind at 64x64, with a few summary numbers per stored
field. Coarser grids under-resolve the chaotic kinds (ks blows up at 32x32 on
its larger domains) and are reported instead of aborting the tour. Pass ``--save DIR`` to also write each trajectory as a dataset file.
"""
import argparse
import time
from pathlib import Path

import numpy as np

from pdet import fields, spectral


def summarize(traj):
    first, last = traj.data[0], traj.data[-1]
    rows = []
    for f, name in enumerate(traj.field_types):
        rows.append((name, first[f].std(), last[f].std(), last[f].mean(), np.abs(last[f]).max()))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save")
    args = ap.parse_args()

    print(f"{'kind':12s} {'field':16s} {'std0':>9s} {'stdN':>9s} {'meanN':>9s} {'maxN':>9s} {'sec':>6s}")
    for kind in spectral.PDE_KINDS:
        spec = spectral.sample_spec(kind, args.seed, resolution=args.res, num_steps=args.steps)
        t0 = time.perf_counter()
        try:
            traj = spectral.simulate(spec)
        except spectral.SimulationBlowUp as err:
            print(f"{kind:12s} blew up: {err}")
            continue
        dt = time.perf_counter() - t0
        for name, s0, s1, m1, mx in summarize(traj):
            print(f"{kind:12s} {name:16s} {s0:9.4f} {s1:9.4f} {m1:9.4f} {mx:9.4f} {dt:6.1f}")
        if args.save:
            out = Path(args.save)
            out.mkdir(parents=True, exist_ok=True)
            fields.write_dataset([traj], out / f"{kind}.pdet")


if __name__ == "__main__":
    main()
