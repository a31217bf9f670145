"""Plot nRMSE against Euler sampler steps from ``sampler_steps.csv``."""
import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv", nargs="?", default="sampler_steps.csv")
    ap.add_argument("--out", default="sampler_steps.png")
    args = ap.parse_args()

    with open(args.csv) as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["sampler_steps"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("nrmse_1", "nrmse_5", "nrmse_10"):
        ax.plot(steps, [float(r[key]) for r in rows], marker="o", label=key.replace("nrmse_", "h = "))
    ax.set_xscale("log")
    ax.set_xlabel("Euler steps per sample")
    ax.set_ylabel("nRMSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print("saved", args.out)


if __name__ == "__main__":
    main()
