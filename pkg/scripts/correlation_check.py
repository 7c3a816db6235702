"""Compare the Monte-Carlo spatial correlation with both closed forms.

Prints the worst deviation overall and restricted to pairs that share a row,
for a few spacings.
"""

import argparse

import numpy as np

from dedt.channel_sim import RisGeometry, build_correlation, monte_carlo_correlation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N1", type=int, default=4)
    ap.add_argument("--N2", type=int, default=4)
    ap.add_argument("--samples", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for ratio in (0.5, 0.25, 0.125):
        g = RisGeometry(args.N1, args.N2, ratio * 0.1, ratio * 0.1, 0.1)
        re, im = monte_carlo_correlation(g, args.samples, args.seed)
        n1, _ = g.coords(np.arange(g.N))
        same_row = n1[:, None] == n1[None, :]
        for model in ("paper", "isotropic"):
            err = np.abs(re - build_correlation(g, model).R)
            print(f"d = {ratio:g} lambda  {model:9s}  max err {err.max():.4f}  "
                  f"same-row max err {err[same_row].max():.4f}  max |imag| {np.abs(im).max():.4f}")


if __name__ == "__main__":
    main()
