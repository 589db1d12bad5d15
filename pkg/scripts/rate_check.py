"""Norm of the estimating function at the true effect as n grows.

One nuisance is set to its population value and the other is deliberately
wrong; the RMS norm over replications should fall like n^(-1/2).
"""

import argparse

import numpy as np

from drcee.estimator import NuisanceValues, estfn_total
from drcee.simulation import SimScenario, generate_panel


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", nargs="+", type=int, default=[1_000, 10_000, 100_000])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--seed", type=int, default=8675309)
    args = ap.parse_args()

    sc = SimScenario(seed=args.seed)
    beta = np.array(sc.beta)
    for exact in ("e", "mu"):
        rms = []
        for n in args.n:
            sq = []
            for rep in range(args.reps):
                sim = generate_panel(sc, rep, n)
                N = sim.panel.N
                pt = np.full(N, sc.p_treat)
                if exact == "e":
                    nv = NuisanceValues(sim.e_true, np.zeros(N), np.zeros(N), pt)
                else:
                    nv = NuisanceValues(np.full(N, 0.5), sim.mu1_true, sim.mu0_true, pt)
                U = estfn_total(sim.panel, nv, beta, sc.model())
                sq.append(U @ U)
            rms.append(float(np.sqrt(np.mean(sq))))
            print(f"exact {exact:>2}  n={n:>7}  rms |U| = {rms[-1]:.4e}")
        slope = np.polyfit(np.log(args.n), np.log(rms), 1)[0]
        print(f"exact {exact:>2}  log-log slope {slope:.3f}\n")


if __name__ == "__main__":
    main()
