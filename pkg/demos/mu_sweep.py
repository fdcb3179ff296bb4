"""Sweep the contraction parameter mu and show how the ISS gain bound responds.

Uses a single frozen parameter value so each solve takes a few seconds.
"""

import numpy as np

from robust_esn import lmi
from robust_esn.polymodel import van_der_pol_model


def main():
    model = van_der_pol_model(0.1)
    print(" mu     lambda")
    best = None
    for mu in np.arange(0.1, 0.95, 0.1):
        try:
            sol = lmi.solve_synthesis(lmi.SynthesisProblem(model, float(mu), thetas=[0.75]))
        except lmi.Infeasible:
            print(f"{mu:4.2f}   infeasible")
            continue
        print(f"{mu:4.2f}   {sol.lambda_:.4g}")
        if best is None or sol.lambda_ < best.lambda_:
            best = sol
    K0, K1 = best.K0, best.K1
    print(f"\nbest mu={best.mu:g}")
    print("K0 =", np.array2string(K0, precision=4))
    print("K1 =", np.array2string(K1, precision=4))
    rep = lmi.verify_iss_decrease(best, model, n_samples=2000, rng_seed=0, thetas=[[0.75]])
    print(f"sampled decrease check: {rep.decrease_violations} violations in 2000 draws")


if __name__ == "__main__":
    main()
