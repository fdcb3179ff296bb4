"""Full Van der Pol run: synthesis, data collection, ESN training, closed-loop comparison.

Writes every artifact into the directory given as the first argument
(default ``runs/vdp``) and prints the headline numbers. Takes about two minutes.
"""

import sys
import time
from pathlib import Path

from robust_esn import cli


def main(out="runs/vdp"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cli.load_config("preset:vdp_paper")

    t0 = time.perf_counter()
    sol = cli.cmd_synth(cfg, out)
    print(f"robust law: mu={sol.mu:g} lambda={sol.lambda_:.5g} ({time.perf_counter() - t0:.0f}s)")

    collected = cli.cmd_collect(cfg, sol, out)
    model = cli.cmd_train(cfg, collected, out)
    traces = cli.cmd_simulate(cfg, sol, model, out)
    m = cli.cmd_compare(traces["robust"], traces["combined"], sol.P, out, cfg.u2_bound, cfg.d_bound)

    print(f"rms(y) robust   {m['rms_robust']:.5g}")
    print(f"rms(y) combined {m['rms_combined']:.5g}")
    print(f"improvement     {m['improvement_percent']:.1f}%")
    print(f"max x'Px        {m['containment_combined']['max_value']:.4f} (must stay below 1)")
    print(f"artifacts in {out.resolve()}")


if __name__ == "__main__":
    main(*sys.argv[1:])
