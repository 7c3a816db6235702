"""Train every stage at desk scale and run the NMSE and rate experiments.

Artifacts are cached in --workdir so repeated runs only redo evaluation.
"""

import argparse
import time
from pathlib import Path

import torch

from dedt.config import load_config
from dedt.experiments import (desk_pipeline, interior_argmax, run_nmse_experiment, run_rate_experiment,
                              write_metrics)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--override", action="append", default=[])
    ap.add_argument("--workdir", default="runs/desk")
    ap.add_argument("--no-ppo", action="store_true")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(args.config, args.override, args.seed)
    work = Path(args.workdir)
    t0 = time.perf_counter()
    pipe = desk_pipeline(cfg, work, log=print)
    print(f"pipeline ready after {time.perf_counter() - t0:.0f} s")

    nmse_rows = run_nmse_experiment(cfg, pipe.imputer, cfg.heldout_env())
    write_metrics(work / "metrics-nmse.csv", nmse_rows)
    for r in nmse_rows:
        print(f"nmse {r.method:5s} snr={r.snr_db:4.0f} rho={r.mask_ratio:.2f} {r.nmse:.4f}")

    res = run_rate_experiment(cfg, pipe.imputer, pipe.model, with_ppo=not args.no_ppo)
    write_metrics(work / "metrics-rate.csv", res.rows)
    final = [r for r in res.rows if r.effective_rate is not None]
    for r in final:
        print(f"rate {r.method:6s} rho={r.mask_ratio:.2f} raw={r.raw_rate:.3f} eff={r.effective_rate:.3f}")
    ao = res.episodes[("AO", 0.0)].mean()
    dedt = {rho: r.effective_rate for r in final if r.method == "DEDT" for rho in [r.mask_ratio]}
    print(f"DEDT/AO at eval rho: {res.episodes[('DEDT', cfg.sweep.eval_rho)].mean() / ao:.3f}")
    print(f"interior optimum of DEDT effective rate: {interior_argmax([dedt[k] for k in sorted(dedt)])}")
    print(f"fine-tune seconds {res.finetune_seconds:.1f}, total {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
