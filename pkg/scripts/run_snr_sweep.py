#!/usr/bin/env python3
"""SNR sweep comparing the descent and the trained unfolding network.

Desk-scale by default; pass a config to reproduce larger runs:

    python scripts/run_snr_sweep.py --out out/sweep
"""

import argparse

from serbeam.evaluation import ExperimentSpec, run_experiment


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="out/snr_sweep")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--snr", type=float, nargs="+",
                        default=[-8.0, -5.0, -2.0])
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    spec = ExperimentSpec(
        scenario="snr_sweep", output_dir=args.out, seed=args.seed,
        n_tx=64, n_rf_tx=8, n_users=2, n_rx_per_user=8, n_rf_rx_per_user=4,
        streams_per_user=3, n_clusters=5, n_rays=10,
        snr_db=tuple(args.snr), n_train_channels=200, n_val_channels=10,
        n_eval_channels=8, gd_iters=500, gd_restarts=3, unfold_layers=15,
        train_iters=120, train_batch=32, sample_size=32,
        threads=args.threads)
    rows = run_experiment(spec)
    for row in rows:
        print(f"{row['method']:>18s}  snr {row['snr_db']:>6}  "
              f"ser {float(row['ser']):.4e}")


if __name__ == "__main__":
    main()
