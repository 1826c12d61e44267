#!/usr/bin/env python3
"""Imperfect-CSI and generalization runs at desk scale."""

import argparse

from serbeam.evaluation import ExperimentSpec, run_experiment


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="out/robustness")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    common = dict(
        seed=args.seed, n_tx=32, n_rf_tx=8, n_users=2, n_rx_per_user=8,
        n_rf_rx_per_user=4, streams_per_user=2, n_clusters=5, n_rays=10,
        snr_db=(-4.0,), n_train_channels=80, n_val_channels=8,
        n_eval_channels=6, gd_iters=200, gd_restarts=1, unfold_layers=8,
        train_iters=60, train_batch=16, sample_size=24,
        threads=args.threads)

    csi = ExperimentSpec(scenario="imperfect_csi",
                         output_dir=args.out + "/csi",
                         sigma_h=(0.0, 0.05, 0.1, 0.2), **common)
    for row in run_experiment(csi):
        print(f"csi {row['method']:>8s} sigma_h {row['sigma_h']:>5} "
              f"ser {float(row['ser']):.4e}")

    gen = ExperimentSpec(scenario="generalization",
                         output_dir=args.out + "/generalization",
                         generalization_users=1, **common)
    for row in run_experiment(gen):
        print(f"gen {row['method']:>14s} ser {float(row['ser']):.4e}")


if __name__ == "__main__":
    main()
