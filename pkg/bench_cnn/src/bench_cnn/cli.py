"""Command line: train the benchmark on a channel dataset, emit a SER CSV.

Usage: ``bench-cnn --config cfg.yaml train`` then
``bench-cnn --config cfg.yaml evaluate --model model.pt``.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import torch
import yaml

from .dataset import DatasetFormatError, load_channels
from .model import CompositeBeamformer, SystemDims
from .train import (TrainSettings, evaluate_model, snr_db_of, train_model,
                    write_ser_csv)


def load_settings(path):
    with open(path) as f:
        doc = yaml.safe_load(f)
    sysd = doc["system"]
    dims = SystemDims(
        n_tx=int(sysd["n_tx"]), n_rf_tx=int(sysd["n_rf_tx"]),
        n_users=int(sysd["n_users"]), n_rx=int(sysd["n_rx"]),
        n_rf_rx=int(sysd["n_rf_rx"]), streams=int(sysd["streams"]),
        power_budget=float(sysd.get("power_budget", 1.0)))
    if "noise_std" in sysd:
        noise = float(sysd["noise_std"])
    else:
        noise = math.sqrt(dims.power_budget
                          / 10.0 ** (float(sysd["snr_db"]) / 10.0))
    td = doc.get("training", {})
    cfg = TrainSettings(
        noise_std=noise,
        max_iters=int(td.get("max_iters", 400)),
        batch_size=int(td.get("batch_size", 20)),
        sample_size=int(td.get("sample_size", 32)),
        learning_rate=float(td.get("learning_rate", 1e-3)),
        momentum=float(td.get("momentum", 0.9)),
        seed=int(doc.get("seed", 0)),
        mc_trials=int(td.get("mc_trials", 20000)))
    paths = doc["paths"]
    return dims, cfg, paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench-cnn")
    parser.add_argument("--config", "-c", required=True)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train")
    ev = sub.add_parser("evaluate")
    ev.add_argument("--model", required=True)
    args = parser.parse_args(argv)

    try:
        dims, cfg, paths = load_settings(args.config)
        out = Path(paths.get("output_dir", "out"))
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            records = load_channels(paths["train_dataset"])
            model, trace = train_model(records, dims, cfg)
            torch.save(model.state_dict(), out / "model.pt")
            with open(out / "train_trace.csv", "w") as f:
                f.write("iteration,train_loss\n")
                for row in trace:
                    f.write(f"{row['iteration']},{row['train_loss']:.8g}\n")
            print(f"trained {cfg.max_iters} steps -> {out / 'model.pt'}")
        else:
            records = load_channels(paths["test_dataset"])
            model = CompositeBeamformer(dims)
            model.load_state_dict(torch.load(args.model, weights_only=True))
            model.eval()
            ser = evaluate_model(model, records, dims, cfg.noise_std,
                                 cfg.mc_trials, cfg.seed)
            write_ser_csv(out / "cnn_ser.csv", [{
                "method": "benchmark_cnn",
                "snr_db": snr_db_of(cfg.noise_std, dims.power_budget),
                "sigma_h": 0.0, "layers": 17, "iterations": cfg.max_iters,
                "ser": ser, "std_error": 0.0, "trials": cfg.mc_trials}])
            print(f"SER {ser:.4g} -> {out / 'cnn_ser.csv'}")
        return 0
    except (KeyError, ValueError, yaml.YAMLError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
