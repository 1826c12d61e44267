"""Training and evaluation loops for the composite benchmark."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import channel_tensor, load_channels
from .loss import monte_carlo_ser, qpsk_symbol_block, ser_bound_loss
from .model import CompositeBeamformer, SystemDims

CSV_COLUMNS = ["method", "snr_db", "sigma_h", "layers", "iterations",
               "ser", "std_error", "trials"]


@dataclass
class TrainSettings:
    noise_std: float
    max_iters: int = 400
    batch_size: int = 20
    sample_size: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    mc_trials: int = 20000


def _to_batches(records, dims: SystemDims):
    tensors = np.stack([channel_tensor(m) for m in records])
    raw = np.stack([np.stack(m) for m in records])
    return torch.from_numpy(tensors), torch.from_numpy(raw)


def train_model(records, dims: SystemDims, cfg: TrainSettings
                ) -> tuple[CompositeBeamformer, list[dict]]:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = CompositeBeamformer(dims)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                          momentum=cfg.momentum)
    tensors, raw = _to_batches(records, dims)
    n = tensors.shape[0]
    trace = []
    model.train()
    for t in range(cfg.max_iters):
        picks = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch_t = tensors[picks]
        batch_raw = raw[picks]
        symbols = qpsk_symbol_block(dims.total_streams, cfg.sample_size, rng)
        opt.zero_grad()
        v, w, ftx, frx = model(batch_t, batch_raw)
        loss = ser_bound_loss(v, w, ftx, frx, batch_raw, symbols,
                              cfg.noise_std)
        loss.backward()
        opt.step()
        trace.append({"iteration": t, "train_loss": float(loss.item())})
    model.eval()
    return model, trace


def evaluate_model(model: CompositeBeamformer, records, dims: SystemDims,
                   noise_std: float, trials: int, seed: int) -> float:
    tensors, raw = _to_batches(records, dims)
    with torch.no_grad():
        v, w, ftx, frx = model(tensors, raw)
    return monte_carlo_ser(v, w, ftx, frx, raw, noise_std, trials, seed)


def write_ser_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in CSV_COLUMNS})


def snr_db_of(noise_std: float, power: float = 1.0) -> float:
    return 10.0 * math.log10(power / noise_std ** 2)
