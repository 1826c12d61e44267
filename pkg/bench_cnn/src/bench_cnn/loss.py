"""Differentiable SER-bound loss and the link-level SER measurement.

The training loss is the per-stream Gaussian tail bound of the symbol error
probability with the exact per-stream noise deviation through the combiner,
summed over streams and averaged over the channel batch.  Autograd handles
the gradients; this benchmark is deliberately black-box.
"""

from __future__ import annotations

import math

import numpy as np
import torch

SQRT2 = math.sqrt(2.0)


def receiver_matrices(v, w, analog_tx, analog_rx, raw):
    """Per-user clean signal map G_k = W^H U H F V and noise mixer W^H U."""
    chain = torch.einsum("bkrn,bknt,bktf->bkrf", analog_rx,
                         raw.to(analog_tx.dtype),
                         analog_tx.unsqueeze(1).expand(-1, raw.shape[1], -1, -1))
    sig = torch.einsum("bkrd,bkrf,bfs->bkds", w.conj(), chain, v)
    mix = torch.einsum("bkrd,bkrn->bkdn", w.conj(), analog_rx)
    return sig, mix


def ser_bound_loss(v, w, analog_tx, analog_rx, raw, symbols, noise_std):
    """Mean over the batch of the summed per-stream QPSK error bounds.

    ``symbols``: (J, D) complex constellation points.  The per-stream tail
    argument uses the exact combined-noise deviation, so the bound cannot be
    gamed by rescaling the combiner.
    """
    b, k, _, _ = raw.shape
    streams = w.shape[-1]
    sig, mix = receiver_matrices(v, w, analog_tx, analog_rx, raw)
    # clean outputs for every sampled vector: (B, K, D_k, J)
    clean = torch.einsum("bkds,js->bkdj", sig, symbols.to(sig.dtype))
    width = torch.sqrt(torch.sum(torch.abs(mix) ** 2, dim=-1)) \
        * (noise_std / SQRT2)                                   # (B, K, D_k)
    width = torch.clamp(width, min=1e-12).unsqueeze(-1)
    desired = symbols.T.reshape(k, streams, -1).unsqueeze(0)     # 1,K,D_k,J
    arg_r = -clean.real * desired.real / (SQRT2 * width)
    arg_i = -clean.imag * desired.imag / (SQRT2 * width)
    tail = 0.5 * (1.0 + torch.erf(arg_r)) + 0.5 * (1.0 + torch.erf(arg_i))
    return tail.mean(dim=-1).sum(dim=(1, 2)).mean()


def qpsk_symbol_block(total_streams: int, count: int,
                      rng: np.random.Generator) -> torch.Tensor:
    pts = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j])
    idx = rng.integers(0, 4, size=(count, total_streams))
    return torch.from_numpy(pts[idx])


def monte_carlo_ser(v, w, analog_tx, analog_rx, raw, noise_std: float,
                    trials: int, seed: int) -> float:
    """Stream-symbol error rate of the emitted beamformers (QPSK)."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        sig, mix = receiver_matrices(v, w, analog_tx, analog_rx, raw)
        sig = sig.numpy()
        mix = mix.numpy()
    b, k, dk, total = sig.shape
    n_rx = mix.shape[-1]
    errors = 0
    decisions = 0
    pts = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j])
    for bi in range(b):
        symbols = pts[rng.integers(0, 4, size=(trials, total))]
        noise = (rng.standard_normal((k, n_rx, trials))
                 + 1j * rng.standard_normal((k, n_rx, trials))) \
            * (noise_std / SQRT2)
        for kk in range(k):
            received = sig[bi, kk] @ symbols.T + mix[bi, kk] @ noise[kk]
            sent = symbols[:, kk * dk:(kk + 1) * dk].T
            detected = np.where(received.real >= 0, 1.0, -1.0) \
                + 1j * np.where(received.imag >= 0, 1.0, -1.0)
            errors += int(np.count_nonzero(detected != sent))
            decisions += sent.size
    return errors / decisions
