"""Flatten beamformer states and gradients into real coordinate vectors.

The finite-difference oracle perturbs one real coordinate at a time, so the
packing interleaves complex matrices as (real, imag) pairs and keeps phase
matrices as plain reals.  A GradientSet packs to the coordinate-wise real
gradient: twice the real/imaginary parts of the conjugate gradients, phase
gradients as they are.
"""

from __future__ import annotations

import numpy as np

from .transceiver import HybridBeamformers


def pack_state(bf: HybridBeamformers) -> np.ndarray:
    parts = []
    for p in bf.digital_tx:
        parts += [p.real.ravel(), p.imag.ravel()]
    for w in bf.digital_rx:
        parts += [w.real.ravel(), w.imag.ravel()]
    for t in bf.rx_phases:
        parts.append(t.ravel())
    parts.append(bf.tx_phase.ravel())
    return np.concatenate(parts)


def unpack_state(vec: np.ndarray, template: HybridBeamformers) -> HybridBeamformers:
    pos = 0

    def take(n):
        nonlocal pos
        out = vec[pos:pos + n]
        pos += n
        return out

    digital_tx = []
    for p in template.digital_tx:
        re = take(p.size).reshape(p.shape)
        im = take(p.size).reshape(p.shape)
        digital_tx.append(re + 1j * im)
    digital_rx = []
    for w in template.digital_rx:
        re = take(w.size).reshape(w.shape)
        im = take(w.size).reshape(w.shape)
        digital_rx.append(re + 1j * im)
    rx_phases = [take(t.size).reshape(t.shape).copy() for t in template.rx_phases]
    tx_phase = take(template.tx_phase.size).reshape(template.tx_phase.shape).copy()
    assert pos == len(vec)
    return HybridBeamformers(tuple(digital_tx), tuple(digital_rx),
                             tuple(rx_phases), tx_phase)


def pack_gradient(grads) -> np.ndarray:
    """Real-coordinate gradient matching :func:`pack_state`'s layout."""
    parts = []
    for g in grads.digital_tx:
        parts += [2.0 * g.real.ravel(), 2.0 * g.imag.ravel()]
    for g in grads.digital_rx:
        parts += [2.0 * g.real.ravel(), 2.0 * g.imag.ravel()]
    for g in grads.rx_phases:
        parts.append(np.asarray(g, dtype=float).ravel())
    parts.append(np.asarray(grads.tx_phase, dtype=float).ravel())
    return np.concatenate(parts)
