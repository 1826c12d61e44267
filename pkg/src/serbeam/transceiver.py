"""Hybrid transceiver state and the end-to-end signal chain.

The optimization state is ``HybridBeamformers``: per-user digital precoders
and combiners plus the phase matrices of the analog stages.  The analog
matrices themselves are derived as ``exp(j * phase)`` so the unit-modulus
constraint holds by construction.  All operations return new states; the
arrays inside a state are treated as immutable by convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import ChannelRealization
from .config import ConstellationSpec, SystemConfig
from .errors import DimensionError, NumericError, SchemaError


@dataclass(frozen=True)
class HybridBeamformers:
    """Digital precoders/combiners and analog phase matrices.

    ``digital_tx[k]`` is n_rf_tx x streams_k, ``digital_rx[k]`` is
    n_rf_rx_k x streams_k, ``rx_phases[k]`` is n_rf_rx_k x n_rx_k and
    ``tx_phase`` is n_tx x n_rf_tx.
    """

    digital_tx: tuple[np.ndarray, ...]
    digital_rx: tuple[np.ndarray, ...]
    rx_phases: tuple[np.ndarray, ...]
    tx_phase: np.ndarray

    @property
    def n_users(self) -> int:
        return len(self.digital_tx)

    @property
    def analog_tx(self) -> np.ndarray:
        """Unit-modulus analog precoder F = exp(j * tx_phase)."""
        return np.exp(1j * self.tx_phase)

    def analog_rx(self, k: int) -> np.ndarray:
        """Unit-modulus analog combiner of user k."""
        return np.exp(1j * self.rx_phases[k])

    @property
    def stacked_tx(self) -> np.ndarray:
        """All digital precoders side by side (n_rf_tx x total_streams)."""
        return np.concatenate(self.digital_tx, axis=1)

    def replace(self, digital_tx=None, digital_rx=None, rx_phases=None,
                tx_phase=None) -> "HybridBeamformers":
        return HybridBeamformers(
            digital_tx=tuple(digital_tx) if digital_tx is not None else self.digital_tx,
            digital_rx=tuple(digital_rx) if digital_rx is not None else self.digital_rx,
            rx_phases=tuple(rx_phases) if rx_phases is not None else self.rx_phases,
            tx_phase=tx_phase if tx_phase is not None else self.tx_phase)

    def copy(self) -> "HybridBeamformers":
        return HybridBeamformers(
            tuple(p.copy() for p in self.digital_tx),
            tuple(w.copy() for w in self.digital_rx),
            tuple(t.copy() for t in self.rx_phases),
            self.tx_phase.copy())


def validate_dimensions(bf: HybridBeamformers, cfg: SystemConfig):
    if bf.n_users != cfg.n_users:
        raise DimensionError("beamformer user count does not match config")
    for k in range(cfg.n_users):
        dk = cfg.streams_per_user[k]
        if bf.digital_tx[k].shape != (cfg.n_rf_tx, dk):
            raise DimensionError(f"digital_tx[{k}] has wrong shape")
        if bf.digital_rx[k].shape != (cfg.n_rf_rx_per_user[k], dk):
            raise DimensionError(f"digital_rx[{k}] has wrong shape")
        if bf.rx_phases[k].shape != (cfg.n_rf_rx_per_user[k], cfg.n_rx_per_user[k]):
            raise DimensionError(f"rx_phases[{k}] has wrong shape")
    if bf.tx_phase.shape != (cfg.n_tx, cfg.n_rf_tx):
        raise DimensionError("tx_phase has wrong shape")


@dataclass(frozen=True)
class SymbolBatch:
    """A block of sampled transmit symbol vectors (rows of ``vectors``)."""

    vectors: np.ndarray          # J x total_streams, complex
    spec: ConstellationSpec
    streams_per_user: tuple[int, ...]

    @property
    def sample_size(self) -> int:
        return self.vectors.shape[0]

    def per_user(self, k: int) -> np.ndarray:
        offs = np.cumsum((0,) + self.streams_per_user)
        return self.vectors[:, offs[k]:offs[k + 1]]


def _decode_indices(indices: np.ndarray, spec: ConstellationSpec,
                    n_streams: int) -> np.ndarray:
    """Map flat indices in [0, order**n_streams) to symbol vectors."""
    pts = spec.points()
    order = spec.order
    out = np.empty((len(indices), n_streams), dtype=complex)
    rem = indices.astype(np.int64).copy()
    for d in range(n_streams):
        out[:, d] = pts[rem % order]
        rem //= order
    return out


def effective_sample_size(spec: ConstellationSpec,
                          streams_per_user: Sequence[int],
                          requested: int) -> int:
    """Clamp a requested block size to the number of distinct symbol vectors."""
    total = sum(int(v) for v in streams_per_user)
    return min(int(requested), spec.order ** total)


def sample_symbol_batch(spec: ConstellationSpec, streams_per_user: Sequence[int],
                        sample_size: int, seed: int) -> SymbolBatch:
    """Draw ``sample_size`` distinct symbol vectors uniformly from the full set."""
    streams_per_user = tuple(int(v) for v in streams_per_user)
    total = sum(streams_per_user)
    n_vectors = spec.order ** total
    if sample_size < 1:
        raise SchemaError("sample_size must be >= 1")
    if sample_size > n_vectors:
        raise SchemaError(
            f"cannot draw {sample_size} distinct vectors from a set of {n_vectors}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    idx = rng.choice(n_vectors, size=sample_size, replace=False)
    return SymbolBatch(_decode_indices(idx, spec, total), spec, streams_per_user)


def exhaustive_conditioned_batch(spec: ConstellationSpec,
                                 streams_per_user: Sequence[int],
                                 stream: int, desired: complex) -> SymbolBatch:
    """All interference combinations with one stream pinned to ``desired``.

    The batch has ``order**(total_streams - 1)`` rows; column ``stream`` is
    constant.  Used by the exact-PDF and analytical-SER oracles.
    """
    streams_per_user = tuple(int(v) for v in streams_per_user)
    total = sum(streams_per_user)
    count = spec.order ** (total - 1)
    if count > 2 ** 16:
        raise SchemaError(
            f"exhaustive enumeration of {count} vectors exceeds the 2^16 guard")
    others = _decode_indices(np.arange(count), spec, total - 1)
    vectors = np.empty((count, total), dtype=complex)
    vectors[:, :stream] = others[:, :stream]
    vectors[:, stream] = desired
    vectors[:, stream + 1:] = others[:, stream:]
    return SymbolBatch(vectors, spec, streams_per_user)


def effective_rx_chain(bf: HybridBeamformers, h: ChannelRealization,
                       k: int) -> np.ndarray:
    """U_k H_k F: the analog-combined channel seen by user k's digital stage."""
    return bf.analog_rx(k) @ h.matrices[k] @ bf.analog_tx


def receiver_output(bf: HybridBeamformers, h: ChannelRealization,
                    symbols: np.ndarray,
                    noise: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Per-user digital-stage outputs for one transmit symbol vector.

    Returns ``W_k^H U_k (H_k F V s + n_k)`` for each user; with ``noise``
    omitted this is the noise-free output.
    """
    v = bf.stacked_tx
    if symbols.shape[0] != v.shape[1]:
        raise DimensionError("symbol vector length does not match total streams")
    tx = bf.analog_tx @ (v @ symbols)
    outs = []
    for k in range(bf.n_users):
        received = h.matrices[k] @ tx
        if noise is not None:
            received = received + noise[k]
        outs.append(bf.digital_rx[k].conj().T @ (bf.analog_rx(k) @ received))
    return outs


def detect(spec: ConstellationSpec, value: complex, c: float = 1.0) -> complex:
    """Threshold detection of one received scalar.

    QPSK decides the sign of each real dimension (zero maps to +1).  M-QAM
    compares against thresholds ``c * (level +- 1)``; a value exactly on a
    threshold belongs to the lower level.
    """
    if spec.kind == "qpsk":
        re = 1.0 if value.real >= 0 else -1.0
        im = 1.0 if value.imag >= 0 else -1.0
        return complex(re, im)
    levels = spec.levels
    upper = c * (levels[:-1] + 1.0)   # boundary between level m and m+1

    def _axis(x: float) -> float:
        return levels[int(np.searchsorted(upper, x, side="left"))]

    return complex(_axis(value.real), _axis(value.imag))


def detect_array(spec: ConstellationSpec, values: np.ndarray,
                 c: float | np.ndarray = 1.0) -> np.ndarray:
    """Vectorized :func:`detect`; ``c`` broadcasts against ``values``."""
    if spec.kind == "qpsk":
        return np.where(values.real >= 0, 1.0, -1.0) \
            + 1j * np.where(values.imag >= 0, 1.0, -1.0)
    levels = spec.levels
    edges = levels[:-1] + 1.0
    scaled_re = values.real / c
    scaled_im = values.imag / c
    re_idx = np.searchsorted(edges, scaled_re, side="left")
    im_idx = np.searchsorted(edges, scaled_im, side="left")
    return levels[re_idx] + 1j * levels[im_idx]


def stream_gain(bf: HybridBeamformers, h: ChannelRealization,
                i: int, k: int) -> complex:
    """Effective complex gain w_{i,k}^H U_k H_k F p_{i,k} of one stream."""
    chain = effective_rx_chain(bf, h, k)
    return complex(bf.digital_rx[k][:, i].conj() @ chain @ bf.digital_tx[k][:, i])


def phase_rotate(bf: HybridBeamformers, h: ChannelRealization,
                 i: int, k: int) -> HybridBeamformers:
    """Rotate stream (i, k) so its effective gain becomes real positive.

    The combiner column ``w_{i,k}`` is multiplied by the unit-modulus factor
    ``c/|c|``; through the conjugate transpose in the receive chain this maps
    the gain to ``|c|``.  Acting on the stream's own combiner column keeps
    every other stream, the transmit power and the analog (unit-modulus)
    stages untouched.
    """
    c = stream_gain(bf, h, i, k)
    if abs(c) < 1e-14:
        raise NumericError(f"stream ({i}, {k}) has a degenerate gain |c| < 1e-14")
    factor = c / abs(c)
    new_rx = list(bf.digital_rx)
    w = new_rx[k].copy()
    w[:, i] = factor * w[:, i]
    new_rx[k] = w
    return bf.replace(digital_rx=new_rx)


def rotate_all_streams(bf: HybridBeamformers, h: ChannelRealization,
                       streams_per_user: Sequence[int]) -> HybridBeamformers:
    """Apply :func:`phase_rotate` to every stream in (i, k) order."""
    out = bf
    for k, dk in enumerate(streams_per_user):
        for i in range(dk):
            out = phase_rotate(out, h, i, k)
    return out


def canonicalize_gains(bf: HybridBeamformers, h: ChannelRealization,
                       streams_per_user: Sequence[int],
                       min_gain: float = 1e-9
                       ) -> tuple[HybridBeamformers, list[dict]]:
    """Noise-reference each combiner column and align its gain phase.

    Each stream's combiner column is scaled by ``(c/|c|) / ||U^H w||`` so
    that afterwards the combined noise has unit deviation relative to the
    per-antenna noise and the effective gain is real positive (subsuming the
    M-QAM phase rotation).  Per-stream combiner scaling never changes the
    error rate; it anchors the scale so a constant kernel width equal to the
    per-real-dimension noise deviation makes the kernel objective the true
    tail probability.  Streams with degenerate gain or norm (dead users in
    zero-padded runs) are left untouched.

    Returns the new state and, per user, the pre-scaling gains and combined
    norms the backward pass needs.
    """
    new_rx = []
    records = []
    for k, dk in enumerate(streams_per_user):
        analog = bf.analog_rx(k)
        chain = bf.digital_rx[k].conj().T @ analog @ h.matrices[k] @ bf.analog_tx
        gains = np.array([chain[i, :] @ bf.digital_tx[k][:, i]
                          for i in range(dk)])
        norms = np.array([np.linalg.norm(analog.conj().T @ bf.digital_rx[k][:, i])
                          for i in range(dk)])
        w = bf.digital_rx[k].copy()
        for i in range(dk):
            if abs(gains[i]) > min_gain and norms[i] > min_gain:
                factor = (gains[i] / abs(gains[i])) / norms[i]
                w[:, i] = factor * w[:, i]
        new_rx.append(w)
        records.append({"gains": gains, "norms": norms})
    return bf.replace(digital_rx=new_rx), records


def transmit_power(bf: HybridBeamformers) -> float:
    """Squared Frobenius norm of F V."""
    return float(np.linalg.norm(bf.analog_tx @ bf.stacked_tx) ** 2)


def scale_power(bf: HybridBeamformers, power_budget: float) -> HybridBeamformers:
    """Scale the stacked digital precoder so ||F V||^2 equals the budget."""
    norm = math.sqrt(transmit_power(bf))
    if norm <= 0 or not math.isfinite(norm):
        raise NumericError("cannot scale a zero-norm or non-finite precoder")
    factor = math.sqrt(power_budget) / norm
    return bf.replace(digital_tx=[factor * p for p in bf.digital_tx])


def unit_modulus_deviation(bf: HybridBeamformers) -> float:
    """Largest | |entry| - 1 | over the derived analog matrices."""
    dev = float(np.max(np.abs(np.abs(bf.analog_tx) - 1.0)))
    for k in range(bf.n_users):
        dev = max(dev, float(np.max(np.abs(np.abs(bf.analog_rx(k)) - 1.0))))
    return dev
