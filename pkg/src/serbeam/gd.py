"""Joint hybrid beamforming by gradient descent on the SER bound.

Gradient convention: for complex matrices the conjugate-coordinate gradient
``d/dX* = (d/dRe X + j d/dIm X) / 2`` is used, so a finite-difference check
over independent real coordinates must compare against twice the real and
imaginary parts.  Phase-matrix gradients are plain real gradients.  Updates
step along the negative conjugate gradient, alternating P -> W -> rx phases
-> tx phase with each update seeing the ones before it, then rescale the
digital precoder onto the power budget.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel import ChannelRealization
from .config import ConstellationSpec, SystemConfig, default_kernel_width
from .errors import DimensionError, SchemaError
from .mser import KernelConfig, batch_loss
from .transceiver import (HybridBeamformers, SymbolBatch, canonicalize_gains,
                          effective_sample_size, sample_symbol_batch,
                          scale_power, validate_dimensions)

SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# per-sample weights of the SER-bound derivative
# ---------------------------------------------------------------------------

def qpsk_weights(clean: np.ndarray, desired: np.ndarray, rho: float,
                 n_samples: int) -> np.ndarray:
    """Conjugate-coordinate weights dL/d(clean output)* for QPSK.

    ``clean`` and ``desired`` are streams x samples.  Each entry is
    ``(l_x + j l_y) / 2`` where ``l_x`` is the derivative of the per-sample
    error term with respect to the real part of the clean output.
    """
    beta = 1.0 / (n_samples * SQRT_2PI * rho)
    ex = np.exp(-clean.real ** 2 / (2.0 * rho ** 2))
    ey = np.exp(-clean.imag ** 2 / (2.0 * rho ** 2))
    l_x = -beta * desired.real * ex
    l_y = -beta * desired.imag * ey
    return 0.5 * (l_x + 1j * l_y)


def qam_window_masks(desired_axis: np.ndarray,
                     levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indicator masks for the lower/upper thresholds of each symbol level."""
    lower = (desired_axis > levels[0] + 1e-9).astype(float)
    upper = (desired_axis < levels[-1] - 1e-9).astype(float)
    return lower, upper


def qam_weights(clean: np.ndarray, desired: np.ndarray, gains_re: np.ndarray,
                rho: float, n_samples: int,
                levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided M-QAM weights: per-sample matrix plus per-stream gain weight.

    Returns ``(gamma, gain_weight)`` where ``gamma`` is streams x samples of
    ``(l_x + j l_y) / 2`` for the decision-window loss and ``gain_weight[i]``
    is half its derivative with respect to the real part of stream i's
    effective gain.
    """
    sq2rho = math.sqrt(2.0) * rho
    beta = 1.0 / (n_samples * SQRT_2PI * rho)
    rc = gains_re[:, None]

    def one_dim(x, b):
        lower, upper = qam_window_masks(b, levels)
        u = (rc * (b - 1.0) - x) / sq2rho
        v = (x - rc * (b + 1.0)) / sq2rho
        eu = lower * np.exp(-u ** 2)
        ev = upper * np.exp(-v ** 2)
        l_x = beta * (-eu + ev)
        l_rc = beta * (eu * (b - 1.0) - ev * (b + 1.0))
        return l_x, l_rc

    lx, lrc_x = one_dim(clean.real, desired.real)
    ly, lrc_y = one_dim(clean.imag, desired.imag)
    gamma = 0.5 * (lx + 1j * ly)
    gain_weight = 0.5 * (lrc_x + lrc_y).sum(axis=1)
    return gamma, gain_weight


# ---------------------------------------------------------------------------
# shared state products
# ---------------------------------------------------------------------------

class GradContext:
    """Caches the state/channel products every gradient shares.

    For M-QAM the symbol-column matrix is augmented with one identity column
    per stream so the effective per-stream gains ride the same linear chain
    as the clean outputs.
    """

    def __init__(self, bf: HybridBeamformers, h: ChannelRealization,
                 batch: SymbolBatch):
        self.bf = bf
        self.h = h
        self.batch = batch
        self.spec = batch.spec
        self.n_samples = batch.sample_size
        self.streams = batch.streams_per_user
        self.offsets = np.cumsum((0,) + tuple(self.streams))
        self.total_streams = int(self.offsets[-1])

        cols = batch.vectors.T
        if self.spec.kind == "mqam":
            cols = np.concatenate([cols, np.eye(self.total_streams)], axis=1)
        self.cols = cols                           # total_streams x M
        self.v = bf.stacked_tx
        self.f = bf.analog_tx
        self.u = [bf.analog_rx(k) for k in range(bf.n_users)]
        self.z = self.v @ cols                     # n_rf_tx x M
        self.hf = [h.matrices[k] @ self.f for k in range(bf.n_users)]
        self.hfz = [self.hf[k] @ self.z for k in range(bf.n_users)]
        self.uh = [self.u[k] @ h.matrices[k] for k in range(bf.n_users)]
        self.txside = [self.u[k] @ self.hf[k] for k in range(bf.n_users)]
        self.az = [self.u[k] @ self.hfz[k] for k in range(bf.n_users)]
        # clean outputs (and gains in the virtual block for QAM)
        self.outputs = [bf.digital_rx[k].conj().T @ self.az[k]
                        for k in range(bf.n_users)]

    def clean_block(self, k: int) -> np.ndarray:
        return self.outputs[k][:, :self.n_samples]

    def gains_re(self, k: int) -> np.ndarray:
        dk = self.streams[k]
        block = self.outputs[k][:, self.n_samples + self.offsets[k]:
                                self.n_samples + self.offsets[k] + dk]
        return np.diag(block).real.copy()

    def weights(self, k: int, rho: float) -> np.ndarray:
        """Full weight matrix (streams_k x M) for the given kernel width."""
        desired = self.batch.per_user(k).T
        if self.spec.kind == "qpsk":
            return qpsk_weights(self.clean_block(k), desired, rho, self.n_samples)
        gamma, gain_w = qam_weights(self.clean_block(k), desired,
                                    self.gains_re(k), rho, self.n_samples,
                                    self.spec.levels)
        dk = self.streams[k]
        full = np.zeros((dk, self.cols.shape[1]), dtype=complex)
        full[:, :self.n_samples] = gamma
        for i in range(dk):
            full[i, self.n_samples + self.offsets[k] + i] = gain_w[i]
        return full

    # -- per-variable conjugate gradients ------------------------------

    def grad_digital_tx(self, rho: float) -> list[np.ndarray]:
        acc = np.zeros((self.v.shape[0], self.cols.shape[0]), dtype=complex)
        for k in range(self.bf.n_users):
            omega = self.txside[k].conj().T @ self.bf.digital_rx[k]
            acc += omega @ self.weights(k, rho) @ self.cols.conj().T
        return [acc[:, self.offsets[k]:self.offsets[k + 1]]
                for k in range(self.bf.n_users)]

    def grad_digital_rx_user(self, k: int, rho: float) -> np.ndarray:
        return self.az[k] @ self.weights(k, rho).conj().T

    def grad_digital_rx(self, rho: float) -> list[np.ndarray]:
        return [self.grad_digital_rx_user(k, rho) for k in range(self.bf.n_users)]

    def grad_analog_rx_conj_user(self, k: int, rho: float) -> np.ndarray:
        return self.bf.digital_rx[k] @ self.weights(k, rho) @ self.hfz[k].conj().T

    def grad_analog_rx_conj(self, rho: float) -> list[np.ndarray]:
        return [self.grad_analog_rx_conj_user(k, rho) for k in range(self.bf.n_users)]

    def grad_analog_tx_conj(self, rho: float) -> np.ndarray:
        acc = np.zeros_like(self.f)
        for k in range(self.bf.n_users):
            acc += self.uh[k].conj().T @ (self.bf.digital_rx[k]
                                          @ self.weights(k, rho)) @ self.z.conj().T
        return acc

    def grad_rx_phase_user(self, k: int, rho: float) -> np.ndarray:
        return phase_gradient(self.u[k], self.grad_analog_rx_conj_user(k, rho))

    def grad_rx_phases(self, rho: float) -> list[np.ndarray]:
        return [phase_gradient(self.u[k], g)
                for k, g in enumerate(self.grad_analog_rx_conj(rho))]

    def grad_tx_phase(self, rho: float) -> np.ndarray:
        return phase_gradient(self.f, self.grad_analog_tx_conj(rho))


def phase_gradient(analog: np.ndarray, conj_grad: np.ndarray) -> np.ndarray:
    """Real gradient w.r.t. the phase of ``analog = exp(j * phase)``."""
    return 2.0 * np.imag(conj_grad * analog.conj())


@dataclass(frozen=True)
class GradientSet:
    """All conjugate-coordinate and phase gradients at one state."""

    digital_tx: tuple[np.ndarray, ...]
    digital_rx: tuple[np.ndarray, ...]
    analog_rx_conj: tuple[np.ndarray, ...]
    analog_tx_conj: np.ndarray
    rx_phases: tuple[np.ndarray, ...]
    tx_phase: np.ndarray

    @property
    def analog_rx(self) -> tuple[np.ndarray, ...]:
        return tuple(g.conj() for g in self.analog_rx_conj)

    @property
    def analog_tx(self) -> np.ndarray:
        return self.analog_tx_conj.conj()


def gradient_set(bf: HybridBeamformers, h: ChannelRealization,
                 batch: SymbolBatch, rho: float) -> GradientSet:
    """All gradients of the SER bound at one state with one kernel width."""
    ctx = GradContext(bf, h, batch)
    return GradientSet(
        digital_tx=tuple(ctx.grad_digital_tx(rho)),
        digital_rx=tuple(ctx.grad_digital_rx(rho)),
        analog_rx_conj=tuple(ctx.grad_analog_rx_conj(rho)),
        analog_tx_conj=ctx.grad_analog_tx_conj(rho),
        rx_phases=tuple(ctx.grad_rx_phases(rho)),
        tx_phase=ctx.grad_tx_phase(rho))


def gradients_qpsk(bf: HybridBeamformers, h: ChannelRealization,
                   batch: SymbolBatch, cfg: "GdConfig") -> GradientSet:
    if batch.spec.kind != "qpsk":
        raise SchemaError("gradients_qpsk requires a QPSK batch")
    return gradient_set(bf, h, batch, cfg.kernel_width)


def gradients_qam(bf: HybridBeamformers, h: ChannelRealization,
                  batch: SymbolBatch, cfg: "GdConfig") -> GradientSet:
    if batch.spec.kind != "mqam":
        raise SchemaError("gradients_qam requires an M-QAM batch")
    return gradient_set(bf, h, batch, cfg.kernel_width)


# ---------------------------------------------------------------------------
# the alternating descent
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GdConfig:
    """Step sizes, iteration budget and sampling of the descent.

    Step defaults come from a coarse grid search in the gain-normalized
    frame the aligned initializer establishes; larger steps destabilize the
    alternating updates at high effective SNR.
    """

    step_tx: float = 1e-3
    step_rx: float = 1e-3
    step_rx_phase: float = 5e-4
    step_tx_phase: float = 5e-4
    max_iters: int = 500
    tolerance: float = 1e-12
    sample_size: int = 16
    kernel_width: float = 0.1
    restarts: int = 1
    fixed_batch: bool = False
    scale_each_iter: bool = True

    def __post_init__(self):
        if min(self.step_tx, self.step_rx, self.step_rx_phase,
               self.step_tx_phase) <= 0:
            raise SchemaError("step sizes must be positive")
        if self.max_iters < 0:
            raise SchemaError("max_iters must be >= 0")
        if self.tolerance <= 0:
            raise SchemaError("tolerance must be positive")
        if self.sample_size < 1 or self.restarts < 1:
            raise SchemaError("sample_size and restarts must be >= 1")
        if self.kernel_width <= 0:
            raise SchemaError("kernel_width must be positive")


def gd_step_recorded(bf: HybridBeamformers, h: ChannelRealization,
                     batch: SymbolBatch, cfg: GdConfig,
                     power_budget: float = 1.0, scale: bool | None = None
                     ) -> tuple[HybridBeamformers, dict]:
    """One alternating update, returning the four gradients it applied.

    Every iteration starts by canonicalizing the stream gains to one, which
    keeps the kernel objective in its responsive range and (for M-QAM) makes
    every effective gain real positive as the detection rule requires.
    """
    if scale is None:
        scale = cfg.scale_each_iter
    bf, _ = canonicalize_gains(bf, h, batch.streams_per_user)
    rho = cfg.kernel_width
    record = {}

    ctx = GradContext(bf, h, batch)
    record["digital_tx"] = ctx.grad_digital_tx(rho)
    bf = bf.replace(digital_tx=[p - cfg.step_tx * g for p, g in
                                zip(bf.digital_tx, record["digital_tx"])])

    ctx = GradContext(bf, h, batch)
    record["digital_rx"] = ctx.grad_digital_rx(rho)
    bf = bf.replace(digital_rx=[w - cfg.step_rx * g for w, g in
                                zip(bf.digital_rx, record["digital_rx"])])

    ctx = GradContext(bf, h, batch)
    record["rx_phases"] = ctx.grad_rx_phases(rho)
    bf = bf.replace(rx_phases=[t - cfg.step_rx_phase * g for t, g in
                               zip(bf.rx_phases, record["rx_phases"])])

    ctx = GradContext(bf, h, batch)
    record["tx_phase"] = ctx.grad_tx_phase(rho)
    bf = bf.replace(tx_phase=bf.tx_phase - cfg.step_tx_phase * record["tx_phase"])

    if scale:
        bf = scale_power(bf, power_budget)
    return bf, record


def gd_step(bf: HybridBeamformers, h: ChannelRealization, batch: SymbolBatch,
            cfg: GdConfig, power_budget: float = 1.0,
            scale: bool | None = None) -> HybridBeamformers:
    """One alternating update of all four variables on a fixed batch."""
    return gd_step_recorded(bf, h, batch, cfg, power_budget, scale)[0]


def init_channel_alignment(cfg: SystemConfig, h: ChannelRealization) -> HybridBeamformers:
    """Channel-aligned starting point for the descent.

    Analog transmit phases follow the strongest right singular directions of
    the stacked channel and each user's receive phases the conjugate phases
    of its top left singular vectors.  The digital stages then match the
    analog-combined effective channel: combiners are its top left singular
    vectors, precoder columns the matched (conjugated, normalized) rows.
    The state is finally power-scaled and gain-canonicalized so the kernel
    objective starts in its faithful range.
    """
    stacked = np.concatenate(h.matrices, axis=0)
    _, _, vh = np.linalg.svd(stacked, full_matrices=False)
    rank = vh.shape[0]
    tx_phase = np.empty((cfg.n_tx, cfg.n_rf_tx))
    for n in range(cfg.n_rf_tx):
        tx_phase[:, n] = np.angle(vh[n % rank, :].conj())

    rx_phases = []
    for k in range(cfg.n_users):
        u_svd, _, _ = np.linalg.svd(h.matrices[k])
        n_rf = cfg.n_rf_rx_per_user[k]
        phase = np.empty((n_rf, cfg.n_rx_per_user[k]))
        for m in range(n_rf):
            phase[m, :] = -np.angle(u_svd[:, m % u_svd.shape[1]])
        rx_phases.append(phase)

    digital_rx, tx_cols = [], []
    probe = HybridBeamformers(
        tuple(np.zeros((cfg.n_rf_tx, d), dtype=complex)
              for d in cfg.streams_per_user),
        tuple(np.zeros((cfg.n_rf_rx_per_user[k], cfg.streams_per_user[k]),
                       dtype=complex) for k in range(cfg.n_users)),
        tuple(rx_phases), tx_phase)
    for k in range(cfg.n_users):
        heff = probe.analog_rx(k) @ h.matrices[k] @ probe.analog_tx
        u_eff, _, _ = np.linalg.svd(heff)
        dk = cfg.streams_per_user[k]
        w = u_eff[:, :dk].copy()
        digital_rx.append(w)
        rows = w.conj().T @ heff
        for i in range(dk):
            col = rows[i, :].conj()
            norm = np.linalg.norm(col)
            tx_cols.append(col / norm if norm > 0 else col)
    v = np.stack(tx_cols, axis=1)
    offsets = np.cumsum((0,) + cfg.streams_per_user)
    digital_tx = [v[:, offsets[k]:offsets[k + 1]] for k in range(cfg.n_users)]

    bf = HybridBeamformers(tuple(digital_tx), tuple(digital_rx),
                           tuple(rx_phases), tx_phase)
    bf = scale_power(bf, cfg.power_budget)
    return canonicalize_gains(bf, h, cfg.streams_per_user)[0]


def normalize_stream_gains(bf: HybridBeamformers, h: ChannelRealization,
                           cfg: SystemConfig) -> HybridBeamformers:
    """Rescale combiner columns so every effective stream gain equals one.

    Unlike :func:`serbeam.transceiver.canonicalize_gains` this pins the gain
    itself (useful for constructing identity-chain states in tests);
    degenerate streams are left alone.
    """
    from .transceiver import stream_gain

    new_rx = []
    for k in range(cfg.n_users):
        w = bf.digital_rx[k].copy()
        for i in range(cfg.streams_per_user[k]):
            c = stream_gain(bf, h, i, k)
            if abs(c) > 1e-12:
                w[:, i] = w[:, i] / c.conjugate()
        new_rx.append(w)
    return bf.replace(digital_rx=new_rx)


def init_random(cfg: SystemConfig, rng: np.random.Generator,
                h: ChannelRealization | None = None) -> HybridBeamformers:
    """Random phases and Gaussian digital stages, power-scaled.

    When the channel is supplied the stream gains are normalized as in the
    aligned initializer so restarts also start in the kernel's active range.
    """
    def crandn(*shape):
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) \
            / math.sqrt(2)

    digital_tx = [crandn(cfg.n_rf_tx, d) for d in cfg.streams_per_user]
    digital_rx = [crandn(cfg.n_rf_rx_per_user[k], cfg.streams_per_user[k])
                  for k in range(cfg.n_users)]
    rx_phases = [rng.uniform(-math.pi, math.pi,
                             (cfg.n_rf_rx_per_user[k], cfg.n_rx_per_user[k]))
                 for k in range(cfg.n_users)]
    tx_phase = rng.uniform(-math.pi, math.pi, (cfg.n_tx, cfg.n_rf_tx))
    bf = HybridBeamformers(tuple(digital_tx), tuple(digital_rx),
                           tuple(rx_phases), tx_phase)
    bf = scale_power(bf, cfg.power_budget)
    if h is not None:
        bf = canonicalize_gains(bf, h, cfg.streams_per_user)[0]
    return bf


def run_gd(bf0: HybridBeamformers, h: ChannelRealization, cfg: GdConfig,
           seed: int, sys_cfg: SystemConfig,
           spec: ConstellationSpec) -> tuple[HybridBeamformers, list[float]]:
    """Iterate the descent; with restarts, keep the best final state.

    A fresh symbol block is drawn every iteration unless ``fixed_batch`` is
    set.  Restart 0 starts from ``bf0`` (or the channel-aligned state when
    ``bf0`` is None); later restarts are random.  Finals are compared on a
    common held-out block so the choice is deterministic given the seed.
    """
    if bf0 is not None:
        validate_dimensions(bf0, sys_cfg)
    block = effective_sample_size(spec, sys_cfg.streams_per_user,
                                  cfg.sample_size)
    kernel = KernelConfig(rho=cfg.kernel_width, sample_size=block)
    eval_batch = sample_symbol_batch(spec, sys_cfg.streams_per_user, block,
                                     int(np.random.SeedSequence([seed, 0xE7A1]).generate_state(1)[0]))

    best_state, best_trace, best_score = None, None, math.inf
    for restart in range(cfg.restarts):
        if restart == 0:
            state = bf0 if bf0 is not None else init_channel_alignment(sys_cfg, h)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED, restart]))
            state = init_random(sys_cfg, rng, h)

        fixed = sample_symbol_batch(spec, sys_cfg.streams_per_user, block,
                                    int(np.random.SeedSequence([seed, restart, 0]).generate_state(1)[0]))
        trace = [batch_loss(state, h, fixed, kernel)]
        prev = trace[0]
        for t in range(cfg.max_iters):
            if cfg.fixed_batch:
                batch = fixed
            else:
                sub = int(np.random.SeedSequence([seed, restart, t + 1]).generate_state(1)[0])
                batch = sample_symbol_batch(spec, sys_cfg.streams_per_user,
                                            block, sub)
            state = gd_step(state, h, batch, cfg, sys_cfg.power_budget)
            cur = batch_loss(state, h, batch, kernel)
            trace.append(cur)
            if abs(cur - prev) < cfg.tolerance:
                break
            prev = cur

        score = batch_loss(state, h, eval_batch, kernel)
        if score < best_score:
            best_state, best_trace, best_score = state, trace, score
    return best_state, best_trace


def export_trace(path, trace: Sequence[float],
                 analytical_ser: Sequence[float] | None = None):
    """Write a loss trace as CSV: iteration, loss, analytical SER (optional)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss", "analytical_ser"])
        for t, val in enumerate(trace):
            ser = "" if analytical_ser is None else f"{analytical_ser[t]:.10g}"
            writer.writerow([t, f"{val:.10g}", ser])


def default_gd_config(sys_cfg: SystemConfig, **overrides) -> GdConfig:
    """GdConfig with the kernel width derived from the configured noise."""
    kw = overrides.pop("kernel_width", None)
    if kw is None:
        kw = default_kernel_width(min(sys_cfg.noise_std_per_user))
    return GdConfig(kernel_width=kw, **overrides)
