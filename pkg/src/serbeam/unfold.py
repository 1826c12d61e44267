"""Unrolling the descent into a trainable layered network.

Each layer repeats one alternating descent step but with trainable per-entry
step matrices, additive offsets and per-variable kernel widths; the final
layer's transmit-phase update keeps the plain descent rule.  Training uses a
closed-form backward pass: the chain rule is applied by hand through every
half-step, the per-layer power scaling and (for M-QAM) the per-stream phase
rotation, so no autodiff framework is involved.  Correctness of the whole
recursion is pinned by the finite-difference suite in the tests.

Complex adjoints follow the conjugate-coordinate convention
``adj(X) = dL/dX*``; a real-coordinate gradient is ``(2 Re adj, 2 Im adj)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Sequence

import numpy as np

from .channel import ChannelRealization
from .config import ConstellationSpec, SystemConfig
from .errors import FormatError, NumericError, SchemaError
from .gd import (GdConfig, GradContext, gd_step_recorded, gradient_set,
                 init_channel_alignment, phase_gradient)
from .mser import KernelConfig, batch_loss
from .transceiver import (HybridBeamformers, SymbolBatch, canonicalize_gains,
                          effective_sample_size, sample_symbol_batch,
                          transmit_power)

SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# trainable parameters
# ---------------------------------------------------------------------------

@dataclass
class LayerParams:
    """Per-layer trainables: step matrices, offsets and kernel widths.

    Digital step/offset matrices are complex; phase step/offset matrices are
    real so phases stay real.  The final layer carries no transmit-phase
    trainables (``step_tx_phase`` etc. are None there).
    """

    step_tx: list[np.ndarray]
    offset_tx: list[np.ndarray]
    step_rx: list[np.ndarray]
    offset_rx: list[np.ndarray]
    step_rx_phase: list[np.ndarray]
    offset_rx_phase: list[np.ndarray]
    width_tx: np.ndarray
    width_rx: np.ndarray
    width_rx_phase: np.ndarray
    step_tx_phase: np.ndarray | None
    offset_tx_phase: np.ndarray | None
    width_tx_phase: float | None

    @property
    def has_tx_phase(self) -> bool:
        return self.step_tx_phase is not None

    def n_real_parameters(self) -> int:
        n = 0
        for a, o in zip(self.step_tx, self.offset_tx):
            n += 2 * a.size + 2 * o.size
        for a, o in zip(self.step_rx, self.offset_rx):
            n += 2 * a.size + 2 * o.size
        for a, o in zip(self.step_rx_phase, self.offset_rx_phase):
            n += a.size + o.size
        n += self.width_tx.size + self.width_rx.size + self.width_rx_phase.size
        if self.has_tx_phase:
            n += self.step_tx_phase.size + self.offset_tx_phase.size + 1
        return n

    def copy(self) -> "LayerParams":
        return LayerParams(
            [a.copy() for a in self.step_tx], [o.copy() for o in self.offset_tx],
            [a.copy() for a in self.step_rx], [o.copy() for o in self.offset_rx],
            [a.copy() for a in self.step_rx_phase],
            [o.copy() for o in self.offset_rx_phase],
            self.width_tx.copy(), self.width_rx.copy(), self.width_rx_phase.copy(),
            None if self.step_tx_phase is None else self.step_tx_phase.copy(),
            None if self.offset_tx_phase is None else self.offset_tx_phase.copy(),
            self.width_tx_phase)


def expected_parameter_count(cfg: SystemConfig, n_layers: int) -> int:
    """Closed-form count of the real trainable parameters.

    Per layer and user: complex step/offset pairs for the digital precoder
    (2 * 2 * n_rf_tx * streams) and combiner (2 * 2 * n_rf_rx * streams),
    real step/offset pairs for the receive phases (2 * n_rf_rx * n_rx) and
    three kernel widths.  The transmit-phase trainables
    (2 * n_tx * n_rf_tx + 1) exist in every layer but the last.
    """
    per_user = 0
    for k in range(cfg.n_users):
        dk = cfg.streams_per_user[k]
        per_user += 4 * cfg.n_rf_tx * dk
        per_user += 4 * cfg.n_rf_rx_per_user[k] * dk
        per_user += 2 * cfg.n_rf_rx_per_user[k] * cfg.n_rx_per_user[k]
        per_user += 3
    return n_layers * per_user + (n_layers - 1) * (2 * cfg.n_tx * cfg.n_rf_tx + 1)


@dataclass(frozen=True)
class TrainConfig:
    """SGD schedule and stopping rule for network training."""

    batch_size: int = 20
    max_iters: int = 300
    step_base: float = 0.02
    step_decay_every: int = 10
    step_decay_factor: float = 0.5
    sample_size: int = 16
    val_every: int = 5
    val_tolerance: float = 1e-4
    val_patience: int = 5
    min_width: float = 1e-6
    freeze_layers: int = 0
    normalize: bool = True

    def step_size(self, t: int) -> float:
        return self.step_base * self.step_decay_factor ** (t // self.step_decay_every)


@dataclass
class UnfoldNetwork:
    """L layers of trainables plus the base descent the network unrolls."""

    layers: list[LayerParams]
    base: GdConfig
    sys: SystemConfig

    def __post_init__(self):
        if len(self.layers) < 1:
            raise SchemaError("the network needs at least one layer")
        for l, params in enumerate(self.layers):
            is_last = l == len(self.layers) - 1
            if params.has_tx_phase == is_last:
                raise SchemaError(
                    "exactly the non-final layers carry transmit-phase trainables")
        actual = sum(p.n_real_parameters() for p in self.layers)
        expected = expected_parameter_count(self.sys, len(self.layers))
        if actual != expected:
            raise SchemaError(
                f"allocated parameter count {actual} does not match the "
                f"closed-form count {expected}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "UnfoldNetwork":
        return UnfoldNetwork([p.copy() for p in self.layers], self.base, self.sys)


def _specialized_layer(cfg: SystemConfig, base: GdConfig, last: bool,
                       rng: np.random.Generator | None = None,
                       rel_noise: float = 0.0) -> LayerParams:
    def noisy(shape, scale):
        a = np.full(shape, scale, dtype=float)
        if rng is not None and rel_noise > 0:
            a = a * (1.0 + rel_noise * rng.uniform(-1.0, 1.0, shape))
        return a

    step_tx, offset_tx, step_rx, offset_rx = [], [], [], []
    step_rp, offset_rp = [], []
    for k in range(cfg.n_users):
        dk = cfg.streams_per_user[k]
        rr = cfg.n_rf_rx_per_user[k]
        step_tx.append(noisy((cfg.n_rf_tx, dk), base.step_tx).astype(complex))
        offset_tx.append(np.zeros((cfg.n_rf_tx, dk), dtype=complex))
        step_rx.append(noisy((rr, dk), base.step_rx).astype(complex))
        offset_rx.append(np.zeros((rr, dk), dtype=complex))
        step_rp.append(noisy((rr, cfg.n_rx_per_user[k]), base.step_rx_phase))
        offset_rp.append(np.zeros((rr, cfg.n_rx_per_user[k])))
    k_users = cfg.n_users
    return LayerParams(
        step_tx=step_tx, offset_tx=offset_tx,
        step_rx=step_rx, offset_rx=offset_rx,
        step_rx_phase=step_rp, offset_rx_phase=offset_rp,
        width_tx=np.full(k_users, base.kernel_width),
        width_rx=np.full(k_users, base.kernel_width),
        width_rx_phase=np.full(k_users, base.kernel_width),
        step_tx_phase=None if last else noisy((cfg.n_tx, cfg.n_rf_tx),
                                              base.step_tx_phase),
        offset_tx_phase=None if last else np.zeros((cfg.n_tx, cfg.n_rf_tx)),
        width_tx_phase=None if last else base.kernel_width)


def gd_specialized_network(cfg: SystemConfig, base: GdConfig,
                           n_layers: int) -> UnfoldNetwork:
    """Network that reproduces the plain descent exactly (step = mu, offset 0)."""
    layers = [_specialized_layer(cfg, base, last=(l == n_layers - 1))
              for l in range(n_layers)]
    return UnfoldNetwork(layers, base, cfg)


def randomized_network(cfg: SystemConfig, base: GdConfig, n_layers: int,
                       seed: int, rel_noise: float = 0.1) -> UnfoldNetwork:
    """Training start: descent-specialized steps with relative uniform noise."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A7]))
    layers = [_specialized_layer(cfg, base, last=(l == n_layers - 1),
                                 rng=rng, rel_noise=rel_noise)
              for l in range(n_layers)]
    return UnfoldNetwork(layers, base, cfg)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class LayerTape:
    """Everything the closed-form backward pass needs about one layer."""

    entry_state: HybridBeamformers
    entry_ctx: GradContext                 # products at the pre-scaling state
    entry_records: list[dict]              # gains/norms the canonicalization saw
    rotated_state: HybridBeamformers
    ctx_tx: GradContext
    grads_tx: list[np.ndarray]
    ctx_rx: GradContext
    grads_rx: list[np.ndarray]
    ctx_rx_phase: GradContext
    grads_rx_phase: list[np.ndarray]
    ctx_tx_phase: GradContext
    grad_tx_phase: np.ndarray
    prescale_state: HybridBeamformers
    scale_norm: float | None
    scale_factor: float | None
    out_state: HybridBeamformers
    last_layer: bool


def forward_layer(bf: HybridBeamformers, params: LayerParams,
                  h: ChannelRealization, batch: SymbolBatch, base: GdConfig,
                  power_budget: float, last_layer: bool,
                  scale: bool = True) -> tuple[HybridBeamformers, LayerTape]:
    """One layer: canonicalize gains, update P, W, rx and tx phases, rescale."""
    entry = bf
    entry_ctx = GradContext(bf, h, batch)
    bf, entry_records = canonicalize_gains(bf, h, batch.streams_per_user)
    rotated = bf

    ctx_tx = GradContext(bf, h, batch)
    grads_tx = [ctx_tx.grad_digital_tx(params.width_tx[k])[k]
                for k in range(bf.n_users)]
    bf = bf.replace(digital_tx=[p - a * g + o for p, a, g, o in
                                zip(bf.digital_tx, params.step_tx, grads_tx,
                                    params.offset_tx)])

    ctx_rx = GradContext(bf, h, batch)
    grads_rx = [ctx_rx.grad_digital_rx_user(k, params.width_rx[k])
                for k in range(bf.n_users)]
    bf = bf.replace(digital_rx=[w - a * g + o for w, a, g, o in
                                zip(bf.digital_rx, params.step_rx, grads_rx,
                                    params.offset_rx)])

    ctx_rp = GradContext(bf, h, batch)
    grads_rp = [ctx_rp.grad_rx_phase_user(k, params.width_rx_phase[k])
                for k in range(bf.n_users)]
    bf = bf.replace(rx_phases=[t - a * g + o for t, a, g, o in
                               zip(bf.rx_phases, params.step_rx_phase, grads_rp,
                                   params.offset_rx_phase)])

    ctx_tf = GradContext(bf, h, batch)
    if last_layer:
        grad_tf = ctx_tf.grad_tx_phase(base.kernel_width)
        bf = bf.replace(tx_phase=bf.tx_phase - base.step_tx_phase * grad_tf)
    else:
        grad_tf = ctx_tf.grad_tx_phase(params.width_tx_phase)
        bf = bf.replace(tx_phase=bf.tx_phase - params.step_tx_phase * grad_tf
                        + params.offset_tx_phase)

    prescale = bf
    norm = factor = None
    if scale:
        norm = math.sqrt(transmit_power(bf))
        if norm <= 0 or not math.isfinite(norm):
            raise NumericError("layer produced a zero-norm or non-finite precoder")
        factor = math.sqrt(power_budget) / norm
        bf = bf.replace(digital_tx=[factor * p for p in bf.digital_tx])

    tape = LayerTape(entry, entry_ctx, entry_records, rotated, ctx_tx, grads_tx,
                     ctx_rx, grads_rx, ctx_rp, grads_rp, ctx_tf, grad_tf,
                     prescale, norm, factor, bf, last_layer)
    return bf, tape


def forward(net: UnfoldNetwork, bf0: HybridBeamformers, h: ChannelRealization,
            batch: SymbolBatch,
            scale: bool = True) -> tuple[HybridBeamformers, list[LayerTape]]:
    """Run all layers from a power-scaled start, recording the tape."""
    bf = bf0
    tape = []
    for l, params in enumerate(net.layers):
        bf, entry = forward_layer(bf, params, h, batch, net.base,
                                  net.sys.power_budget,
                                  last_layer=(l == net.n_layers - 1),
                                  scale=scale)
        tape.append(entry)
    return bf, tape


# ---------------------------------------------------------------------------
# weight-function partial derivatives (backward through the sample weights)
# ---------------------------------------------------------------------------

def _weights_backward(ctx: GradContext, k: int, rho: float,
                      gamma_bar: np.ndarray) -> tuple[np.ndarray, float]:
    """Map an adjoint of the weight matrix to output adjoints and d/d rho.

    Returns ``(out_adj, rho_adj)`` where ``out_adj`` is the conjugate adjoint
    of the full clean-output matrix (including the gain columns for M-QAM).
    """
    clean = ctx.clean_block(k)
    desired = ctx.batch.per_user(k).T
    n = ctx.n_samples
    x, y = clean.real, clean.imag
    rb, ib = desired.real, desired.imag
    gr, gi = gamma_bar[:, :n].real, gamma_bar[:, :n].imag

    if ctx.spec.kind == "qpsk":
        beta = 1.0 / (n * SQRT_2PI * rho)
        ex = np.exp(-x ** 2 / (2.0 * rho ** 2))
        ey = np.exp(-y ** 2 / (2.0 * rho ** 2))
        lxx = beta * rb * x * ex / rho ** 2
        lyy = beta * ib * y * ey / rho ** 2
        lxr = beta * rb * ex * (1.0 - x ** 2 / rho ** 2) / rho
        lyr = beta * ib * ey * (1.0 - y ** 2 / rho ** 2) / rho
        out_adj = 0.5 * (gr * lxx + 1j * (gi * lyy))
        rho_adj = float(np.sum(gr * lxr + gi * lyr))
        return out_adj, rho_adj

    # M-QAM: two-sided decision-window weights; they also depend on the real
    # parts of the stream gains, which live on the virtual identity columns.
    from .gd import qam_window_masks

    dk = ctx.streams[k]
    off = ctx.offsets[k]
    rc = ctx.gains_re(k)[:, None]
    levels = ctx.spec.levels
    beta = 1.0 / (n * SQRT_2PI * rho)
    sq2rho = math.sqrt(2.0) * rho
    s2r = math.sqrt(2.0) / rho

    def partials(val, b):
        lower, upper = qam_window_masks(b, levels)
        u = (rc * (b - 1.0) - val) / sq2rho
        v = (val - rc * (b + 1.0)) / sq2rho
        eu = lower * np.exp(-u ** 2)
        ev = upper * np.exp(-v ** 2)
        l_dd = -beta * s2r * (u * eu + v * ev)
        l_drc = beta * s2r * (u * (b - 1.0) * eu + v * (b + 1.0) * ev)
        l_drho = beta / rho * (-(2 * u ** 2 - 1) * eu + (2 * v ** 2 - 1) * ev)
        rc_rc = -beta * s2r * ((b - 1.0) ** 2 * u * eu
                               + (b + 1.0) ** 2 * v * ev)
        rc_rho = beta / rho * ((b - 1.0) * (2 * u ** 2 - 1) * eu
                               - (b + 1.0) * (2 * v ** 2 - 1) * ev)
        return l_dd, l_drc, l_drho, rc_rc, rc_rho

    lxx, lxrc, lxr, rcrc_x, rcrho_x = partials(x, rb)
    lyy, lyrc, lyr, rcrc_y, rcrho_y = partials(y, ib)

    gc = np.array([gamma_bar[i, n + off + i] for i in range(dk)])
    gcr = gc.real
    xadj = gr * lxx + gcr[:, None] * lxrc
    yadj = gi * lyy + gcr[:, None] * lyrc
    rcadj = np.sum(gr * lxrc + gi * lyrc, axis=1) \
        + gcr * np.sum(rcrc_x + rcrc_y, axis=1)
    rho_adj = float(np.sum(gr * lxr + gi * lyr)
                    + np.sum(gcr * np.sum(rcrho_x + rcrho_y, axis=1)))

    out_adj = np.zeros((dk, ctx.cols.shape[1]), dtype=complex)
    out_adj[:, :n] = 0.5 * (xadj + 1j * yadj)
    for i in range(dk):
        out_adj[i, n + off + i] += 0.5 * rcadj[i]
    return out_adj, rho_adj


@dataclass
class _Acc:
    """Per-half-step adjoint accumulators at one evaluation state."""

    ctx: GradContext
    wbar: list[np.ndarray] = None
    ubar: list[np.ndarray] = None
    fbar: np.ndarray = None
    zbar: np.ndarray = None
    du_direct: list[np.ndarray] = None
    df_direct: np.ndarray = None

    def __post_init__(self):
        ctx = self.ctx
        self.wbar = [np.zeros_like(w) for w in ctx.bf.digital_rx]
        self.ubar = [np.zeros_like(u) for u in ctx.u]
        self.fbar = np.zeros_like(ctx.f)
        self.zbar = np.zeros_like(ctx.z)
        self.du_direct = [np.zeros(t.shape) for t in ctx.bf.rx_phases]
        self.df_direct = np.zeros(ctx.bf.tx_phase.shape)

    def push_output_adjoint(self, k: int, out_adj: np.ndarray):
        """Adjoint of W_k^H U_k H_k F Z back onto its factors."""
        ctx = self.ctx
        w = ctx.bf.digital_rx[k]
        self.wbar[k] += ctx.az[k] @ out_adj.conj().T
        self.ubar[k] += w @ out_adj @ ctx.hfz[k].conj().T
        w_out = w @ out_adj
        self.fbar += ctx.uh[k].conj().T @ w_out @ ctx.z.conj().T
        self.zbar += ctx.txside[k].conj().T @ w_out

    def state_deltas(self) -> tuple[list, list, list, np.ndarray]:
        """Convert to state-variable adjoints at this context's state."""
        ctx = self.ctx
        vbar = self.zbar @ ctx.cols.conj().T
        dp = [vbar[:, ctx.offsets[k]:ctx.offsets[k + 1]]
              for k in range(ctx.bf.n_users)]
        du = [phase_gradient(ctx.u[k], self.ubar[k]) + self.du_direct[k]
              for k in range(ctx.bf.n_users)]
        df = phase_gradient(ctx.f, self.fbar) + self.df_direct
        return dp, self.wbar, du, df


def _vjp_tx(ctx: GradContext, widths: np.ndarray,
            gbar: list[np.ndarray]) -> tuple[_Acc, np.ndarray]:
    """Backward through the digital-precoder gradient computation."""
    acc = _Acc(ctx)
    rho_adj = np.zeros(len(widths))
    n_rf, total = ctx.v.shape
    for kappa in range(ctx.bf.n_users):
        if not np.any(gbar[kappa]):
            continue
        vbar_g = np.zeros((n_rf, total), dtype=complex)
        vbar_g[:, ctx.offsets[kappa]:ctx.offsets[kappa + 1]] = gbar[kappa]
        vg_cols = vbar_g @ ctx.cols                      # n_rf x M (reused)
        rho = widths[kappa]
        for k in range(ctx.bf.n_users):
            gamma = ctx.weights(k, rho)
            w = ctx.bf.digital_rx[k]
            omega_bar = vg_cols @ gamma.conj().T
            gamma_bar = (ctx.txside[k].conj().T @ w).conj().T @ vg_cols
            acc.wbar[k] += ctx.txside[k] @ omega_bar
            acc.fbar += ctx.uh[k].conj().T @ w @ omega_bar.conj().T
            acc.ubar[k] += w @ omega_bar.conj().T @ ctx.hf[k].conj().T
            out_adj, drho = _weights_backward(ctx, k, rho, gamma_bar)
            rho_adj[kappa] += drho
            acc.push_output_adjoint(k, out_adj)
    return acc, rho_adj


def _vjp_rx(ctx: GradContext, widths: np.ndarray,
            gbar: list[np.ndarray]) -> tuple[_Acc, np.ndarray]:
    """Backward through the digital-combiner gradient computation."""
    acc = _Acc(ctx)
    rho_adj = np.zeros(len(widths))
    for k in range(ctx.bf.n_users):
        if not np.any(gbar[k]):
            continue
        rho = widths[k]
        gamma = ctx.weights(k, rho)
        az_bar = gbar[k] @ gamma
        gamma_bar = gbar[k].conj().T @ ctx.az[k]
        acc.ubar[k] += az_bar @ ctx.hfz[k].conj().T
        hfz_bar = ctx.u[k].conj().T @ az_bar
        acc.fbar += ctx.h.matrices[k].conj().T @ hfz_bar @ ctx.z.conj().T
        acc.zbar += ctx.hf[k].conj().T @ hfz_bar
        out_adj, drho = _weights_backward(ctx, k, rho, gamma_bar)
        rho_adj[k] += drho
        acc.push_output_adjoint(k, out_adj)
    return acc, rho_adj


def _vjp_rx_phase(ctx: GradContext, widths: np.ndarray,
                  gbar: list[np.ndarray]) -> tuple[_Acc, np.ndarray]:
    """Backward through the receive-phase gradient computation."""
    acc = _Acc(ctx)
    rho_adj = np.zeros(len(widths))
    for k in range(ctx.bf.n_users):
        if not np.any(gbar[k]):
            continue
        rho = widths[k]
        gamma = ctx.weights(k, rho)
        w = ctx.bf.digital_rx[k]
        nu = w @ gamma @ ctx.hfz[k].conj().T
        acc.du_direct[k] += -2.0 * gbar[k] * (nu * ctx.u[k].conj()).real
        nbar = 1j * gbar[k] * ctx.u[k]
        acc.wbar[k] += nbar @ ctx.hfz[k] @ gamma.conj().T
        gamma_bar = w.conj().T @ nbar @ ctx.hfz[k]
        hfz_bar = nbar.conj().T @ (w @ gamma)
        acc.fbar += ctx.h.matrices[k].conj().T @ hfz_bar @ ctx.z.conj().T
        acc.zbar += ctx.hf[k].conj().T @ hfz_bar
        out_adj, drho = _weights_backward(ctx, k, rho, gamma_bar)
        rho_adj[k] += drho
        acc.push_output_adjoint(k, out_adj)
    return acc, rho_adj


def _vjp_tx_phase(ctx: GradContext, rho: float,
                  gbar: np.ndarray) -> tuple[_Acc, float]:
    """Backward through the transmit-phase gradient computation."""
    acc = _Acc(ctx)
    rho_adj = 0.0
    nf = ctx.grad_analog_tx_conj(rho)
    acc.df_direct += -2.0 * gbar * (nf * ctx.f.conj()).real
    nbar = 1j * gbar * ctx.f
    for k in range(ctx.bf.n_users):
        gamma = ctx.weights(k, rho)
        w = ctx.bf.digital_rx[k]
        acc.wbar[k] += ctx.uh[k] @ nbar @ ctx.z @ gamma.conj().T
        gamma_bar = w.conj().T @ ctx.uh[k] @ nbar @ ctx.z
        acc.zbar += nbar.conj().T @ (ctx.uh[k].conj().T @ (w @ gamma))
        acc.ubar[k] += (w @ gamma @ ctx.z.conj().T) @ nbar.conj().T \
            @ ctx.h.matrices[k].conj().T
        out_adj, drho = _weights_backward(ctx, k, rho, gamma_bar)
        rho_adj += drho
        acc.push_output_adjoint(k, out_adj)
    return acc, rho_adj


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

@dataclass
class StateGrads:
    """Adjoints of one beamformer state (conjugate for complex variables)."""

    digital_tx: list[np.ndarray]
    digital_rx: list[np.ndarray]
    rx_phases: list[np.ndarray]
    tx_phase: np.ndarray

    @classmethod
    def from_gradient_set(cls, gs) -> "StateGrads":
        return cls([g.copy() for g in gs.digital_tx],
                   [g.copy() for g in gs.digital_rx],
                   [np.asarray(g, dtype=float).copy() for g in gs.rx_phases],
                   np.asarray(gs.tx_phase, dtype=float).copy())

    def add(self, dp, dw, du, df):
        for k in range(len(self.digital_tx)):
            self.digital_tx[k] = self.digital_tx[k] + dp[k]
            self.digital_rx[k] = self.digital_rx[k] + dw[k]
            self.rx_phases[k] = self.rx_phases[k] + du[k]
        self.tx_phase = self.tx_phase + df


def normalize_state_grads(sg: StateGrads) -> StateGrads:
    """Rescale each variable group so per-user norms sum to the user count."""
    def group_scale(mats):
        total = sum(np.linalg.norm(m) for m in mats)
        return len(mats) / total if total > 0 else 1.0

    cp = group_scale(sg.digital_tx)
    cw = group_scale(sg.digital_rx)
    cu = group_scale(sg.rx_phases)
    nf = np.linalg.norm(sg.tx_phase)
    cf = 1.0 / nf if nf > 0 else 1.0
    return StateGrads([cp * g for g in sg.digital_tx],
                      [cw * g for g in sg.digital_rx],
                      [cu * g for g in sg.rx_phases],
                      cf * sg.tx_phase)


@dataclass
class LayerParamGrads:
    """Gradients of one layer's trainables (same shapes as LayerParams)."""

    step_tx: list[np.ndarray]
    offset_tx: list[np.ndarray]
    step_rx: list[np.ndarray]
    offset_rx: list[np.ndarray]
    step_rx_phase: list[np.ndarray]
    offset_rx_phase: list[np.ndarray]
    width_tx: np.ndarray
    width_rx: np.ndarray
    width_rx_phase: np.ndarray
    step_tx_phase: np.ndarray | None
    offset_tx_phase: np.ndarray | None
    width_tx_phase: float | None


def _canonicalize_backward(tape: LayerTape, sg: StateGrads,
                           min_gain: float = 1e-9) -> StateGrads:
    """Backward through the combiner canonicalization at layer entry.

    Each stream applied ``w' = (c/|c|) w / ||U^H w||`` with the gain
    ``c = w^H U H F p``.  The adjoint splits into the direct scaling path,
    the phase chain through c (touching the combiner, both analog stages and
    the precoder column) and the norm chain through ``U^H w``.
    """
    ctx = tape.entry_ctx
    bf = tape.entry_state
    pbar = [g.copy() for g in sg.digital_tx]
    wbar = []
    ubar = [np.zeros_like(u) for u in ctx.u]
    fbar = np.zeros_like(ctx.f)
    for k in range(bf.n_users):
        dk = ctx.streams[k]
        wbar_out = sg.digital_rx[k]
        wb = np.zeros_like(wbar_out)
        for i in range(dk):
            c = tape.entry_records[k]["gains"][i]
            n = tape.entry_records[k]["norms"][i]
            if abs(c) <= min_gain or n <= min_gain:
                wb[:, i] = wbar_out[:, i]
                continue
            tau = c / abs(c)
            w_col = bf.digital_rx[k][:, i]
            p_col = bf.digital_tx[k][:, i]
            wb[:, i] = (tau.conjugate() / n) * wbar_out[:, i]
            eta = np.vdot(w_col, wbar_out[:, i])          # w^H wbar'
            cbar = (eta - tau ** 2 * eta.conjugate()) / (2.0 * n * abs(c))
            nbar = -(2.0 / n ** 2) * (tau * eta.conjugate()).real
            # norm chain: n = ||U^H w||
            q = ctx.u[k].conj().T @ w_col
            wb[:, i] += (nbar / (2.0 * n)) * (ctx.u[k] @ q)
            ubar[k] += (nbar / (2.0 * n)) * np.outer(w_col, q.conj())
            # gain chain: c = w^H (U H F) p
            wb[:, i] += cbar.conjugate() * (ctx.txside[k] @ p_col)
            ubar[k] += cbar * np.outer(w_col, (ctx.hf[k] @ p_col).conj())
            fbar += cbar * np.outer(ctx.uh[k].conj().T @ w_col, p_col.conj())
            pbar[k][:, i] += cbar * (ctx.txside[k].conj().T @ w_col)
        wbar.append(wb)
    du = [phase_gradient(ctx.u[k], ubar[k]) + sg.rx_phases[k]
          for k in range(bf.n_users)]
    df = phase_gradient(ctx.f, fbar) + sg.tx_phase
    return StateGrads(pbar, wbar, du, df)


def _layer_backward(params: LayerParams, tape: LayerTape, upstream: StateGrads,
                    base: GdConfig, power_budget: float
                    ) -> tuple[LayerParamGrads, StateGrads]:
    n_users = len(upstream.digital_tx)

    # scaling: out = factor * prescale, factor = sqrt(P)/||F V||
    if tape.scale_factor is not None:
        s = tape.scale_factor
        n = tape.scale_norm
        pre = tape.prescale_state
        pbar1 = [s * g for g in upstream.digital_tx]
        ds = sum(2.0 * np.sum(g.conj() * p).real
                 for g, p in zip(upstream.digital_tx, pre.digital_tx))
        dn = -ds * math.sqrt(power_budget) / n ** 2
        f1 = pre.analog_tx
        v1 = pre.stacked_tx
        fv = f1 @ v1
        vbar = (dn / (2.0 * n)) * (f1.conj().T @ fv)
        offs = np.cumsum((0,) + tuple(p.shape[1] for p in pre.digital_tx))
        for k in range(n_users):
            pbar1[k] = pbar1[k] + vbar[:, offs[k]:offs[k + 1]]
        fbar = (dn / (2.0 * n)) * (fv @ v1.conj().T)
        tfbar1 = upstream.tx_phase + phase_gradient(f1, fbar)
    else:
        pbar1 = [g.copy() for g in upstream.digital_tx]
        tfbar1 = upstream.tx_phase.copy()
    wbar1 = [g.copy() for g in upstream.digital_rx]
    tubar1 = [g.copy() for g in upstream.rx_phases]

    # tx-phase half-step
    tfbar0 = tfbar1.copy()
    if tape.last_layer:
        gbar_tf = -base.step_tx_phase * tfbar1
        g_step_tf = g_off_tf = None
        rho_tf = base.kernel_width
    else:
        gbar_tf = -params.step_tx_phase * tfbar1
        g_step_tf = -tfbar1 * tape.grad_tx_phase
        g_off_tf = tfbar1.copy()
        rho_tf = params.width_tx_phase
    acc, drho_tf = _vjp_tx_phase(tape.ctx_tx_phase, rho_tf, gbar_tf)
    dp, dw, du, df = acc.state_deltas()
    for k in range(n_users):
        pbar1[k] = pbar1[k] + dp[k]
        wbar1[k] = wbar1[k] + dw[k]
        tubar1[k] = tubar1[k] + du[k]     # this context sees updated rx phases
    tfbar0 += df
    g_width_tf = None if tape.last_layer else drho_tf

    # rx-phase half-step
    tubar0 = [g.copy() for g in tubar1]
    gbar_tu = [-a * g for a, g in zip(params.step_rx_phase, tubar1)]
    g_step_tu = [-g * grad for g, grad in zip(tubar1, tape.grads_rx_phase)]
    g_off_tu = [g.copy() for g in tubar1]
    acc, g_width_tu = _vjp_rx_phase(tape.ctx_rx_phase, params.width_rx_phase,
                                    gbar_tu)
    dp, dw, du, df = acc.state_deltas()
    for k in range(n_users):
        pbar1[k] = pbar1[k] + dp[k]
        wbar1[k] = wbar1[k] + dw[k]
        tubar0[k] = tubar0[k] + du[k]
    tfbar0 += df

    # combiner half-step
    wbar0 = [g.copy() for g in wbar1]
    gbar_w = [-a.conj() * g for a, g in zip(params.step_rx, wbar1)]
    g_step_w = [-g.conj() * wb for g, wb in zip(tape.grads_rx, wbar1)]
    g_off_w = [g.copy() for g in wbar1]
    acc, g_width_w = _vjp_rx(tape.ctx_rx, params.width_rx, gbar_w)
    dp, dw, du, df = acc.state_deltas()
    for k in range(n_users):
        pbar1[k] = pbar1[k] + dp[k]
        wbar0[k] = wbar0[k] + dw[k]
        tubar0[k] = tubar0[k] + du[k]
    tfbar0 += df

    # precoder half-step
    pbar0 = [g.copy() for g in pbar1]
    gbar_p = [-a.conj() * g for a, g in zip(params.step_tx, pbar1)]
    g_step_p = [-g.conj() * pb for g, pb in zip(tape.grads_tx, pbar1)]
    g_off_p = [g.copy() for g in pbar1]
    acc, g_width_p = _vjp_tx(tape.ctx_tx, params.width_tx, gbar_p)
    dp, dw, du, df = acc.state_deltas()
    for k in range(n_users):
        pbar0[k] = pbar0[k] + dp[k]
        wbar0[k] = wbar0[k] + dw[k]
        tubar0[k] = tubar0[k] + du[k]
    tfbar0 += df

    sg = StateGrads(pbar0, wbar0, tubar0, tfbar0)
    sg = _canonicalize_backward(tape, sg)

    grads = LayerParamGrads(
        step_tx=g_step_p, offset_tx=g_off_p,
        step_rx=g_step_w, offset_rx=g_off_w,
        step_rx_phase=g_step_tu, offset_rx_phase=g_off_tu,
        width_tx=g_width_p, width_rx=g_width_w, width_rx_phase=g_width_tu,
        step_tx_phase=g_step_tf, offset_tx_phase=g_off_tf,
        width_tx_phase=g_width_tf)
    return grads, sg


def backward(net: UnfoldNetwork, tape: list[LayerTape], h: ChannelRealization,
             batch: SymbolBatch, normalize: bool = True
             ) -> tuple[list[LayerParamGrads], list[StateGrads]]:
    """Closed-form backprop: seed at the output loss, recurse layer by layer.

    Returns per-layer parameter gradients and the state-gradient sets at each
    layer input (deepest last).  With ``normalize`` the state gradients are
    rescaled between layers to keep them from vanishing; disable it when
    comparing against finite differences.
    """
    out_state = tape[-1].out_state
    seed = gradient_set(out_state, h, batch, net.base.kernel_width)
    sg = StateGrads.from_gradient_set(seed)
    if normalize:
        sg = normalize_state_grads(sg)

    param_grads: list[LayerParamGrads] = [None] * net.n_layers
    state_trace = []
    for l in range(net.n_layers - 1, -1, -1):
        grads, sg = _layer_backward(net.layers[l], tape[l], sg, net.base,
                                    net.sys.power_budget)
        param_grads[l] = grads
        if normalize:
            sg = normalize_state_grads(sg)
        state_trace.append(sg)
    return param_grads, state_trace


# ---------------------------------------------------------------------------
# the two-iteration offset construction
# ---------------------------------------------------------------------------

def theorem1_offsets(bf: HybridBeamformers, h: ChannelRealization,
                     batch: SymbolBatch, base: GdConfig) -> LayerParams:
    """Layer parameters that replay two descent iterations in one layer.

    Steps are the descent step sizes broadcast to matrices, widths are the
    descent kernel width, and each offset is the negated second-iteration
    update read off a two-iteration descent oracle on the same fixed channel
    and batch (run without power scaling, matching the idealized mapping).
    The exact-replay guarantee covers the precoder update.
    """
    bf1, _ = gd_step_recorded(bf, h, batch, base, scale=False)
    _, rec2 = gd_step_recorded(bf1, h, batch, base, scale=False)

    n_users = bf.n_users
    params = LayerParams(
        step_tx=[np.full(p.shape, base.step_tx, dtype=complex)
                 for p in bf.digital_tx],
        offset_tx=[-base.step_tx * g for g in rec2["digital_tx"]],
        step_rx=[np.full(w.shape, base.step_rx, dtype=complex)
                 for w in bf.digital_rx],
        offset_rx=[-base.step_rx * g for g in rec2["digital_rx"]],
        step_rx_phase=[np.full(t.shape, base.step_rx_phase)
                       for t in bf.rx_phases],
        offset_rx_phase=[-base.step_rx_phase * g for g in rec2["rx_phases"]],
        width_tx=np.full(n_users, base.kernel_width),
        width_rx=np.full(n_users, base.kernel_width),
        width_rx_phase=np.full(n_users, base.kernel_width),
        step_tx_phase=np.full(bf.tx_phase.shape, base.step_tx_phase),
        offset_tx_phase=-base.step_tx_phase * rec2["tx_phase"],
        width_tx_phase=base.kernel_width)
    return params


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _accumulate(total: list[LayerParamGrads] | None,
                delta: list[LayerParamGrads]) -> list[LayerParamGrads]:
    if total is None:
        return delta
    for t, d in zip(total, delta):
        for k in range(len(t.step_tx)):
            t.step_tx[k] += d.step_tx[k]
            t.offset_tx[k] += d.offset_tx[k]
            t.step_rx[k] += d.step_rx[k]
            t.offset_rx[k] += d.offset_rx[k]
            t.step_rx_phase[k] += d.step_rx_phase[k]
            t.offset_rx_phase[k] += d.offset_rx_phase[k]
        t.width_tx += d.width_tx
        t.width_rx += d.width_rx
        t.width_rx_phase += d.width_rx_phase
        if t.step_tx_phase is not None:
            t.step_tx_phase += d.step_tx_phase
            t.offset_tx_phase += d.offset_tx_phase
            t.width_tx_phase += d.width_tx_phase
    return total


def _sgd_update(net: UnfoldNetwork, grads: list[LayerParamGrads], lr: float,
                min_width: float, freeze_layers: int):
    for l, (params, g) in enumerate(zip(net.layers, grads)):
        if l < freeze_layers:
            continue
        for k in range(len(params.step_tx)):
            params.step_tx[k] -= lr * 2.0 * g.step_tx[k]
            params.offset_tx[k] -= lr * 2.0 * g.offset_tx[k]
            params.step_rx[k] -= lr * 2.0 * g.step_rx[k]
            params.offset_rx[k] -= lr * 2.0 * g.offset_rx[k]
            params.step_rx_phase[k] -= lr * g.step_rx_phase[k]
            params.offset_rx_phase[k] -= lr * g.offset_rx_phase[k]
        params.width_tx = np.maximum(params.width_tx - lr * g.width_tx, min_width)
        params.width_rx = np.maximum(params.width_rx - lr * g.width_rx, min_width)
        params.width_rx_phase = np.maximum(
            params.width_rx_phase - lr * g.width_rx_phase, min_width)
        if params.step_tx_phase is not None:
            params.step_tx_phase -= lr * g.step_tx_phase
            params.offset_tx_phase -= lr * g.offset_tx_phase
            params.width_tx_phase = max(
                params.width_tx_phase - lr * g.width_tx_phase, min_width)


def validation_loss(net: UnfoldNetwork, channels: Sequence[ChannelRealization],
                    batch: SymbolBatch) -> float:
    kernel = KernelConfig(rho=net.base.kernel_width,
                          sample_size=batch.sample_size)
    vals = []
    for h in channels:
        bf0 = init_channel_alignment(net.sys, h)
        bf, _ = forward(net, bf0, h, batch)
        vals.append(batch_loss(bf, h, batch, kernel))
    return float(np.mean(vals))


def train(net: UnfoldNetwork, train_channels: Sequence[ChannelRealization],
          val_channels: Sequence[ChannelRealization], cfg: TrainConfig,
          seed: int, spec: ConstellationSpec
          ) -> tuple[UnfoldNetwork, list[dict]]:
    """SGD over mini-batches of channels with a decaying step size.

    Per step: draw one symbol block and a channel mini-batch, forward and
    backward each channel from its aligned initialization, average the
    parameter gradients, update.  Stops when the validation loss stops
    improving (relative change below ``val_tolerance`` for ``val_patience``
    consecutive checks) or at ``max_iters``.
    """
    if not train_channels:
        raise SchemaError("training needs a non-empty channel set")
    net = net.copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA1]))
    block = effective_sample_size(spec, net.sys.streams_per_user,
                                  cfg.sample_size)
    val_batch = sample_symbol_batch(spec, net.sys.streams_per_user, block,
                                    int(rng.integers(2 ** 32)))
    trace = []
    best_val = math.inf
    stall = 0
    for t in range(cfg.max_iters):
        batch = sample_symbol_batch(spec, net.sys.streams_per_user, block,
                                    int(rng.integers(2 ** 32)))
        picks = rng.choice(len(train_channels),
                           size=min(cfg.batch_size, len(train_channels)),
                           replace=False)
        total = None
        train_loss = 0.0
        kernel = KernelConfig(rho=net.base.kernel_width, sample_size=block)
        for idx in picks:
            h = train_channels[int(idx)]
            bf0 = init_channel_alignment(net.sys, h)
            bf, tape = forward(net, bf0, h, batch)
            train_loss += batch_loss(bf, h, batch, kernel)
            grads, _ = backward(net, tape, h, batch, normalize=cfg.normalize)
            total = _accumulate(total, grads)
        inv = 1.0 / len(picks)
        for g in total:
            for k in range(len(g.step_tx)):
                g.step_tx[k] *= inv
                g.offset_tx[k] *= inv
                g.step_rx[k] *= inv
                g.offset_rx[k] *= inv
                g.step_rx_phase[k] *= inv
                g.offset_rx_phase[k] *= inv
            g.width_tx *= inv
            g.width_rx *= inv
            g.width_rx_phase *= inv
            if g.step_tx_phase is not None:
                g.step_tx_phase *= inv
                g.offset_tx_phase *= inv
                g.width_tx_phase *= inv
        lr = cfg.step_size(t)
        _sgd_update(net, total, lr, cfg.min_width, cfg.freeze_layers)

        row = {"iteration": t, "train_loss": train_loss / len(picks),
               "val_loss": math.nan, "step_size": lr}
        if val_channels and (t % cfg.val_every == cfg.val_every - 1
                             or t == cfg.max_iters - 1):
            val = validation_loss(net, val_channels, val_batch)
            row["val_loss"] = val
            if best_val - val > cfg.val_tolerance * max(abs(best_val), 1e-30):
                stall = 0
            else:
                stall += 1
            best_val = min(best_val, val)
            if stall >= cfg.val_patience:
                trace.append(row)
                break
        trace.append(row)
    return net, trace


def export_training_trace(path, trace: Sequence[dict]):
    """CSV trace: epoch, train loss, validation loss, step size."""
    import csv
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "step_size"])
        for row in trace:
            writer.writerow([row["iteration"], f"{row['train_loss']:.10g}",
                             "" if math.isnan(row["val_loss"])
                             else f"{row['val_loss']:.10g}",
                             f"{row['step_size']:.10g}"])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_MAGIC = b"MSERUNFD"
_VERSION = 1


def _write_array(f: BinaryIO, arr: np.ndarray, complex_valued: bool):
    if complex_valued:
        inter = np.empty(arr.shape + (2,), dtype="<f8")
        inter[..., 0] = arr.real
        inter[..., 1] = arr.imag
        f.write(inter.tobytes())
    else:
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(f: BinaryIO, shape: tuple[int, ...], complex_valued: bool
                ) -> np.ndarray:
    count = int(np.prod(shape)) * (2 if complex_valued else 1)
    raw = f.read(count * 8)
    if len(raw) != count * 8:
        raise FormatError("network file truncated")
    flat = np.frombuffer(raw, dtype="<f8")
    if complex_valued:
        flat = flat.reshape(shape + (2,))
        return (flat[..., 0] + 1j * flat[..., 1]).copy()
    return flat.reshape(shape).copy()


def save_network(path, net: UnfoldNetwork):
    """Self-describing binary: magic, version, dims, L, then parameters."""
    cfg = net.sys
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<IIII", cfg.n_users, cfg.n_tx, cfg.n_rf_tx,
                            net.n_layers))
        for k in range(cfg.n_users):
            f.write(struct.pack("<III", cfg.n_rx_per_user[k],
                                cfg.n_rf_rx_per_user[k],
                                cfg.streams_per_user[k]))
        f.write(struct.pack("<5d", net.base.step_tx, net.base.step_rx,
                            net.base.step_rx_phase, net.base.step_tx_phase,
                            net.base.kernel_width))
        for params in net.layers:
            for k in range(cfg.n_users):
                _write_array(f, params.step_tx[k], True)
                _write_array(f, params.offset_tx[k], True)
                _write_array(f, params.step_rx[k], True)
                _write_array(f, params.offset_rx[k], True)
                _write_array(f, params.step_rx_phase[k], False)
                _write_array(f, params.offset_rx_phase[k], False)
            _write_array(f, params.width_tx, False)
            _write_array(f, params.width_rx, False)
            _write_array(f, params.width_rx_phase, False)
            if params.has_tx_phase:
                _write_array(f, params.step_tx_phase, False)
                _write_array(f, params.offset_tx_phase, False)
                f.write(struct.pack("<d", params.width_tx_phase))


def load_network(path, cfg: SystemConfig) -> UnfoldNetwork:
    """Read a network written by :func:`save_network`; dims must match."""
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise FormatError("not a trained-network file (bad magic)")
        version, = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise FormatError(f"unsupported network format version {version}")
        n_users, n_tx, n_rf_tx, n_layers = struct.unpack("<IIII", f.read(16))
        if (n_users, n_tx, n_rf_tx) != (cfg.n_users, cfg.n_tx, cfg.n_rf_tx):
            raise FormatError("network file dimensions do not match the config")
        for k in range(n_users):
            dims = struct.unpack("<III", f.read(12))
            if dims != (cfg.n_rx_per_user[k], cfg.n_rf_rx_per_user[k],
                        cfg.streams_per_user[k]):
                raise FormatError(f"user {k} dimensions do not match the config")
        s_tx, s_rx, s_rp, s_tp, rho = struct.unpack("<5d", f.read(40))
        base = GdConfig(step_tx=s_tx, step_rx=s_rx, step_rx_phase=s_rp,
                        step_tx_phase=s_tp, kernel_width=rho)
        layers = []
        for l in range(n_layers):
            last = l == n_layers - 1
            st, ot, sr, orx, srp, orp = [], [], [], [], [], []
            for k in range(n_users):
                dk = cfg.streams_per_user[k]
                rr = cfg.n_rf_rx_per_user[k]
                st.append(_read_array(f, (n_rf_tx, dk), True))
                ot.append(_read_array(f, (n_rf_tx, dk), True))
                sr.append(_read_array(f, (rr, dk), True))
                orx.append(_read_array(f, (rr, dk), True))
                srp.append(_read_array(f, (rr, cfg.n_rx_per_user[k]), False))
                orp.append(_read_array(f, (rr, cfg.n_rx_per_user[k]), False))
            wt = _read_array(f, (n_users,), False)
            wr = _read_array(f, (n_users,), False)
            wrp = _read_array(f, (n_users,), False)
            if not last:
                stp = _read_array(f, (n_tx, n_rf_tx), False)
                otp = _read_array(f, (n_tx, n_rf_tx), False)
                wtp, = struct.unpack("<d", f.read(8))
            else:
                stp = otp = wtp = None
            layers.append(LayerParams(st, ot, sr, orx, srp, orp, wt, wr, wrp,
                                      stp, otp, wtp))
        if f.read(1):
            raise FormatError("network file has trailing bytes")
    return UnfoldNetwork(layers, base, cfg)


# ---------------------------------------------------------------------------
# packing (finite-difference oracle support)
# ---------------------------------------------------------------------------

def pack_parameters(net: UnfoldNetwork) -> np.ndarray:
    parts = []
    for params in net.layers:
        for k in range(len(params.step_tx)):
            for arr in (params.step_tx[k], params.offset_tx[k],
                        params.step_rx[k], params.offset_rx[k]):
                parts += [arr.real.ravel(), arr.imag.ravel()]
            parts += [params.step_rx_phase[k].ravel(),
                      params.offset_rx_phase[k].ravel()]
        parts += [params.width_tx, params.width_rx, params.width_rx_phase]
        if params.has_tx_phase:
            parts += [params.step_tx_phase.ravel(),
                      params.offset_tx_phase.ravel(),
                      np.array([params.width_tx_phase])]
    return np.concatenate(parts)


def unpack_parameters(vec: np.ndarray, template: UnfoldNetwork) -> UnfoldNetwork:
    net = template.copy()
    pos = 0

    def take(n):
        nonlocal pos
        out = vec[pos:pos + n]
        pos += n
        return out

    for params in net.layers:
        for k in range(len(params.step_tx)):
            for name in ("step_tx", "offset_tx", "step_rx", "offset_rx"):
                arr = getattr(params, name)[k]
                re = take(arr.size).reshape(arr.shape)
                im = take(arr.size).reshape(arr.shape)
                getattr(params, name)[k] = re + 1j * im
            for name in ("step_rx_phase", "offset_rx_phase"):
                arr = getattr(params, name)[k]
                getattr(params, name)[k] = take(arr.size).reshape(arr.shape).copy()
        params.width_tx = take(params.width_tx.size).copy()
        params.width_rx = take(params.width_rx.size).copy()
        params.width_rx_phase = take(params.width_rx_phase.size).copy()
        if params.has_tx_phase:
            shp = params.step_tx_phase.shape
            params.step_tx_phase = take(params.step_tx_phase.size).reshape(shp).copy()
            params.offset_tx_phase = take(params.offset_tx_phase.size).reshape(shp).copy()
            params.width_tx_phase = float(take(1)[0])
    assert pos == len(vec)
    return net


def pack_parameter_grads(grads: list[LayerParamGrads]) -> np.ndarray:
    """Real-coordinate gradient vector matching :func:`pack_parameters`."""
    parts = []
    for g in grads:
        for k in range(len(g.step_tx)):
            for arr in (g.step_tx[k], g.offset_tx[k], g.step_rx[k],
                        g.offset_rx[k]):
                parts += [2.0 * arr.real.ravel(), 2.0 * arr.imag.ravel()]
            parts += [g.step_rx_phase[k].ravel(), g.offset_rx_phase[k].ravel()]
        parts += [g.width_tx, g.width_rx, g.width_rx_phase]
        if g.step_tx_phase is not None:
            parts += [g.step_tx_phase.ravel(), g.offset_tx_phase.ravel(),
                      np.array([g.width_tx_phase])]
    return np.concatenate(parts)
