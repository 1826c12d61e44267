"""Link-level evaluation: Monte-Carlo SER, exact SER, experiment runners.

The Monte-Carlo path draws symbol vectors and noise, runs the receive chain
and counts per-stream symbol errors adaptively (until enough errors or the
trial cap).  The analytical path enumerates every interference combination
and integrates the exact Gaussian tails, which for QPSK is the true SER; the
two are cross-validated in the tests.  Experiment runners reproduce the
reference sweeps (SNR, imperfect CSI, transfer, generalization, layer/batch/
step sweeps) at configurable scale, emitting one canonical CSV per run plus
an SVG rendering.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .channel import (ChannelRealization, ClusteredChannelConfig, CsiErrorConfig,
                      apply_csi_error, generate_dataset)
from .config import (ConstellationSpec, SystemConfig, default_kernel_width,
                     noise_std_for_snr)
from .errors import NumericError, SchemaError
from .gd import GdConfig, init_channel_alignment, run_gd
from .mser import tail_integral, true_noise_width
from .transceiver import (HybridBeamformers, detect_array,
                          exhaustive_conditioned_batch, rotate_all_streams,
                          sample_symbol_batch, stream_gain)
from .unfold import (TrainConfig, UnfoldNetwork, forward, gd_specialized_network,
                     randomized_network, train)

SQRT_PI = math.sqrt(math.pi)

CSV_COLUMNS = ["method", "snr_db", "sigma_h", "layers", "iterations",
               "ser", "std_error", "trials"]


@dataclass(frozen=True)
class SerEstimate:
    """Monte-Carlo SER with its binomial standard error."""

    ser: float
    symbol_errors: int
    trials: int
    std_error: float

    @classmethod
    def from_counts(cls, errors: int, trials: int) -> "SerEstimate":
        ser = errors / trials
        return cls(ser=ser, symbol_errors=errors, trials=trials,
                   std_error=math.sqrt(max(ser * (1.0 - ser), 0.0) / trials))


def monte_carlo_ser(bf: HybridBeamformers, h: ChannelRealization,
                    spec: ConstellationSpec, sys_cfg: SystemConfig,
                    seed: int, max_trials: int = 10_000_000,
                    min_errors: int = 200,
                    block: int = 4096) -> SerEstimate:
    """Count stream-symbol errors over random symbols and noise.

    Runs in deterministic seeded blocks until ``min_errors`` errors are seen
    or ``max_trials`` symbol vectors are simulated.  ``trials`` in the result
    counts stream decisions (vectors times streams).  For M-QAM the state is
    rotated first so threshold detection applies.
    """
    if max_trials < 1:
        raise SchemaError("max_trials must be >= 1")
    if spec.kind == "mqam":
        bf = rotate_all_streams(bf, h, sys_cfg.streams_per_user)

    total = sys_cfg.total_streams
    points = spec.points()
    # per-user fixed products: signal map and noise mixer
    sig, mix, gains = [], [], []
    v = bf.stacked_tx
    for k in range(sys_cfg.n_users):
        chain = bf.digital_rx[k].conj().T @ bf.analog_rx(k)
        sig.append(chain @ h.matrices[k] @ bf.analog_tx @ v)
        mix.append(chain)
        if spec.kind == "mqam":
            gains.append(np.array([stream_gain(bf, h, i, k).real
                                   for i in range(sys_cfg.streams_per_user[k])]))
    offs = np.cumsum((0,) + tuple(sys_cfg.streams_per_user))

    errors = 0
    decisions = 0
    done_vectors = 0
    block_idx = 0
    while done_vectors < max_trials and errors < min_errors:
        n = min(block, max_trials - done_vectors)
        rng = np.random.default_rng(np.random.SeedSequence([seed, block_idx]))
        idx = rng.integers(0, len(points), size=(n, total))
        symbols = points[idx]
        for k in range(sys_cfg.n_users):
            n_rx = sys_cfg.n_rx_per_user[k]
            noise = (rng.standard_normal((n_rx, n)) +
                     1j * rng.standard_normal((n_rx, n))) \
                * (sys_cfg.noise_std_per_user[k] / math.sqrt(2.0))
            received = sig[k] @ symbols.T + mix[k] @ noise
            sent = symbols[:, offs[k]:offs[k + 1]].T
            if spec.kind == "qpsk":
                detected = detect_array(spec, received)
            else:
                detected = detect_array(spec, received, gains[k][:, None])
            errors += int(np.count_nonzero(detected != sent))
            decisions += sent.size
        done_vectors += n
        block_idx += 1
    return SerEstimate.from_counts(errors, decisions)


def analytical_ser(bf: HybridBeamformers, h: ChannelRealization,
                   sys_cfg: SystemConfig, spec: ConstellationSpec
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-stream SER bound and product-corrected SER.

    Enumerates all interference combinations per stream with the true
    per-stream noise width; for QPSK this is the exact symbol error
    probability.  Subject to the enumeration guard for large systems.
    """
    if spec.kind == "mqam":
        bf = rotate_all_streams(bf, h, sys_cfg.streams_per_user)
    bound, corrected = [], []
    v = bf.stacked_tx
    for k in range(sys_cfg.n_users):
        chain = bf.digital_rx[k].conj().T @ bf.analog_rx(k) \
            @ h.matrices[k] @ bf.analog_tx @ v
        for i in range(sys_cfg.streams_per_user[k]):
            d = sys_cfg.stream_index(i, k)
            desired = complex(1, 1) if spec.kind == "qpsk" \
                else complex(spec.levels[-1], spec.levels[-1])
            batch = exhaustive_conditioned_batch(
                spec, sys_cfg.streams_per_user, d, desired)
            clean = chain[i, :] @ batch.vectors.T
            width = true_noise_width(bf, sys_cfg, i, k)
            nb = batch.sample_size
            if spec.kind == "qpsk":
                args_r = -clean.real * desired.real / (math.sqrt(2) * width)
                args_i = -clean.imag * desired.imag / (math.sqrt(2) * width)
                pr = float(np.sum(tail_integral(args_r))) / (nb * SQRT_PI)
                pi = float(np.sum(tail_integral(args_i))) / (nb * SQRT_PI)
            else:
                c = float(stream_gain(bf, h, i, k).real)
                weight = spec.side_weight
                args_r = (c * (desired.real - 1.0) - clean.real) \
                    / (math.sqrt(2) * width)
                args_i = (c * (desired.imag - 1.0) - clean.imag) \
                    / (math.sqrt(2) * width)
                pr = weight * float(np.sum(tail_integral(args_r))) / (nb * SQRT_PI)
                pi = weight * float(np.sum(tail_integral(args_i))) / (nb * SQRT_PI)
            bound.append(pr + pi)
            corrected.append(pr + pi - pr * pi)
    return np.array(bound), np.array(corrected)


def finite_diff_gradient(fn: Callable[[np.ndarray], float], x0: np.ndarray,
                         step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one real coordinate
    at a time."""
    if step <= 0:
        raise SchemaError("finite-difference step must be positive")
    grad = np.zeros_like(x0, dtype=float)
    for j in range(len(x0)):
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += step
        xm[j] -= step
        fp, fm = fn(xp), fn(xm)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("loss is not finite at a perturbed point")
        grad[j] = (fp - fm) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# experiment harness
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    """One experiment scenario with its grids, scale knobs and output paths."""

    scenario: str
    output_dir: str
    seed: int = 0
    # system under test
    n_tx: int = 16
    n_rf_tx: int = 4
    n_users: int = 2
    n_rx_per_user: int = 4
    n_rf_rx_per_user: int = 2
    streams_per_user: int = 1
    constellation: str = "qpsk"
    qam_order: int = 16
    # channel model
    n_clusters: int = 2
    n_rays: int = 3
    # grids
    snr_db: tuple[float, ...] = (5.0, 15.0, 25.0)
    sigma_h: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2)
    layer_grid: tuple[int, ...] = (3, 6, 9)
    batch_grid: tuple[int, ...] = (5, 20, 50)
    step_grid: tuple[float, ...] = (0.005, 0.02, 0.08)
    # scale knobs
    n_train_channels: int = 60
    n_val_channels: int = 10
    n_eval_channels: int = 8
    gd_iters: int = 150
    gd_restarts: int = 3
    unfold_layers: int = 8
    train_iters: int = 60
    train_batch: int = 10
    sample_size: int = 16
    mc_max_trials: int = 200_000
    mc_min_errors: int = 200
    generalization_users: int = 1
    transfer_freeze: int | None = None
    baseline_csv: str | None = None
    threads: int = 1

    def __post_init__(self):
        known = {"snr_sweep", "imperfect_csi", "transfer", "generalization",
                 "layer_sweep", "batch_sweep", "step_sweep"}
        if self.scenario not in known:
            raise SchemaError(f"unknown scenario {self.scenario!r}")
        for grid in (self.snr_db, self.sigma_h, self.layer_grid,
                     self.batch_grid, self.step_grid):
            if len(grid) == 0:
                raise SchemaError("experiment grids must be non-empty")

    def system(self, noise_std: float) -> SystemConfig:
        return SystemConfig(
            n_tx=self.n_tx, n_rf_tx=self.n_rf_tx, n_users=self.n_users,
            n_rx_per_user=self.n_rx_per_user,
            n_rf_rx_per_user=self.n_rf_rx_per_user,
            streams_per_user=self.streams_per_user,
            noise_std_per_user=noise_std)

    def spec(self) -> ConstellationSpec:
        return ConstellationSpec(self.constellation, self.qam_order)

    def channel_config(self, n_users: int | None = None) -> ClusteredChannelConfig:
        k = self.n_users if n_users is None else n_users
        return ClusteredChannelConfig(
            n_clusters=self.n_clusters, n_rays=self.n_rays, n_tx=self.n_tx,
            n_rx_per_user=(self.n_rx_per_user,) * k)


def _map_channels(fn, channels, threads: int):
    if threads <= 1:
        return [fn(i, h) for i, h in enumerate(channels)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda pair: fn(*pair), enumerate(channels)))


def measure_state_ser(bf: HybridBeamformers, h: ChannelRealization,
                      sys_cfg: SystemConfig, spec: ConstellationSpec,
                      seed: int, spec_exp: ExperimentSpec | None = None,
                      eval_channel: ChannelRealization | None = None
                      ) -> SerEstimate:
    """SER of a designed state, analytically when enumerable, else by MC."""
    target = eval_channel if eval_channel is not None else h
    nb = spec.conditioned_count(sys_cfg.total_streams)
    if spec.kind == "qpsk" and nb <= 2 ** 16:
        _, corrected = analytical_ser(bf, target, sys_cfg, spec)
        ser = float(np.mean(corrected))
        return SerEstimate(ser=ser, symbol_errors=0, trials=0, std_error=0.0)
    max_trials = spec_exp.mc_max_trials if spec_exp else 200_000
    min_err = spec_exp.mc_min_errors if spec_exp else 200
    return monte_carlo_ser(bf, target, spec, sys_cfg, seed,
                           max_trials=max_trials, min_errors=min_err)


def gd_design_ser(channels: Sequence[ChannelRealization],
                  sys_cfg: SystemConfig, spec: ConstellationSpec,
                  gd_cfg: GdConfig, seed: int, exp: ExperimentSpec | None = None,
                  design_channels: Sequence[ChannelRealization] | None = None,
                  threads: int = 1) -> tuple[float, list[float]]:
    """Run the descent per channel and average the resulting SER.

    ``design_channels`` (e.g. CSI-impaired estimates) default to the
    evaluation channels themselves.
    """
    designs = design_channels if design_channels is not None else channels

    def one(i, h_eval):
        bf, _ = run_gd(None, designs[i], gd_cfg, seed + i, sys_cfg, spec)
        est = measure_state_ser(bf, designs[i], sys_cfg, spec, seed + i,
                                exp, eval_channel=h_eval)
        return est.ser

    sers = _map_channels(one, channels, threads)
    return float(np.mean(sers)), sers


def unfold_design_ser(net: UnfoldNetwork, channels: Sequence[ChannelRealization],
                      spec: ConstellationSpec, seed: int,
                      exp: ExperimentSpec | None = None,
                      design_channels: Sequence[ChannelRealization] | None = None,
                      sample_seed: int = 0x5A11, threads: int = 1,
                      live_streams: int | None = None
                      ) -> tuple[float, list[float]]:
    """Forward-only evaluation of a trained network over channels."""
    from .transceiver import effective_sample_size

    designs = design_channels if design_channels is not None else channels
    block = effective_sample_size(spec, net.sys.streams_per_user,
                                  net.base.sample_size)
    batch = sample_symbol_batch(spec, net.sys.streams_per_user, block,
                                sample_seed)

    def one(i, h_eval):
        bf0 = init_channel_alignment(net.sys, designs[i])
        bf, _ = forward(net, bf0, designs[i], batch)
        est = measure_state_ser(bf, designs[i], net.sys, spec, seed + i,
                                exp, eval_channel=h_eval)
        return est.ser

    sers = _map_channels(one, channels, threads)
    return float(np.mean(sers)), sers


def measure_state_ser_streams(bf: HybridBeamformers, h: ChannelRealization,
                              sys_cfg: SystemConfig, spec: ConstellationSpec,
                              streams: int) -> float:
    """Mean SER over the first ``streams`` streams only (zero-padded runs)."""
    _, corrected = analytical_ser(bf, h, sys_cfg, spec)
    return float(np.mean(corrected[:streams]))


def write_results_csv(path, rows: Sequence[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in CSV_COLUMNS})


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_results_svg(path, rows: Sequence[dict], x_key: str,
                     title: str = ""):
    """Log-scale SER line plot, one line per method; CSV stays canonical."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = sorted({r["method"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for m in methods:
        pts = sorted(((float(r[x_key]), float(r["ser"]))
                      for r in rows if r["method"] == m and r.get("ser", "") != ""))
        if not pts:
            continue
        xs, ys = zip(*pts)
        ax.semilogy(xs, ys, marker="o", label=m)
    ax.set_xlabel(x_key)
    ax.set_ylabel("SER")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _train_network(exp: ExperimentSpec, sys_cfg: SystemConfig,
                   spec: ConstellationSpec, gd_cfg: GdConfig,
                   train_set, val_set, seed: int,
                   n_layers: int | None = None,
                   batch_size: int | None = None,
                   step_base: float | None = None,
                   start: UnfoldNetwork | None = None,
                   freeze_layers: int = 0) -> tuple[UnfoldNetwork, list[dict]]:
    layers = n_layers if n_layers is not None else exp.unfold_layers
    net0 = start if start is not None else randomized_network(
        sys_cfg, gd_cfg, layers, seed)
    cfg = TrainConfig(
        batch_size=batch_size if batch_size is not None else exp.train_batch,
        max_iters=exp.train_iters,
        step_base=step_base if step_base is not None else 0.02,
        sample_size=exp.sample_size,
        freeze_layers=freeze_layers)
    return train(net0, train_set, val_set, cfg, seed, spec)


def _gd_config_for(exp: ExperimentSpec, noise_std: float,
                   restarts: int | None = None) -> GdConfig:
    return GdConfig(max_iters=exp.gd_iters,
                    restarts=restarts if restarts is not None else exp.gd_restarts,
                    sample_size=exp.sample_size,
                    kernel_width=default_kernel_width(noise_std))


def run_experiment(exp: ExperimentSpec) -> list[dict]:
    """Execute one scenario, writing results.csv and results.svg."""
    out = Path(exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = exp.spec()
    rows: list[dict] = []
    x_key = "snr_db"

    if exp.scenario in ("snr_sweep", "transfer"):
        transfer = exp.scenario == "transfer"
        model_eval = "gaussian" if transfer else "clustered"
        ch_cfg = exp.channel_config()
        train_clustered = generate_dataset(ch_cfg, exp.seed, exp.n_train_channels)
        val_clustered = generate_dataset(ch_cfg, exp.seed + 1, exp.n_val_channels)
        eval_set = generate_dataset(ch_cfg, exp.seed + 2, exp.n_eval_channels,
                                    model=model_eval)
        retrain = generate_dataset(ch_cfg, exp.seed + 3, exp.n_train_channels,
                                   model="gaussian") if transfer else None
        val_retrain = generate_dataset(ch_cfg, exp.seed + 4, exp.n_val_channels,
                                       model="gaussian") if transfer else None
        for snr in exp.snr_db:
            noise = noise_std_for_snr(snr)
            sys_cfg = exp.system(noise)
            gd_cfg = _gd_config_for(exp, noise)
            ser_gd, _ = gd_design_ser(eval_set, sys_cfg, spec, gd_cfg,
                                      exp.seed, exp, threads=exp.threads)
            rows.append({"method": "gd", "snr_db": snr, "sigma_h": 0.0,
                         "layers": "", "iterations": exp.gd_iters,
                         "ser": ser_gd, "std_error": 0.0, "trials": 0})
            net, trace = _train_network(exp, sys_cfg, spec, gd_cfg,
                                        train_clustered, val_clustered, exp.seed)
            if transfer:
                freeze = exp.transfer_freeze if exp.transfer_freeze is not None \
                    else max(exp.unfold_layers * 2 // 3, 1)
                net, trace = _train_network(exp, sys_cfg, spec, gd_cfg, retrain,
                                            val_retrain, exp.seed + 9,
                                            start=net, freeze_layers=freeze)
            ser_nn, _ = unfold_design_ser(net, eval_set, spec, exp.seed, exp,
                                          threads=exp.threads)
            rows.append({"method": "unfold_transfer" if transfer else "unfold",
                         "snr_db": snr, "sigma_h": 0.0,
                         "layers": net.n_layers, "iterations": len(trace),
                         "ser": ser_nn, "std_error": 0.0, "trials": 0})

    elif exp.scenario == "imperfect_csi":
        snr = exp.snr_db[0]
        noise = noise_std_for_snr(snr)
        sys_cfg = exp.system(noise)
        gd_cfg = _gd_config_for(exp, noise)
        ch_cfg = exp.channel_config()
        train_set = generate_dataset(ch_cfg, exp.seed, exp.n_train_channels)
        val_set = generate_dataset(ch_cfg, exp.seed + 1, exp.n_val_channels)
        eval_set = generate_dataset(ch_cfg, exp.seed + 2, exp.n_eval_channels)
        net, trace = _train_network(exp, sys_cfg, spec, gd_cfg,
                                    train_set, val_set, exp.seed)
        x_key = "sigma_h"
        for sh in exp.sigma_h:
            estimates = [apply_csi_error(h, CsiErrorConfig(sh), exp.seed + 77 + i)
                         for i, h in enumerate(eval_set)]
            ser_gd, _ = gd_design_ser(eval_set, sys_cfg, spec, gd_cfg, exp.seed,
                                      exp, design_channels=estimates,
                                      threads=exp.threads)
            rows.append({"method": "gd", "snr_db": snr, "sigma_h": sh,
                         "layers": "", "iterations": exp.gd_iters,
                         "ser": ser_gd, "std_error": 0.0, "trials": 0})
            ser_nn, _ = unfold_design_ser(net, eval_set, spec, exp.seed, exp,
                                          design_channels=estimates,
                                          threads=exp.threads)
            rows.append({"method": "unfold", "snr_db": snr, "sigma_h": sh,
                         "layers": net.n_layers, "iterations": len(trace),
                         "ser": ser_nn, "std_error": 0.0, "trials": 0})

    elif exp.scenario == "generalization":
        snr = exp.snr_db[0]
        noise = noise_std_for_snr(snr)
        sys_big = exp.system(noise)
        gd_cfg = _gd_config_for(exp, noise)
        ch_big = exp.channel_config()
        train_set = generate_dataset(ch_big, exp.seed, exp.n_train_channels)
        val_set = generate_dataset(ch_big, exp.seed + 1, exp.n_val_channels)
        eval_big = generate_dataset(ch_big, exp.seed + 2, exp.n_eval_channels)
        net, trace = _train_network(exp, sys_big, spec, gd_cfg,
                                    train_set, val_set, exp.seed)

        ser_gd_big, _ = gd_design_ser(eval_big, sys_big, spec, gd_cfg,
                                      exp.seed, exp, threads=exp.threads)
        ser_net_big, _ = unfold_design_ser(net, eval_big, spec, exp.seed, exp,
                                           threads=exp.threads)
        rows.append({"method": "gd_full", "snr_db": snr, "sigma_h": 0.0,
                     "layers": "", "iterations": exp.gd_iters,
                     "ser": ser_gd_big, "std_error": 0.0, "trials": 0})
        rows.append({"method": "unfold_full", "snr_db": snr, "sigma_h": 0.0,
                     "layers": net.n_layers, "iterations": len(trace),
                     "ser": ser_net_big, "std_error": 0.0, "trials": 0})

        k_small = exp.generalization_users
        if not 1 <= k_small <= exp.n_users:
            raise SchemaError("generalization_users must be in [1, n_users]")
        ch_small = exp.channel_config(k_small)
        eval_small = generate_dataset(ch_small, exp.seed + 5,
                                      exp.n_eval_channels)
        sys_small = SystemConfig(
            n_tx=exp.n_tx, n_rf_tx=exp.n_rf_tx, n_users=k_small,
            n_rx_per_user=exp.n_rx_per_user,
            n_rf_rx_per_user=exp.n_rf_rx_per_user,
            streams_per_user=exp.streams_per_user, noise_std_per_user=noise)
        ser_gd_small, _ = gd_design_ser(eval_small, sys_small, spec, gd_cfg,
                                        exp.seed, exp, threads=exp.threads)
        rows.append({"method": "gd_small", "snr_db": snr, "sigma_h": 0.0,
                     "layers": "", "iterations": exp.gd_iters,
                     "ser": ser_gd_small, "std_error": 0.0, "trials": 0})

        padded = [zero_pad_channel(h, exp.n_users) for h in eval_small]
        live = k_small * exp.streams_per_user
        from .transceiver import effective_sample_size
        batch = sample_symbol_batch(
            spec, net.sys.streams_per_user,
            effective_sample_size(spec, net.sys.streams_per_user,
                                  net.base.sample_size), 0x5A11)
        sers = []
        for hp in padded:
            bf0 = init_channel_alignment(net.sys, hp)
            bf, _ = forward(net, bf0, hp, batch)
            sers.append(measure_state_ser_streams(bf, hp, net.sys, spec, live))
        rows.append({"method": "unfold_padded", "snr_db": snr, "sigma_h": 0.0,
                     "layers": net.n_layers, "iterations": len(trace),
                     "ser": float(np.mean(sers)), "std_error": 0.0, "trials": 0})

    elif exp.scenario in ("layer_sweep", "batch_sweep", "step_sweep"):
        snr = exp.snr_db[0]
        noise = noise_std_for_snr(snr)
        sys_cfg = exp.system(noise)
        gd_cfg = _gd_config_for(exp, noise)
        ch_cfg = exp.channel_config()
        train_set = generate_dataset(ch_cfg, exp.seed, exp.n_train_channels)
        val_set = generate_dataset(ch_cfg, exp.seed + 1, exp.n_val_channels)
        eval_set = generate_dataset(ch_cfg, exp.seed + 2, exp.n_eval_channels)
        x_key = "layers"
        if exp.scenario == "layer_sweep":
            grid = [("unfold", {"n_layers": int(v)}, int(v)) for v in exp.layer_grid]
        elif exp.scenario == "batch_sweep":
            grid = [(f"unfold_batch{int(v)}", {"batch_size": int(v)},
                     exp.unfold_layers) for v in exp.batch_grid]
        else:
            grid = [(f"unfold_step{v:g}", {"step_base": float(v)},
                     exp.unfold_layers) for v in exp.step_grid]
        for method, kwargs, layers in grid:
            net, trace = _train_network(exp, sys_cfg, spec, gd_cfg, train_set,
                                        val_set, exp.seed, **kwargs)
            ser_nn, _ = unfold_design_ser(net, eval_set, spec, exp.seed, exp,
                                          threads=exp.threads)
            rows.append({"method": method, "snr_db": snr, "sigma_h": 0.0,
                         "layers": layers, "iterations": len(trace),
                         "ser": ser_nn, "std_error": 0.0, "trials": 0})

    if exp.baseline_csv:
        for row in read_results_csv(exp.baseline_csv):
            missing = set(CSV_COLUMNS) - set(row)
            if missing:
                raise SchemaError(
                    f"baseline CSV lacks columns {sorted(missing)}")
            rows.append(row)

    write_results_csv(out / "results.csv", rows)
    plot_results_svg(out / "results.svg", rows, x_key, title=exp.scenario)
    return rows


def zero_pad_channel(h: ChannelRealization, n_users: int) -> ChannelRealization:
    """Extend a realization to ``n_users`` by all-zero channel matrices."""
    if h.n_users > n_users:
        raise SchemaError("cannot pad to fewer users than the realization has")
    template = h.matrices[0]
    mats = list(h.matrices)
    while len(mats) < n_users:
        mats.append(np.zeros_like(template))
    return ChannelRealization(tuple(mats), seed=h.seed, model_tag=h.model_tag)
