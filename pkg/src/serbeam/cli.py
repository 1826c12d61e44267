"""Command-line entry point.

One declarative YAML document describes the system, channel model, descent,
network and experiment; subcommands pick the parts they need.  Flags cover
only paths, seed, thread count and verbosity so experiment definitions stay
diffable.  Every command echoes the fully resolved configuration into the
output directory and is reproducible from (config, seed).

Exit codes: 0 success, 2 configuration/schema error, 3 I/O or file-format
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import channel as chan
from . import evaluation as ev
from . import unfold as uf
from .config import (ConstellationSpec, SystemConfig, default_kernel_width,
                     noise_std_for_snr)
from .errors import FormatError, NumericError, SchemaError
from .gd import GdConfig, export_trace, run_gd
from .mser import KernelConfig
from .transceiver import sample_symbol_batch

EXIT_SCHEMA = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _section(doc: dict, name: str, allowed: set[str], required: bool = False) -> dict:
    sec = doc.get(name)
    if sec is None:
        if required:
            raise SchemaError(f"config is missing the {name!r} section")
        return {}
    if not isinstance(sec, dict):
        raise SchemaError(f"config section {name!r} must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise SchemaError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return sec


_TOP_KEYS = {"system", "constellation", "channel", "gd", "unfold",
             "experiment", "seed", "output_dir"}
_SYSTEM_KEYS = {"n_tx", "n_rf_tx", "n_users", "n_rx_per_user",
                "n_rf_rx_per_user", "streams_per_user", "power_budget",
                "snr_db", "noise_std"}
_CONST_KEYS = {"kind", "order"}
_CHANNEL_KEYS = {"n_clusters", "n_rays", "ray_spread_deg", "model",
                 "train_count", "test_count", "val_count"}
_GD_KEYS = {"step_tx", "step_rx", "step_rx_phase", "step_tx_phase",
            "max_iters", "tolerance", "sample_size", "kernel_width",
            "restarts"}
_UNFOLD_KEYS = {"layers", "batch_size", "max_iters", "step_base",
                "step_decay_every", "step_decay_factor", "sample_size",
                "val_every", "val_tolerance", "val_patience", "freeze_layers"}
_EXP_KEYS = {"scenario", "snr_db", "sigma_h", "layer_grid", "batch_grid",
             "step_grid", "n_train_channels", "n_val_channels",
             "n_eval_channels", "gd_iters", "gd_restarts", "unfold_layers",
             "train_iters", "train_batch", "sample_size", "mc_max_trials",
             "mc_min_errors", "generalization_users", "transfer_freeze",
             "baseline_csv"}


class RunConfig:
    """The validated, fully materialized configuration document."""

    def __init__(self, doc: dict):
        if not isinstance(doc, dict):
            raise SchemaError("the config document must be a mapping")
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise SchemaError(f"unknown top-level keys: {sorted(unknown)}")
        self.seed = int(doc.get("seed", 0))
        self.output_dir = str(doc.get("output_dir", "out"))

        sysd = _section(doc, "system", _SYSTEM_KEYS, required=True)
        if "noise_std" in sysd and "snr_db" in sysd:
            raise SchemaError("give either snr_db or noise_std, not both")
        power = float(sysd.get("power_budget", 1.0))
        if "noise_std" in sysd:
            noise = float(sysd["noise_std"])
        else:
            noise = noise_std_for_snr(float(sysd.get("snr_db", 15.0)), power)
        self.system = SystemConfig(
            n_tx=int(sysd.get("n_tx", 16)),
            n_rf_tx=int(sysd.get("n_rf_tx", 4)),
            n_users=int(sysd.get("n_users", 2)),
            n_rx_per_user=sysd.get("n_rx_per_user", 4),
            n_rf_rx_per_user=sysd.get("n_rf_rx_per_user", 2),
            streams_per_user=sysd.get("streams_per_user", 1),
            power_budget=power,
            noise_std_per_user=noise)

        cd = _section(doc, "constellation", _CONST_KEYS)
        self.constellation = ConstellationSpec(
            kind=str(cd.get("kind", "qpsk")), order=int(cd.get("order", 4)))

        chd = _section(doc, "channel", _CHANNEL_KEYS)
        self.channel_model = str(chd.get("model", "clustered"))
        if self.channel_model not in (chan.MODEL_CLUSTERED, chan.MODEL_GAUSSIAN):
            raise SchemaError(f"unknown channel model {self.channel_model!r}")
        self.channel = chan.ClusteredChannelConfig(
            n_clusters=int(chd.get("n_clusters", 2)),
            n_rays=int(chd.get("n_rays", 3)),
            n_tx=self.system.n_tx,
            n_rx_per_user=self.system.n_rx_per_user,
            ray_spread_rad=math.radians(float(chd.get("ray_spread_deg", 7.5))))
        self.train_count = int(chd.get("train_count", 500))
        self.test_count = int(chd.get("test_count", 5000))
        self.val_count = int(chd.get("val_count", 10))

        gdd = _section(doc, "gd", _GD_KEYS)
        kw = gdd.get("kernel_width")
        self.gd = GdConfig(
            step_tx=float(gdd.get("step_tx", 0.01)),
            step_rx=float(gdd.get("step_rx", 0.01)),
            step_rx_phase=float(gdd.get("step_rx_phase", 0.005)),
            step_tx_phase=float(gdd.get("step_tx_phase", 0.005)),
            max_iters=int(gdd.get("max_iters", 500)),
            tolerance=float(gdd.get("tolerance", 1e-12)),
            sample_size=int(gdd.get("sample_size", 16)),
            kernel_width=float(kw) if kw is not None
            else default_kernel_width(min(self.system.noise_std_per_user)),
            restarts=int(gdd.get("restarts", 1)))

        ud = _section(doc, "unfold", _UNFOLD_KEYS)
        self.unfold_layers = int(ud.get("layers", 15))
        self.train_cfg = uf.TrainConfig(
            batch_size=int(ud.get("batch_size", 20)),
            max_iters=int(ud.get("max_iters", 300)),
            step_base=float(ud.get("step_base", 0.02)),
            step_decay_every=int(ud.get("step_decay_every", 10)),
            step_decay_factor=float(ud.get("step_decay_factor", 0.5)),
            sample_size=int(ud.get("sample_size", 16)),
            val_every=int(ud.get("val_every", 5)),
            val_tolerance=float(ud.get("val_tolerance", 1e-4)),
            val_patience=int(ud.get("val_patience", 5)),
            freeze_layers=int(ud.get("freeze_layers", 0)))

        self.experiment_doc = _section(doc, "experiment", _EXP_KEYS)

    def experiment_spec(self, output_dir: str, seed: int,
                        threads: int) -> ev.ExperimentSpec:
        d = dict(self.experiment_doc)
        if "scenario" not in d:
            raise SchemaError("experiment.scenario is required")
        for key in ("snr_db", "sigma_h", "layer_grid", "batch_grid", "step_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return ev.ExperimentSpec(
            output_dir=output_dir, seed=seed, threads=threads,
            n_tx=self.system.n_tx, n_rf_tx=self.system.n_rf_tx,
            n_users=self.system.n_users,
            n_rx_per_user=self.system.n_rx_per_user[0],
            n_rf_rx_per_user=self.system.n_rf_rx_per_user[0],
            streams_per_user=self.system.streams_per_user[0],
            constellation=self.constellation.kind,
            qam_order=self.constellation.order,
            n_clusters=self.channel.n_clusters, n_rays=self.channel.n_rays,
            **d)

    def resolved(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "system": {
                "n_tx": self.system.n_tx, "n_rf_tx": self.system.n_rf_tx,
                "n_users": self.system.n_users,
                "n_rx_per_user": list(self.system.n_rx_per_user),
                "n_rf_rx_per_user": list(self.system.n_rf_rx_per_user),
                "streams_per_user": list(self.system.streams_per_user),
                "power_budget": self.system.power_budget,
                "noise_std": list(self.system.noise_std_per_user)},
            "constellation": {"kind": self.constellation.kind,
                              "order": self.constellation.order},
            "channel": {"model": self.channel_model,
                        "n_clusters": self.channel.n_clusters,
                        "n_rays": self.channel.n_rays,
                        "train_count": self.train_count,
                        "test_count": self.test_count,
                        "val_count": self.val_count},
            "gd": asdict(self.gd),
            "unfold": {"layers": self.unfold_layers, **asdict(self.train_cfg)},
            "experiment": dict(self.experiment_doc),
        }


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise SchemaError(f"config is not valid YAML: {exc}") from exc
    return RunConfig(doc)


def _prepare_outdir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override or os.environ.get("SERBEAM_OUT", cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.yaml", "w") as f:
        yaml.safe_dump(cfg.resolved(), f, sort_keys=False)
    return out


def _file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _prepare_outdir(cfg, args.out)
    for name, count, off in (("train", cfg.train_count, 0),
                             ("test", cfg.test_count, 1)):
        data = chan.generate_dataset(cfg.channel, cfg.seed + off, count,
                                     model=cfg.channel_model)
        path = out / f"channels_{name}.bin"
        chan.save_dataset(path, data)
        print(f"{name}: {count} realizations, {cfg.system.n_users} users, "
              f"{cfg.system.n_rx_per_user[0]}x{cfg.system.n_tx} -> {path} "
              f"(sha256 {_file_digest(path)[:16]})")
    return 0


def _load_channels(path, limit: int | None = None):
    data = chan.load_dataset(path)
    return data[:limit] if limit else data


def cmd_gd(cfg: RunConfig, args) -> int:
    out = _prepare_outdir(cfg, args.out)
    channels = _load_channels(args.dataset, args.limit)
    rows = []
    for i, h in enumerate(channels):
        bf, trace = run_gd(None, h, cfg.gd, cfg.seed + i, cfg.system,
                           cfg.constellation)
        est = ev.measure_state_ser(bf, h, cfg.system, cfg.constellation,
                                   cfg.seed + i)
        rows.append({"method": "gd", "snr_db": _snr_of(cfg), "sigma_h": 0.0,
                     "layers": "", "iterations": len(trace) - 1,
                     "ser": est.ser, "std_error": est.std_error,
                     "trials": est.trials})
        export_trace(out / f"gd_trace_{i:04d}.csv", trace)
        if args.verbose:
            print(f"channel {i}: final loss {trace[-1]:.4g}, ser {est.ser:.4g}")
    ev.write_results_csv(out / "gd_ser.csv", rows)
    print(f"wrote {out / 'gd_ser.csv'} ({len(rows)} rows)")
    return 0


def _snr_of(cfg: RunConfig) -> float:
    sigma = cfg.system.noise_std_per_user[0]
    return 10.0 * np.log10(cfg.system.power_budget / sigma ** 2)


def cmd_train(cfg: RunConfig, args) -> int:
    out = _prepare_outdir(cfg, args.out)
    train_set = _load_channels(args.dataset, args.limit)
    n_val = min(cfg.val_count, max(len(train_set) // 10, 1))
    val_set = train_set[:n_val]
    train_part = train_set[n_val:] or train_set
    net0 = uf.randomized_network(cfg.system, cfg.gd, cfg.unfold_layers,
                                 cfg.seed)
    net, trace = uf.train(net0, train_part, val_set, cfg.train_cfg, cfg.seed,
                          cfg.constellation)
    uf.save_network(out / "network.bin", net)
    uf.export_training_trace(out / "train_trace.csv", trace)
    print(f"trained {net.n_layers}-layer network for {len(trace)} steps "
          f"-> {out / 'network.bin'}")
    return 0


def cmd_test(cfg: RunConfig, args) -> int:
    out = _prepare_outdir(cfg, args.out)
    channels = _load_channels(args.dataset, args.limit)
    net = uf.load_network(args.network, cfg.system)
    ser, per_channel = ev.unfold_design_ser(net, channels, cfg.constellation,
                                            cfg.seed, threads=args.threads)
    rows = [{"method": "unfold", "snr_db": _snr_of(cfg), "sigma_h": 0.0,
             "layers": net.n_layers, "iterations": 0, "ser": s,
             "std_error": 0.0, "trials": 0} for s in per_channel]
    rows.append({"method": "unfold_mean", "snr_db": _snr_of(cfg),
                 "sigma_h": 0.0, "layers": net.n_layers, "iterations": 0,
                 "ser": ser, "std_error": 0.0, "trials": 0})
    ev.write_results_csv(out / "test_ser.csv", rows)
    print(f"mean SER {ser:.4g} over {len(channels)} channels "
          f"-> {out / 'test_ser.csv'}")
    return 0


def cmd_experiment(cfg: RunConfig, args) -> int:
    out = _prepare_outdir(cfg, args.out)
    spec = cfg.experiment_spec(str(out), cfg.seed, args.threads)
    rows = ev.run_experiment(spec)
    print(f"{spec.scenario}: {len(rows)} result rows -> {out / 'results.csv'}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    """Finite-difference oracle over the closed-form gradients and backprop."""
    from .channel import sample_channel
    from .gd import gradient_set, init_random
    from .mser import batch_loss
    from .packing import pack_gradient, pack_state, unpack_state

    out = _prepare_outdir(cfg, args.out)
    sys_cfg = SystemConfig(n_tx=8, n_rf_tx=4, n_users=2, n_rx_per_user=4,
                           n_rf_rx_per_user=2, streams_per_user=1,
                           noise_std_per_user=0.3)
    ch = chan.ClusteredChannelConfig(n_clusters=2, n_rays=3, n_tx=8,
                                     n_rx_per_user=(4, 4))
    h = sample_channel(ch, cfg.seed + 7)
    rng = np.random.default_rng(cfg.seed + 3)
    bf = init_random(sys_cfg, rng)
    spec = cfg.constellation
    batch = sample_symbol_batch(spec, sys_cfg.streams_per_user, 8, cfg.seed + 11)
    rho = 3.0
    kernel = KernelConfig(rho=rho, sample_size=8)
    analytic = pack_gradient(gradient_set(bf, h, batch, rho))
    fd = ev.finite_diff_gradient(
        lambda x: batch_loss(unpack_state(x, bf), h, batch, kernel),
        pack_state(bf))
    scale = np.abs(fd).max()
    rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-3 * scale)
    ok = rel.max() < 1e-6
    print(f"first-order gradients: max rel err {rel.max():.3e} "
          f"{'PASS' if ok else 'FAIL'}")

    base = GdConfig(kernel_width=rho, sample_size=8, step_tx=0.05,
                    step_rx=0.05, step_rx_phase=0.02, step_tx_phase=0.02)
    net = uf.randomized_network(sys_cfg, base, 2, cfg.seed)
    bf0 = init_random(sys_cfg, np.random.default_rng(cfg.seed + 5))

    def loss_of(vec):
        n2 = uf.unpack_parameters(vec, net)
        outb, _ = uf.forward(n2, bf0, h, batch)
        return batch_loss(outb, h, batch, kernel)

    _, tape = uf.forward(net, bf0, h, batch)
    grads, _ = uf.backward(net, tape, h, batch, normalize=False)
    analytic2 = uf.pack_parameter_grads(grads)
    fd2 = ev.finite_diff_gradient(loss_of, uf.pack_parameters(net))
    scale2 = np.abs(fd2).max()
    rel2 = np.abs(analytic2 - fd2) / np.maximum(np.abs(fd2), 1e-3 * scale2)
    ok2 = rel2.max() < 1e-5
    print(f"backprop parameter gradients: max rel err {rel2.max():.3e} "
          f"{'PASS' if ok2 else 'FAIL'}")
    if not (ok and ok2):
        raise NumericError("gradient oracle mismatch beyond tolerance")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serbeam",
        description="SER-driven hybrid beamforming toolkit")
    parser.add_argument("--config", "-c", required=True,
                        help="YAML configuration document")
    parser.add_argument("--out", help="output directory (default from config "
                                      "or $SERBEAM_OUT)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("generate", help="generate channel datasets")
    run_gd_p = sub.add_parser("gd", help="run the descent per channel")
    run_gd_p.add_argument("--dataset", required=True)
    run_gd_p.add_argument("--limit", type=int)
    tr = sub.add_parser("train", help="train the unfolding network")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--limit", type=int)
    te = sub.add_parser("test", help="evaluate a trained network")
    te.add_argument("--dataset", required=True)
    te.add_argument("--network", required=True)
    te.add_argument("--limit", type=int)
    sub.add_parser("experiment", help="run a configured scenario")
    sub.add_parser("gradcheck", help="finite-difference oracle suite")
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "gd": cmd_gd,
    "train": cmd_train,
    "test": cmd_test,
    "experiment": cmd_experiment,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return _COMMANDS[args.command](cfg, args)
    except SchemaError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
