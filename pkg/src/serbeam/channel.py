"""Clustered mmWave and Gaussian channel generation plus dataset persistence.

The clustered model sums ``n_clusters * n_rays`` outer products of unit-norm
array response vectors with complex gains, scaled so the expected squared
Frobenius norm of each user's matrix equals ``n_tx * n_rx``.  Cluster centre
angles are uniform on [-pi/2, pi/2]; rays are Laplacian-spread around their
cluster centre (7.5 degrees by default; both configurable).  The gains are
zero-mean unit-variance circular complex Gaussian.  The paper family this
model comes from does not pin the angle/gain statistics; these defaults are
the common convention and are recorded here as assumptions.

Dataset files are self-describing little-endian binary (see
``save_dataset``) so that independent implementations can interchange them
bit-exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .errors import FormatError, SchemaError

_MAGIC = b"MSERCHAN"
_FORMAT_VERSION = 1

MODEL_CLUSTERED = "clustered"
MODEL_GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class ClusteredChannelConfig:
    """Geometry parameters of the clustered channel model."""

    n_clusters: int
    n_rays: int
    n_tx: int
    n_rx_per_user: tuple[int, ...]
    angle_low: float = -math.pi / 2
    angle_high: float = math.pi / 2
    ray_spread_rad: float = math.radians(7.5)
    gain_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "n_rx_per_user",
                           tuple(int(v) for v in self.n_rx_per_user))
        if self.n_clusters < 1 or self.n_rays < 1:
            raise SchemaError("n_clusters and n_rays must be >= 1")
        if self.n_tx < 1 or any(v < 1 for v in self.n_rx_per_user):
            raise SchemaError("antenna counts must be >= 1")
        if self.gain_std <= 0:
            raise SchemaError("gain_std must be positive")
        if self.ray_spread_rad < 0:
            raise SchemaError("ray_spread_rad must be non-negative")

    @property
    def n_users(self) -> int:
        return len(self.n_rx_per_user)


@dataclass(frozen=True)
class ChannelRealization:
    """Per-user channel matrices plus the seed they were generated from."""

    matrices: tuple[np.ndarray, ...]
    seed: int
    model_tag: str = MODEL_CLUSTERED

    def __post_init__(self):
        for h in self.matrices:
            if not np.all(np.isfinite(h)):
                raise SchemaError("channel matrices must have finite entries")

    @property
    def n_users(self) -> int:
        return len(self.matrices)


@dataclass(frozen=True)
class CsiErrorConfig:
    """Standard deviation of the synthetic channel-estimation error."""

    sigma_h: float = 0.0

    def __post_init__(self):
        if self.sigma_h < 0:
            raise SchemaError("sigma_h must be non-negative")


def steering_vector(angle: float, n: int) -> np.ndarray:
    """Unit-norm half-wavelength ULA response for the given angle (radians)."""
    if n < 1:
        raise ValueError("steering vector length must be >= 1")
    phases = np.pi * np.arange(n) * math.sin(angle)
    return np.exp(1j * phases) / math.sqrt(n)


def _rng_for(master_seed: int, index: int | None = None) -> np.random.Generator:
    if index is None:
        return np.random.default_rng(np.random.SeedSequence(master_seed))
    return np.random.default_rng(np.random.SeedSequence([master_seed, index]))


def sample_channel(config: ClusteredChannelConfig, seed: int) -> ChannelRealization:
    """Draw one clustered realization; a pure function of (config, seed)."""
    rng = _rng_for(seed)
    mats = []
    for n_rx in config.n_rx_per_user:
        n_paths = config.n_clusters * config.n_rays
        scale = math.sqrt(config.n_tx * n_rx / n_paths)
        h = np.zeros((n_rx, config.n_tx), dtype=complex)
        for _ in range(config.n_clusters):
            centre_rx = rng.uniform(config.angle_low, config.angle_high)
            centre_tx = rng.uniform(config.angle_low, config.angle_high)
            for _ in range(config.n_rays):
                theta_rx = centre_rx + rng.laplace(0.0, config.ray_spread_rad / math.sqrt(2))
                theta_tx = centre_tx + rng.laplace(0.0, config.ray_spread_rad / math.sqrt(2))
                gain = (rng.standard_normal() + 1j * rng.standard_normal()) \
                    * (config.gain_std / math.sqrt(2))
                a_rx = steering_vector(theta_rx, n_rx)
                a_tx = steering_vector(theta_tx, config.n_tx)
                h += gain * np.outer(a_rx, a_tx.conj())
        mats.append(scale * h)
    return ChannelRealization(tuple(mats), seed=seed, model_tag=MODEL_CLUSTERED)


def sample_gaussian_channel(n_tx: int, n_rx_per_user: Sequence[int],
                            seed: int) -> ChannelRealization:
    """I.i.d. unit-variance circular complex Gaussian channel (transfer runs)."""
    rng = _rng_for(seed)
    mats = []
    for n_rx in n_rx_per_user:
        h = (rng.standard_normal((n_rx, n_tx))
             + 1j * rng.standard_normal((n_rx, n_tx))) / math.sqrt(2)
        mats.append(h)
    return ChannelRealization(tuple(mats), seed=seed, model_tag=MODEL_GAUSSIAN)


def generate_dataset(config: ClusteredChannelConfig, master_seed: int,
                     count: int, model: str = MODEL_CLUSTERED) -> list[ChannelRealization]:
    """Generate ``count`` realizations with per-index sub-seeds.

    Each realization's seed derives deterministically from
    ``(master_seed, index)`` so parallel and serial generation agree.
    """
    out = []
    for i in range(count):
        sub = int(np.random.SeedSequence([master_seed, i]).generate_state(1)[0])
        if model == MODEL_CLUSTERED:
            out.append(sample_channel(config, sub))
        elif model == MODEL_GAUSSIAN:
            out.append(sample_gaussian_channel(config.n_tx, config.n_rx_per_user, sub))
        else:
            raise SchemaError(f"unknown channel model {model!r}")
    return out


def apply_csi_error(h: ChannelRealization, cfg: CsiErrorConfig,
                    seed: int) -> ChannelRealization:
    """Return the noisy channel estimate: true = estimate + sigma_h * error.

    The injected error has i.i.d. zero-mean unit-variance circular complex
    Gaussian entries; ``sigma_h == 0`` returns the input unchanged.
    """
    if cfg.sigma_h == 0.0:
        return h
    rng = _rng_for(seed)
    mats = []
    for mat in h.matrices:
        delta = (rng.standard_normal(mat.shape)
                 + 1j * rng.standard_normal(mat.shape)) / math.sqrt(2)
        mats.append(mat - cfg.sigma_h * delta)
    return ChannelRealization(tuple(mats), seed=h.seed, model_tag=h.model_tag)


def _write_u32(f: BinaryIO, value: int):
    f.write(struct.pack("<I", value))


def _read_u32(f: BinaryIO) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("dataset file truncated while reading header")
    return struct.unpack("<I", raw)[0]


def save_dataset(path, realizations: Sequence[ChannelRealization]):
    """Write realizations to a self-describing binary file.

    Layout (all little-endian): magic ``MSERCHAN``, format version u32,
    user count u32, per-user ``(n_rx u32, n_tx u32)``, realization count u32,
    then each realization's matrices row-major as (real f64, imag f64) pairs.
    Generation metadata (seeds, model tag) is not part of the wire format.
    """
    if not realizations:
        raise SchemaError("refusing to write an empty dataset")
    dims = [m.shape for m in realizations[0].matrices]
    for r in realizations:
        if [m.shape for m in r.matrices] != dims:
            raise SchemaError("all realizations must share the same dimensions")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        _write_u32(f, _FORMAT_VERSION)
        _write_u32(f, len(dims))
        for (n_rx, n_tx) in dims:
            _write_u32(f, n_rx)
            _write_u32(f, n_tx)
        _write_u32(f, len(realizations))
        for r in realizations:
            for mat in r.matrices:
                inter = np.empty(mat.shape + (2,), dtype="<f8")
                inter[..., 0] = mat.real
                inter[..., 1] = mat.imag
                f.write(inter.tobytes())


def load_dataset(path) -> list[ChannelRealization]:
    """Read a dataset written by :func:`save_dataset`.

    Loaded realizations carry their record index as ``seed`` and the default
    model tag, since the wire format stores matrices only.
    """
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise FormatError(f"bad magic bytes {magic!r}; not a channel dataset")
        version = _read_u32(f)
        if version != _FORMAT_VERSION:
            raise FormatError(f"unsupported dataset format version {version}")
        n_users = _read_u32(f)
        dims = []
        for _ in range(n_users):
            n_rx = _read_u32(f)
            n_tx = _read_u32(f)
            if n_rx < 1 or n_tx < 1:
                raise FormatError("dataset header contains non-positive dimensions")
            dims.append((n_rx, n_tx))
        count = _read_u32(f)
        out = []
        for idx in range(count):
            mats = []
            for (n_rx, n_tx) in dims:
                need = n_rx * n_tx * 16
                raw = f.read(need)
                if len(raw) != need:
                    raise FormatError(
                        f"dataset file truncated in record {idx}: "
                        f"expected {need} bytes, got {len(raw)}")
                flat = np.frombuffer(raw, dtype="<f8").reshape(n_rx, n_tx, 2)
                mats.append((flat[..., 0] + 1j * flat[..., 1]).copy())
            out.append(ChannelRealization(tuple(mats), seed=idx))
        trailing = f.read(1)
        if trailing:
            raise FormatError("dataset file has trailing bytes after last record")
    return out
