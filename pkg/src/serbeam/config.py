"""System-level configuration: antenna/RF-chain layout and constellations.

Conventions fixed here and used everywhere else:

* ``noise_std`` is the standard deviation of the circular complex noise per
  receive antenna, i.e. ``E[n n^H] = noise_std**2 * I``.  Each real dimension
  then has variance ``noise_std**2 / 2``.
* SNR is ``power_budget / noise_std**2`` in linear units.
* The kernel width used by the SER objective defaults to the per-real-
  dimension noise standard deviation, ``noise_std / sqrt(2)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError


def _as_tuple(value, n_users: int, name: str) -> tuple[int, ...]:
    """Broadcast a scalar to one entry per user; validate a sequence length."""
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n_users
    out = tuple(int(v) for v in value)
    if len(out) != n_users:
        raise SchemaError(f"{name} must have one entry per user, got {len(out)}")
    return out


@dataclass(frozen=True)
class SystemConfig:
    """Antenna, RF-chain, stream and power layout of the downlink system."""

    n_tx: int
    n_rf_tx: int
    n_users: int
    n_rx_per_user: tuple[int, ...]
    n_rf_rx_per_user: tuple[int, ...]
    streams_per_user: tuple[int, ...]
    power_budget: float = 1.0
    noise_std_per_user: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "n_rx_per_user",
                           _as_tuple(self.n_rx_per_user, self.n_users, "n_rx_per_user"))
        object.__setattr__(self, "n_rf_rx_per_user",
                           _as_tuple(self.n_rf_rx_per_user, self.n_users, "n_rf_rx_per_user"))
        object.__setattr__(self, "streams_per_user",
                           _as_tuple(self.streams_per_user, self.n_users, "streams_per_user"))
        if not self.noise_std_per_user:
            object.__setattr__(self, "noise_std_per_user", (0.1,) * self.n_users)
        elif isinstance(self.noise_std_per_user, (int, float)):
            object.__setattr__(self, "noise_std_per_user",
                               (float(self.noise_std_per_user),) * self.n_users)
        else:
            object.__setattr__(self, "noise_std_per_user",
                               tuple(float(v) for v in self.noise_std_per_user))
        if len(self.noise_std_per_user) != self.n_users:
            raise SchemaError("noise_std_per_user must have one entry per user")

        if self.n_tx < 1 or self.n_rf_tx < 1 or self.n_users < 1:
            raise SchemaError("antenna, RF-chain and user counts must be >= 1")
        if any(v < 1 for v in self.n_rx_per_user + self.n_rf_rx_per_user
               + self.streams_per_user):
            raise SchemaError("per-user counts must be >= 1")
        for k in range(self.n_users):
            if self.streams_per_user[k] > self.n_rf_rx_per_user[k]:
                raise SchemaError(
                    f"user {k}: streams_per_user must not exceed n_rf_rx_per_user")
            if self.n_rf_rx_per_user[k] > self.n_rx_per_user[k]:
                raise SchemaError(
                    f"user {k}: n_rf_rx_per_user must not exceed n_rx_per_user")
        if self.power_budget <= 0:
            raise SchemaError("power_budget must be positive")
        if any(s <= 0 for s in self.noise_std_per_user):
            raise SchemaError("noise_std_per_user entries must be positive")
        if self.n_rf_tx < sum(self.n_rf_rx_per_user):
            warnings.warn(
                "n_rf_tx is smaller than the total number of receive RF chains; "
                "the usual design assumption n_rf_tx >= sum(n_rf_rx) is violated",
                stacklevel=2)

    @property
    def total_streams(self) -> int:
        return sum(self.streams_per_user)

    def stream_offsets(self) -> tuple[int, ...]:
        """Start index of each user's streams inside the stacked symbol vector."""
        offs, acc = [], 0
        for d in self.streams_per_user:
            offs.append(acc)
            acc += d
        return tuple(offs)

    def stream_index(self, i: int, k: int) -> int:
        """Global index of stream ``i`` of user ``k`` in the stacked vector."""
        return self.stream_offsets()[k] + i

    def with_noise_std(self, noise_std: float) -> "SystemConfig":
        return SystemConfig(
            n_tx=self.n_tx, n_rf_tx=self.n_rf_tx, n_users=self.n_users,
            n_rx_per_user=self.n_rx_per_user,
            n_rf_rx_per_user=self.n_rf_rx_per_user,
            streams_per_user=self.streams_per_user,
            power_budget=self.power_budget,
            noise_std_per_user=(float(noise_std),) * self.n_users)


def noise_std_for_snr(snr_db: float, power_budget: float = 1.0) -> float:
    """Complex per-antenna noise std for a target SNR = power / noise_std**2."""
    return math.sqrt(power_budget / 10.0 ** (snr_db / 10.0))


def default_kernel_width(noise_std: float) -> float:
    """Kernel width matched to the per-real-dimension noise deviation."""
    return noise_std / math.sqrt(2.0)


@dataclass(frozen=True)
class ConstellationSpec:
    """QPSK or square M-QAM constellation.

    Real/imaginary amplitudes of M-QAM are ``2n - sqrt(M) - 1`` for
    ``n = 1..sqrt(M)``; QPSK uses ``{-1, +1}`` per real dimension.
    """

    kind: str = "qpsk"
    order: int = 4

    def __post_init__(self):
        if self.kind not in ("qpsk", "mqam"):
            raise SchemaError(f"unknown constellation kind {self.kind!r}")
        if self.kind == "qpsk":
            object.__setattr__(self, "order", 4)
        else:
            root = math.isqrt(self.order)
            if root * root != self.order or self.order < 16:
                raise SchemaError("mqam order must be a perfect square >= 16")

    @property
    def levels(self) -> np.ndarray:
        """Per-real-dimension amplitude levels, ascending."""
        if self.kind == "qpsk":
            return np.array([-1.0, 1.0])
        root = math.isqrt(self.order)
        return np.array([2.0 * n - root - 1.0 for n in range(1, root + 1)])

    @property
    def side_weight(self) -> float:
        """Average number of error-prone decision boundaries per real axis."""
        root = math.isqrt(self.order)
        return (2.0 * root - 2.0) / root

    def points(self) -> np.ndarray:
        """All complex constellation points (length ``order``)."""
        lv = self.levels
        return (lv[:, None] + 1j * lv[None, :]).ravel()

    def conditioned_count(self, total_streams: int) -> int:
        """Number of interference combinations for one fixed desired symbol."""
        return self.order ** (total_streams - 1)
