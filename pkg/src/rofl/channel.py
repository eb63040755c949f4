"""Rayleigh block-fading uplink: channel draws, pilot phase and transmission.

Channels are column vectors ``h_k ~ CN(0, I/M)`` stacked into an ``M x K``
matrix. One realization is held for a whole round (pilot phase plus ``d``
data slots). Received slots follow ``y = sqrt(P) * H @ x + n`` with
``n ~ CN(0, sigma^2 I)`` and ``sigma^2 = P / SNR``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


def db_to_linear(db: float) -> float:
    return math.inf if db == math.inf else 10.0 ** (db / 10.0)


def linear_to_db(value: float) -> float:
    return -math.inf if value == 0 else 10.0 * math.log10(value)


def complex_normal(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with total variance ``var``."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    re_im = rng.standard_normal((2,) + shape)
    return math.sqrt(var / 2.0) * (re_im[0] + 1j * re_im[1])


@dataclass(frozen=True)
class SystemConfig:
    """One simulated uplink system.

    ``pilot_repetitions = 0`` means the receiver knows the sum channel exactly;
    ``snr_db = inf`` gives a noiseless link.
    """

    M: int
    K: int
    d: int = 1
    snr_db: float = 10.0
    power: float = 1.0
    pilot_repetitions: int = 0
    master_seed: int = 0

    def __post_init__(self):
        for name in ("M", "K", "d"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be a number or +inf, got {self.snr_db!r}")
        if not self.power > 0:
            raise ValueError(f"power must be positive, got {self.power!r}")
        if int(self.pilot_repetitions) != self.pilot_repetitions or self.pilot_repetitions < 0:
            raise ValueError("pilot_repetitions must be a non-negative integer")

    @property
    def snr(self) -> float:
        return db_to_linear(self.snr_db)

    @property
    def noise_var(self) -> float:
        return self.power / self.snr

    def with_(self, **changes) -> "SystemConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class ChannelRealization:
    """Channels of all clients for one coherence block.

    ``per_user`` is ``M x K`` with ``h_k`` in column ``k``.
    """

    per_user: np.ndarray
    sum: np.ndarray
    sum_estimate: np.ndarray

    @property
    def M(self) -> int:
        return self.per_user.shape[0]

    @property
    def K(self) -> int:
        return self.per_user.shape[1]

    @property
    def pilot_error(self) -> np.ndarray:
        return self.sum_estimate - self.sum


@dataclass(frozen=True)
class ReceivedSymbol:
    """Received vector for one parameter slot.

    ``x`` and ``noise`` are simulation ground truth kept for diagnostics; a
    receiver never reads them to form its estimate.
    """

    y: np.ndarray
    slot_index: int = 1
    x: np.ndarray | None = field(default=None, repr=False)
    noise: np.ndarray | None = field(default=None, repr=False)


def draw_channel(cfg: SystemConfig, rng: np.random.Generator,
                 pilot_rng: np.random.Generator | None = None) -> ChannelRealization:
    """Draw ``H`` for one block and, if configured, run the pilot phase.

    Pilot noise comes from ``pilot_rng`` (default: continue on ``rng``).
    """
    H = complex_normal(rng, (cfg.M, cfg.K), 1.0 / cfg.M)
    h_sum = H.sum(axis=1)
    realization = ChannelRealization(H, h_sum, h_sum)
    if cfg.pilot_repetitions > 0:
        est = estimate_sum_channel(realization, cfg, rng if pilot_rng is None else pilot_rng)
        realization = replace(realization, sum_estimate=est)
    return realization


def estimate_sum_channel(realization: ChannelRealization, cfg: SystemConfig,
                         rng: np.random.Generator) -> np.ndarray:
    """ML estimate of ``h_s`` from ``pilot_repetitions`` common unit pilots.

    Every client sends ``s = 1`` at the same time, so each pilot slot receives
    ``h_s + n``; the estimate is the average of the received pilot vectors.
    """
    n_rep = cfg.pilot_repetitions
    if n_rep < 1:
        raise ValueError("estimate_sum_channel needs pilot_repetitions >= 1; "
                         "use the exact sum for a perfect pilot")
    noise = complex_normal(rng, (n_rep, realization.M), cfg.noise_var)
    return realization.sum + noise.mean(axis=0)


def transmit(realization: ChannelRealization, x, cfg: SystemConfig,
             rng: np.random.Generator, slot_index: int = 1) -> ReceivedSymbol:
    """Superpose the real symbols ``x`` (one per client) over the channel."""
    x = np.asarray(x, dtype=float)
    if x.shape != (realization.K,):
        raise ValueError(f"expected {realization.K} symbols, got shape {x.shape}")
    if realization.M != cfg.M:
        raise ValueError(f"realization has M={realization.M}, config has M={cfg.M}")
    noise = complex_normal(rng, cfg.M, cfg.noise_var)
    y = math.sqrt(cfg.power) * (realization.per_user @ x) + noise
    return ReceivedSymbol(y=y, slot_index=slot_index, x=x, noise=noise)


def transmit_block(realization: ChannelRealization, X: np.ndarray, cfg: SystemConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Transmit all ``d`` slots of a round at once.

    ``X`` is ``K x d`` (row ``k`` is client ``k``'s symbols). Returns the
    ``M x d`` received matrix and the noise that was added.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != realization.K:
        raise ValueError(f"expected a {realization.K} x d symbol matrix, got {X.shape}")
    noise = complex_normal(rng, (cfg.M, X.shape[1]), cfg.noise_var)
    Y = math.sqrt(cfg.power) * (realization.per_user @ X) + noise
    return Y, noise
