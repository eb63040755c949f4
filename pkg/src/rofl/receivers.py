"""Sum-of-symbols receivers: random orthogonalization and a linear MMSE baseline.

Random orthogonalization projects the received slot onto the (estimated) sum
channel, ``Re(h_s^H y) / sqrt(P)``, and relies on channel hardening and
favorable propagation to make the projection an unbiased estimate of
``sum_k x_k``. The MMSE baseline decodes every client's symbol with the full
channel matrix and adds the results up.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from ._linalg import SingularChannelError, cholesky  # noqa: F401
from .channel import ReceivedSymbol, SystemConfig, complex_normal


@dataclass(frozen=True)
class AggregateEstimate:
    """Output of :func:`ro_aggregate`.

    The diagnostic parts are on the same scale as ``value`` (divided by
    ``sqrt(P)``) and add up to ``h_s_est^H y / sqrt(P)``; ``pilot_error_part``
    is zero with a perfect sum-channel estimate. They are ``None`` unless the
    true channel matrix was supplied.
    """

    value: float
    signal_part: complex | None = None
    interference_part: complex | None = None
    noise_part: complex | None = None
    pilot_error_part: complex | None = None
    decode_time_ns: int = 0


class MmseEstimate(NamedTuple):
    per_user: np.ndarray
    sum: float
    decode_time_ns: int


@dataclass(frozen=True)
class SinrReport:
    analytic: float
    empirical: float
    trials: int


def ro_aggregate(y: ReceivedSymbol, h_s_est: np.ndarray, true_H: np.ndarray | None = None,
                 power: float = 1.0) -> AggregateEstimate:
    """Estimate ``sum_k x_k`` for one slot by projecting onto ``h_s_est``."""
    vec = np.asarray(y.y)
    h_s_est = np.asarray(h_s_est)
    if vec.shape != h_s_est.shape or vec.ndim != 1:
        raise ValueError(f"shape mismatch: y {vec.shape} vs h_s {h_s_est.shape}")
    amp = math.sqrt(power)
    t0 = time.perf_counter_ns()
    proj = np.vdot(h_s_est, vec)
    elapsed = time.perf_counter_ns() - t0
    value = proj.real / amp
    if true_H is None:
        return AggregateEstimate(value=float(value), decode_time_ns=elapsed)

    H = np.asarray(true_H)
    if H.shape[0] != vec.shape[0]:
        raise ValueError(f"true_H has {H.shape[0]} rows, y has {vec.shape[0]}")
    if y.x is None or y.noise is None:
        raise ValueError("diagnostics need the transmitted symbols and noise on the ReceivedSymbol")
    x = np.asarray(y.x, dtype=float)
    gram = H.conj().T @ H
    signal = np.sum(np.real(np.diag(gram)) * x)
    interference = np.sum(gram @ x) - signal
    h_sum = H.sum(axis=1)
    noise = np.vdot(h_sum, y.noise) / amp
    pilot = np.vdot(h_s_est - h_sum, vec) / amp
    return AggregateEstimate(
        value=float(value),
        signal_part=complex(signal),
        interference_part=complex(interference),
        noise_part=complex(noise),
        pilot_error_part=complex(pilot),
        decode_time_ns=elapsed,
    )


def ro_aggregate_block(Y: np.ndarray, h_s_est: np.ndarray, power: float = 1.0) -> np.ndarray:
    """Project every column of the ``M x d`` slot matrix ``Y``."""
    return (h_s_est.conj() @ Y).real / math.sqrt(power)


def mmse_weights(H: np.ndarray, snr: float, form: str = "gram") -> np.ndarray:
    """Return the ``K x M`` LMMSE combiner for unit-power symbols.

    ``form="gram"`` solves the ``K x K`` system ``(H^H H + I/snr)^{-1} H^H``;
    ``form="covariance"`` uses the equivalent receive-covariance expression
    ``H^H (H H^H + I/snr)^{-1}``, which needs an ``M x M`` solve.
    """
    H = np.asarray(H)
    M, K = H.shape
    reg = 1.0 / snr
    Hh = H.conj().T
    if form == "gram":
        G = Hh @ H
        G.flat[:: K + 1] += reg
        return scipy.linalg.cho_solve(cholesky(G), Hh, check_finite=False)
    if form == "covariance":
        R = H @ Hh
        R.flat[:: M + 1] += reg
        return scipy.linalg.cho_solve(cholesky(R), H, check_finite=False).conj().T
    raise ValueError(f"unknown MMSE form {form!r}")


def mmse_aggregate(y: ReceivedSymbol | np.ndarray, H: np.ndarray, snr: float,
                   power: float = 1.0, form: str = "gram") -> MmseEstimate:
    """Decode every client's symbol with LMMSE and return the per-user values and their sum.

    Both ``form`` values give the same estimate; they differ only in cost.
    """
    vec = np.asarray(y.y if isinstance(y, ReceivedSymbol) else y)
    H = np.asarray(H)
    if H.ndim != 2 or vec.shape != (H.shape[0],):
        raise ValueError(f"shape mismatch: y {vec.shape} vs H {H.shape}")
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    K = H.shape[1]
    t0 = time.perf_counter_ns()
    Hh = H.conj().T
    if form == "gram":
        G = Hh @ H
        G.flat[:: K + 1] += 1.0 / snr
        xhat = scipy.linalg.cho_solve(cholesky(G), Hh @ vec, check_finite=False)
    elif form == "covariance":
        M = H.shape[0]
        R = H @ Hh
        R.flat[:: M + 1] += 1.0 / snr
        xhat = Hh @ scipy.linalg.cho_solve(cholesky(R), vec, check_finite=False)
    else:
        raise ValueError(f"unknown MMSE form {form!r}")
    per_user = xhat.real / math.sqrt(power)
    elapsed = time.perf_counter_ns() - t0
    return MmseEstimate(per_user, float(per_user.sum()), elapsed)


def decode_macs(receiver: str, M: int, K: int) -> int:
    """Complex multiply-accumulates per decoded slot (one fresh channel per slot)."""
    if receiver == "ro":
        return M
    if receiver == "mmse":
        # Gram, matched filter, Cholesky, two triangular solves
        return M * K * K + M * K + K ** 3 // 3 + K * K
    if receiver == "mmse-cov":
        return M * M * K + M ** 3 // 3 + M * M + M * K
    raise ValueError(f"unknown receiver {receiver!r}")


def sinr_analytic(M: int, K: int, snr: float) -> float:
    """Approximate post-projection SINR ``M / (K - 1 + 1/snr)`` (linear scale).

    A single noiseless user gives ``inf``.
    """
    if M < 1 or K < 1 or not snr > 0:
        raise ValueError("need M >= 1, K >= 1 and snr > 0")
    den = K - 1 + 1.0 / snr
    return math.inf if den == 0 else M / den


def sinr_empirical(cfg: SystemConfig, trials: int, rng: np.random.Generator,
                   chunk: int = 500) -> SinrReport:
    """Measure signal power over interference-plus-noise power after projection.

    Symbols are i.i.d. Rademacher (zero mean, unit power); the receiver uses
    the exact sum channel. Returns ``inf`` when the denominator vanishes.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    M, K = cfg.M, cfg.K
    sig = den = 0.0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        H = complex_normal(rng, (n, M, K), 1.0 / M)
        x = rng.choice([-1.0, 1.0], size=(n, K))
        noise = complex_normal(rng, (n, M), cfg.noise_var) / math.sqrt(cfg.power)
        G = np.einsum("tmj,tmk->tjk", H.conj(), H)
        diag = np.einsum("tkk->tk", G).real
        signal = np.sum(diag * x, axis=1)
        off = G.copy()
        off[:, np.arange(K), np.arange(K)] = 0.0
        interference = np.einsum("tjk,tk->t", off, x)
        h_sum = H.sum(axis=2)
        rest = interference + np.einsum("tm,tm->t", h_sum.conj(), noise)
        sig += float(np.sum(signal ** 2))
        den += float(np.sum(np.abs(rest) ** 2))
        done += n
    empirical = math.inf if den == 0.0 else sig / den
    return SinrReport(sinr_analytic(M, K, cfg.snr), empirical, trials)

