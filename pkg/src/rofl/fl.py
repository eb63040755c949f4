"""Federated averaging over the simulated massive-MIMO uplink.

One round:

1. broadcast ``w_t`` (noiseless);
2. every client runs ``E`` mini-batch SGD steps from ``w_t``;
3. clients send ``x_k = w_{t+1}^k - w_t`` after a common power normalization,
   one parameter per slot, over a single channel block;
4. the server estimates ``sum_k x_k`` with the chosen receiver and sets
   ``w_{t+1} = w_t + est / K``.

The differential is defined as local-minus-global so that step 4 with an
ideal receiver is exactly the average of the local models.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import bounds
from ._linalg import SingularChannelError
from .channel import SystemConfig, draw_channel, transmit_block
from .objectives import HINGE, Dataset, Objective, accuracy, global_loss, loss, minibatch_gradient
from .receivers import mmse_weights, ro_aggregate_block
from .rng import Purpose, Streams

RECEIVERS = ("ideal", "ro", "mmse")


@dataclass(frozen=True)
class NormalizationState:
    scale: float
    reported_powers: np.ndarray


@dataclass(frozen=True)
class Schedule:
    """Step size per round: constant ``eta`` or ``2 / (mu (t + gamma))``."""

    kind: str = "const"
    eta: float = 0.1
    mu: float | None = None
    gamma: float = 0.0

    @classmethod
    def constant(cls, eta: float, mu: float | None = None) -> "Schedule":
        return cls("const", eta=eta, mu=mu)

    @classmethod
    def decay(cls, mu: float, gamma: float) -> "Schedule":
        return cls("decay", mu=mu, gamma=gamma)

    def __call__(self, t: int) -> float:
        if self.kind == "const":
            return self.eta
        return bounds.learning_rate(t, self.mu, self.gamma)

    def admissible(self, eta: float) -> bool:
        return True if self.mu is None else bounds.lr_admissible(eta, self.mu)


@dataclass
class TrainingTask:
    objective: Objective
    clients: Sequence[Dataset]
    cfg: SystemConfig
    receiver: str = "ro"
    rounds: int = 100
    local_steps: int = 1
    batch_size: int = 32
    schedule: Schedule = field(default_factory=Schedule)
    test: Dataset | None = None
    w0: np.ndarray | None = None
    f_star: float | None = None
    run: int = 0
    mmse_form: str = "gram"

    def __post_init__(self):
        if self.receiver not in RECEIVERS:
            raise ValueError(f"receiver must be one of {RECEIVERS}, got {self.receiver!r}")
        if len(self.clients) != self.cfg.K:
            raise ValueError(f"{len(self.clients)} client datasets for K={self.cfg.K}")
        if self.local_steps < 1 or self.batch_size < 1 or self.rounds < 0:
            raise ValueError("need local_steps >= 1, batch_size >= 1, rounds >= 0")

    @property
    def dim(self) -> int:
        return self.clients[0].dim

    @property
    def initial_model(self) -> np.ndarray:
        return np.zeros(self.dim) if self.w0 is None else np.array(self.w0, dtype=float)


@dataclass
class FLState:
    w: np.ndarray
    round: int = 0


@dataclass(frozen=True)
class RoundTrace:
    """Per-round record; ``round`` is ``t`` for the model ``w_t`` it describes.

    ``a1`` is ``||w_{t} - w_bar_{t}||^2``, the distance between the
    received and the error-free aggregate; ``grad_sq_sum`` is
    ``sum_k ||x_k||^2 / eta^2`` (the summed squared gradients when E = 1)
    and ``grad_norm_max`` is ``max_k ||x_k|| / eta``. ``ro_error_expected``
    is the channel-averaged ``||est - true||^2`` of the projection receiver
    for this round's differentials (perfect sum channel).
    """

    round: int
    true_sum: np.ndarray
    est_sum: np.ndarray
    agg_mse: float
    global_loss: float
    test_metric: float
    decode_time_ns: int
    eta: float
    lr_admissible: bool
    a1: float
    grad_sq_sum: float
    grad_norm_max: float = 0.0
    ro_error_expected: float = math.nan
    opt_gap: float = math.nan


class RoundFailure(RuntimeError):
    def __init__(self, round_index: int, receiver: str, cause: Exception):
        super().__init__(f"round {round_index} failed in receiver {receiver!r}: {cause}")
        self.round_index = round_index
        self.receiver = receiver
        self.cause = cause


class TrainingFailed(RuntimeError):
    """A round failed; ``traces`` holds every completed round."""

    def __init__(self, failure: RoundFailure, traces: list[RoundTrace]):
        super().__init__(str(failure))
        self.failure = failure
        self.traces = traces


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    if batch_size >= n:
        for _ in range(steps):
            yield np.arange(n)
        return
    perm, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm, pos = rng.permutation(n), 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def local_update(w_global: np.ndarray, data: Dataset, objective: Objective, E: int,
                 eta_t: float, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """``E`` mini-batch SGD steps from ``w_global``.

    Batches are drawn without replacement within a pass over the local data;
    a batch size of at least the dataset size means full-batch gradient steps.
    """
    if len(data) == 0:
        raise ValueError("empty client dataset")
    if E < 1:
        raise ValueError(f"need E >= 1, got {E}")
    w = np.array(w_global, dtype=float)
    for batch in _batches(len(data), batch_size, E, rng):
        w -= eta_t * minibatch_gradient(objective, w, data, batch)
    return w


def normalize(differentials: np.ndarray) -> tuple[np.ndarray, NormalizationState]:
    """Scale all clients by one common factor so the mean symbol power is 1.

    Clients report their per-element power over an error-free control link;
    the server broadcasts ``scale = 1/sqrt(mean power)``. All-zero input
    passes through with ``scale = 1``.
    """
    X = np.asarray(differentials, dtype=float)
    powers = np.mean(X ** 2, axis=1)
    mean_power = float(np.mean(powers))
    scale = 1.0 if mean_power == 0.0 else 1.0 / math.sqrt(mean_power)
    return X * scale, NormalizationState(scale, powers)


def denormalize(values: np.ndarray, state: NormalizationState) -> np.ndarray:
    return np.asarray(values) / state.scale


def estimate_sum(symbols: np.ndarray, task: TrainingTask, streams: Streams) -> tuple[np.ndarray, int]:
    """Send the ``K x d`` normalized symbols over one channel block and estimate the column sums."""
    if task.receiver == "ideal":
        t0 = time.perf_counter_ns()
        est = symbols.sum(axis=0)
        return est, time.perf_counter_ns() - t0
    cfg = task.cfg
    realization = draw_channel(cfg, streams.rng(Purpose.CHANNEL), streams.rng(Purpose.PILOT))
    Y, _ = transmit_block(realization, symbols, cfg, streams.rng(Purpose.NOISE))
    t0 = time.perf_counter_ns()
    if task.receiver == "ro":
        est = ro_aggregate_block(Y, realization.sum_estimate, cfg.power)
    else:
        W = mmse_weights(realization.per_user, cfg.snr, task.mmse_form)
        est = (W @ Y).real.sum(axis=0) / math.sqrt(cfg.power)
    return est, time.perf_counter_ns() - t0


def run_round(state: FLState, task: TrainingTask, eta_t: float,
              streams: Streams) -> tuple[FLState, RoundTrace]:
    w_t = state.w
    t = state.round + 1
    K = task.cfg.K
    local = [
        local_update(w_t, data, task.objective, task.local_steps, eta_t, task.batch_size,
                     streams.rng(Purpose.SGD, k))
        for k, data in enumerate(task.clients)
    ]
    X = np.vstack(local) - w_t
    true_sum = X.sum(axis=0)
    symbols, norm = normalize(X)
    try:
        est_scaled, decode_ns = estimate_sum(symbols, task, streams)
    except (SingularChannelError, np.linalg.LinAlgError) as exc:
        raise RoundFailure(t, task.receiver, exc) from exc
    est_sum = denormalize(est_scaled, norm)
    w_next = w_t + est_sum / K

    err = est_sum - true_sum
    g_loss = global_loss(task.objective, w_next, task.clients)
    if task.test is None:
        test_metric = math.nan
    elif task.objective.kind == HINGE:
        test_metric = accuracy(w_next, task.test)
    else:
        test_metric = loss(task.objective, w_next, task.test)
    trace = RoundTrace(
        round=t,
        true_sum=true_sum,
        est_sum=est_sum,
        agg_mse=float(err @ err) / err.size,
        global_loss=g_loss,
        test_metric=test_metric,
        decode_time_ns=int(decode_ns),
        eta=eta_t,
        lr_admissible=task.schedule.admissible(eta_t),
        a1=float(err @ err) / K ** 2,
        grad_sq_sum=float(np.sum(X ** 2)) / eta_t ** 2 if eta_t > 0 else 0.0,
        grad_norm_max=float(np.max(np.linalg.norm(X, axis=1))) / eta_t if eta_t > 0 else 0.0,
        ro_error_expected=bounds.ro_aggregation_error(X, task.cfg.M, task.cfg.snr),
        opt_gap=math.nan if task.f_star is None else g_loss - task.f_star,
    )
    return FLState(w_next, t), trace


@dataclass
class TrainingResult:
    traces: list[RoundTrace]
    w: np.ndarray


def run_training(task: TrainingTask, seed: int | None = None) -> TrainingResult:
    """Run ``task.rounds`` rounds; deterministic given the seed and ``task.run``.

    Round ``t`` draws from the stream node ``(task.run, t)``.
    """
    seed = task.cfg.master_seed if seed is None else seed
    streams = Streams(seed).child(task.run)
    state = FLState(task.initial_model, 0)
    traces: list[RoundTrace] = []
    for t in range(1, task.rounds + 1):
        eta = task.schedule(t)
        try:
            state, trace = run_round(state, task, eta, streams.child(t))
        except RoundFailure as failure:
            raise TrainingFailed(failure, traces) from failure
        traces.append(trace)
    return TrainingResult(traces, state.w)
