"""Experiment drivers behind the CLI: NMSE sweep, decode timing, training, bounds, self-test.

Every driver returns a list of :class:`ResultRow` plus a JSON-able summary.
Monte Carlo work is split into fixed-size chunks keyed by trial index, so the
numbers never depend on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import bounds, fl
from .bounds import BoundParams, b_factor, crlb, crlb_floors_batch, theorem1_bound
from .channel import ReceivedSymbol, SystemConfig, complex_normal, db_to_linear, linear_to_db
from .dataio import load_mnist, make_split, synth_quadratic
from .objectives import Objective, quadratic_constants
from .receivers import mmse_aggregate, ro_aggregate, ro_aggregate_block, sinr_analytic, sinr_empirical
from .rng import Purpose, Streams, generator

CHUNK = 250


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    M: int
    K: int
    snr_db: float
    receiver: str
    step: int
    metric: str
    value: float
    trials: int
    seed: int


CSV_HEADER = [f.name for f in fields(ResultRow)]
TIMING_HEADER = CSV_HEADER + ["wall_time_ns"]


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def row_strings(row: ResultRow) -> list[str]:
    return [format_value(v) for v in astuple(row)]


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- NMSE sweep

def _draw_trial(seed: int, M: int, K: int, trial: int):
    node = Streams(seed).child(M, trial)
    H = complex_normal(node.rng(Purpose.CHANNEL), (M, K), 1.0 / M)
    x = node.rng(Purpose.SYMBOLS).choice([-1.0, 1.0], size=K)
    z = complex_normal(node.rng(Purpose.NOISE), M, 1.0)
    return H, x, z


def _sweep_chunk(seed: int, M: int, K: int, snrs: np.ndarray, start: int, stop: int):
    """Squared errors for trials ``[start, stop)`` at every SNR (rows) and trial (columns)."""
    draws = [_draw_trial(seed, M, K, t) for t in range(start, stop)]
    H = np.stack([d[0] for d in draws])
    x = np.stack([d[1] for d in draws])
    z = np.stack([d[2] for d in draws])
    n = H.shape[0]
    G = np.einsum("tmk,tml->tkl", H.conj(), H)
    Gx = np.einsum("tkl,tl->tk", G, x)
    u = np.einsum("tmk,tm->tk", H.conj(), z)
    hs = H.sum(axis=2)
    sig_proj = Gx.sum(axis=1).real
    noise_proj = np.einsum("tm,tm->t", hs.conj(), z).real
    sum_x = x.sum(axis=1)
    floor_trace, floor_sum = crlb_floors_batch(H, 1.0)
    eye = np.eye(K)

    out = {k: np.empty((len(snrs), n)) for k in
           ("ro", "mmse", "mmse_vec", "floor_sum", "floor_trace")}
    for i, snr in enumerate(snrs):
        sigma = math.sqrt(1.0 / snr)
        out["ro"][i] = (sig_proj + sigma * noise_proj - sum_x) ** 2
        rhs = Gx + sigma * u
        xhat = np.linalg.solve(G + eye / snr, rhs[..., None])[..., 0].real
        out["mmse"][i] = (xhat.sum(axis=1) - sum_x) ** 2
        out["mmse_vec"][i] = np.sum((xhat - x) ** 2, axis=1)
        out["floor_sum"][i] = floor_sum / snr
        out["floor_trace"][i] = floor_trace / snr
    return out


def _mean_se(a: np.ndarray) -> tuple[float, float]:
    n = a.size
    mean = float(np.mean(a))
    se = float(np.std(a, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return mean, se


def nmse_sweep(Ms: Sequence[int], K: int, snrs_db: Sequence[float], trials: int, seed: int,
               threads: int = 1, receivers: Sequence[str] = ("ro", "mmse")):
    """NMSE (dB) of the aggregated sum per receiver, with CRLB floors and dominance margins.

    NMSE is ``E[(sum x - est)^2] / E[(sum x)^2]`` with i.i.d. unit-power
    (Rademacher) symbols and one slot per channel draw; the denominator is
    its exact value ``K``. Channel, symbol and
    unit noise draws are shared across SNR cells of the same ``M``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    snrs = np.array([db_to_linear(s) for s in snrs_db])
    rows: list[ResultRow] = []
    failures: list[str] = []
    cells = {}
    for M in Ms:
        bounds_ = [(a, min(a + CHUNK, trials)) for a in range(0, trials, CHUNK)]
        try:
            parts = _map(lambda ab: _sweep_chunk(seed, M, K, snrs, *ab), bounds_, threads)
        except np.linalg.LinAlgError as exc:
            failures.append(f"M={M}: {exc}")
            continue
        res = {k: np.concatenate([p[k] for p in parts], axis=-1) for k in parts[0]}
        # E[(sum x)^2] = E||x||^2 = K for i.i.d. zero-mean unit-power symbols
        denom = vec_denom = float(K)

        def emit(snr_db, receiver, metric, value):
            rows.append(ResultRow("nmse-sweep", M, K, float(snr_db), receiver, 0, metric,
                                  float(value), trials, seed))

        for i, snr_db in enumerate(snrs_db):
            cell = {}
            for rec in receivers:
                mse, se = _mean_se(res[rec][i])
                nmse_db = linear_to_db(mse / denom)
                cell[rec] = nmse_db
                emit(snr_db, rec, "nmse_db", nmse_db)
                emit(snr_db, rec, "mse", mse)
                emit(snr_db, rec, "mse_se", se)
                diff_mean, diff_se = _mean_se(res[rec][i] - res["floor_sum"][i])
                emit(snr_db, rec, "crlb_sum_margin_z", diff_mean / diff_se if diff_se > 0 else math.inf)
                if rec == "mmse":
                    vmse, vse = _mean_se(res["mmse_vec"][i])
                    emit(snr_db, rec, "vec_nmse_db", linear_to_db(vmse / vec_denom))
                    dm, ds = _mean_se(res["mmse_vec"][i] - res["floor_trace"][i])
                    emit(snr_db, rec, "crlb_trace_margin_z", dm / ds if ds > 0 else math.inf)
            emit(snr_db, "crlb", "sum_floor_nmse_db", linear_to_db(np.mean(res["floor_sum"][i]) / denom))
            emit(snr_db, "crlb", "trace_floor_nmse_db",
                 linear_to_db(np.mean(res["floor_trace"][i]) / vec_denom))
            if "ro" in cell and "mmse" in cell:
                emit(snr_db, "ro-mmse", "gap_db", cell["ro"] - cell["mmse"])
            cells[(M, float(snr_db))] = cell
    summary = {
        "nmse_definition": "E[(sum_k x_k - est)^2] / E[(sum_k x_k)^2], Rademacher symbols, one slot per "
                           "channel draw; the denominator is its exact value K",
        "crlb_floors": {"sum_floor": "1^T C 1 (bound for unbiased sum estimators)",
                        "trace_floor": "trace(C) (bound for the per-client vector), normalized by E||x||^2"},
        "failures": failures,
    }
    return rows, summary


# --------------------------------------------------------------------------- timing

def timing(Ms: Sequence[int], K: int, snr_db: float, trials: int, seed: int,
           receivers: Sequence[str] = ("ro", "mmse", "mmse-cov"), repeats: int = 3):
    """Cumulative decode-only time over ``trials`` one-slot experiments.

    Each receiver gets a warm-up pass, then ``repeats`` timed passes; the
    fastest pass is reported (the M x M ``mmse-cov`` form is timed once).
    Runs single-threaded regardless of ``--threads``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    snr = db_to_linear(snr_db)
    sigma = math.sqrt(1.0 / snr)
    rows: list[tuple[ResultRow, int]] = []
    summary: dict = {"seconds": {}, "ratios": {}}
    for M in Ms:
        data = []
        for t in range(trials):
            H, x, z = _draw_trial(seed, M, K, t)
            data.append((H, H.sum(axis=1), ReceivedSymbol(H @ x + sigma * z, 1)))
        decoders = {
            "ro": lambda H, hs, rx: ro_aggregate(rx, hs).decode_time_ns,
            "mmse": lambda H, hs, rx: mmse_aggregate(rx, H, snr, form="gram").decode_time_ns,
            "mmse-cov": lambda H, hs, rx: mmse_aggregate(rx, H, snr, form="covariance").decode_time_ns,
        }
        totals = {}
        for rec in receivers:
            dec = decoders[rec]
            dec(*data[0])
            passes = 1 if rec == "mmse-cov" else repeats
            totals[rec] = min(sum(dec(*item) for item in data) for _ in range(passes))
            rows.append((ResultRow("timing", M, K, float(snr_db), rec, 0, "total_cpu_s",
                                   totals[rec] / 1e9, trials, seed), totals[rec]))
        summary["seconds"][M] = {rec: totals[rec] / 1e9 for rec in totals}
        if "ro" in totals:
            for rec in ("mmse", "mmse-cov"):
                if rec in totals:
                    ratio = totals["ro"] / totals[rec]
                    rows.append((ResultRow("timing", M, K, float(snr_db), f"ro/{rec}", 0,
                                           "time_ratio", ratio, trials, seed), 0))
                    summary["ratios"].setdefault(rec, {})[M] = ratio
    return rows, summary


# --------------------------------------------------------------------------- training

@dataclass
class TrainSetup:
    """Everything needed to run one task for any receiver."""

    objective: Objective
    clients: list
    test: object
    schedule: fl.Schedule
    batch_size: int
    local_steps: int
    w0: np.ndarray
    f_star: float | None = None
    params: BoundParams | None = None
    constants: object = None


def build_svm_setup(data_dir, K: int, per_client: int, test_size: int, seed: int,
                    lam: float = 1e-3, eta: float = 0.05, batch_size: int = 100,
                    local_steps: int = 1, bias: bool = True) -> TrainSetup:
    dataset, _ = load_mnist(data_dir, bias=bias)
    split = make_split(dataset, K, per_client, test_size, generator(seed, Purpose.SPLIT))
    return TrainSetup(Objective("hinge", lam), split.clients, split.test,
                      fl.Schedule.constant(eta, mu=lam if lam > 0 else None),
                      batch_size, local_steps, np.zeros(dataset.dim))


def build_quadratic_setup(K: int, seed: int, d: int = 10, samples_per_client: int = 50,
                          condition: float = 2.0, noise_std: float = 1.0, lam: float = 0.0,
                          batch_size: int = 5, gamma: float = 3.0,
                          local_steps: int = 1) -> TrainSetup:
    """Synthetic least squares with exact ``mu``, ``L``, ``w*`` and ``F*``.

    The step size decays as ``2 / (mu (t + gamma))``; ``w0 = 0``.
    """
    split, obj, _ = synth_quadratic(K, d, samples_per_client, condition,
                                    generator(seed, Purpose.DATA), noise_std=noise_std, lam=lam)
    const = quadratic_constants(obj, split.clients)
    return TrainSetup(obj, split.clients, split.test, fl.Schedule.decay(const.mu, gamma),
                      batch_size, local_steps, np.zeros(d), const.f_star, None, const)


def bound_params_for(setup: TrainSetup, cfg: SystemConfig, grad_bound: float) -> BoundParams:
    c = setup.constants
    return BoundParams(mu=c.mu, lip=c.lip, grad_bound=grad_bound, K=cfg.K, M=cfg.M, snr=cfg.snr,
                       gamma=setup.schedule.gamma,
                       w0_dist_sq=float(np.sum((setup.w0 - c.w_star) ** 2)))


def measure_grad_bound(setup: TrainSetup, cfg: SystemConfig, receiver: str, rounds: int,
                       seed: int, pre_runs: int = 3, inflation: float = 1.2) -> float:
    """``inflation`` times the largest client gradient norm seen over ``pre_runs`` pre-runs.

    Pre-runs use run indices from 1,000,000 up, disjoint from real runs.
    """
    peak = 0.0
    for r in range(pre_runs):
        task = make_task(setup, cfg, receiver, rounds, run=1_000_000 + r)
        for tr in fl.run_training(task, seed).traces:
            peak = max(peak, tr.grad_norm_max)
    return inflation * peak


def make_task(setup: TrainSetup, cfg: SystemConfig, receiver: str, rounds: int, run: int = 0,
              mmse_form: str = "gram") -> fl.TrainingTask:
    return fl.TrainingTask(
        objective=setup.objective, clients=setup.clients, cfg=cfg, receiver=receiver,
        rounds=rounds, local_steps=setup.local_steps, batch_size=setup.batch_size,
        schedule=setup.schedule, test=setup.test, w0=setup.w0, f_star=setup.f_star,
        run=run, mmse_form=mmse_form)


def train(setup: TrainSetup, cfg: SystemConfig, receivers: Sequence[str], rounds: int,
          runs: int, seed: int, threads: int = 1, task_name: str = "train"):
    """Run every receiver ``runs`` times and emit per-round means over runs."""
    rows: list[ResultRow] = []
    summary: dict = {"final": {}, "failures": []}
    K = cfg.K
    for rec in receivers:
        def one(run, rec=rec):
            try:
                return fl.run_training(make_task(setup, cfg, rec, rounds, run), seed).traces, None
            except fl.TrainingFailed as exc:
                return exc.traces, str(exc)
        results = _map(one, list(range(runs)), threads)
        for run, (_, err) in enumerate(results):
            if err:
                summary["failures"].append(f"{rec} run {run}: {err}")
        if any(len(tr) != rounds for tr, _ in results):
            continue
        traces = [tr for tr, _ in results]
        metrics = {
            "global_loss": lambda tr: tr.global_loss,
            "test_metric": lambda tr: tr.test_metric,
            "agg_mse": lambda tr: tr.agg_mse,
            "a1": lambda tr: tr.a1,
            "a1_closed_form": lambda tr: tr.eta ** 2 * tr.grad_sq_sum / K ** 2 * (K + 1 / cfg.snr) / cfg.M,
            "a1_ro_exact": lambda tr: tr.ro_error_expected / K ** 2,
            "opt_gap": lambda tr: tr.opt_gap,
            "eta": lambda tr: tr.eta,
            "lr_admissible": lambda tr: float(tr.lr_admissible),
        }
        for t in range(rounds):
            for name, get in metrics.items():
                value = float(np.mean([get(run_tr[t]) for run_tr in traces]))
                rows.append(ResultRow(task_name, cfg.M, K, cfg.snr_db, rec, t + 1, name, value,
                                      runs, seed))
        summary["final"][rec] = {
            "global_loss": float(np.mean([tr[-1].global_loss for tr in traces])),
            "test_metric": float(np.mean([tr[-1].test_metric for tr in traces])),
        }
    return rows, summary


# --------------------------------------------------------------------------- bounds

def bounds_report(params: BoundParams | None, T: int, Ks: Sequence[int], Ms: Sequence[int],
                  snrs_db: Sequence[float], sinr_trials: int, seed: int, threads: int = 1,
                  grad_bound: float = 1.0):
    rows: list[ResultRow] = []
    if params is not None:
        ts = np.arange(1, T + 1)
        for t, v in zip(ts, theorem1_bound(ts, params)):
            rows.append(ResultRow("bounds", params.M, params.K, linear_to_db(params.snr), "ro",
                                  int(t), "theorem1_bound", float(v), 0, seed))
    for K in Ks:
        for M in Ms:
            for s_db in snrs_db:
                B = b_factor(K, M, db_to_linear(s_db), grad_bound)
                for name, v in (("B", B), ("B_over_H2_per_K", B / (grad_bound ** 2 / K)),
                                ("B_over_H2_per_M", B / (grad_bound ** 2 / M))):
                    rows.append(ResultRow("bounds", M, K, float(s_db), "ro", 0, name, v, 0, seed))

    cells = [(M, K, s) for M in Ms for K in Ks for s in snrs_db if K <= 64]

    def sinr_cell(cell):
        M, K, s_db = cell
        cfg = SystemConfig(M=M, K=K, snr_db=s_db)
        return sinr_empirical(cfg, sinr_trials, generator(seed, M, K, int(round(s_db * 1000)), Purpose.SYMBOLS))

    reports = _map(sinr_cell, cells, threads) if sinr_trials > 0 else []
    for (M, K, s_db), rep in zip(cells, reports):
        for name, v in (("sinr_analytic", rep.analytic), ("sinr_analytic_db", linear_to_db(rep.analytic)),
                        ("sinr_empirical", rep.empirical),
                        ("sinr_empirical_db", linear_to_db(rep.empirical) if rep.empirical > 0 else -math.inf),
                        ("sir_limit", M / (K - 1) if K > 1 else math.inf),
                        ("interference_to_signal", (K - 1) / M)):
            rows.append(ResultRow("bounds", M, K, float(s_db), "ro", 0, name, v, sinr_trials, seed))
    summary = {"params": None if params is None else {
        f.name: getattr(params, f.name) for f in fields(params)} | {"B": params.B}}
    return rows, summary


# --------------------------------------------------------------------------- self-test

@dataclass(frozen=True)
class CheckResult:
    name: str
    statistic: float
    threshold: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} stat={self.statistic:.6g}  need {self.threshold}"


def _rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


def selftest(seed: int = 0, projection: Callable | None = None, trials: int = 20_000) -> list[CheckResult]:
    """Fast statistical invariants with fixed seeds.

    ``projection(Y, h_s)`` replaces the receiver projection; it exists so a
    deliberately broken projection can be shown to fail.
    """
    project = projection or ro_aggregate_block
    checks: list[CheckResult] = []
    rng = generator(seed, Purpose.CHANNEL)
    M, K, N = 64, 4, trials

    H = complex_normal(rng, (N, M, K), 1.0 / M)
    gains = np.einsum("tmk,tmk->tk", H.conj(), H).real
    v = float(np.var(gains[:, 0], ddof=1))
    checks.append(CheckResult("channel hardening var(h^H h)", v, f"within 20% of 1/M={1 / M:.4g}",
                              _rel(v, 1 / M) <= 0.2))
    cross = np.einsum("tm,tm->t", H[:, :, 0].conj(), H[:, :, 1])
    m = abs(complex(np.mean(cross)))
    lim = 3 * math.sqrt(1 / (M * N))
    checks.append(CheckResult("favorable propagation |mean|", m, f"<= {lim:.4g}", m <= lim))
    v = float(np.mean(np.abs(cross - np.mean(cross)) ** 2))
    checks.append(CheckResult("favorable propagation var", v, f"within 20% of 1/M={1 / M:.4g}",
                              _rel(v, 1 / M) <= 0.2))

    # unbiasedness of the projection with a fixed, non-zero-sum symbol vector
    x = np.array([1.0, -0.5, 0.75, 0.25])
    cfg = SystemConfig(M=M, K=K, snr_db=10.0)
    noise = complex_normal(generator(seed, Purpose.NOISE), (N, M), cfg.noise_var)
    Y = np.einsum("tmk,k->tm", H, x) + noise
    hs = H.sum(axis=2)
    est = np.array([project(Y[t][:, None], hs[t])[0] for t in range(N)])
    mean, se = _mean_se(est)
    z = abs(mean - x.sum()) / se
    checks.append(CheckResult("projection unbiasedness |z|", z, "<= 4", z <= 4.0))

    signal = np.sum(gains * x, axis=1)
    v = float(np.var(signal, ddof=1))
    target = np.sum(x ** 2) / M
    checks.append(CheckResult("signal variance law", v, f"within 20% of {target:.4g}",
                              _rel(v, target) <= 0.2))
    total = np.einsum("tm,tmk,k->t", hs.conj(), H, x)
    interf = total - signal
    v = float(np.mean(np.abs(interf - interf.mean()) ** 2))
    target = (K - 1) * np.sum(x ** 2) / M
    checks.append(CheckResult("interference variance law", v, f"within 20% of {target:.4g}",
                              _rel(v, target) <= 0.2))

    Hq = np.linalg.qr(complex_normal(rng, (M, K)))[0]
    floor = crlb(Hq, 10.0).mse_floor
    checks.append(CheckResult("CRLB orthonormal K/(2 snr)", floor, f"== {K / 20:.4g}",
                              abs(floor - K / 20) <= 1e-12))
    a, b = crlb(H[0], 2.0).mse_floor, crlb(H[0], 6.0).mse_floor
    checks.append(CheckResult("CRLB 1/snr scaling", a / b, "== 3", abs(a / b - 3) <= 1e-10))

    s = sinr_analytic(256, 8, 10.0)
    checks.append(CheckResult("SINR(256, 8, 10 dB)", s, "== 256/7.1", abs(s - 256 / 7.1) <= 1e-12))
    B = bounds.b_factor(8, 256, 10.0, 1.0)
    checks.append(CheckResult("B(8, 256, 10, H=1)", B, "== (1 + 8.1/256)/8",
                              abs(B - (1 + 8.1 / 256) / 8) <= 1e-15))
    return checks
