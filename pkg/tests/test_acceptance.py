"""End-to-end acceptance checks at the stated trial counts and tolerances.

Each test records a one-line PASS/FAIL verdict (printed inline and again in
the terminal summary). Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import struct
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

from rofl import cli, fl
from rofl import experiments as ex
from rofl.bounds import crlb, theorem1_bound
from rofl.channel import SystemConfig, complex_normal, draw_channel, transmit
from rofl.dataio import IDX_DTYPES, IdxFormatError, idx_from_array, parse_idx, serialize_idx
from rofl.receivers import ro_aggregate
from rofl.rng import Purpose, Streams, generator

ROOT = Path(__file__).parents[1]
MS = (256, 512, 1024)
SNRS = list(range(-5, 21))


# --------------------------------------------------------------------------- shared runs

@pytest.fixture(scope="module")
def sweep():
    rows, _ = ex.nmse_sweep(MS, 8, SNRS, 2000, seed=0)
    table = {}
    for r in rows:
        table[(r.M, r.snr_db, r.receiver, r.metric)] = r.value
    return table


QUAD_CONFIGS = ((256, 8, 10.0), (64, 16, 0.0))


@pytest.fixture(scope="module")
def quadratic_runs():
    out = {}
    for M, K, snr_db in QUAD_CONFIGS:
        cfg = SystemConfig(M=M, K=K, snr_db=snr_db)
        setup = ex.build_quadratic_setup(K, seed=0)
        start = time.perf_counter()
        H = ex.measure_grad_bound(setup, cfg, "ro", 200, seed=0)
        params = ex.bound_params_for(setup, cfg, H)
        runs = [fl.run_training(ex.make_task(setup, cfg, "ro", 200, run), 0).traces for run in range(100)]
        out[(M, K, snr_db)] = (cfg, params, runs, time.perf_counter() - start)
    return out


# --------------------------------------------------------------------------- criteria

def test_c01_unbiased_aggregation(verdict):
    M, K, n = 256, 8, 100_000
    cfg = SystemConfig(M=M, K=K, snr_db=10.0)
    x = np.array([1.0, -0.5, 0.25, 0.75, -1.0, 0.5, 1.25, -0.25])
    rng_h, rng_n = generator(1, Purpose.CHANNEL), generator(1, Purpose.NOISE)
    start = time.perf_counter()
    vals = np.empty(n)
    for t in range(n):
        r = draw_channel(cfg, rng_h)
        vals[t] = ro_aggregate(transmit(r, x, cfg, rng_n), r.sum_estimate).value
    elapsed = time.perf_counter() - start
    se = vals.std(ddof=1) / math.sqrt(n)
    z = abs(vals.mean() - x.sum()) / se
    ok = z <= 4 and elapsed < 30
    assert verdict(1, ok, f"|mean - sum x| = {z:.2f} SE (need <= 4), {elapsed:.1f} s (need < 30)")


def test_c02_variance_laws(verdict):
    details, ok = [], True
    for M, K in ((64, 4), (256, 8)):
        cfg = SystemConfig(M=M, K=K, snr_db=10.0)
        x = generator(2, M).uniform(-1.5, 1.5, K)
        rng_h, rng_n = generator(2, M, Purpose.CHANNEL), generator(2, M, Purpose.NOISE)
        sig, inter = [], []
        for _ in range(10_000):
            r = draw_channel(cfg, rng_h)
            est = ro_aggregate(transmit(r, x, cfg, rng_n), r.sum_estimate, true_H=r.per_user)
            sig.append(est.signal_part.real)
            inter.append(est.interference_part)
        inter = np.array(inter)
        v_sig = np.var(sig, ddof=1) / (np.sum(x ** 2) / M)
        v_int = np.mean(np.abs(inter - inter.mean()) ** 2) / ((K - 1) * np.sum(x ** 2) / M)
        ok &= abs(v_sig - 1) <= 0.2 and abs(v_int - 1) <= 0.2
        details.append(f"(M={M},K={K}) signal {v_sig:.3f}x, interference {v_int:.3f}x")
    assert verdict(2, ok, "; ".join(details) + " of the laws (need within 20%)")


def test_c03_nmse_parity_moderate_snr(verdict, sweep):
    worst = max(((abs(sweep[(M, float(s), "ro-mmse", "gap_db")]), M, s) for M in MS for s in SNRS if s <= 12))
    bad = [(M, s) for M in MS for s in SNRS if s <= 12 and abs(sweep[(M, float(s), "ro-mmse", "gap_db")]) > 1.5]
    ok = not bad
    detail = (f"max |gap| over SNR <= 12 dB = {worst[0]:.2f} dB at M={worst[1]}, {worst[2]} dB (need <= 1.5); "
              f"{len(bad)} of {3 * 18} cells exceed")
    assert verdict(3, ok, detail)


def test_c04_high_snr_gap_trend(verdict, sweep):
    gaps = [sweep[(M, 20.0, "ro-mmse", "gap_db")] for M in MS]
    ok = 3.5 <= gaps[0] <= 6.5 and 1.0 <= gaps[2] <= 3.0 and gaps[0] >= gaps[1] >= gaps[2]
    assert verdict(4, ok, "gap at 20 dB: " + ", ".join(f"M={M}: {g:.2f} dB" for M, g in zip(MS, gaps))
                   + " (need [3.5,6.5] at 256, [1,3] at 1024, nonincreasing)")


def test_c05_crlb_dominance(verdict, sweep):
    H = complex_normal(generator(5), (64, 8), 1 / 64)
    scaling = all(math.isclose(crlb(H, s).mse_floor * s, crlb(H, 1.0).mse_floor, rel_tol=1e-12)
                  for s in (0.1, 3.0, 100.0))
    checks = [("ro", "crlb_sum_margin_z"), ("mmse", "crlb_sum_margin_z"), ("mmse", "crlb_trace_margin_z")]
    violations = [(rec, metric, M, s, sweep[(M, float(s), rec, metric)])
                  for rec, metric in checks for M in MS for s in SNRS
                  if sweep[(M, float(s), rec, metric)] < -2.0]
    ok = scaling and not violations
    by_rec = {}
    for rec, metric, M, s, z in violations:
        by_rec.setdefault(f"{rec}/{metric.split('_')[1]}", []).append(s)
    summary = "; ".join(f"{k}: {len(v)} cells, SNR {min(v)}..{max(v)} dB" for k, v in by_rec.items())
    assert verdict(5, ok, f"1/SNR scaling exact: {scaling}; cells below floor by > 2 SE: "
                   f"{len(violations)} ({summary or 'none'})")


def test_c06_timing_ratio(verdict):
    rows, summary = ex.timing(MS, 8, 10.0, 2000, seed=0)
    gram = [summary["ratios"]["mmse"][M] for M in MS]
    cov = [summary["ratios"]["mmse-cov"][M] for M in MS]
    ok = max(gram + cov) < 0.10 and cov[0] >= cov[1] >= cov[2]
    detail = ("RO/MMSE(M x M) " + ", ".join(f"{r:.3%}" for r in cov)
              + "; RO/MMSE(K x K) " + ", ".join(f"{r:.2%}" for r in gram)
              + f" for M={MS} (need all < 10%, M x M trend nonincreasing; K x K trend "
              + ("nonincreasing" if gram[0] >= gram[1] >= gram[2] else "flat within timing noise") + ")")
    assert verdict(6, ok, detail)


def test_c07_theorem1_bound(verdict, quadratic_runs):
    details, ok = [], True
    for key, (cfg, params, runs, elapsed) in quadratic_runs.items():
        gap = np.mean([[tr.opt_gap for tr in run] for run in runs], axis=0)
        bound = theorem1_bound(np.arange(1, 201), params)
        holds = bool(np.all(gap <= bound))
        ok &= holds and params.gamma + 1 >= 4 and elapsed < 600
        details.append(f"(M,K,SNR)={key}: holds={holds}, min bound/gap={np.min(bound / gap):.1f}, "
                       f"H={params.grad_bound:.2f}, {elapsed:.0f} s")
    assert verdict(7, ok, "; ".join(details))


def test_c08_lemma1_term(verdict, quadratic_runs):
    details, ok = [], True
    for key, (cfg, params, runs, _) in quadratic_runs.items():
        K = cfg.K
        traces = [tr for run in runs for tr in run]
        a1 = np.mean([tr.a1 for tr in traces])
        closed = np.mean([tr.eta ** 2 * tr.grad_sq_sum / K ** 2 * (K + 1 / cfg.snr) / cfg.M for tr in traces])
        exact = np.mean([tr.ro_error_expected / K ** 2 for tr in traces])
        ratio = a1 / closed
        ok &= abs(ratio - 1) <= 0.25 and len(traces) >= 500
        details.append(f"(M,K,SNR)={key}: A1/closed form = {ratio:.2f} over {len(traces)} rounds "
                       f"(A1/channel-averaged exact form = {a1 / exact:.2f})")
    assert verdict(8, ok, "; ".join(details) + " (need within 25%)")


def test_c09_learning_equivalence(verdict):
    cfg = SystemConfig(M=256, K=8, snr_db=10.0)
    finals = {"ideal": [], "ro": [], "mmse": []}
    for seed in range(5):
        setup = ex.build_svm_setup(ROOT / "data" / "mnist", 8, 500, 2000, seed)
        _, summary = ex.train(setup, cfg, list(finals), 100, 1, seed)
        for rec in finals:
            finals[rec].append(summary["final"][rec]["test_metric"])
    acc = {rec: 100 * float(np.mean(v)) for rec, v in finals.items()}
    ok = abs(acc["ro"] - acc["mmse"]) <= 2 and abs(acc["ro"] - acc["ideal"]) <= 3 and acc["ideal"] >= 80
    assert verdict(9, ok, f"mean final test accuracy over 5 seeds: ideal {acc['ideal']:.2f}%, "
                   f"RO {acc['ro']:.2f}%, MMSE {acc['mmse']:.2f}% (need |RO-MMSE| <= 2, |RO-ideal| <= 3)")


def test_c10_oracle_equivalence(verdict):
    setup = ex.build_svm_setup(ROOT / "data" / "mnist", 8, 500, 2000, 0)
    cfg = SystemConfig(M=256, K=8, snr_db=10.0)
    task = ex.make_task(setup, cfg, "ideal", 50)
    lam, eta, bs = setup.objective.lam, setup.schedule.eta, setup.batch_size
    streams = Streams(0).child(task.run)
    state, w = fl.FLState(np.zeros(task.dim)), np.zeros(task.dim)
    worst = 0.0
    for t in range(1, 51):
        node = streams.child(t)
        state, _ = fl.run_round(state, task, task.schedule(t), node)
        models = []
        for k, data in enumerate(setup.clients):
            idx = node.rng(Purpose.SGD, k).permutation(len(data))[:bs]
            X, y = data.features[idx], data.labels[idx]
            viol = y * (X @ w) < 1
            models.append(w - eta * (-(y[viol] @ X[viol]) / bs + lam * w))
        w = np.mean(models, axis=0)
        worst = max(worst, float(np.max(np.abs(state.w - w))))
    assert verdict(10, worst <= 1e-9, f"max |ideal - FedAvg oracle| over 50 rounds = {worst:.2e} (need <= 1e-9)")


def _random_array(rng):
    code = int(rng.choice(sorted(IDX_DTYPES)))
    dtype = IDX_DTYPES[code].newbyteorder("=")
    shape = tuple(int(s) for s in rng.integers(0, 6, size=int(rng.integers(1, 5))))
    if dtype.kind == "f":
        arr = rng.standard_normal(shape).astype(dtype)
    else:
        info = np.iinfo(dtype)
        arr = rng.integers(info.min, info.max, size=shape, endpoint=True).astype(dtype)
    return arr


def _mutate(buf: bytes, rng) -> bytes:
    kind = int(rng.integers(6))
    b = bytearray(buf)
    if kind == 0 and b:
        return bytes(b[: int(rng.integers(len(b)))])
    if kind == 1:
        return bytes(b + rng.bytes(int(rng.integers(1, 9))))
    if kind == 2 and b:
        i = int(rng.integers(len(b)))
        b[i] = int(rng.integers(256))
        return bytes(b)
    if kind == 3 and len(b) >= 8:
        ndim = b[3]
        for i in range(min(ndim, 4)):
            if 4 + 4 * i + 4 <= len(b):
                b[4 + 4 * i: 8 + 4 * i] = struct.pack(">I", int(rng.integers(2 ** 32)))
        return bytes(b)
    if kind == 4:
        return rng.bytes(int(rng.integers(0, 40)))
    return bytes([0, 0, int(rng.integers(256)), int(rng.integers(256))]) + rng.bytes(int(rng.integers(0, 64)))


def test_c11_parser_robustness(verdict):
    rng = generator(11)
    mismatches = 0
    for _ in range(1000):
        arr = _random_array(rng)
        back = parse_idx(serialize_idx(idx_from_array(arr))).array()
        mismatches += not (back.shape == arr.shape and back.dtype == arr.dtype
                           and np.array_equal(back.view(np.uint8), arr.view(np.uint8)))
    seeds = [serialize_idx(idx_from_array(_random_array(rng))) for _ in range(50)]
    crashes, over, accepted = 0, 0, 0
    tracemalloc.start()
    try:
        for i in range(10_000):
            buf = _mutate(seeds[i % 50], rng)
            tracemalloc.reset_peak()
            base = tracemalloc.get_traced_memory()[0]
            try:
                parse_idx(buf)
                accepted += 1
            except IdxFormatError:
                pass
            except Exception:  # noqa: BLE001 - any other exception is a crash
                crashes += 1
            peak = tracemalloc.get_traced_memory()[1] - base
            over += peak > 2 * len(buf) + 65536
    finally:
        tracemalloc.stop()
    ok = mismatches == 0 and crashes == 0 and over == 0
    assert verdict(11, ok, f"round-trip mismatches {mismatches}/1000; fuzz: {crashes} crashes, "
                   f"{over} allocations above 2x input + 64 KiB, {accepted}/10000 accepted")


def _runs(tmp_path, name, argv):
    outs = []
    for i, threads in enumerate(("1", "1", "3")):
        out = tmp_path / f"{name}{i}"
        assert cli.main(argv + ["--threads", threads, "--out", str(out)], environ={}) in (0,)
        outs.append((out / f"{argv[0]}.csv").read_bytes())
    return outs


def _mask_measurements(body: bytes) -> bytes:
    lines = body.decode().splitlines()
    header = lines[0].split(",")
    vi, wi = header.index("value"), header.index("wall_time_ns")
    masked = [lines[0]]
    for line in lines[1:]:
        cells = line.split(",")
        cells[vi] = cells[wi] = "*"
        masked.append(",".join(cells))
    return "\n".join(masked).encode()


def test_c12_determinism(verdict, tmp_path):
    commands = {
        "nmse-sweep": ["nmse-sweep", "--trials", "300", "--set", "M=[256, 512]", "--set", "snr_db=[-5, 10, 20]"],
        "train-svm": ["train", "--set", "rounds=10", "--seed", "3"],
        "train-quadratic": ["train", "--set", "task=quadratic", "--set", "rounds=30", "--trials", "4",
                            "--set", "pre_runs=1"],
        "bounds": ["bounds", "--trials", "200", "--set", "T=30", "--set", "pre_runs=1"],
        "selftest": ["selftest"],
    }
    results = {}
    for name, argv in commands.items():
        a, b, c = _runs(tmp_path, name, argv)
        results[name] = a == b == c
    a, b, c = _runs(tmp_path, "timing", ["timing", "--trials", "20", "--set", "M=[64, 128]"])
    results["timing (measured columns masked)"] = _mask_measurements(a) == _mask_measurements(b) == _mask_measurements(c)
    ok = all(results.values())
    detail = ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in results.items())
    assert verdict(12, ok, "CSV bytes across 2 runs and threads 1 vs 3: " + detail)
