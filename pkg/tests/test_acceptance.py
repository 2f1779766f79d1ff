"""Acceptance criteria, one test each.

Every test records a ``criterion N: PASS|FAIL ...`` line that is printed in
the pytest terminal summary (and, when run directly with
``python tests/test_acceptance.py``, at the end of the run).
"""

import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from estoi_sep import gradcheck, neural, trainer
from estoi_sep.audio_io import AudioClip
from estoi_sep.data import build_arrays
from estoi_sep.dsp import StftConfig
from estoi_sep.experiments import ToySetup, compare_regimes, mean_over_seeds
from estoi_sep.loss import EstoiLossConfig, d_final, mse_loss
from estoi_sep.metrics import SENTINEL_DB, bss_eval, estoi_metric, stoi_metric
from estoi_sep.synthetic import speaker_pair


def report(n, passed, detail):
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def test_1_estoi_gradient_fidelity():
    t0 = time.perf_counter()
    results = gradcheck.run("estoi", instances=20, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    ok = worst < 1e-6 and elapsed < 60
    assert report(1, ok, f"ESTOI loss, 20 instances: max rel err {worst:.2e} (< 1e-6), "
                         f"{elapsed:.1f} s (< 60 s)")


def test_2_end_to_end_gradient():
    t0 = time.perf_counter()
    results = gradcheck.run("network", instances=20, seed=0)
    elapsed = time.perf_counter() - t0
    errs = {r.name: r.max_rel_error for r in results}
    ok = set(errs) == {"network-mse", "network-estoi"} and max(errs.values()) < 1e-5 \
        and elapsed < 120
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errs.items())
    assert report(2, ok, f"mask + 1x8 LSTM, T=10: {detail} (< 1e-5), {elapsed:.1f} s (< 120 s)")


def orthogonal_noise(refs, L, snr_db, rng):
    n = len(refs[0])
    cols = [np.concatenate([np.zeros(d), r[:n - d]]) for r in refs for d in range(L)]
    A = np.stack(cols, axis=1)
    noise = rng.standard_normal(n)
    noise -= A @ np.linalg.lstsq(A, noise, rcond=None)[0]
    return noise * np.linalg.norm(refs[0]) / np.linalg.norm(noise) * 10 ** (-snr_db / 20)


def test_3_metric_identities():
    rng = np.random.default_rng(3)
    worst_e = worst_s = 0.0
    for k in range(50):
        seconds = rng.uniform(1.0, 3.0)
        if k % 2:
            a, _ = speaker_pair(seconds, kind=("disjoint", "overlapping")[k % 4 // 2], seed=k)
            x = a
        else:
            x = AudioClip(rng.standard_normal(int(seconds * 16000)) * 0.1, 16000)
        worst_e = max(worst_e, abs(estoi_metric(x, x) - 1.0))
        worst_s = max(worst_s, abs(stoi_metric(x, x) - 1.0))
    s = rng.standard_normal(16000)
    sentinel = bss_eval([s], [0.3 * s])[0]
    refs = [rng.standard_normal(16000), rng.standard_normal(16000)]
    noise = orthogonal_noise(refs, 512, 10.0, rng)
    sdr = bss_eval(refs, [refs[0] + noise, refs[1]])[0][0]
    ok = (worst_e <= 1e-9 and worst_s <= 1e-9 and all(v == SENTINEL_DB for v in sentinel)
          and abs(sdr - 10.0) <= 0.2)
    assert report(3, ok, f"50 clips: |estoi-1| {worst_e:.1e}, |stoi-1| {worst_s:.1e}; "
                         f"scaled ref -> {sentinel[0]:.0f} dB sentinel; "
                         f"orthogonal noise at 10 dB -> SDR {sdr:.3f} dB")


def test_4_mask_sum_and_reconstruction():
    rng = np.random.default_rng(4)
    exact = True
    worst = 0.0
    for k in range(10):
        hidden = [int(h) for h in rng.integers(2, 24, size=1 + k % 3)]
        model = neural.init_model(65, hidden, seed=k)
        for p in model.parameters().values():
            p *= rng.uniform(0.5, 4.0)
        Z = rng.uniform(0, 1, (3, 65, 40)) * 10.0 ** rng.uniform(-4, 2)
        res = neural.forward(model, Z)
        exact &= bool(np.array_equal(res.est1 + res.est2, Z))
        n = int(rng.integers(2000, 30000))
        mix = AudioClip(rng.standard_normal(n) * 0.2, 16000)
        s1, s2 = trainer.separate(model, mix, sequence_length=int(rng.integers(16, 300)))
        interior = slice(128, n - 128)
        err = np.linalg.norm((s1.samples + s2.samples - mix.samples)[interior])
        worst = max(worst, err / np.linalg.norm(mix.samples[interior]))
    ok = exact and worst < 1e-6
    assert report(4, ok, f"10 models: est1+est2==Z bitwise: {exact}; "
                         f"separate() sum rel L2 err {worst:.1e} (< 1e-6)")


@pytest.mark.slow
def test_5_toy_regime_trend():
    t0 = time.perf_counter()
    setup = ToySetup()
    results = compare_regimes(setup, seeds=(0, 1, 2))
    elapsed = time.perf_counter() - t0
    estoi = {k: mean_over_seeds(v, "estoi") for k, v in results.items()}
    sdr = {k: mean_over_seeds(v, "sdr_db") for k, v in results.items()}
    a = estoi["ESTOI-DNN"] >= estoi["MSE-DNN"] - 0.005
    b = sdr["MSE-ESTOI-DNN"] >= sdr["ESTOI-DNN"] - 0.1
    ok = a and b and elapsed < 1800
    table = "; ".join(f"{k} ESTOI {estoi[k]:.3f} SDR {sdr[k]:.2f} dB" for k in results)
    assert report(5, ok, f"(a) {a} (b) {b}; {table}; 3 seeds, 1x{setup.hidden}, "
                         f"{elapsed / 60:.1f} min (< 30 min)")


def disjoint_toy():
    a, b = speaker_pair(4.4, kind="disjoint", seed=5)
    return tuple(x[:4].astype(np.float64) for x in build_arrays(a, b, n_shifts=1))


def test_6_overfit():
    t0 = time.perf_counter()
    data = disjoint_toy()
    loss_config = EstoiLossConfig.default()
    start = neural.init_model(65, [32], seed=0)
    initial = trainer.dataset_loss(start, data, mse_loss)
    cfg = trainer.TrainConfig(regime="mse", max_epochs=500, patience=500, batch_size=4,
                              learning_rate=1e-2)
    _, hist = trainer.train(cfg, data, data, model=start.copy(), loss_config=loss_config)
    final = hist.records[-1].train_loss
    reduction = 1.0 - final / initial

    cfg = trainer.TrainConfig(regime="estoi", max_epochs=500, patience=500, batch_size=4,
                              learning_rate=1e-2)
    model, _ = trainer.train(cfg, data, data, model=start.copy(), loss_config=loss_config)
    res = neural.forward(model, data[0])
    d1 = d_final(res.est1, data[1], loss_config)[0]
    d2 = d_final(res.est2, data[2], loss_config)[0]
    worst_d = float(min(d1.min(), d2.min()))
    elapsed = time.perf_counter() - t0
    ok = reduction >= 0.9 and worst_d >= 0.85 and elapsed < 600
    assert report(6, ok, f"4 sequences, 1x32: MSE train loss down {100 * reduction:.2f}% "
                         f"(>= 90%) in 500 epochs; ESTOI regime min per-source d_final "
                         f"{worst_d:.3f} (>= 0.85); {elapsed:.0f} s (< 600 s)")


def scripted_run(trace, monkeypatch, max_epochs):
    values = iter(trace)
    monkeypatch.setattr(trainer, "dataset_loss", lambda *a, **k: next(values))
    rng = np.random.default_rng(0)
    data = tuple(rng.uniform(0, 1, (2, 65, 8)) for _ in range(3))
    snaps = []
    cfg = trainer.TrainConfig(regime="mse", max_epochs=max_epochs, patience=30, batch_size=2)
    model, hist = trainer.train(cfg, data, data, hidden_sizes=[2],
                                on_epoch=lambda rec, m: snaps.append(m.copy()))
    same = all(np.array_equal(p, snaps[hist.best_epoch].parameters()[k])
               for k, p in model.parameters().items())
    return len(hist.records) - 1, hist.best_epoch, same


def test_7_early_stopping(monkeypatch):
    # (trace, expected 0-based stop epoch or None, expected best epoch)
    cases = [
        ([10.0 - k for k in range(5)] + [6.0] * 40, 34, 4),
        ([1.0] + [2.0] * 28 + [0.5] + [0.7] * 40, 59, 29),
        ([1.0] * 45, 30, 0),
        ([3.0, 2.0] + [2.5] * 29, None, 1),
    ]
    ok, parts = True, []
    for trace, stop, best in cases:
        replay = trainer.run_trace(trace, 30)
        last, best_run, same = scripted_run(trace, monkeypatch, max_epochs=len(trace))
        expected_last = stop if stop is not None else len(trace) - 1
        case_ok = replay == (stop, best) and (last, best_run) == (expected_last, best) and same
        ok &= case_ok
        parts.append(f"stop {stop} best {best}: {'ok' if case_ok else 'MISMATCH'}")
    assert report(7, ok, "patience 30 traces: " + "; ".join(parts))


def test_8_latency_and_causality():
    rng = np.random.default_rng(8)
    a, b = speaker_pair(3.0, kind="overlapping", seed=8)
    mix = AudioClip(a.samples + b.samples, 16000)
    model = neural.init_model(65, [16, 16], seed=8)
    _, _, full = trainer.separate(model, mix, return_mask=True)
    c = StftConfig()
    identical = True
    points = sorted(int(t) for t in rng.choice(np.arange(1, full.shape[1]), 10, replace=False))
    for t in points:
        n = (t - 1) * c.hop + c.window_length
        _, _, part = trainer.separate(model, AudioClip(mix.samples[:n], 16000), return_mask=True)
        identical &= part.shape[1] == t and bool(np.array_equal(part, full[:, :t]))
    exe = shutil.which("estoi-sep")
    cmd = [exe] if exe else [sys.executable, "-m", "estoi_sep.cli"]
    out = subprocess.run(cmd + ["separate", "--report-latency"], capture_output=True,
                         text=True).stdout.strip()
    ok = identical and out == "8.0 ms"
    assert report(8, ok, f"prefix truncation at {points}: masks identical: {identical}; "
                         f"--report-latency prints '{out}'")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print("\n".join(ACCEPTANCE_LINES))
    sys.exit(code)
