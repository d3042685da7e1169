"""Acceptance suite.  Each test prints one PASS/FAIL line for its criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the slow criteria
(5, 7 and 9) take several minutes each.
"""

import dataclasses
import time

import numpy as np
import pytest

from uio import cli, pipeline as pl, sched, tape as tp, verify
from uio.nets import ToyRNN, ToyTransformer, copy_corpus, flat


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, t0):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail}; {time.time() - t0:.1f}s)")
        assert ok, detail
    return emit


@pytest.fixture(autouse=True)
def tape():
    with tp.Tape() as t:
        yield t


def test_criterion_1_equivalence(report):
    t0 = time.time()
    base = cli.ExperimentConfig(command="verify-equivalence")
    worst, bad = 0.0, 0
    for name, T, S, seed in cli.equivalence_tuples(20, 0):
        model = cli.build_model(dataclasses.replace(base, model=name, seed=seed))
        segs = model.make_segments(T, sched.make_rng(seed, 1))
        a = sched.run_tbptt(model, segs, S)
        b = sched.run_incremental_tbptt(model, segs, S)
        for p in a:
            delta, tol, ok = cli.grads_close(a[p], b[p], 1e-10)
            worst, bad = max(worst, delta), bad + (not ok)
    report(1, bad == 0 and time.time() - t0 < 120, f"max delta {worst:.2e}, {bad} mismatches", t0)


def test_criterion_2_oracle_identity(report):
    t0 = time.time()
    worst = 0.0
    for model in (ToyRNN(seed=0), ToyTransformer(seed=0)):
        for T in (1, 3, 6):
            segs = model.make_segments(T, np.random.default_rng(T))
            ref = sched.run_bptt(model, segs)
            for S in (max(T - 1, 1), T + 2):
                got = sched.run_tbptt(model, segs, S)
                for p in ref:
                    delta, tol, ok = cli.grads_close(ref[p], got[p], 1e-12)
                    worst = max(worst, delta / tol)
    rnn = ToyRNN(seed=0)
    assert rnn.params.count(trainable_only=True) <= 2000
    segs = rnn.make_segments(6, np.random.default_rng(0))
    g = flat(sched.run_bptt(rnn, segs))
    fd = flat(verify.finite_difference_oracle(lambda: verify.sequence_loss(rnn, segs), rnn.params))
    rel = float(np.max(np.abs(g - fd)) / np.max(np.abs(fd)))
    ok = worst <= 1 and rel < 1e-5 and time.time() - t0 < 300
    report(2, ok, f"tbptt/bptt worst {worst:.2e} of tol, bptt vs FD rel {rel:.2e}", t0)


def test_criterion_3_unbiasedness(report):
    t0 = time.time()
    model = ToyRNN(seed=0)
    segs = model.make_segments(8, sched.make_rng(0, 1))
    res = verify.unbiasedness_test(model, segs, 2, 2000, seed=0)
    ctl = verify.unbiasedness_test(model, segs, 2, 2000, seed=0, use_factor=False)
    ok = res.passed and not ctl.passed and time.time() - t0 < 600
    report(3, ok, f"frac {res.frac_over_3:.4f} relL2 {res.rel_l2:.4f}; control frac "
                  f"{ctl.frac_over_3:.3f} relL2 {ctl.rel_l2:.3f}", t0)


def test_criterion_4_retention(report):
    t0 = time.time()
    devs = {S: verify.retention_histogram(S, 12, 100_000, seed=S).max_deviation()
            for S in (1, 2, 3)}
    ok = max(devs.values()) <= 0.02 and time.time() - t0 < 60
    report(4, ok, ", ".join(f"S={S} dev {d:.4f}" for S, d in devs.items()), t0)


def test_criterion_5_ratio_trends(report):
    t0 = time.time()
    cfg = cli.ExperimentConfig(command="ratio-stats", T=12, warmup=200, n_sequences=64)
    model, data = cli.ratio_setup(cfg)
    oracle = verify.OracleCache(model, data)

    def stats(S, f):
        return verify.grad_ratio_stats(model, data, S, f, 200, 0, 8, oracle)

    w = {S: stats(S, True) for S in (1, 4, 8, 11)}
    wo = {S: stats(S, False) for S in (1, 4, 8)}
    means = [wo[S].mean_r for S in (1, 4, 8)]
    ok = (all(0.9 <= w[S].mean_r <= 1.1 for S in (1, 4, 8))
          and w[8].var_r < w[1].var_r
          and means[0] < means[1] < means[2] < 1
          and abs(w[11].mean_r - 1) <= 1e-6 and w[11].var_r <= 1e-10
          and time.time() - t0 < 1800)
    detail = ("with " + " ".join(f"S{S}={s.mean_r:.4f}/{s.var_r:.1e}" for S, s in w.items())
              + "; without " + " ".join(f"S{S}={s.mean_r:.4f}" for S, s in wo.items()))
    report(5, ok, detail, t0)


def test_criterion_6_bench_trends(report):
    t0 = time.time()
    cfg = cli.ExperimentConfig(command="bench")
    rows = cli.bench(cfg)
    inc = {r.S: r for r in rows if r.mode == "incremental"}
    van = {r.S: r for r in rows if r.mode == "tbptt"}
    times = [r.mean_step_ms for r in inc.values()]
    spread = (max(times) - min(times)) / min(times)
    growth = van[8].mean_step_ms / van[1].mean_step_ms
    peaks = all(inc[S].peak_live_nodes <= van[S].peak_live_nodes for S in inc)
    ok = spread < 0.2 and growth >= 2 and peaks and time.time() - t0 < 600
    report(6, ok, f"incremental spread {spread:.3f}, vanilla S8/S1 {growth:.2f}, "
                  f"peaks ok {peaks}", t0)


def test_criterion_7_loss_vs_window(report):
    t0 = time.time()
    data = copy_corpus(512, 8, 16, 64, seed=0)
    curves = verify.loss_vs_window(lambda: ToyTransformer(seed=0), data, [1, 2, 4], steps=1500,
                                   seed=0, lr=3e-3, batch_size=4, clip_norm=1.0)
    final = [curves[S].final for S in (1, 2, 4)]
    ok = all(b <= a * 1.02 for a, b in zip(final, final[1:])) and time.time() - t0 < 1200
    report(7, ok, "final " + " ".join(f"S{S}={v:.4f}" for S, v in zip((1, 2, 4), final)), t0)


def test_criterion_8_pipeline(report):
    t0 = time.time()
    rng = np.random.default_rng(0)
    l = 16
    trips = all(np.array_equal(pl.split_context(x, l).reassemble(), x)
                for x in (rng.integers(0, 64, n) for n in range(0, 10 * l + 1)))
    model = ToyTransformer(seed=0)
    for n in model.params.trainable_names:
        model.params[n].values = model.params[n].values + 0.3 * rng.normal(size=model.params[n].shape)
    plan = pl.split_context(rng.integers(0, 64, 6 * l + 5), l)
    order = all(pl.prefill(plan, model).equals(pl.prefill(plan, model, order=list(p)))
                for p in ([5, 4, 3, 2, 1, 0], [2, 0, 5, 1, 4, 3]))
    ctx = 3 * l + 2
    _, rows = pl.generate(pl.split_context(rng.integers(0, 64, ctx), l), model, 20 * l)
    bound = all(r <= pl.kv_row_bound(ctx + i, l, model.config.k_mem)
                for i, r in enumerate(rows, start=1))
    ratios = [pl.prefill_flops(2 * k, model.config) / pl.prefill_flops(k, model.config)
              for k in (4, 8, 16, 32, 64)]
    flops = all(1.9 <= r <= 2.1 for r in ratios)
    ok = trips and order and bound and flops and time.time() - t0 < 120
    report(8, ok, f"round-trip {trips}, order {order}, row bound {bound} (max {max(rows)}), "
                  f"flop ratios {min(ratios):.3f}..{max(ratios):.3f}", t0)


def test_criterion_9_autoencode(report):
    t0 = time.time()
    samples = pl.random_samples(32_000, 16, 64, seed=0)
    acc = {r: pl.auto_encode_run(samples, pl.autoencoder_model(r), 4000).accuracy
           for r in (1, 4, 8)}
    ok = acc[4] >= acc[8] and acc[1] >= 0.99 and time.time() - t0 < 1800
    report(9, ok, ", ".join(f"ratio {r}: {a:.4f}" for r, a in acc.items()), t0)
