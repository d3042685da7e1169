import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uio import pipeline as pl, tape as tp
from uio.nets import ToyTransformer


@pytest.fixture(scope="module")
def model():
    m = ToyTransformer(seed=0)
    rng = np.random.default_rng(0)
    for n in m.params.trainable_names:
        m.params[n].values = m.params[n].values + 0.3 * rng.normal(size=m.params[n].shape)
    return m


@pytest.mark.parametrize("n,l,k,r", [(20, 8, 2, 4), (16, 8, 2, 0), (0, 8, 0, 0), (7, 8, 0, 7)])
def test_split_counts(n, l, k, r):
    plan = pl.split_context(np.arange(n), l)
    assert plan.k == k and len(plan.residual) == r
    assert all(len(s) == l for s in plan.segments)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.data())
def test_split_round_trip(l, data):
    n = data.draw(st.integers(0, 10 * l))
    x = np.random.default_rng(n).integers(0, 64, n)
    assert np.array_equal(pl.split_context(x, l).reassemble(), x)


def test_split_rejects_bad_l():
    with pytest.raises(ValueError):
        pl.split_context(np.arange(4), 0)


def test_prefill_order_invariant(model):
    x = np.random.default_rng(1).integers(0, 64, 16 * 5 + 3)
    plan = pl.split_context(x, 16)
    a = pl.prefill(plan, model)
    b = pl.prefill(plan, model, order=[4, 2, 0, 3, 1])
    assert a.equals(b)
    assert a.memory_rows == 5 * 4 and a.residual_rows == 3


def test_prefill_without_segments(model):
    asm = pl.prefill(pl.split_context(np.arange(5), 16), model)
    assert asm.memory_kv == [] and asm.residual_rows == 5


def test_prefill_does_not_touch_caller_tape(model):
    with tp.Tape() as tape:
        pl.prefill(pl.split_context(np.arange(40) % 64, 16), model)
        assert tape.live_node_count == 0


def test_cached_decode_matches_full_recompute(model):
    x = np.random.default_rng(2).integers(0, 64, 16 * 2 + 6)
    plan = pl.split_context(x, 16)
    state, asm = pl.start_generation(plan, model)
    with tp.Tape():
        mems = [tp.Tensor(b) for b in asm.memory_kv]
        full = model.decoder_logits(plan.residual, mems).values[-1]
    assert np.allclose(state.logits, full, atol=1e-10)


def test_first_token_without_memory_is_plain_decoder(model):
    plan = pl.split_context(np.array([3, 9, 27, 17]), 16)
    tok, _, _ = pl.generate_step(*pl.start_generation(plan, model), model)
    with tp.Tape():
        expect = int(np.argmax(model.decoder_logits(plan.residual, []).values[-1]))
    assert tok == expect


def test_generation_deterministic(model):
    plan = pl.split_context(np.arange(21) % 64, 16)
    a, _ = pl.generate(plan, model, 40)
    b, _ = pl.generate(plan, model, 40)
    assert np.array_equal(a, b)


def test_eviction_contract(model):
    plan = pl.split_context(np.arange(16 + 14) % 64, 16)
    state, asm = pl.start_generation(plan, model)
    _, state, asm = pl.generate_step(state, asm, model)
    assert state.uncompressed == 15 and len(asm.memory_kv) == 1
    _, state, asm = pl.generate_step(state, asm, model)
    assert len(asm.memory_kv) == 2 and asm.residual_rows == 0
    assert state.uncompressed == 0 and not state.pending_eviction
    assert asm.rows == model.config.k_mem * 2


def test_early_eviction_is_error(model):
    state, asm = pl.start_generation(pl.split_context(np.arange(5), 16), model)
    with pytest.raises(RuntimeError):
        pl.evict_and_compress(state, asm, model)


def test_manual_eviction(model):
    plan = pl.split_context(np.arange(15), 16)
    state, asm = pl.start_generation(plan, model)
    _, state, asm = pl.generate_step(state, asm, model, auto_evict=False)
    assert state.pending_eviction
    with pytest.raises(RuntimeError):
        pl.generate_step(state, asm, model)
    asm, state = pl.evict_and_compress(state, asm, model)
    assert len(asm.memory_kv) == 1 and asm.residual_rows == 0


def test_empty_context_cannot_generate(model):
    with pytest.raises(ValueError):
        pl.start_generation(pl.split_context(np.zeros(0), 16), model)


def test_kv_row_bound_long_generation(model):
    l, k = model.config.seg_len, model.config.k_mem
    context = 37
    plan = pl.split_context(np.arange(context) % 64, l)
    _, rows = pl.generate(plan, model, 20 * l)
    for i, r in enumerate(rows, start=1):
        assert r <= pl.kv_row_bound(context + i, l, k)
    n = context + 20 * l
    assert max(rows) <= n / model.config.compression_ratio + l


def test_flop_ratio_linear():
    cfg = ToyTransformer().config
    for k in (4, 8, 16, 64):
        ratio = pl.prefill_flops(2 * k, cfg, residual_len=7) / pl.prefill_flops(k, cfg, 7)
        assert 1.9 <= ratio <= 2.1
    per_token = [pl.prefill_flops(k, cfg) / (k * cfg.seg_len) for k in (1, 10, 100, 1000)]
    assert max(per_token) <= 1.0001 * min(per_token)


def test_autoencode_chance_and_marker():
    m = pl.autoencoder_model(4)
    samples = pl.random_samples(64, 16, 64, seed=0)
    assert not np.any(samples == pl.marker_token(m))
    res = pl.auto_encode_run(samples, m, 0)
    assert res.accuracy < 3 / 64
    bad = samples.copy()
    bad[0, 0] = pl.marker_token(m)
    with pytest.raises(ValueError):
        pl.auto_encode_run(bad, m, 1)


def test_autoencode_short_run_learns():
    m = pl.autoencoder_model(1)
    res = pl.auto_encode_run(pl.random_samples(2000, 16, 64, 0), m, 150)
    assert res.accuracy > res.initial_accuracy
    assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])
