"""Inference path: split a long context, compress segments, generate with eviction.

Memory blocks enter the decoder as extra KV rows.  Positions are implicit in
the row order: memory rows come first, then cached decoder tokens, and a new
token is embedded at the position right after every cached row.  After an
eviction the new block is appended and later tokens are positioned after it,
so the combined cache is always one contiguous run starting at 0.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tape as tp
from .nets import ToyTransformer
from .optim import Adam, clip_grad_norm, cosine_lr
from .sched import make_rng


@contextmanager
def _inference():
    # Trainable params would otherwise record nodes on the caller's tape.
    with tp.Tape():
        yield


def _tokens(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).reshape(-1)


# ---------------------------------------------------------------------------
# splitting

@dataclass(frozen=True)
class ContextPlan:
    segments: tuple[np.ndarray, ...]
    residual: np.ndarray
    l: int

    @property
    def k(self) -> int:
        return len(self.segments)

    def reassemble(self) -> np.ndarray:
        return np.concatenate([*self.segments, self.residual]).astype(np.int64)


def split_context(tokens, l: int) -> ContextPlan:
    if l < 1:
        raise ValueError("l must be >= 1")
    x = _tokens(tokens)
    k = len(x) // l
    return ContextPlan(tuple(x[i * l:(i + 1) * l].copy() for i in range(k)),
                       x[k * l:].copy(), l)


# ---------------------------------------------------------------------------
# KV assembly

@dataclass
class KVAssembly:
    """Decoder cache: memory blocks first, then raw token rows.

    ``memory_kv[j]`` is the ``[layers, 2, k_mem, d_model]`` block of step
    ``j + 1``; ``residual_kv[i]`` is ``(K, V)`` for the cached token rows of
    layer ``i``.
    """
    memory_kv: list[np.ndarray]
    residual_kv: list[tuple[np.ndarray, np.ndarray]]
    k_mem: int
    position_base: int = 0

    @property
    def memory_rows(self) -> int:
        return self.k_mem * len(self.memory_kv)

    @property
    def residual_rows(self) -> int:
        return self.residual_kv[0][0].shape[0] if self.residual_kv else 0

    @property
    def rows(self) -> int:
        return self.memory_rows + self.residual_rows

    def layer_kv(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        parts_k = [b[i, 0] for b in self.memory_kv]
        parts_v = [b[i, 1] for b in self.memory_kv]
        if self.residual_kv:
            parts_k.append(self.residual_kv[i][0])
            parts_v.append(self.residual_kv[i][1])
        return np.concatenate(parts_k, axis=0), np.concatenate(parts_v, axis=0)

    def prefix(self, layers: int):
        if self.rows == 0:
            return None
        return [tuple(tp.Tensor(a) for a in self.layer_kv(i)) for i in range(layers)]

    def equals(self, other: "KVAssembly") -> bool:
        """Bitwise comparison."""
        if len(self.memory_kv) != len(other.memory_kv) or self.rows != other.rows:
            return False
        return (all(np.array_equal(a, b) for a, b in zip(self.memory_kv, other.memory_kv))
                and all(np.array_equal(a, b) for p, q in zip(self.residual_kv, other.residual_kv)
                        for a, b in zip(p, q)))


def _empty_residual(model: ToyTransformer) -> list:
    d = model.config.d_model
    return [(np.zeros((0, d)), np.zeros((0, d))) for _ in range(model.config.layers)]


def encode_segments(model: ToyTransformer, segments: Sequence[np.ndarray],
                    order: Optional[Iterable[int]] = None) -> list[np.ndarray]:
    """Memory blocks of independent segments, returned in segment order.

    ``order`` only changes the encoding sequence.  Each block depends on its
    own segment alone, so the result is identical for every order.
    """
    idx = list(range(len(segments))) if order is None else list(order)
    if sorted(idx) != list(range(len(segments))):
        raise ValueError("order must be a permutation of the segment indices")
    blocks: dict[int, np.ndarray] = {}
    with _inference():
        for j in idx:
            blocks[j] = model.memory(segments[j]).values.copy()
    return [blocks[j] for j in range(len(segments))]


def _append_tokens(model: ToyTransformer, asm: KVAssembly, tokens) -> np.ndarray:
    """Run ``tokens`` against the cache, extend it with their rows, return logits."""
    with _inference():
        logits, kv = model.decode_with_prefix(tokens, asm.prefix(model.config.layers),
                                              asm.memory_rows)
    asm.residual_kv = [(np.concatenate([K0, K.values]), np.concatenate([V0, V.values]))
                       for (K0, V0), (K, V) in zip(asm.residual_kv, kv)]
    return logits.values


def _prefill(plan: ContextPlan, model: ToyTransformer, order):
    if plan.l != model.config.seg_len:
        raise ValueError(f"plan segment length {plan.l} != model seg_len {model.config.seg_len}")
    asm = KVAssembly(encode_segments(model, plan.segments, order), _empty_residual(model),
                     model.config.k_mem)
    logits = _append_tokens(model, asm, plan.residual) if plan.residual.size else None
    return asm, logits


def prefill(plan: ContextPlan, model: ToyTransformer,
            order: Optional[Iterable[int]] = None) -> KVAssembly:
    return _prefill(plan, model, order)[0]


# ---------------------------------------------------------------------------
# generation

@dataclass
class GenState:
    residual: np.ndarray
    generated: np.ndarray
    pending_eviction: bool = False
    # next-token logits from the last forward; None until something has been decoded
    logits: Optional[np.ndarray] = field(default=None, repr=False)
    last_token: Optional[int] = None
    history: list[int] = field(default_factory=list)

    @property
    def uncompressed(self) -> int:
        return len(self.residual) + len(self.generated)


def start_generation(plan: ContextPlan, model: ToyTransformer,
                     order: Optional[Iterable[int]] = None) -> tuple[GenState, KVAssembly]:
    """Prefill ``plan`` and compute the logits for the first generated token."""
    asm, logits = _prefill(plan, model, order)
    state = GenState(plan.residual.copy(), np.zeros(0, dtype=np.int64))
    if logits is not None:
        state.logits = logits[-1]
        state.last_token = int(plan.residual[-1])
    elif plan.k:
        state.last_token = int(plan.segments[-1][-1])
    else:
        raise ValueError("cannot generate from an empty context")
    return state, asm


def _query_logits(model: ToyTransformer, asm: KVAssembly, token: int) -> np.ndarray:
    # After an eviction nothing uncompressed is cached, so the last token is run
    # as a transient query; its row is not kept.
    with _inference():
        logits, _ = model.decode_with_prefix([token], asm.prefix(model.config.layers),
                                             asm.memory_rows, return_kv=False)
    return logits.values[-1]


def generate_step(state: GenState, assembly: KVAssembly, model: ToyTransformer,
                  auto_evict: bool = True) -> tuple[int, GenState, KVAssembly]:
    """Greedy-decode one token and cache it.  Evicts once ``l`` tokens are uncompressed."""
    if state.pending_eviction:
        raise RuntimeError("eviction pending; call evict_and_compress first")
    logits = state.logits if state.logits is not None else _query_logits(
        model, assembly, state.last_token)
    token = int(np.argmax(logits))
    state = replace(state, generated=np.append(state.generated, token), last_token=token,
                    history=state.history + [token])
    l = model.config.seg_len
    if state.uncompressed == l:
        state.pending_eviction = True
        state.logits = None
        if auto_evict:
            assembly, state = evict_and_compress(state, assembly, model)
    else:
        state.logits = _append_tokens(model, assembly, [token])[-1]
    return token, state, assembly


def evict_and_compress(state: GenState, assembly: KVAssembly,
                       model: ToyTransformer) -> tuple[KVAssembly, GenState]:
    """Compress the ``l`` uncompressed tokens into one memory block and drop their rows."""
    l = model.config.seg_len
    if state.uncompressed != l:
        raise RuntimeError(f"eviction needs exactly {l} uncompressed tokens, "
                           f"have {state.uncompressed}")
    combined = np.concatenate([state.residual, state.generated]).astype(np.int64)
    with _inference():
        block = model.memory(combined).values.copy()
    new = KVAssembly(assembly.memory_kv + [block], _empty_residual(model), assembly.k_mem)
    reset = GenState(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                     last_token=state.last_token, history=state.history)
    return new, reset


def generate(plan: ContextPlan, model: ToyTransformer, n: int):
    """Greedy-generate ``n`` tokens; returns the tokens and the cache row count after each."""
    state, asm = start_generation(plan, model)
    tokens, rows = [], []
    for _ in range(n):
        tok, state, asm = generate_step(state, asm, model)
        tokens.append(tok)
        rows.append(asm.rows)
    return np.asarray(tokens, dtype=np.int64), rows


def kv_row_bound(n_tokens: int, l: int, k_mem: int) -> int:
    """Upper bound on decoder cache rows per layer after ``n_tokens`` have been processed."""
    return k_mem * math.ceil(n_tokens / l) + l


# ---------------------------------------------------------------------------
# analytic FLOP model

def _block_flops(n_q: int, n_kv: int, d: int, hidden: int, lora_rank: int = 0,
                 lora_proj: int = 0) -> int:
    proj = 4 * 2 * n_q * d * d
    lora = lora_proj * (2 * n_q * d * lora_rank + 2 * n_q * lora_rank * d)
    attn = 2 * 2 * n_q * n_kv * d
    mlp = 2 * 2 * n_q * d * hidden
    return proj + lora + attn + mlp


def prefill_flops(k: int, config, residual_len: int = 0) -> int:
    """Multiply-add count (2 per MAC) of prefilling ``k`` segments plus a residual."""
    d, L, r = config.d_model, config.layers, config.lora_rank
    hidden = config.mlp_mult * d
    n = config.seg_len + config.k_mem
    # causal attention over n rows touches n(n+1)/2 score entries
    enc = L * _block_flops(n, (n + 1) // 2 + 1, d, hidden, r, 2)
    xfer = L * (2 * 2 * config.k_mem * d * d + 2 * (4 * config.k_mem * d * r))
    total = k * (enc + xfer)
    if residual_len:
        P = k * config.k_mem
        dec = L * _block_flops(residual_len, P + (residual_len + 1) // 2, d, hidden)
        total += dec + 2 * residual_len * d * config.vocab
    return total


# ---------------------------------------------------------------------------
# auto-encoding

@dataclass
class AutoEncodeResult:
    accuracy: float
    compression_ratio: float
    losses: list[float] = field(repr=False)
    initial_accuracy: float = float("nan")


def marker_token(model: ToyTransformer) -> int:
    """Reserved id that starts reconstruction; samples must not use it."""
    return model.config.vocab - 1


def random_samples(n: int, l: int, vocab: int, seed: int) -> np.ndarray:
    return make_rng(seed).integers(0, vocab - 1, (n, l))


def autoencoder_model(ratio: int, seed: int = 0, **overrides) -> ToyTransformer:
    """Toy transformer for reconstruction: ``k_mem = l / ratio`` and full-rank adapters."""
    base = ToyTransformer(seed=seed, **overrides).config
    if base.seg_len % ratio:
        raise ValueError(f"ratio {ratio} does not divide seg_len {base.seg_len}")
    full = {"lora_rank": base.d_model, "lora_alpha": float(base.d_model)}
    full.update(overrides)
    return ToyTransformer(base, k_mem=base.seg_len // ratio, **full)


def _reconstruction_logits(model: ToyTransformer, x: np.ndarray):
    inp = np.concatenate([[marker_token(model)], x[:-1]])
    return model.decoder_logits(inp, [model.memory(x)])


def reconstruction_accuracy(model: ToyTransformer, samples: np.ndarray) -> float:
    with _inference():
        hits = [np.mean(_reconstruction_logits(model, x).values.argmax(-1) == x)
                for x in samples]
    return float(np.mean(hits))


def auto_encode_run(samples: np.ndarray, model: ToyTransformer, train_steps: int,
                    test_samples: Optional[np.ndarray] = None, lr: float = 3e-3,
                    batch_size: int = 8, clip_norm: float = 1.0, seed: int = 0,
                    ) -> AutoEncodeResult:
    """Train encoder and transfer adapters to reconstruct each sample from its memory.

    Teacher forcing: the decoder sees ``[marker, x_1 .. x_{l-1}]`` after the
    sample's memory KV and must predict ``x``.  Accuracy is the fraction of
    exactly reconstructed tokens on ``test_samples`` under greedy argmax.
    """
    samples = np.asarray(samples, dtype=np.int64)
    l = model.config.seg_len
    if samples.ndim != 2 or samples.shape[1] != l:
        raise ValueError(f"samples must have shape [n, {l}], got {samples.shape}")
    if test_samples is None:
        test_samples = random_samples(200, l, model.config.vocab, seed + 1)
    for arr in (samples, test_samples):
        if np.any(arr == marker_token(model)):
            raise ValueError("samples use the reserved marker token")
    initial = reconstruction_accuracy(model, test_samples)
    rng = make_rng(seed, 7)
    opt = Adam(model.params, lr=lr)
    losses = []
    for step in range(train_steps):
        model.params.zero_grad()
        total = 0.0
        with tp.Tape():
            for i in rng.integers(0, len(samples), batch_size):
                x = samples[i]
                loss = tp.cross_entropy(_reconstruction_logits(model, x), x)
                tp.backward(loss)
                total += loss.item()
        grads = {n: g / batch_size for n, g in model.params.grad_report().items()}
        opt.step(clip_grad_norm(grads, clip_norm), cosine_lr(lr, step, train_steps))
        losses.append(total / batch_size)
    return AutoEncodeResult(reconstruction_accuracy(model, test_samples),
                            model.config.compression_ratio, losses, initial)
