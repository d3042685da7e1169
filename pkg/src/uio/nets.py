"""Toy segment models.

Both models implement the segment-recurrent interface

    loss_t, memory_t = model.forward(segment_t, [memory_1, ..., memory_{t-1}])

where ``memory_t`` is computed from ``segment_t`` and the trainable
parameters alone.  That structural independence is what lets the schedulers
in :mod:`uio.sched` cut every cross-step graph at a detached leaf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Iterator, Literal, Optional, Sequence

import numpy as np

from . import tape as tp
from .tape import Tensor

GradReport = dict  # parameter name -> float64 array


class ParamSet:
    """Named parameters, split into trainable and frozen subsets."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values, trainable: bool) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    @property
    def trainable_names(self) -> list[str]:
        return [n for n, t in self._params.items() if t.requires_grad]

    @property
    def frozen_names(self) -> list[str]:
        return [n for n, t in self._params.items() if not t.requires_grad]

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.values.size for t in self._params.values()
                   if t.requires_grad or not trainable_only)

    def trainable_fraction(self) -> float:
        return self.count(trainable_only=True) / self.count()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad_report(self) -> GradReport:
        """Frozen copy of the accumulated trainable gradients (zeros where absent)."""
        return {n: (np.zeros_like(t.values) if t.grad is None else t.grad.copy())
                for n, t in self._params.items() if t.requires_grad}

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            raise KeyError("parameter names do not match")
        for n, v in state.items():
            t = self._params[n]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"{n}: shape {v.shape} != {t.shape}")
            t.values = v.copy()


def flat(report: GradReport) -> np.ndarray:
    return np.concatenate([np.ravel(report[k]) for k in sorted(report)])


class LoRAAdapter:
    """Low-rank delta on a frozen projection: ``W + (alpha / r) A B``."""

    def __init__(self, params: ParamSet, prefix: str, d_in: int, d_out: int, rank: int,
                 alpha: float, rng: np.random.Generator):
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.A = params.add(f"{prefix}.A", rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, rank)),
                            trainable=True)
        self.B = params.add(f"{prefix}.B", np.zeros((rank, d_out)), trainable=True)

    def effective_weight(self, W: Tensor) -> np.ndarray:
        return W.values + self.scaling * self.A.values @ self.B.values

    def project(self, x: Tensor, W: Tensor) -> Tensor:
        return (x @ W) + tp.scale((x @ self.A) @ self.B, self.scaling)


# ---------------------------------------------------------------------------
# fully-connected memory RNN

class ToyRNN:
    """``m_t = tanh(x_t W_m)``, ``J_t = ||mean(x_t, m_1..m_{t-1}) W_o - y_t||^2``.

    A segment is a pair ``(x, y)`` of row vectors with shapes ``[1, dim]`` and
    ``[1, out_dim]``.
    """

    def __init__(self, dim: int = 16, out_dim: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.out_dim = out_dim
        self.params = ParamSet()
        self.W_m = self.params.add("W_m", rng.normal(0, 1.0 / math.sqrt(dim), (dim, dim)), True)
        self.W_o = self.params.add("W_o", rng.normal(0, 1.0 / math.sqrt(dim), (dim, out_dim)),
                                   True)

    def encode(self, segment) -> Tensor:
        x, _ = segment
        return tp.tanh(Tensor(x) @ self.W_m)

    def loss(self, segment, memories: Sequence[Tensor]) -> Tensor:
        x, y = segment
        rows = tp.concat([Tensor(x), *memories], axis=0) if memories else Tensor(x)
        pooled = tp.reshape(tp.mean(rows, axis=0), (1, self.dim))
        return tp.sum_sq(pooled @ self.W_o - Tensor(y))

    def forward(self, segment, memories: Sequence[Tensor]):
        return self.loss(segment, memories), self.encode(segment)

    def make_segments(self, T: int, rng: np.random.Generator):
        return [(rng.normal(size=(1, self.dim)), rng.normal(size=(1, self.out_dim)))
                for _ in range(T)]


# ---------------------------------------------------------------------------
# memory-enhanced mini transformer

@dataclass(frozen=True)
class TransformerConfig:
    vocab: int = 64
    d_model: int = 32
    layers: int = 2
    heads: int = 2
    seg_len: int = 16
    k_mem: int = 4
    lora_rank: int = 4
    lora_alpha: float = 16.0
    mlp_mult: int = 2
    max_positions: int = 1024
    emb_std: float = 0.25
    # Larger than the token scale so frozen queries can address memory rows by position.
    pos_std: float = 1.0
    # "full": every segment token sees every memory row; "none": memory rows masked out
    # of decoder attention (an ablation of the memory path).
    mem_attention: Literal["full", "none"] = "full"
    seed: int = 0

    def __post_init__(self):
        for field in ("vocab", "d_model", "layers", "heads", "seg_len", "k_mem", "lora_rank",
                      "mlp_mult", "max_positions"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.mem_attention not in ("full", "none"):
            raise ValueError(f"mem_attention must be 'full' or 'none', got {self.mem_attention!r}")

    @property
    def compression_ratio(self) -> float:
        return self.seg_len / self.k_mem

    def to_dict(self) -> dict:
        return asdict(self)


_NEG = -1e30


def _merge_constants(tensors: Sequence[Tensor], axis: int) -> list[Tensor]:
    """Fuse runs of constant tensors into one constant so concat records fewer parents."""
    out, run = [], []
    for t in tensors:
        if t.requires_grad:
            if run:
                out.append(run[0] if len(run) == 1 else
                           Tensor(np.concatenate([r.values for r in run], axis=axis)))
                run = []
            out.append(t)
        else:
            run.append(t)
    if run:
        out.append(run[0] if len(run) == 1 else
                   Tensor(np.concatenate([r.values for r in run], axis=axis)))
    return out


def causal_mask(n_q: int, n_prefix: int, prefix_visible: bool = True) -> np.ndarray:
    """Additive mask: queries see the whole prefix and causally over themselves."""
    mask = np.zeros((n_q, n_prefix + n_q))
    mask[:, n_prefix:][np.triu_indices(n_q, 1)] = _NEG
    if not prefix_visible:
        mask[:, :n_prefix] = _NEG
    return mask


class ToyTransformer:
    """Shared-weight encoder/decoder with memory tokens, LoRA and a transfer head.

    Base weights (embeddings, attention and MLP projections) are frozen and used
    unchanged by the decoder.  The encoder runs ``[segment ‖ <mem> tokens]``
    with LoRA on the query and value projections; the activations of the memory
    tokens after every layer feed a per-layer transfer head (a second LoRA
    instance on the key and value projections) whose outputs become extra KV
    rows for the matching decoder layer.

    The memory passed between steps is the transferred KV block of shape
    ``[layers, 2, k_mem, d_model]`` (index 0 keys, 1 values).
    """

    def __init__(self, config: Optional[TransformerConfig] = None, **overrides):
        cfg = config or TransformerConfig()
        if overrides:
            cfg = TransformerConfig(**{**cfg.to_dict(), **overrides})
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        d, ps = cfg.d_model, ParamSet()
        self.params = ps
        self.tok_emb = ps.add("tok_emb", rng.normal(0, cfg.emb_std, (cfg.vocab, d)), False)
        self.pos_emb = ps.add("pos_emb", rng.normal(0, cfg.pos_std, (cfg.max_positions, d)),
                              False)
        self.mem_tokens = ps.add("mem_tokens", rng.normal(0, cfg.emb_std, (cfg.k_mem, d)), True)
        self.blocks = []
        hidden = cfg.mlp_mult * d
        for i in range(cfg.layers):
            p = f"layer{i}"
            blk = {
                "W_Q": ps.add(f"{p}.W_Q", rng.normal(0, 1 / math.sqrt(d), (d, d)), False),
                "W_K": ps.add(f"{p}.W_K", rng.normal(0, 1 / math.sqrt(d), (d, d)), False),
                "W_V": ps.add(f"{p}.W_V", rng.normal(0, 1 / math.sqrt(d), (d, d)), False),
                "W_O": ps.add(f"{p}.W_O", rng.normal(0, 1 / math.sqrt(d), (d, d)), False),
                "W_1": ps.add(f"{p}.W_1", rng.normal(0, 1 / math.sqrt(d), (d, hidden)), False),
                "W_2": ps.add(f"{p}.W_2", rng.normal(0, 1 / math.sqrt(hidden), (hidden, d)),
                              False),
            }
            self.blocks.append(blk)
        self.enc_lora = []
        self.xfer_lora = []
        for i in range(cfg.layers):
            r, a = cfg.lora_rank, cfg.lora_alpha
            self.enc_lora.append({
                "Q": LoRAAdapter(ps, f"enc{i}.lora_Q", d, d, r, a, rng),
                "V": LoRAAdapter(ps, f"enc{i}.lora_V", d, d, r, a, rng),
            })
            self.xfer_lora.append({
                "K": LoRAAdapter(ps, f"xfer{i}.lora_K", d, d, r, a, rng),
                "V": LoRAAdapter(ps, f"xfer{i}.lora_V", d, d, r, a, rng),
            })
        self._unembed = Tensor(self.tok_emb.values.T)

    # -- building blocks ---------------------------------------------------

    def _heads(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        H = self.config.heads
        return tp.transpose(tp.reshape(x, (n, H, self.config.d_model // H)), (1, 0, 2))

    def _attention(self, i: int, h: Tensor, lora: Optional[dict], mask: np.ndarray,
                   k_prefix: Optional[Tensor] = None, v_prefix: Optional[Tensor] = None):
        blk = self.blocks[i]
        if lora is None:
            q, v = h @ blk["W_Q"], h @ blk["W_V"]
        else:
            q, v = lora["Q"].project(h, blk["W_Q"]), lora["V"].project(h, blk["W_V"])
        k = h @ blk["W_K"]
        if k_prefix is not None:
            k = tp.concat([k_prefix, k], axis=0)
            v = tp.concat([v_prefix, v], axis=0)
        qh, kh, vh = self._heads(q), self._heads(k), self._heads(v)
        dh = self.config.d_model // self.config.heads
        scores = tp.scale(qh @ tp.transpose(kh, (0, 2, 1)), 1.0 / math.sqrt(dh)) + Tensor(mask)
        out = tp.softmax(scores) @ vh
        n = h.shape[0]
        out = tp.reshape(tp.transpose(out, (1, 0, 2)), (n, self.config.d_model))
        return out @ blk["W_O"]

    def _mlp(self, i: int, h: Tensor) -> Tensor:
        blk = self.blocks[i]
        return tp.tanh(h @ blk["W_1"]) @ blk["W_2"]

    def _positions(self, start: int, n: int) -> Tensor:
        if start + n > self.config.max_positions:
            raise ValueError(f"position {start + n - 1} exceeds max_positions "
                             f"{self.config.max_positions}")
        return Tensor(self.pos_emb.values[start:start + n])

    def _check_tokens(self, tokens, length: Optional[int] = None) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1:
            raise ValueError(f"expected a 1-d token array, got shape {tokens.shape}")
        if length is not None and tokens.shape[0] != length:
            raise ValueError(f"segment length {tokens.shape[0]} != {length}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab):
            raise ValueError("token id out of range")
        return tokens

    # -- encoder / transfer head / decoder ---------------------------------

    def _encode_layers(self, tokens) -> list[Tensor]:
        cfg = self.config
        x = self._check_tokens(tokens, cfg.seg_len)
        l, k = cfg.seg_len, cfg.k_mem
        h = tp.concat([tp.embedding(self.tok_emb, x), self.mem_tokens], axis=0)
        h = h + self._positions(0, l + k)
        mask = causal_mask(l + k, 0)
        per_layer = []
        for i in range(cfg.layers):
            h = h + self._attention(i, h, self.enc_lora[i], mask)
            h = h + self._mlp(i, h)
            per_layer.append(h[l:l + k])
        return per_layer

    def encode_segment(self, tokens) -> Tensor:
        """Memory-token activations of all layers, shape ``[layers * k_mem, d_model]``."""
        per_layer = self._encode_layers(tokens)
        return per_layer[0] if len(per_layer) == 1 else tp.concat(per_layer, axis=0)

    def transfer_memories(self, h_mem: Tensor) -> list[tuple[Tensor, Tensor]]:
        """Per-layer ``(K_mem, V_mem)`` from memory activations via the transfer head."""
        k = self.config.k_mem
        if h_mem.shape != (self.config.layers * k, self.config.d_model):
            raise tp.ShapeError(f"memory activations have shape {h_mem.shape}")
        rows = [h_mem[i * k:(i + 1) * k] for i in range(self.config.layers)]
        return self._transfer(rows)

    def _transfer(self, rows: Sequence[Tensor]) -> list[tuple[Tensor, Tensor]]:
        out = []
        for i, h in enumerate(rows):
            blk, lora = self.blocks[i], self.xfer_lora[i]
            out.append((lora["K"].project(h, blk["W_K"]), lora["V"].project(h, blk["W_V"])))
        return out

    def stack_kv(self, kv: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
        """Pack per-layer ``(K, V)`` into one ``[layers, 2, k_mem, d_model]`` memory."""
        k, d = kv[0][0].shape
        layers = [tp.concat([tp.reshape(K, (1, 1, k, d)), tp.reshape(V, (1, 1, k, d))], axis=1)
                  for K, V in kv]
        return layers[0] if len(layers) == 1 else tp.concat(layers, axis=0)

    def memory(self, tokens) -> Tensor:
        return self.stack_kv(self._transfer(self._encode_layers(tokens)))

    def decoder_logits(self, tokens, memories: Sequence[Tensor]) -> Tensor:
        """Logits ``[n, vocab]`` of the frozen decoder over ``[memory KV ‖ tokens]``."""
        if memories:
            # Slice each block before joining, so gradients only touch live blocks.
            blocks = _merge_constants(memories, axis=2)

            def rows(i, j):
                parts = [b[i, j] for b in blocks]
                return parts[0] if len(parts) == 1 else tp.concat(parts, axis=0)

            prefix = [(rows(i, 0), rows(i, 1)) for i in range(self.config.layers)]
            n_mem = prefix[0][0].shape[0]
        else:
            prefix, n_mem = None, 0
        return self.decode_with_prefix(tokens, prefix, n_mem, return_kv=False)[0]

    def decode_with_prefix(self, tokens, prefix: Optional[Sequence[tuple[Tensor, Tensor]]],
                           n_mem_rows: int, return_kv: bool = True):
        """Decode ``tokens`` after cached per-layer KV rows.

        The first ``n_mem_rows`` prefix rows are memory; any further rows are
        earlier decoder tokens.  New tokens take the positions right after the
        prefix.  Returns ``(logits, token_kv)`` where ``token_kv[i]`` holds the
        layer-``i`` keys and values of the new tokens, ready to extend a cache
        (empty unless ``return_kv``).
        """
        cfg = self.config
        x = self._check_tokens(tokens)
        n = x.shape[0]
        if n == 0:
            raise ValueError("empty segment")
        n_prefix = prefix[0][0].shape[0] if prefix else 0
        if not 0 <= n_mem_rows <= n_prefix:
            raise ValueError(f"n_mem_rows={n_mem_rows} outside prefix of {n_prefix} rows")
        h = tp.embedding(self.tok_emb, x) + self._positions(n_prefix, n)
        mask = causal_mask(n, n_prefix)
        if cfg.mem_attention == "none":
            mask[:, :n_mem_rows] = _NEG
        token_kv = []
        for i in range(cfg.layers):
            blk = self.blocks[i]
            if return_kv:
                token_kv.append((h @ blk["W_K"], h @ blk["W_V"]))
            if prefix:
                h = h + self._attention(i, h, None, mask, *prefix[i])
            else:
                h = h + self._attention(i, h, None, mask)
            h = h + self._mlp(i, h)
        return h @ self._unembed, token_kv

    def decode_loss(self, tokens, memories: Sequence[Tensor]) -> Tensor:
        """Next-token cross-entropy over the segment's ``len - 1`` predictable positions."""
        x = self._check_tokens(tokens)
        if x.shape[0] < 2:
            raise ValueError("segment needs at least two tokens to carry a loss")
        logits = self.decoder_logits(x[:-1], memories)
        return tp.cross_entropy(logits, x[1:])

    def forward(self, segment, memories: Sequence[Tensor]):
        return self.decode_loss(segment, memories), self.memory(segment)

    def make_segments(self, T: int, rng: np.random.Generator):
        return [rng.integers(0, self.config.vocab, self.config.seg_len) for _ in range(T)]


def copy_corpus(n_sequences: int, T: int, seg_len: int, vocab: int, seed: int,
                copy_len: Optional[int] = None) -> list[list[np.ndarray]]:
    """Synthetic sequences where part of each segment repeats an earlier one.

    Every segment starts with fresh random tokens.  From step 2 on, its last
    ``copy_len`` tokens (default half the segment) repeat the fresh prefix of
    a uniformly chosen earlier segment, so predicting them pays off from
    memories of any age.
    """
    copy_len = seg_len // 2 if copy_len is None else copy_len
    if not 0 <= copy_len < seg_len:
        raise ValueError("copy_len must be in [0, seg_len)")
    fresh = seg_len - copy_len
    rng = np.random.default_rng(seed)
    corpus = []
    for _ in range(n_sequences):
        segs = []
        for t in range(T):
            head = rng.integers(0, vocab, fresh)
            if t == 0:
                tail = rng.integers(0, vocab, copy_len)
            else:
                tail = segs[int(rng.integers(0, t))][:copy_len]
            segs.append(np.concatenate([head, tail]))
        corpus.append(segs)
    return corpus
