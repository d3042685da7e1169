"""Gradient schedulers for segment-recurrent models.

All four schedulers drive the same model interface (``model.forward(segment,
memories) -> (loss, memory)``, ``model.params``) and return a
:class:`GradReport` of the trainable parameters, summed over segments.

* ``run_bptt``            every loss backpropagated through every earlier memory
* ``run_tbptt``           each loss reaches only the ``S`` most recent memories
* ``run_incremental_tbptt`` same sum as ``run_tbptt``, reordered so each
  encoder graph is traversed once: losses deposit gradients on detached memory
  leaves, and a memory's graph is backpropagated when it leaves the window
* ``run_unbiased_incremental_tbptt`` incremental accumulation where the
  retained memories are a reservoir sample of all earlier steps, and fresh leaf
  gradients are scaled by ``max(1, (t-1)/S)`` to undo the retention probability

Steps ``t`` are 1-based throughout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tape as tp
from .tape import GraphError, Tensor

MODES = ("bptt", "tbptt", "incremental", "unbiased")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional spawn path.

    Distinct ``stream`` tuples give statistically independent generators, so
    trial ``i`` of an experiment can use ``make_rng(seed, i)`` reproducibly.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=stream)))


class GradReport(dict):
    """Trainable-parameter gradients plus a ``trace`` of scheduler bookkeeping."""

    def __init__(self, grads: dict, trace: Optional["RunTrace"] = None):
        super().__init__(grads)
        self.trace = trace


@dataclass
class RunTrace:
    mode: str
    losses: list[float] = field(default_factory=list)
    backward_passes: int = 0
    phase_two_per_step: list[int] = field(default_factory=list)
    flush_order: list[int] = field(default_factory=list)
    max_active: int = 0
    live_nodes_before: int = 0
    live_nodes_after: int = 0
    peak_live_nodes: int = 0
    decisions: list = field(default_factory=list)


@dataclass
class MemorySlot:
    t: int
    live: Tensor
    leaf: Tensor
    state: str = "active"

    @property
    def active(self) -> bool:
        return self.state == "active"

    def input(self) -> Tensor:
        """What later forwards see: the leaf while active, a constant once flushed."""
        return self.leaf if self.active else tp.constant(self.leaf)

    def flush(self, trace: RunTrace) -> bool:
        """Push the leaf's gradient through the encoder graph and free it.

        Returns whether a backward pass ran (a leaf that never received a
        gradient is only freed).
        """
        if not self.active:
            raise GraphError(f"slot {self.t} flushed twice")
        ran = False
        if self.leaf.grad is not None and self.live.node is not None:
            tp.backward(self.live, seed_grad=self.leaf.grad, retain_graph=False)
            ran = True
        else:
            tp.free_graph(self.live)
        self.state = "flushed"
        self.leaf.grad = None
        trace.flush_order.append(self.t)
        return ran


def _new_slot(t: int, memory: Tensor) -> MemorySlot:
    tp.pin(memory)
    return MemorySlot(t, memory, tp.detach(memory))


def _phase_one(loss: Tensor) -> bool:
    if loss.node is None:
        return False
    tp.backward(loss, retain_graph=False)
    return True


def _start(model, mode: str) -> tuple[RunTrace, tp.Tape]:
    model.params.zero_grad()
    tape = tp.Tape.current()
    tape.reset_peak()
    return RunTrace(mode, live_nodes_before=tape.live_node_count), tape


def _finish(model, trace: RunTrace, tape: tp.Tape, passes_before: int) -> GradReport:
    trace.backward_passes = tape.backward_pass_count - passes_before
    trace.live_nodes_after = tape.live_node_count
    trace.peak_live_nodes = tape.peak_live_node_count
    return GradReport(model.params.grad_report(), trace)


def _check_window(S: int, max_retained_graphs: Optional[int]) -> None:
    if S < 1:
        raise ValueError(f"window S must be >= 1, got {S}")
    if max_retained_graphs is not None and max_retained_graphs < S:
        raise ValueError(f"max_retained_graphs={max_retained_graphs} is below S={S}")


def _count_active(slots, trace: RunTrace, cap: Optional[int]) -> None:
    n = sum(s.active for s in slots)
    trace.max_active = max(trace.max_active, n)
    if cap is not None and n > cap:
        raise GraphError(f"{n} encoder graphs retained, cap is {cap}")


def run_bptt(model, segments: Sequence) -> GradReport:
    """Exact gradient of ``sum_t J_t``: one backward through every step's graph."""
    trace, tape = _start(model, "bptt")
    passes = tape.backward_pass_count
    slots: list[MemorySlot] = []
    total = None
    for t, seg in enumerate(segments, start=1):
        loss, memory = model.forward(seg, [s.live for s in slots])
        trace.losses.append(loss.item())
        slots.append(_new_slot(t, memory))
        total = loss if total is None else total + loss
    trace.max_active = len(slots)
    if total is not None and total.node is not None:
        tp.backward(total)
    for s in slots:
        tp.free_graph(s.live)
        s.state = "flushed"
        trace.flush_order.append(s.t)
    return _finish(model, trace, tape, passes)


def in_window(t: int, s: int, S: int) -> int:
    """1 when the memory of step ``s`` receives gradient from ``J_t`` under window ``S``."""
    return int(t - S <= s < t)


def run_tbptt(model, segments: Sequence, S: int) -> GradReport:
    """Vanilla truncated BPTT: ``J_t`` backpropagates into ``m_s`` for ``t-S <= s < t``.

    Windowed memories enter the forward graph-attached, so every loss walks
    up to ``S`` encoder graphs; older memories enter as constants.  Each step's
    whole graph (decoder included) is retained until the step leaves the
    window, as a plain ``retain_graph`` implementation keeps it.
    """
    _check_window(S, None)
    trace, tape = _start(model, "tbptt")
    passes = tape.backward_pass_count
    slots: list[MemorySlot] = []
    losses: list[Tensor] = []

    def release(i: int) -> None:
        tp.free_graph(losses[i])
        tp.free_graph(slots[i].live)
        slots[i].state = "flushed"
        trace.flush_order.append(slots[i].t)

    for t, seg in enumerate(segments, start=1):
        lo = max(1, t - S)
        mems = [s.live if s.t >= lo else tp.constant(s.live) for s in slots]
        loss, memory = model.forward(seg, mems)
        trace.losses.append(loss.item())
        slots.append(_new_slot(t, memory))
        losses.append(tp.pin(loss))
        _count_active(slots, trace, None)
        if loss.node is not None:
            tp.backward(loss, retain_graph=True)
        if t - S >= 1:
            release(t - S - 1)
    for i, s in enumerate(slots):
        if s.active:
            release(i)
    return _finish(model, trace, tape, passes)


def run_incremental_tbptt(model, segments: Sequence, S: int,
                          max_retained_graphs: Optional[int] = None) -> GradReport:
    """Truncated BPTT with the double sum swapped: two backward passes per step."""
    _check_window(S, max_retained_graphs)
    trace, tape = _start(model, "incremental")
    passes = tape.backward_pass_count
    slots: list[MemorySlot] = []
    for t, seg in enumerate(segments, start=1):
        loss, memory = model.forward(seg, [s.input() for s in slots])
        trace.losses.append(loss.item())
        _phase_one(loss)
        slots.append(_new_slot(t, memory))
        _count_active(slots, trace, None if max_retained_graphs is None
                      else max_retained_graphs + 1)
        ran = 0
        if t - S >= 1:
            ran = int(slots[t - S - 1].flush(trace))
        trace.phase_two_per_step.append(ran)
    for s in slots:
        if s.active:
            s.flush(trace)
    return _finish(model, trace, tape, passes)


def compensation_factor(t: int, S: int) -> float:
    """``max(1, (t-1)/S)``: inverse of the chance that an earlier step is retained at ``t``."""
    if t < 1 or S < 1:
        raise ValueError("t and S must be >= 1")
    return max(1.0, (t - 1) / S)


class Decision(enum.Enum):
    KEEP_ALL = "keep_all"
    EVICT = "evict"
    REJECT_NEW = "reject_new"


class Reservoir:
    """Algorithm-R reservoir of step indices with capacity ``S``."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("reservoir capacity must be >= 1")
        self.capacity = capacity
        self.retained: list[int] = []
        self.seen = 0

    def offer(self, t: int, j: int) -> tuple[Decision, Optional[int]]:
        """Process step ``t`` given a draw ``j`` uniform on ``{0, ..., t-1}``."""
        if t != self.seen + 1:
            raise ValueError(f"expected step {self.seen + 1}, got {t}")
        self.seen = t
        if t <= self.capacity:
            self.retained.append(t)
            return Decision.KEEP_ALL, None
        if j < self.capacity:
            evicted = self.retained[j]
            self.retained[j] = t
            return Decision.EVICT, evicted
        return Decision.REJECT_NEW, t


def reservoir_step(res: Reservoir, t: int, rng: np.random.Generator):
    """Offer step ``t``; draws a random index only once the reservoir is full."""
    j = int(rng.integers(0, t)) if t > res.capacity else 0
    return res.offer(t, j)


def run_unbiased_incremental_tbptt(model, segments: Sequence, S: int,
                                   rng: np.random.Generator | int = 0,
                                   use_factor: bool = True,
                                   max_retained_graphs: Optional[int] = None) -> GradReport:
    """One stochastic, unbiased estimate of the ``run_bptt`` gradient.

    Per step: stash the active leaves' gradients, backpropagate the new loss
    onto the leaves, scale the fresh part by the compensation factor and add
    the stash back (direct parameter paths are never scaled), then let the
    reservoir decide which graph to backpropagate and free.
    ``use_factor=False`` is the biased ablation.
    """
    _check_window(S, max_retained_graphs)
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng))
    trace, tape = _start(model, "unbiased")
    passes = tape.backward_pass_count
    slots: list[MemorySlot] = []
    res = Reservoir(S)
    for t, seg in enumerate(segments, start=1):
        loss, memory = model.forward(seg, [s.input() for s in slots])
        trace.losses.append(loss.item())
        active = [s for s in slots if s.active]
        stash = []
        for s in active:
            stash.append(s.leaf.grad)
            s.leaf.grad = None
        _phase_one(loss)
        factor = compensation_factor(t, S) if use_factor else 1.0
        for s, g in zip(active, stash):
            tp.grad_scale_add(s.leaf, factor, g)
        slots.append(_new_slot(t, memory))
        _count_active(slots, trace, None if max_retained_graphs is None
                      else max_retained_graphs + 1)
        decision, victim = reservoir_step(res, t, rng)
        trace.decisions.append((decision.value, victim))
        ran = 0
        if victim is not None:
            ran = int(slots[victim - 1].flush(trace))
        trace.phase_two_per_step.append(ran)
    for s in sorted(slots, key=lambda s: s.t, reverse=True):
        if s.active:
            s.flush(trace)
    return _finish(model, trace, tape, passes)


def run_mode(mode: str, model, segments: Sequence, S: int, rng=0, use_factor: bool = True,
             max_retained_graphs: Optional[int] = None) -> GradReport:
    if mode == "bptt":
        return run_bptt(model, segments)
    if mode == "tbptt":
        return run_tbptt(model, segments, S)
    if mode == "incremental":
        return run_incremental_tbptt(model, segments, S, max_retained_graphs)
    if mode == "unbiased":
        return run_unbiased_incremental_tbptt(model, segments, S, rng, use_factor,
                                              max_retained_graphs)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass
class TrainConfig:
    mode: str = "unbiased"
    S: int = 2
    T: int = 8
    seed: int = 0
    learning_rate: float = 1e-3
    max_retained_graphs: Optional[int] = None
    optimizer: str = "adam"
    schedule: str = "constant"
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.S < 1 or self.T < 1:
            raise ValueError("S and T must be >= 1")
        if self.max_retained_graphs is not None and self.max_retained_graphs < self.S:
            raise ValueError(f"max_retained_graphs={self.max_retained_graphs} is below S={self.S}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


def train(model, batches, config: TrainConfig, steps: int) -> list[float]:
    """Run ``steps`` optimizer updates; returns the mean per-segment loss of each step.

    ``batches(step)`` yields the list of sequences (each a list of segments) for
    one update; their gradients are averaged.
    """
    from .optim import SGD, Adam, clip_grad_norm, cosine_lr

    opt = (Adam if config.optimizer == "adam" else SGD)(model.params, lr=config.learning_rate)
    history = []
    for step in range(steps):
        batch = batches(step)
        acc, losses = None, []
        for b, seqs in enumerate(batch):
            rep = run_mode(config.mode, model, seqs, config.S, make_rng(config.seed, step, b),
                           max_retained_graphs=config.max_retained_graphs)
            losses.append(float(np.mean(rep.trace.losses)))
            acc = dict(rep) if acc is None else {k: acc[k] + rep[k] for k in acc}
        grads = {k: v / len(batch) for k, v in acc.items()}
        if config.clip_norm is not None:
            grads = clip_grad_norm(grads, config.clip_norm)
        lr = (cosine_lr(config.learning_rate, step, steps) if config.schedule == "cosine"
              else config.learning_rate)
        opt.step(grads, lr)
        history.append(float(np.mean(losses)))
    return history
