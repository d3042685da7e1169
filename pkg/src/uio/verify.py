"""Oracles and statistics for checking the schedulers.

Everything here is seeded and deterministic: the same arguments give the same
numbers bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import sched
from . import tape as tp
from .nets import ParamSet, flat
from .sched import Reservoir, make_rng

FD_MAX_SCALARS = 5000


def finite_difference_oracle(loss_fn: Callable[[], float], params: ParamSet,
                             epsilon: float = 1e-6,
                             names: Optional[Sequence[str]] = None) -> dict:
    """Central-difference gradient of ``loss_fn()`` w.r.t. the trainable parameters.

    ``loss_fn`` is evaluated on a scratch tape, so graph bookkeeping of the
    caller's tape is untouched.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    names = list(params.trainable_names if names is None else names)
    total = sum(params[n].values.size for n in names)
    if total > FD_MAX_SCALARS:
        raise ValueError(f"{total} scalars exceed the finite-difference cap of {FD_MAX_SCALARS}")
    out = {}
    with tp.Tape():
        for name in names:
            p = params[name]
            base = p.values
            g = np.zeros_like(base)
            for i in np.ndindex(base.shape):
                work = base.copy()
                work[i] = base[i] + epsilon
                p.values = work
                hi = float(loss_fn())
                work[i] = base[i] - epsilon
                lo = float(loss_fn())
                g[i] = (hi - lo) / (2 * epsilon)
            p.values = base
            out[name] = g
    return out


def sequence_loss(model, segments, window: Optional[int] = None) -> float:
    """Value of ``sum_t J_t``.  The window is irrelevant to the value and only
    kept for symmetry with :func:`truncated_objective`."""
    with tp.Tape():
        mems, total = [], 0.0
        for seg in segments:
            loss, m = model.forward(seg, [tp.constant(x) for x in mems])
            total += loss.item()
            mems.append(m)
    return total


def truncated_objective(model, segments, S: int, frozen: dict) -> float:
    """``sum_t J_t`` where memories older than the window are taken from ``frozen``.

    ``frozen[s]`` holds the memory values of step ``s`` at the reference
    parameters.  Differentiating this numerically gives the truncated gradient
    that :func:`uio.sched.run_tbptt` computes.
    """
    with tp.Tape():
        live: dict[int, np.ndarray] = {}
        total = 0.0
        for t, seg in enumerate(segments, start=1):
            mems = []
            for s in range(1, t):
                values = live[s] if s >= t - S else frozen[s]
                mems.append(tp.Tensor(values))
            loss, m = model.forward(seg, mems)
            total += loss.item()
            live[t] = m.values
        return total


def reference_memories(model, segments) -> dict[int, np.ndarray]:
    with tp.Tape():
        return {t: model.forward(seg, [])[1].values.copy()
                for t, seg in enumerate(segments, start=1)}


# ---------------------------------------------------------------------------
# gradient-ratio statistics

@dataclass
class RatioStats:
    S: int
    with_factor: bool
    mean_r: float
    var_r: float
    n_trials: int
    rejected: int = 0
    ratios: list[float] = field(default_factory=list, repr=False)


class OracleCache:
    """BPTT gradients per sequence index, computed once at fixed parameters."""

    def __init__(self, model, data):
        self.model = model
        self.data = data
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = flat(sched.run_bptt(self.model, self.data[i]))
        return self._cache[i]


def _minibatch(rng: np.random.Generator, n_data: int, size: int) -> np.ndarray:
    return rng.choice(n_data, size=min(size, n_data), replace=False)


def grad_ratio_stats(model, data, S: int, with_factor: bool, n_trials: int, seed: int,
                     batch_size: int = 8, oracle: Optional[OracleCache] = None) -> RatioStats:
    """Mean and variance of ``r = ||g_unbiased|| / ||g_bptt||`` over mini-batches.

    Each trial draws ``batch_size`` sequences from ``data``; both gradients are
    averaged over the mini-batch before taking norms.  Parameters are left
    unchanged across trials.
    """
    if n_trials < 2:
        raise ValueError("n_trials must be >= 2")
    oracle = oracle or OracleCache(model, data)
    ratios, rejected, trial = [], 0, 0
    while len(ratios) < n_trials:
        rng = make_rng(seed, trial)
        trial += 1
        idx = _minibatch(rng, len(data), batch_size)
        ref = np.mean([oracle(int(i)) for i in idx], axis=0)
        ref_norm = np.linalg.norm(ref)
        if ref_norm == 0.0:
            rejected += 1
            continue
        est = np.mean([flat(sched.run_unbiased_incremental_tbptt(
            model, data[int(i)], S, make_rng(seed, trial, 1, k), use_factor=with_factor))
            for k, i in enumerate(idx)], axis=0)
        ratios.append(float(np.linalg.norm(est) / ref_norm))
    r = np.asarray(ratios)
    return RatioStats(S, with_factor, float(r.mean()), float(r.var(ddof=1)), len(r), rejected,
                      ratios)


# ---------------------------------------------------------------------------
# unbiasedness

@dataclass
class UnbiasednessResult:
    S: int
    with_factor: bool
    n_seeds: int
    z: np.ndarray = field(repr=False)
    frac_over_3: float
    rel_l2: float
    passed: bool
    mean: np.ndarray = field(repr=False)
    oracle: np.ndarray = field(repr=False)


def z_scores(samples: np.ndarray, oracle: np.ndarray) -> np.ndarray:
    """Per-component ``(mean - oracle) / (sd / sqrt(N))``.

    Components with no spread are deterministic: ``z = 0`` when they match the
    oracle to rounding, ``inf`` otherwise.
    """
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n)
    diff = mean - oracle
    tol = 1e-9 * np.maximum(1.0, np.abs(oracle))
    flat_se = se <= tol
    z = np.where(flat_se, 0.0, diff / np.where(flat_se, 1.0, se))
    z = np.where(flat_se & (np.abs(diff) > tol), np.inf, z)
    return z


def unbiasedness_test(model, segments, S: int, n_seeds: int, seed: int = 0,
                      use_factor: bool = True, z_limit: float = 3.0,
                      max_frac: float = 0.01, max_rel_l2: float = 0.05) -> UnbiasednessResult:
    """Monte-Carlo test that the unbiased scheduler averages to the BPTT gradient."""
    if n_seeds < 500:
        raise ValueError("n_seeds must be >= 500")
    oracle = flat(sched.run_bptt(model, segments))
    samples = np.stack([flat(sched.run_unbiased_incremental_tbptt(
        model, segments, S, make_rng(seed, i), use_factor=use_factor)) for i in range(n_seeds)])
    z = z_scores(samples, oracle)
    mean = samples.mean(axis=0)
    frac = float(np.mean(np.abs(z) > z_limit))
    rel = float(np.linalg.norm(mean - oracle) / np.linalg.norm(oracle))
    return UnbiasednessResult(S, use_factor, n_seeds, z, frac, rel,
                              frac <= max_frac and rel < max_rel_l2, mean, oracle)


# ---------------------------------------------------------------------------
# retention law

@dataclass
class RetentionHistogram:
    S: int
    T: int
    trials: int
    counts: np.ndarray = field(repr=False)  # counts[t, s], 1-based, s < t

    @staticmethod
    def expected(t: int, S: int) -> float:
        return min(1.0, S / (t - 1))

    def frequency(self, t: int, s: int) -> float:
        return self.counts[t, s] / self.trials

    def rows(self):
        for t in range(2, self.T + 1):
            for s in range(1, t):
                yield t, s, self.frequency(t, s), self.expected(t, self.S)

    def max_deviation(self) -> float:
        return max(abs(f - e) for _, _, f, e in self.rows())


def retention_histogram(S: int, T: int, trials: int, seed: int = 0) -> RetentionHistogram:
    """How often step ``s`` is still retained when step ``t`` runs its forward."""
    if trials < 10_000:
        raise ValueError("trials must be >= 1e4")
    rng = make_rng(seed)
    draws = rng.integers(0, np.arange(1, T + 1), size=(trials, T))
    counts = np.zeros((T + 1, T + 1), dtype=np.int64)
    for row in draws:
        res = Reservoir(S)
        for t in range(1, T + 1):
            for s in res.retained:
                counts[t, s] += 1
            res.offer(t, int(row[t - 1]))
    return RetentionHistogram(S, T, trials, counts)


# ---------------------------------------------------------------------------
# loss versus window

def smooth(curve: Sequence[float], width: int) -> np.ndarray:
    """Trailing moving average; the first points average what is available."""
    x = np.asarray(curve, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - width)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class LossCurve:
    S: int
    raw: np.ndarray
    smoothed: np.ndarray

    @property
    def final(self) -> float:
        return float(self.smoothed[-1])


def loss_vs_window(model_factory: Callable[[], object], data, S_list: Sequence[int],
                   steps: int, seed: int = 0, mode: str = "unbiased", lr: float = 3e-3,
                   batch_size: int = 1, width: int = 100,
                   clip_norm: Optional[float] = None) -> dict[int, LossCurve]:
    """Train a fresh model per ``S`` on identical data order and init; smooth the losses."""
    out = {}
    for S in S_list:
        model = model_factory()
        cfg = sched.TrainConfig(mode=mode, S=S, T=len(data[0]), seed=seed, learning_rate=lr,
                                clip_norm=clip_norm)

        def batches(step, _n=len(data)):
            return [data[(step * batch_size + b) % _n] for b in range(batch_size)]

        raw = np.asarray(sched.train(model, batches, cfg, steps))
        out[S] = LossCurve(S, raw, smooth(raw, width))
    return out
