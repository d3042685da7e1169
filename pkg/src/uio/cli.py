"""Command-line runner: ``uio <command> [--config PATH] [--key=value ...]``.

Config files are flat ``key = value`` text; ``#`` starts a comment.  Flags
override the file, which overrides the defaults.  ``UIO_SEED`` sets the seed
only when neither the file nor a flag does.

Every CSV starts with a comment line naming the command, the schema version
and a hash of the resolved config.  ``verify-*`` commands judge themselves and
exit with status 1 when their check fails.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import gc
import hashlib
import io
import json
import os
import sys
import time
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import pipeline, sched, verify
from . import tape as tp
from .nets import ParamSet, ToyRNN, ToyTransformer, copy_corpus

COMMANDS = ("train", "verify-equivalence", "verify-unbiased", "verify-retention",
            "ratio-stats", "bench", "autoencode")
MODELS = ("toy-rnn", "toy-transformer")
CSV_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str = "train"
    model: str = "toy-transformer"
    mode: str = "unbiased"
    S: int = 2
    S_list: tuple = (1, 2, 4, 8)
    T: int = 8
    l: int = 16
    k_mem: int = 4
    d_model: int = 32
    layers: int = 2
    heads: int = 2
    vocab: int = 64
    rnn_dim: int = 16
    seed: int = 0
    n_trials: int = 200
    n_tuples: int = 20
    n_seeds: int = 2000
    trials: int = 100_000
    lr: float = 3e-3
    steps: int = 100
    warmup: int = 200
    batch_size: int = 8
    n_sequences: int = 64
    n_segments: int = 128
    iterations: int = 10
    warmup_iterations: int = 2
    ratios: tuple = (1, 4, 8)
    use_factor: bool = True
    max_retained_graphs: Optional[int] = None
    clip_norm: Optional[float] = None
    output_path: str = ""
    summary_path: str = ""
    checkpoint: str = ""
    init_checkpoint: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"command: must be one of {', '.join(COMMANDS)}")
        if self.model not in MODELS:
            raise ConfigError(f"model: must be one of {', '.join(MODELS)}")
        if self.mode not in sched.MODES:
            raise ConfigError(f"mode: must be one of {', '.join(sched.MODES)}")
        for name in ("S", "T", "l", "k_mem", "d_model", "layers", "heads", "vocab", "rnn_dim",
                     "n_trials", "n_tuples", "n_seeds", "trials", "batch_size", "n_sequences",
                     "n_segments", "iterations"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("steps", "warmup", "warmup_iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if not self.S_list or min(self.S_list) <= 0:
            raise ConfigError("S_list: entries must be positive")
        if self.d_model % self.heads:
            raise ConfigError("heads: must divide d_model")
        for r in self.ratios:
            if r <= 0 or self.l % r:
                raise ConfigError(f"ratios: {r} does not divide l={self.l}")
        if self.max_retained_graphs is not None and self.max_retained_graphs < self.S:
            raise ConfigError(f"max_retained_graphs: {self.max_retained_graphs} is below "
                              f"S={self.S}; refusing to run")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm: must be positive")
        return self

    def canonical(self) -> str:
        # Output locations do not change the experiment, so they stay out of the hash.
        items = dataclasses.asdict(self)
        for k in _OUTPUT_FIELDS:
            items.pop(k)
        return "\n".join(f"{k} = {_format(v)}" for k, v in sorted(items.items()))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


_HINTS = typing.get_type_hints(ExperimentConfig)
_OUTPUT_FIELDS = ("output_path", "summary_path", "checkpoint")


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def _coerce(key: str, raw: str):
    if key not in _HINTS:
        raise ConfigError(f"{key}: unknown config key")
    hint = _HINTS[key]
    raw = raw.strip()
    try:
        if hint is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint in (int, float, str):
            return hint(raw)
        inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
        return None if raw.lower() in ("", "none") else inner(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def read_config_file(path: str) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def parse_args(argv) -> ExperimentConfig:
    ap = argparse.ArgumentParser(prog="uio", description="segment-recurrent training experiments")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", default=None)
    args, rest = ap.parse_known_args(argv)
    values = read_config_file(args.config) if args.config else {}
    flags = {}
    it = iter(rest)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"{key}: missing value")
        flags[key.replace("-", "_")] = _coerce(key.replace("-", "_"), value)
    values.update(flags)
    if "seed" not in values and os.environ.get("UIO_SEED"):
        values["seed"] = _coerce("seed", os.environ["UIO_SEED"])
    values["command"] = args.command
    return ExperimentConfig(**values).validate()


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = "UIO-CHECKPOINT 1"


def save_checkpoint(path, params: ParamSet, config: Optional[dict] = None) -> None:
    """Text header (magic line, JSON manifest line) then little-endian float64 payload."""
    manifest, offset, chunks = [], 0, []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.values, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "trainable": bool(t.requires_grad)})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = json.dumps({"config": config or {}, "params": manifest}, sort_keys=True)
    with open(path, "wb") as f:
        f.write(f"{CKPT_MAGIC}\n{header}\n".encode())
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.readline().decode().rstrip("\n") != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        header = json.loads(f.readline().decode())
        payload = np.frombuffer(f.read(), dtype="<f8")
    arrays = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = payload[entry["offset"]:entry["offset"] + n].reshape(
            entry["shape"]).astype(np.float64)
    return header["config"], arrays


def restore(params: ParamSet, arrays: dict[str, np.ndarray]) -> None:
    names = [n for n, _ in params.items()]
    if sorted(names) != sorted(arrays):
        raise ValueError("checkpoint manifest does not match the parameter set")
    for n in names:
        if params[n].values.shape != arrays[n].shape:
            raise ValueError(f"{n}: shape {arrays[n].shape} != {params[n].values.shape}")
    params.load_state(arrays)


# ---------------------------------------------------------------------------
# helpers

def build_model(cfg: ExperimentConfig, **overrides):
    if cfg.model == "toy-rnn":
        return ToyRNN(dim=cfg.rnn_dim, seed=cfg.seed)
    kw = dict(vocab=cfg.vocab, d_model=cfg.d_model, layers=cfg.layers, heads=cfg.heads,
              seg_len=cfg.l, k_mem=cfg.k_mem, seed=cfg.seed)
    kw.update(overrides)
    return ToyTransformer(**kw)


def corpus(cfg: ExperimentConfig, model, n: int, T: int, seed: int):
    if isinstance(model, ToyRNN):
        return [model.make_segments(T, sched.make_rng(seed, 100, i)) for i in range(n)]
    c = model.config
    return copy_corpus(n, T, c.seg_len, c.vocab, seed)


class Table:
    def __init__(self, command: str, cfg: ExperimentConfig, columns):
        self.command, self.cfg, self.columns = command, cfg, list(columns)
        self.rows: list[list] = []

    def add(self, *row):
        self.rows.append(list(row))

    def render(self) -> str:
        buf = io.StringIO()
        buf.write(f"# uio {self.command} csv-v{CSV_VERSION} config={self.cfg.digest()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
        return buf.getvalue()

    def emit(self):
        text = self.render()
        if self.cfg.output_path:
            Path(self.cfg.output_path).write_text(text)
        else:
            sys.stdout.write(text)


def _summary(cfg: ExperimentConfig, ok: bool, message: str, **extra) -> int:
    print(f"[{'PASS' if ok else 'FAIL'}] {cfg.command}: {message}", file=sys.stderr)
    if cfg.summary_path:
        Path(cfg.summary_path).write_text(json.dumps(
            {"command": cfg.command, "config": cfg.digest(), "passed": ok, "message": message,
             **extra}, indent=2, sort_keys=True, default=float) + "\n")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: ExperimentConfig) -> int:
    model = build_model(cfg)
    if cfg.init_checkpoint:
        restore(model.params, load_checkpoint(cfg.init_checkpoint)[1])
    data = corpus(cfg, model, cfg.n_sequences, cfg.T, cfg.seed)
    tc = sched.TrainConfig(mode=cfg.mode, S=cfg.S, T=cfg.T, seed=cfg.seed, learning_rate=cfg.lr,
                           max_retained_graphs=cfg.max_retained_graphs, clip_norm=cfg.clip_norm)
    n, bs = len(data), cfg.batch_size
    history = sched.train(model, lambda step: [data[(step * bs + b) % n] for b in range(bs)],
                          tc, cfg.steps)
    table = Table("train", cfg, ["step", "loss"])
    for i, loss in enumerate(history):
        table.add(i, loss)
    table.emit()
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, model.params, dataclasses.asdict(cfg))
    final = history[-1] if history else float("nan")
    return _summary(cfg, True, f"{cfg.steps} steps, final loss {final:.4f}", final_loss=final)


def equivalence_tuples(n: int, seed: int):
    rng = sched.make_rng(seed, 11)
    for i in range(n):
        yield (MODELS[i % 2], int(rng.integers(2, 17)), int(rng.choice([1, 2, 4, 8])),
               int(rng.integers(0, 2**31 - 1)))


def grads_close(a: np.ndarray, b: np.ndarray, atol: float) -> tuple[float, float, bool]:
    """Max abs delta and the tolerance scaled by the gradient magnitude."""
    delta = float(np.max(np.abs(a - b))) if a.size else 0.0
    tol = atol * max(1.0, float(np.max(np.abs(a))) if a.size else 0.0)
    return delta, tol, delta <= tol


def cmd_verify_equivalence(cfg: ExperimentConfig) -> int:
    table = Table("verify-equivalence", cfg,
                  ["tuple", "model", "T", "S", "seed", "param", "max_delta", "tol", "ok"])
    failures = 0
    n = cfg.n_tuples
    for i, (name, T, S, seed) in enumerate(equivalence_tuples(n, cfg.seed)):
        model = build_model(dataclasses.replace(cfg, model=name, seed=seed))
        segs = model.make_segments(T, sched.make_rng(seed, 1))
        a = sched.run_tbptt(model, segs, S)
        b = sched.run_incremental_tbptt(model, segs, S)
        for p in sorted(a):
            delta, tol, ok = grads_close(a[p], b[p], 1e-10)
            failures += not ok
            table.add(i, name, T, S, seed, p, delta, tol, int(ok))
    table.emit()
    return _summary(cfg, failures == 0, f"{n} tuples, {failures} parameter mismatches")


def cmd_verify_unbiased(cfg: ExperimentConfig) -> int:
    model = build_model(cfg)
    segs = model.make_segments(cfg.T, sched.make_rng(cfg.seed, 3))
    main = verify.unbiasedness_test(model, segs, cfg.S, cfg.n_seeds, seed=cfg.seed)
    control = verify.unbiasedness_test(model, segs, cfg.S, cfg.n_seeds, seed=cfg.seed,
                                       use_factor=False)
    table = Table("verify-unbiased", cfg,
                  ["component", "oracle", "mean_with_factor", "z_with_factor",
                   "mean_without_factor", "z_without_factor"])
    for i in range(main.oracle.size):
        table.add(i, float(main.oracle[i]), float(main.mean[i]), float(main.z[i]),
                  float(control.mean[i]), float(control.z[i]))
    table.emit()
    ok = main.passed and not control.passed
    return _summary(cfg, ok, f"with factor: |z|>3 {main.frac_over_3:.4f}, rel L2 "
                    f"{main.rel_l2:.4f}; without factor: |z|>3 {control.frac_over_3:.4f}, "
                    f"rel L2 {control.rel_l2:.4f}",
                    frac_with=main.frac_over_3, rel_with=main.rel_l2,
                    frac_without=control.frac_over_3, rel_without=control.rel_l2)


def cmd_verify_retention(cfg: ExperimentConfig) -> int:
    hist = verify.retention_histogram(cfg.S, cfg.T, cfg.trials, cfg.seed)
    table = Table("verify-retention", cfg, ["t", "s", "empirical", "expected", "abs_diff"])
    for t, s, f, e in hist.rows():
        table.add(t, s, float(f), float(e), float(abs(f - e)))
    table.emit()
    dev = hist.max_deviation()
    return _summary(cfg, dev <= 0.02, f"max deviation {dev:.4f} over {cfg.trials} trials",
                    max_deviation=dev)


def ratio_setup(cfg: ExperimentConfig):
    """Model trained for ``warmup`` steps, plus the evaluation corpus."""
    model = build_model(cfg)
    data = corpus(cfg, model, cfg.n_sequences, cfg.T, cfg.seed)
    if cfg.warmup:
        tc = sched.TrainConfig(mode="bptt", S=1, T=cfg.T, seed=cfg.seed, learning_rate=cfg.lr)
        n, bs = len(data), cfg.batch_size
        sched.train(model, lambda step: [data[(step * bs + b) % n] for b in range(bs)], tc,
                    cfg.warmup)
    return model, data


def cmd_ratio_stats(cfg: ExperimentConfig) -> int:
    model, data = ratio_setup(cfg)
    oracle = verify.OracleCache(model, data)
    table = Table("ratio-stats", cfg, ["S", "with_factor", "mean_r", "var_r", "n_trials",
                                       "rejected"])
    for with_factor in (True, False):
        for S in (*cfg.S_list, cfg.T - 1):
            st = verify.grad_ratio_stats(model, data, S, with_factor, cfg.n_trials, cfg.seed,
                                         cfg.batch_size, oracle)
            table.add(S, int(with_factor), st.mean_r, st.var_r, st.n_trials, st.rejected)
    table.emit()
    return _summary(cfg, True, f"{len(table.rows)} configurations")


@dataclass
class BenchRow:
    mode: str
    S: int
    mean_step_ms: float
    peak_live_nodes: int
    backward_passes: int


def bench(cfg: ExperimentConfig, modes=("incremental", "tbptt")) -> list[BenchRow]:
    """Time one full gradient computation over ``n_segments`` segments per iteration.

    Iterations are interleaved round-robin across (mode, S) so slow drift on a
    shared machine lands on every configuration alike.
    """
    model = build_model(dataclasses.replace(cfg, model="toy-transformer"))
    segs = model.make_segments(cfg.n_segments, sched.make_rng(cfg.seed, 5))
    configs = [(mode, S) for mode in modes for S in cfg.S_list]
    times = {c: [] for c in configs}
    peak, passes = {}, {}
    for it in range(cfg.warmup_iterations + cfg.iterations):
        for mode, S in configs:
            # like timeit: collect first, keep the cyclic GC out of the timed region
            gc.collect()
            gc.disable()
            try:
                with tp.Tape() as tape:
                    t0 = time.perf_counter()
                    rep = sched.run_mode(mode, model, segs, S, sched.make_rng(cfg.seed, it))
                    dt = time.perf_counter() - t0
                    peak[mode, S] = tape.peak_live_node_count
                    passes[mode, S] = rep.trace.backward_passes
            finally:
                gc.enable()
            if it >= cfg.warmup_iterations:
                times[mode, S].append(dt * 1e3)
    return [BenchRow(m, S, float(np.mean(times[m, S])), peak[m, S], passes[m, S])
            for m, S in configs]


def cmd_bench(cfg: ExperimentConfig) -> int:
    rows = bench(cfg)
    table = Table("bench", cfg, ["mode", "S", "mean_step_ms", "peak_live_nodes",
                                 "backward_passes"])
    for r in rows:
        table.add(r.mode, r.S, r.mean_step_ms, r.peak_live_nodes, r.backward_passes)
    table.emit()
    return _summary(cfg, True, f"{len(rows)} rows")


def cmd_autoencode(cfg: ExperimentConfig) -> int:
    table = Table("autoencode", cfg, ["ratio", "k_mem", "initial_accuracy", "accuracy",
                                      "final_loss"])
    samples = pipeline.random_samples(max(cfg.steps * cfg.batch_size, 1000), cfg.l, cfg.vocab,
                                      cfg.seed)
    test = pipeline.random_samples(200, cfg.l, cfg.vocab, cfg.seed + 1)
    for ratio in cfg.ratios:
        model = pipeline.autoencoder_model(ratio, seed=cfg.seed, vocab=cfg.vocab,
                                           d_model=cfg.d_model, layers=cfg.layers,
                                           heads=cfg.heads, seg_len=cfg.l)
        res = pipeline.auto_encode_run(samples, model, cfg.steps, test, lr=cfg.lr,
                                       batch_size=cfg.batch_size,
                                       clip_norm=cfg.clip_norm or 1.0, seed=cfg.seed)
        table.add(ratio, model.config.k_mem, res.initial_accuracy, res.accuracy,
                  res.losses[-1] if res.losses else float("nan"))
    table.emit()
    return _summary(cfg, True, ", ".join(f"ratio {r[0]}: {r[3]:.4f}" for r in table.rows))


HANDLERS = {
    "train": cmd_train,
    "verify-equivalence": cmd_verify_equivalence,
    "verify-unbiased": cmd_verify_unbiased,
    "verify-retention": cmd_verify_retention,
    "ratio-stats": cmd_ratio_stats,
    "bench": cmd_bench,
    "autoencode": cmd_autoencode,
}


def run_experiment(cfg: ExperimentConfig) -> int:
    return HANDLERS[cfg.command](cfg.validate())


def main(argv=None) -> int:
    try:
        cfg = parse_args(sys.argv[1:] if argv is None else argv)
    except ConfigError as e:
        print(f"uio: config error: {e}", file=sys.stderr)
        return 2
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
