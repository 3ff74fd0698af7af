"""Desk-scale training: tasks, AdamW, cosine schedule, and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .linalg import make_rng
from .model import EMBED, ModelConfig, init_params, model_graph, save_checkpoint

TASKS = ("parity", "recall")
CHECKPOINT = "checkpoint.mesa"
METRICS = "metrics.jsonl"


@dataclass
class TrainConfig:
    task: str = "parity"
    seq_len: int = 40
    n_pairs: int = 8
    steps: int = 1000
    batch: int = 32
    lr: float = 1e-3
    warmup: int | None = None
    final_frac: float = 0.1
    weight_decay: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    clip: float = 1.0
    eval_interval: int = 100
    eval_batch: int = 128
    seed: int = 0
    skip_first: bool = False
    wall_clock: bool = False

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = self.steps // 10
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        if not 0 <= self.warmup <= self.steps:
            raise ValueError(f"need 0 <= warmup <= steps (warmup = {self.warmup}, steps = {self.steps})")
        if not 0 < self.final_frac <= 1:
            raise ValueError("final_frac must be in (0, 1]")
        if self.eval_interval < 1 or self.batch < 1:
            raise ValueError("eval_interval and batch must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class TrainingDiverged(RuntimeError):
    pass


# schedule and optimizer


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 1e-6 to ``lr``, then cosine down to ``final_frac * lr`` at ``steps``.

    The warmup start is capped at ``lr`` so that ``lr = 0`` means no updates at all.
    """
    start = min(1e-6, cfg.lr)
    if step < cfg.warmup:
        return start + (cfg.lr - start) * step / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    frac = min(max((step - cfg.warmup) / span, 0.0), 1.0)
    floor = cfg.final_frac * cfg.lr
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, cfg: TrainConfig,
               no_decay: tuple = (EMBED,)) -> dict:
    """Bias-corrected AdamW with decoupled weight decay; returns new params."""
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        upd = (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + cfg.adam_eps)
        wd = 0.0 if name in no_decay else cfg.weight_decay
        out[name] = p - lr * upd - lr * wd * p
    return out


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


# tasks


def make_parity_batch(batch: int, length: int, rng: np.random.Generator):
    """Random bits and their running parity (XOR of all bits so far)."""
    tokens = rng.integers(0, 2, size=(batch, length))
    return tokens, np.bitwise_xor.accumulate(tokens, axis=1)


def make_recall_batch(batch: int, n_pairs: int, vocab: int, rng: np.random.Generator):
    """``k1 v1 .. kn vn q`` with distinct keys; the answer is the value stored under ``q``.

    Keys use ids ``[0, vocab // 2)`` and values ``[vocab // 2, vocab)``. The
    mask selects the final position only.
    """
    n_keys = vocab // 2
    if n_pairs < 1 or n_pairs > n_keys:
        raise ValueError(f"need 1 <= n_pairs <= vocab // 2 (= {n_keys})")
    L = 2 * n_pairs + 1
    tokens = np.zeros((batch, L), dtype=np.int64)
    targets = np.zeros((batch, L), dtype=np.int64)
    mask = np.zeros((batch, L))
    for b in range(batch):
        keys = rng.choice(n_keys, size=n_pairs, replace=False)
        vals = n_keys + rng.integers(0, vocab - n_keys, size=n_pairs)
        tokens[b, 0:-1:2] = keys
        tokens[b, 1:-1:2] = vals
        i = rng.integers(0, n_pairs)
        tokens[b, -1] = keys[i]
        targets[b, -1] = vals[i]
    mask[:, -1] = 1.0
    return tokens, targets, mask


def make_batch(tcfg: TrainConfig, mcfg: ModelConfig, batch: int, rng: np.random.Generator):
    if tcfg.task == "parity":
        tokens, targets = make_parity_batch(batch, tcfg.seq_len, rng)
        mask = np.ones(tokens.shape)
        if tcfg.skip_first:
            mask[:, 0] = 0.0
        return tokens, targets, mask
    return make_recall_batch(batch, tcfg.n_pairs, mcfg.vocab, rng)


# loop


def loss_and_grads(params, tokens, targets, mask, mcfg: ModelConfig):
    tape = Tape()
    try:
        with np.errstate(invalid="ignore", over="ignore"):
            fwd = model_graph(tape, params, tokens, mcfg)
            loss = tape.cross_entropy(fwd.logits, targets=targets, mask=mask)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"non-finite activations: {exc}") from exc
    value = float(tape.value(loss))
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss is {value}")
    grads = tape.backward(loss)
    return value, grads, fwd


def evaluate(params, mcfg: ModelConfig, tokens, targets, mask) -> tuple[float, float]:
    """``(masked accuracy, mean CG iterations)`` of greedy predictions."""
    tape = Tape()
    fwd = model_graph(tape, params, tokens, mcfg)
    pred = np.argmax(tape.value(fwd.logits), axis=-1)
    acc = float(np.sum((pred == targets) * mask) / max(mask.sum(), 1.0))
    its = fwd.cg_iters()
    return acc, float(its.mean()) if its.size else 0.0


def train(mcfg: ModelConfig, tcfg: TrainConfig, out_dir=None, params=None, log=None):
    """Train and return ``(params, records)``.

    When ``out_dir`` is given, metrics are appended to ``metrics.jsonl`` and a
    checkpoint is written at every eval interval. A non-finite loss raises
    :class:`TrainingDiverged` and leaves the last good checkpoint in place.
    """
    if tcfg.task == "parity" and mcfg.vocab != 2:
        raise ValueError("parity uses vocab = 2")
    if params is None:
        params = init_params(mcfg, make_rng(tcfg.seed, "init"))
    data_rng = make_rng(tcfg.seed, "data")
    ev = make_batch(tcfg, mcfg, tcfg.eval_batch, make_rng(tcfg.seed, "eval"))
    adam = AdamState.zeros(params)
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / METRICS, "w", encoding="utf-8")
    records = []
    try:
        t0 = time.perf_counter()
        for step in range(1, tcfg.steps + 1):
            tokens, targets, mask = make_batch(tcfg, mcfg, tcfg.batch, data_rng)
            lr = cosine_lr(step, tcfg)
            loss, grads, _ = loss_and_grads(params, tokens, targets, mask, mcfg)
            grads, _ = clip_global_norm(grads, tcfg.clip)
            params = adamw_step(params, grads, adam, lr, tcfg)
            if step % tcfg.eval_interval == 0 or step == tcfg.steps:
                acc, iters = evaluate(params, mcfg, *ev)
                wall = round((time.perf_counter() - t0) * 1000.0, 3) if tcfg.wall_clock else None
                rec = {"step": step, "lr": lr, "loss": loss, "task_accuracy": acc,
                       "mean_cg_iters": iters, "wall_ms": wall}
                records.append(rec)
                if metrics_file is not None:
                    metrics_file.write(json.dumps(rec) + "\n")
                    metrics_file.flush()
                    save_checkpoint(out / CHECKPOINT, mcfg, params)
                if log is not None:
                    log(rec)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return params, records
