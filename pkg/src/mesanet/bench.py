"""Wall-clock micro-benchmarks for one mixer kernel.

Times are per token, best of ``repeats``. Mesa runs with ``eps = 0`` so
every solve takes exactly ``cg_steps`` iterations.
"""

from __future__ import annotations

import csv
import io
import time

import numpy as np

from . import baselines
from .linalg import l2_normalize, make_rng
from .mesa import mesa_backward_chunked, mesa_forward_chunked, mesa_sequential

BENCH_COLUMNS = ("mixer", "T", "C", "cg_steps", "heads", "n_a", "forward_us_per_token",
                 "forward_backward_us_per_token", "sequential_us_per_token", "chunked_over_sequential")


def _best(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_config(mixer: str, T: int, C: int, cg_steps: int, heads: int = 4, n_a: int = 16,
                 repeats: int = 3, seed: int = 0) -> dict:
    """One CSV row: per-token times of the forward, forward+backward and sequential paths.

    Baselines have no separate sequential path; their forward is already a
    time loop, so the sequential columns stay empty.
    """
    rng = make_rng(seed, "bench")
    q = l2_normalize(rng.standard_normal((heads, T, n_a)))
    k = l2_normalize(rng.standard_normal((heads, T, n_a)))
    v = rng.standard_normal((heads, T, n_a))
    beta = rng.uniform(0, 1, (heads, T))
    gamma = rng.uniform(0.9, 1, (heads, T))
    lam = np.ones((heads, n_a))
    dO = rng.standard_normal((heads, T, n_a))
    if mixer == "mesa":
        def fwd():
            return mesa_forward_chunked(q, k, v, beta, gamma, lam, C, 0.0, cg_steps)

        def fwd_bwd():
            _, saved = fwd()
            mesa_backward_chunked(saved, dO)

        def seq():
            mesa_sequential(q, k, v, beta, gamma, lam, 0.0, cg_steps)
    elif mixer in baselines.KINDS:
        def fwd():
            return baselines.recurrent_forward(mixer, q, k, v, beta, gamma)

        def fwd_bwd():
            _, saved = fwd()
            baselines.recurrent_backward(saved, dO, q, k, v, beta, gamma)

        seq = None
    else:
        raise ValueError(f"unknown mixer {mixer!r}")
    per_tok = {name: _best(fn, repeats) / T * 1e6 for name, fn in
               (("forward", fwd), ("forward_backward", fwd_bwd), ("sequential", seq)) if fn is not None}
    row = {"mixer": mixer, "T": T, "C": C, "cg_steps": cg_steps, "heads": heads, "n_a": n_a,
           "forward_us_per_token": per_tok["forward"],
           "forward_backward_us_per_token": per_tok["forward_backward"],
           "sequential_us_per_token": per_tok.get("sequential", ""),
           "chunked_over_sequential": per_tok["forward"] / per_tok["sequential"] if seq else ""}
    return row


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
