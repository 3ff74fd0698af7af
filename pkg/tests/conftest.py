"""Shared trained models for the acceptance suite.

Training runs once per session and only when a test asks for the fixture.
"""

import pytest

from mesanet.model import ModelConfig
from mesanet.train import TrainConfig, train

# desk-scale parity recipe; both modes share everything except the gate range
PARITY_STEPS = 600
RECALL_STEPS = 1000
RECALL_SEEDS = (0, 1, 2)

_results: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    _results[criterion] = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if _results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_results):
            terminalreporter.write_line(_results[k])


def parity_configs(mode: str):
    mcfg = ModelConfig(n_layers=2, n_e=32, n_heads=2, n_a=16, vocab=2, mixer="mesa", chunk=40, mode=mode,
                       lam_init=50.0, lam_floor=49.0)
    tcfg = TrainConfig(task="parity", seq_len=40, steps=PARITY_STEPS, batch=32, lr=3e-3, warmup=50,
                       eval_interval=100, eval_batch=128, seed=0)
    return mcfg, tcfg


def recall_configs(mixer: str, seed: int):
    mcfg = ModelConfig(n_layers=2, n_e=32, n_heads=2, n_a=8, vocab=32, mixer=mixer, chunk=64,
                       cg_eps=1e-6, cg_kmax=30)
    tcfg = TrainConfig(task="recall", n_pairs=8, steps=RECALL_STEPS, batch=64, lr=3e-3, warmup=50,
                       eval_interval=100, eval_batch=256, seed=seed)
    return mcfg, tcfg


@pytest.fixture(scope="session")
def parity_models():
    out = {}
    for mode in ("state_tracking", "standard"):
        mcfg, tcfg = parity_configs(mode)
        params, records = train(mcfg, tcfg)
        out[mode] = (mcfg, params, records)
    return out


@pytest.fixture(scope="session")
def recall_models():
    out = {}
    for seed in RECALL_SEEDS:
        for mixer in ("mesa", "gla"):
            mcfg, tcfg = recall_configs(mixer, seed)
            params, records = train(mcfg, tcfg)
            out[mixer, seed] = (mcfg, params, records)
    return out
