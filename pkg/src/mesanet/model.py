"""Decoder-only residual backbone with tied embeddings.

Each block is ``x + Mixer(RMSNorm(x))`` followed by ``x + MLP(RMSNorm(x))``
where the MLP is SwiGLU of width ``3 n_e``. Embeddings are multiplied by
``sqrt(n_e)`` on the way in; logits are ``E_out Emb^T`` soft-capped at 30.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import linalg
from .autodiff import Tape
from .mesa import LAMBDA_FLOOR, LAMBDA_FLOOR_TRACKING
from .mixers import MIXER_KINDS, mixer_graph, mixer_param_shapes

MAGIC = b"MESA1"
MODES = ("standard", "state_tracking")
EMBED = "embed"


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_e: int = 32
    n_heads: int = 2
    n_a: int = 16
    vocab: int = 2
    mixer: str = "mesa"
    chunk: int = 64
    cg_eps: float = 1e-6
    cg_kmax: int = 30
    cg_init: str = "diag"
    mode: str = "standard"
    lam_init: float | None = None
    lam_floor: float | None = None

    def __post_init__(self):
        if self.mixer not in MIXER_KINDS:
            raise ValueError(f"unknown mixer {self.mixer!r}; choose from {', '.join(MIXER_KINDS)}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        for name in ("n_layers", "n_e", "n_heads", "n_a", "chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cg_init not in ("diag", "query"):
            raise ValueError(f"unknown cg_init {self.cg_init!r}")
        tracking = self.mode == "state_tracking"
        if self.lam_floor is None:
            self.lam_floor = LAMBDA_FLOOR_TRACKING if tracking else LAMBDA_FLOOR
        if self.lam_init is None:
            self.lam_init = self.lam_floor + 1.0 if tracking else 1.0
        if not self.lam_init > self.lam_floor > 0:
            raise ValueError("need lam_init > lam_floor > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {EMBED: (cfg.vocab, cfg.n_e)}
    mix = mixer_param_shapes(cfg.mixer, cfg.n_e, cfg.n_heads, cfg.n_a)
    w = 3 * cfg.n_e
    for l in range(cfg.n_layers):
        shapes[f"l{l}.norm1"] = (cfg.n_e,)
        for name, s in mix.items():
            shapes[f"l{l}.mix.{name}"] = s
        shapes[f"l{l}.norm2"] = (cfg.n_e,)
        shapes[f"l{l}.mlp.Wgate"] = (cfg.n_e, w)
        shapes[f"l{l}.mlp.Wup"] = (cfg.n_e, w)
        shapes[f"l{l}.mlp.Wdown"] = (w, cfg.n_e)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in normal init; residual output projections get variance scaled by ``2 / n_layers``."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == EMBED:
            p = rng.standard_normal(shape) / np.sqrt(cfg.n_e)
        elif leaf in ("norm1", "norm2", "norm"):
            p = np.ones(shape)
        elif leaf.startswith("conv_"):
            p = np.zeros(shape)
            p[:, 0] = 1.0
            p += 0.1 * rng.standard_normal(shape)
        elif leaf == "bbeta":
            p = np.zeros(shape)
        elif leaf == "bgamma":
            # standard: gamma near 0.95; state tracking: gamma near 0
            p = np.full(shape, 0.0 if cfg.mode == "state_tracking" else 3.0)
        elif leaf == "lam_raw":
            p = np.full(shape, linalg.softplus_inverse(cfg.lam_init - cfg.lam_floor))
        else:
            var = 1.0 / shape[0]
            if leaf in ("Wo", "Wdown"):
                var *= 2.0 / cfg.n_layers
            p = rng.standard_normal(shape) * np.sqrt(var)
        params[name] = p.astype(float)
    return params


@dataclass
class Forward:
    tape: Tape
    logits: int
    mesa_nodes: list

    def cg_iters(self) -> np.ndarray:
        its = [self.tape.saved(n).iters.ravel() for n in self.mesa_nodes]
        return np.concatenate(its) if its else np.zeros(0, dtype=np.int64)


def block_graph(tape: Tape, x: int, p: dict[str, int], l: int, cfg: ModelConfig):
    h = tape.rms_norm(x, p[f"l{l}.norm1"])
    mix = {k.split(".", 2)[2]: v for k, v in p.items() if k.startswith(f"l{l}.mix.")}
    m, mesa_nodes = mixer_graph(tape, h, mix, cfg)
    x = tape.add(x, m)
    h = tape.rms_norm(x, p[f"l{l}.norm2"])
    gate = tape.silu(tape.matmul(h, p[f"l{l}.mlp.Wgate"]))
    up = tape.matmul(h, p[f"l{l}.mlp.Wup"])
    x = tape.add(x, tape.matmul(tape.mul(gate, up), p[f"l{l}.mlp.Wdown"]))
    return x, mesa_nodes


def model_graph(tape: Tape, params: dict[str, np.ndarray], tokens: np.ndarray, cfg: ModelConfig) -> Forward:
    """Record the full model on ``tape``; ``tokens`` is ``(batch, time)``."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    p = {name: tape.param(name, value) for name, value in params.items()}
    x = tape.scale(tape.embed(p[EMBED], ids=tokens), c=np.sqrt(cfg.n_e))
    mesa_nodes = []
    for l in range(cfg.n_layers):
        x, mn = block_graph(tape, x, p, l, cfg)
        mesa_nodes += mn
    logits = tape.matmul(x, tape.transpose(p[EMBED], axes=(1, 0)))
    logits = tape.scale(tape.tanh(tape.scale(logits, c=1.0 / linalg.SOFTCAP)), c=linalg.SOFTCAP)
    return Forward(tape, logits, mesa_nodes)


def model_forward(tokens: np.ndarray, cfg: ModelConfig, params: dict[str, np.ndarray]) -> np.ndarray:
    """Logits ``(batch, time, vocab)`` (or ``(time, vocab)`` for a 1-D token array)."""
    tokens = np.asarray(tokens)
    fwd = model_graph(Tape(), params, tokens, cfg)
    out = fwd.tape.value(fwd.logits)
    return out[0] if tokens.ndim == 1 else out


# checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Write ``MAGIC``, a length-prefixed JSON manifest, then little-endian float32 data."""
    names = list(param_shapes(cfg))
    entries, offset = [], 0
    for name in names:
        a = params[name]
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 4
    manifest = json.dumps({"config": asdict(cfg), "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for name in names:
            f.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path, cfg: ModelConfig | None = None):
    """Returns ``(config, params)``; shapes are checked against ``cfg`` (or the stored config)."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (n,) = struct.unpack("<Q", data[pos: pos + 8])
    pos += 8
    manifest = json.loads(data[pos: pos + n].decode("utf-8"))
    pos += n
    stored = ModelConfig(**manifest["config"])
    cfg = cfg or stored
    expected = param_shapes(cfg)
    params = {}
    for e in manifest["tensors"]:
        name, shape = e["name"], tuple(e["shape"])
        if name not in expected:
            raise ValueError(f"{path}: unexpected tensor {name}")
        if expected[name] != shape:
            raise ValueError(f"{path}: shape mismatch for {name}: {shape} vs {expected[name]}")
        size = int(np.prod(shape))
        start = pos + e["offset"]
        if start + size * 4 > len(data):
            raise ValueError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=start).reshape(shape).astype(float)
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return cfg, params
