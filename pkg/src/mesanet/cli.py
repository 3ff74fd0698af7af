"""``mesanet`` command line: train, verify, bench, stats.

Exit codes: 0 success, 1 verification or runtime failure, 2 usage error.

Config files are flat UTF-8 ``key = value`` lines; ``#`` starts a comment.
Keys are the fields of :class:`~mesanet.model.ModelConfig` and
:class:`~mesanet.train.TrainConfig`; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .cg import NotPositiveDefiniteError
from .model import ModelConfig, load_checkpoint
from .train import CHECKPOINT, METRICS, TrainConfig, TrainingDiverged, make_batch, train

MANIFEST = "manifest.json"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _field_types() -> dict[str, str]:
    out = {}
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            out[f.name] = str(f.type)
    return out


CONFIG_KEYS = _field_types()


def _convert(key: str, raw: str):
    kind = CONFIG_KEYS[key]
    raw = raw.strip()
    try:
        if "None" in kind and raw.lower() in ("none", ""):
            return None
        if kind.startswith("bool"):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict:
    cfg = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown config key: {key}")
        cfg[key] = _convert(key, value)
    return cfg


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        data = json.loads(text).get("config", {})
        unknown = set(data) - set(CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config key: {sorted(unknown)[0]}")
        return data
    return parse_config_text(text)


def build_configs(raw: dict) -> tuple[ModelConfig, TrainConfig]:
    raw = dict(raw)
    if raw.get("task", "parity") == "parity":
        raw.setdefault("vocab", 2)
    elif "vocab" not in raw:
        raw["vocab"] = 4 * raw.get("n_pairs", 8)
    try:
        return ModelConfig.from_dict(raw), TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _prepare_out(path, force: bool, is_dir: bool = True) -> Path:
    p = Path(path)
    if p.exists() and (not is_dir or any(p.iterdir())) and not force:
        raise UsageError(f"{p} exists; pass --force to overwrite")
    if is_dir:
        p.mkdir(parents=True, exist_ok=True)
    else:
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


# commands


def cmd_train(args) -> int:
    raw = load_config(args.config) if args.config else {}
    for key in ("task", "steps", "seed"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    mcfg, tcfg = build_configs(raw)
    out = _prepare_out(args.out, args.force)
    resolved = {**asdict(mcfg), **asdict(tcfg)}
    manifest = {"config": resolved, "seed": tcfg.seed,
                "artifacts": {"metrics": METRICS, "checkpoint": CHECKPOINT}, "checkpoint_hash": None}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log = (lambda r: print(json.dumps(r), flush=True)) if args.verbose else None
    try:
        train(mcfg, tcfg, out_dir=out, log=log)
    except (TrainingDiverged, NotPositiveDefiniteError, FloatingPointError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    manifest["checkpoint_hash"] = git_blob_hash(out / CHECKPOINT)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / METRICS} and {out / CHECKPOINT}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suite

    names = SUITES if args.suite == "all" else (args.suite,)
    failed = 0
    for name in names:
        results = run_suite(name, args.seed)
        for r in results:
            print(f"  {r.line()}")
        n_pass = sum(r.passed for r in results)
        failed += len(results) - n_pass
        print(f"{name}: {n_pass} passed, {len(results) - n_pass} failed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_bench(args) -> int:
    from .bench import bench_config, rows_to_csv

    rows = [bench_config(args.mixer, T, C, k, heads=args.heads, n_a=args.n_a, repeats=args.repeats,
                         seed=args.seed)
            for T in args.T for C in args.C for k in args.cg_steps]
    text = rows_to_csv(rows)
    if args.out:
        _prepare_out(args.out, args.force, is_dir=False).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_stats(args) -> int:
    from .inference import SWEEP_GRID, DecodeSession, head_condition_profile, sweep_stopping, write_profile_csv
    from .linalg import make_rng

    if not Path(args.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    try:
        mcfg, params = load_checkpoint(args.ckpt)
    except ValueError as exc:
        print(f"bad checkpoint: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if mcfg.mixer != "mesa":
        raise UsageError("stats needs a checkpoint with the mesa mixer")
    tcfg = TrainConfig(task=args.eval, seq_len=args.seq_len, n_pairs=args.n_pairs)
    out = _prepare_out(args.out, args.force)
    ev = make_batch(tcfg, mcfg, args.eval_batch, make_rng(args.seed, "sweep"))
    try:
        stats = head_condition_profile(DecodeSession(mcfg, params), ev[0][0], rng=make_rng(args.seed, "cond"))
        write_profile_csv(out / "head_profile.csv", stats)
        if args.eps_sweep:
            rows = sweep_stopping(lambda e, k, b: DecodeSession(mcfg, params, b, e, k), SWEEP_GRID, ev)
            with open(out / "eps_sweep.csv", "w", encoding="utf-8") as f:
                f.write("eps,k_max,mean_iters,accuracy,solves\n")
                for r in rows:
                    f.write(f"{r['eps']!r},{r['k_max']},{r['mean_iters']!r},{r['accuracy']!r},{r['solves']}\n")
    except NotPositiveDefiniteError as exc:
        print(f"stats failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mesanet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a synthetic task")
    t.add_argument("--config", help="key = value file (or a manifest.json from an earlier run)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--task", choices=("parity", "recall"))
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    t.add_argument("--verbose", action="store_true", help="echo metrics records")
    t.set_defaults(fn=cmd_train)

    v = sub.add_parser("verify", help="run oracle suites")
    v.add_argument("--suite", default="all", choices=("cg", "mesa", "baselines", "grads", "app_f", "all"))
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)

    b = sub.add_parser("bench", help="time chunked vs sequential kernels")
    b.add_argument("--mixer", default="mesa",
                   choices=("mesa", "gla", "mamba2", "deltanet", "gated_deltanet", "mlstm"))
    b.add_argument("--T", type=_int_list, default=[512])
    b.add_argument("--C", type=_int_list, default=[64])
    b.add_argument("--cg-steps", dest="cg_steps", type=_int_list, default=[10])
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--n-a", dest="n_a", type=int, default=16)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (stdout if omitted)")
    b.add_argument("--force", action="store_true")
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("stats", help="CG diagnostics for a trained checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--eval", default="recall", choices=("parity", "recall"))
    s.add_argument("--eps-sweep", action="store_true")
    s.add_argument("--seq-len", type=int, default=40)
    s.add_argument("--n-pairs", type=int, default=8)
    s.add_argument("--eval-batch", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_stats)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    threads = os.environ.get("MESA_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            if not threads.isdigit() or int(threads) < 1:
                raise UsageError(f"MESA_THREADS must be a positive integer, got {threads!r}")
            with threadpool_limits(limits=int(threads)):
                return args.fn(args)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
