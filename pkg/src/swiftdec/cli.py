"""Command-line entry points.

``generate`` runs one speculative or autoregressive decode, ``verify-lossless``
runs both and diffs them, ``bench`` sweeps a config grid into a CSV, and
``report`` recomputes metrics from a saved trace.

Exit codes: 0 success, 2 configuration error, 3 runtime error (including a
losslessness mismatch). Config precedence is file < flags; all randomness
flows from --seed.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import engine, metrics
from .engine import ConfigError, EngineConfig
from .metrics import CostParams
from .model import build_model, load_weights, read_model_config
from .rng import derive_seed, mix
from .sampling import SamplerConfig, Truncation
from .tree import TreeConfig

_RUN_DEFAULTS: dict[str, object] = {
    "mode": "swift",
    "target": 256,
    "sink": 4,
    "budget": 64,
    "tree": "1,3,3,3",
    "k": 20,
    "temperature": 1.0,
    "theta": 1.2,
    "window": 1024,
    "truncation": "min_p",
    "trunc_param": 0.1,
    "seed": 0,
    "bonus": 1,
    "format": "ids",
}

_INT_KEYS = {"target", "sink", "budget", "k", "window", "seed", "bonus"}
_FLOAT_KEYS = {"temperature", "theta", "trunc_param"}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model config file (key = value lines)")
    p.add_argument("--weights", help="optional weights blob for the tiny backend")
    p.add_argument("--config", help="run config file, overridden by flags")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--prompt", help="inline whitespace-separated token ids")
    src.add_argument("--prompt-file", help="file of whitespace-separated token ids")
    src.add_argument("--random-prompt", type=int, metavar="N",
                     help="synthesize a seeded prompt of N tokens")
    p.add_argument("--mode", choices=["swift", "ar"])
    p.add_argument("--target", type=int, help="tokens to generate")
    p.add_argument("--sink", type=int, help="always-kept earliest cache entries")
    p.add_argument("--budget", type=int, help="partial cache budget")
    p.add_argument("--tree", help="comma-separated candidate widths, e.g. 1,3,3,3")
    p.add_argument("--k", type=int, help="n-gram branches per step (0 disables)")
    p.add_argument("--temperature", type=float)
    p.add_argument("--theta", type=float, help="repetition penalty, 1.0 = off")
    p.add_argument("--window", type=int, help="penalty window size")
    trunc = p.add_mutually_exclusive_group()
    trunc.add_argument("--top-p", type=float)
    trunc.add_argument("--min-p", type=float)
    trunc.add_argument("--eta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-bonus", action="store_true",
                   help="strict matched-prefix commits (no bonus token)")
    p.add_argument("--format", choices=["ids", "text"])
    p.add_argument("--print-config", action="store_true",
                   help="print the effective run config and exit")


def _read_run_config(path: str) -> dict[str, str]:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _RUN_DEFAULTS:
            raise ConfigError(f"{path}: unknown run config key {key!r}")
        values[key] = val.strip()
    return values


def _merge_spec(args: argparse.Namespace) -> dict[str, object]:
    spec = dict(_RUN_DEFAULTS)
    if getattr(args, "config", None):
        for key, val in _read_run_config(args.config).items():
            if key in _INT_KEYS:
                spec[key] = int(val)
            elif key in _FLOAT_KEYS:
                spec[key] = float(val)
            else:
                spec[key] = val
    for key in ("mode", "target", "sink", "budget", "tree", "k", "temperature",
                "theta", "window", "seed", "format"):
        val = getattr(args, key, None)
        if val is not None:
            spec[key] = val
    if getattr(args, "top_p", None) is not None:
        spec["truncation"], spec["trunc_param"] = "top_p", args.top_p
    elif getattr(args, "min_p", None) is not None:
        spec["truncation"], spec["trunc_param"] = "min_p", args.min_p
    elif getattr(args, "eta", None) is not None:
        spec["truncation"], spec["trunc_param"] = "eta", args.eta
    if getattr(args, "no_bonus", False):
        spec["bonus"] = 0
    return spec


def _engine_config(spec: dict[str, object]) -> EngineConfig:
    sampler = SamplerConfig(
        temperature=float(spec["temperature"]),
        theta=float(spec["theta"]),
        window=int(spec["window"]),
        truncation=Truncation(str(spec["truncation"]), float(spec["trunc_param"])),
        seed=int(spec["seed"]),
    )
    return EngineConfig(
        target_length=int(spec["target"]),
        sink_size=int(spec["sink"]),
        budget=int(spec["budget"]),
        tree=TreeConfig.parse(str(spec["tree"])),
        k=int(spec["k"]),
        sampler=sampler,
        seed=int(spec["seed"]),
        bonus=bool(int(spec["bonus"])),
    )


def _load_backend(args: argparse.Namespace):
    cfg_path = Path(args.model)
    if not cfg_path.exists():
        raise ConfigError(f"model config not found: {cfg_path}")
    values = read_model_config(cfg_path)
    model = build_model(values)
    if getattr(args, "weights", None):
        blob = Path(args.weights)
        if not blob.exists():
            raise ConfigError(f"weights blob not found: {blob}")
        model = load_weights(model.config, blob)
    return model


def _resolve_prompt(args: argparse.Namespace, spec: dict[str, object], vocab: int) -> list[int]:
    if args.prompt is not None:
        return [int(t) for t in args.prompt.split()]
    if args.prompt_file is not None:
        path = Path(args.prompt_file)
        if not path.exists():
            raise ConfigError(f"prompt file not found: {path}")
        return [int(t) for t in path.read_text().split()]
    n = args.random_prompt if args.random_prompt is not None else 64
    seed = derive_seed(int(spec["seed"]), "prompt")
    return [mix(seed, i) % vocab for i in range(n)]


def _render(tokens: list[int], fmt: str) -> str:
    if fmt == "text":
        # debugging visualization only: ids mapped onto printable ASCII
        return "".join(chr(32 + t % 95) for t in tokens)
    return " ".join(str(t) for t in tokens)


def _print_config(spec: dict[str, object]) -> None:
    for key in _RUN_DEFAULTS:
        print(f"{key} = {spec[key]}")


def _run_one(model, prompt, spec) -> tuple[list[int], metrics.RunMetrics | None, float]:
    config = _engine_config(spec)
    t0 = time.perf_counter()
    if spec["mode"] == "ar":
        out = engine.generate_ar(model, prompt, config)
        return out, None, time.perf_counter() - t0
    out, run_metrics = engine.generate(model, prompt, config)
    return out, run_metrics, time.perf_counter() - t0


def cmd_generate(args: argparse.Namespace) -> int:
    spec = _merge_spec(args)
    if args.print_config:
        _print_config(spec)
        return 0
    model = _load_backend(args)
    prompt = _resolve_prompt(args, spec, model.config.vocab_size)
    session = None
    config = _engine_config(spec)
    if spec["mode"] == "ar":
        tokens = engine.generate_ar(model, prompt, config)
        run_metrics = None
    else:
        session = engine.prefill(model, prompt, config)
        while not session.done:
            session.step()
        tokens, run_metrics = session.emitted, session.metrics()
    text = _render(tokens, str(spec["format"]))
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if args.trace and session is not None:
        metrics.write_trace(session.records, args.trace)
    if args.metrics and run_metrics is not None:
        Path(args.metrics).write_text(json.dumps(run_metrics.to_dict(), indent=2) + "\n")
    if args.dump_cache and session is not None:
        with open(args.dump_cache, "w", encoding="utf-8") as fh:
            from .kvcache import dump_cache_jsonl
            dump_cache_jsonl(session.partial, fh)
    if args.dump_ngrams and session is not None:
        with open(args.dump_ngrams, "w", encoding="utf-8") as fh:
            session.ngrams.dump_jsonl(fh)
    return 0


def cmd_verify_lossless(args: argparse.Namespace) -> int:
    spec = _merge_spec(args)
    if args.print_config:
        _print_config(spec)
        return 0
    model = _load_backend(args)
    prompt = _resolve_prompt(args, spec, model.config.vocab_size)
    swift_spec = dict(spec, mode="swift")
    ar_spec = dict(spec, mode="ar")
    swift_out, run_metrics, swift_s = _run_one(model, prompt, swift_spec)
    ar_out, _, ar_s = _run_one(model, prompt, ar_spec)
    n = min(len(swift_out), len(ar_out))
    if swift_out[:n] != ar_out[:n]:
        first = next(i for i in range(n) if swift_out[i] != ar_out[i])
        print(f"MISMATCH at generated position {first}: "
              f"swift={swift_out[first]} ar={ar_out[first]}", file=sys.stderr)
        return 3
    alpha = run_metrics.alpha if run_metrics else float("nan")
    print(f"lossless: {n} tokens identical (alpha={alpha:.4f}, "
          f"wall speedup x{ar_s / swift_s:.2f})")
    return 0


def _cost_params(args: argparse.Namespace) -> CostParams:
    return CostParams(
        bandwidth=args.bandwidth, flops=args.flops,
        weight_bytes=args.weight_bytes, kv_bytes_per_token=args.kv_bytes,
    )


def _add_cost_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bandwidth", type=float, default=2.04e12, help="bytes/s")
    p.add_argument("--flops", type=float, default=312e12)
    p.add_argument("--weight-bytes", type=float, default=15.0e9)
    p.add_argument("--kv-bytes", type=float, default=131072.0, help="per token")


def _fmt_stat(values: list[float]) -> str:
    if len(values) == 1:
        return f"{values[0]:.4f}"
    mean = float(np.mean(values))
    std = float(np.std(values))
    return f"{mean:.4f}±{std:.4f}"


def cmd_bench(args: argparse.Namespace) -> int:
    spec = _merge_spec(args)
    model_values = read_model_config(args.model) if Path(args.model).exists() else None
    if model_values is None:
        raise ConfigError(f"model config not found: {args.model}")
    gen_lens = [int(x) for x in args.gen_lens.split(",")]
    ks = [int(x) for x in args.ks.split(",")]
    thetas = [float(x) for x in args.thetas.split(",")]
    windows = [int(x) for x in args.windows.split(",")]
    trees = args.trees.split(";")
    seeds = [int(x) for x in args.seeds.split(",")]
    if not gen_lens or not seeds:
        raise ConfigError("bench grid must not be empty")
    params = _cost_params(args)
    rows = []
    for gen_len, k, tree_txt, theta, window in itertools.product(
            gen_lens, ks, trees, thetas, windows):
        stats: dict[str, list[float]] = {"alpha": [], "beta": [], "speedup": [], "distinct": []}
        for seed in seeds:
            cell = dict(spec, target=gen_len, k=k, tree=tree_txt, theta=theta,
                        window=window, seed=seed, mode="swift")
            model = build_model(model_values)
            prompt = _resolve_prompt(args, cell, model.config.vocab_size)
            session = engine.prefill(model, prompt, _engine_config(cell))
            while not session.done:
                session.step()
            m = session.metrics()
            stats["alpha"].append(m.alpha)
            stats["beta"].append(m.beta)
            stats["speedup"].append(
                metrics.simulated_speedup(params, session.records, len(prompt)))
            stats["distinct"].append(float(np.mean(list(m.distinct.values()))))
        rows.append({
            "gen_len": gen_len, "k": k, "tree": tree_txt, "theta": theta, "W": window,
            "alpha": _fmt_stat(stats["alpha"]), "beta": _fmt_stat(stats["beta"]),
            "simulated_speedup": _fmt_stat(stats["speedup"]),
            "distinct_avg": _fmt_stat(stats["distinct"]),
        })
    header = ["gen_len", "k", "tree", "theta", "W", "alpha", "beta",
              "simulated_speedup", "distinct_avg"]
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    trace_path = Path(args.trace)
    if not trace_path.exists():
        raise ConfigError(f"trace not found: {trace_path}")
    records = metrics.read_trace(trace_path)
    if not records:
        raise ConfigError(f"trace {trace_path} is empty")
    emitted = [t for rec in records for t in rec.tokens]
    run = metrics.collect_metrics(records, args.gamma, emitted)
    params = _cost_params(args)
    sim = metrics.simulated_speedup(params, records, args.prefix_len)
    payload = run.to_dict()
    payload["simulated_speedup"] = sim
    print(json.dumps(payload, indent=2))
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["Gen. Len.", "alpha", "x"])
            writer.writerow([run.emitted, f"{run.alpha:.4f}", f"{sim:.4f}"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swiftdec",
        description="Lossless speculative decoding engine for long sequences",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="run one decode")
    _add_run_flags(p_gen)
    p_gen.add_argument("--out", help="write output tokens here instead of stdout")
    p_gen.add_argument("--trace", help="write a JSONL iteration trace")
    p_gen.add_argument("--metrics", help="write run metrics JSON")
    p_gen.add_argument("--dump-cache", help="write the final partial cache as JSONL")
    p_gen.add_argument("--dump-ngrams", help="write the n-gram table as JSONL")
    p_gen.set_defaults(func=cmd_generate)

    p_ver = sub.add_parser("verify-lossless", help="paired swift/ar run and diff")
    _add_run_flags(p_ver)
    p_ver.set_defaults(func=cmd_verify_lossless)

    p_bench = sub.add_parser("bench", help="sweep a config grid into CSV")
    _add_run_flags(p_bench)
    _add_cost_flags(p_bench)
    p_bench.add_argument("--gen-lens", default="256", help="comma-separated lengths")
    p_bench.add_argument("--ks", default="20")
    p_bench.add_argument("--thetas", default="1.2")
    p_bench.add_argument("--windows", default="1024")
    p_bench.add_argument("--trees", default="1,3,3,3",
                         help="semicolon-separated width lists")
    p_bench.add_argument("--seeds", default="0")
    p_bench.add_argument("--out", help="CSV path (stdout if omitted)")
    p_bench.set_defaults(func=cmd_bench)

    p_rep = sub.add_parser("report", help="trace JSONL to metrics JSON")
    _add_cost_flags(p_rep)
    p_rep.add_argument("--trace", required=True)
    p_rep.add_argument("--gamma", type=int, default=3)
    p_rep.add_argument("--prefix-len", type=int, default=64)
    p_rep.add_argument("--csv", help="append a (Gen. Len., alpha, x) row here")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
