"""Command-line entry point: reproducible runs from JSON configs.

Subcommands: decode, experiment, bounds-eval, equivalence, oracle-stats.
Exit codes: 0 success, 1 validation error, 2 runtime error, 3 equivalence
test failure. Output files are pure functions of (config bytes, seeds, tool
version); floats are written with 9 significant digits and files are replaced
atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from typing import Callable

from . import __version__
from .bounds import bound_report, sample_pair, validity_condition
from .dist import make_rng
from .engine import DecodeMode, speculative_decode
from .harness import (CostModel, ExperimentConfig, equivalence_test,
                      oracle_length_stats, round_csv_rows, run_experiment)
from .models import AutoregressiveModel, tabular_from_spec, temper
from .policies import (DEFAULT_CAP, ConstantPolicy, HeuristicPolicy,
                       LengthPolicy, SvipConfig, SvipPolicy)


class ValidationError(ValueError):
    """Config problem, reported with the offending field path."""


def fmt9(value) -> str:
    """Locale-independent fixed-precision rendering (9 significant digits)."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def round9(obj):
    """Recursively round floats to 9 significant digits for stable JSON."""
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: round9(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round9(v) for v in obj]
    return obj


def write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def write_json(path: str, obj) -> None:
    write_atomic(path, json.dumps(round9(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path: str, fieldnames: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: fmt9(row.get(k)) for k in fieldnames})
    write_atomic(path, buf.getvalue())


# -- config parsing -----------------------------------------------------------


def _get(cfg: dict, path: str, expect=None, required=True, default=None):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ValidationError(f"{path}: missing required field")
            return default
        node = node[part]
    if expect is not None and not isinstance(node, expect):
        names = expect.__name__ if isinstance(expect, type) else \
            "/".join(t.__name__ for t in expect)
        raise ValidationError(f"{path}: expected {names}, got {type(node).__name__}")
    return node


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}")


def load_model_spec(path: str, field: str) -> AutoregressiveModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"{field}: model file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{field}: {path} is not valid JSON: {exc}")
    try:
        return tabular_from_spec(doc)
    except ValueError as exc:
        raise ValidationError(f"{field}: {exc}")


def parse_models(cfg: dict):
    target = load_model_spec(_get(cfg, "target_spec", expect=str), "target_spec")
    draft_spec = _get(cfg, "draft_spec")
    if isinstance(draft_spec, str):
        draft = load_model_spec(draft_spec, "draft_spec")
    elif isinstance(draft_spec, dict) and "temper" in draft_spec:
        tau = _get(draft_spec, "temper.tau", expect=(int, float))
        eps = _get(draft_spec, "temper.eps", expect=(int, float),
                   required=False, default=0.0)
        try:
            draft = temper(target, float(tau), float(eps))
        except ValueError as exc:
            raise ValidationError(f"draft_spec.temper: {exc}")
    else:
        raise ValidationError("draft_spec: expected a path or {'temper': {...}}")
    if target.vocab_size != draft.vocab_size:
        raise ValidationError(
            f"draft_spec: vocab {draft.vocab_size} does not match target "
            f"{target.vocab_size}")
    return target, draft


def parse_mode(cfg: dict) -> DecodeMode:
    mode = _get(cfg, "mode", expect=str)
    try:
        return DecodeMode(mode)
    except ValueError:
        raise ValidationError(f"mode: expected 'sampling' or 'greedy', got {mode!r}")


def parse_policy(cfg: dict) -> tuple[Callable[[], LengthPolicy], str]:
    kind = _get(cfg, "policy.kind", expect=str)
    if kind == "constant":
        k = _get(cfg, "policy.k", expect=int)
        cap = _get(cfg, "policy.cap", expect=int, required=False, default=DEFAULT_CAP)
        _validate_policy_args(lambda: ConstantPolicy(k, cap), "policy")
        return (lambda: ConstantPolicy(k, cap)), f"constant-{k}"
    if kind == "heuristic":
        init = _get(cfg, "policy.init", expect=int, required=False, default=5)
        cap = _get(cfg, "policy.cap", expect=int, required=False, default=DEFAULT_CAP)
        _validate_policy_args(lambda: HeuristicPolicy(init, cap), "policy")
        return (lambda: HeuristicPolicy(init, cap)), f"heuristic-{init}"
    if kind == "svip":
        h = _get(cfg, "policy.h", expect=(int, float))
        max_len = _get(cfg, "policy.max_len", expect=int, required=False,
                       default=DEFAULT_CAP)
        _validate_policy_args(lambda: SvipPolicy(SvipConfig(float(h), max_len)),
                              "policy")
        return (lambda: SvipPolicy(SvipConfig(float(h), max_len))), f"svip-{fmt9(float(h))}"
    raise ValidationError(f"policy.kind: unknown policy {kind!r}")


def _validate_policy_args(factory, path):
    try:
        factory()
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}")


def parse_prompts(cfg: dict, vocab_size: int) -> list[list[int]]:
    prompts = _get(cfg, "prompts")
    if isinstance(prompts, dict) and "file" in prompts:
        path = prompts["file"]
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = [ln for ln in f.read().splitlines() if ln.strip()]
        except FileNotFoundError:
            raise ValidationError(f"prompts.file: file not found: {path}")
        prompts = [[int(t) for t in ln.split()] for ln in lines]
    if not isinstance(prompts, list) or not prompts:
        raise ValidationError("prompts: expected a non-empty list of token lists")
    for i, prompt in enumerate(prompts):
        if not isinstance(prompt, list) or not prompt:
            raise ValidationError(f"prompts[{i}]: expected a non-empty token list")
        for t in prompt:
            if not isinstance(t, int) or not 0 <= t < vocab_size:
                raise ValidationError(f"prompts[{i}]: token {t!r} out of vocab")
    return prompts


def parse_seeds(cfg: dict, override: int | None) -> list[int]:
    if override is not None:
        return [override]
    seeds = _get(cfg, "seeds", expect=list)
    if not seeds:
        raise ValidationError("seeds: must be non-empty")
    for i, s in enumerate(seeds):
        if not isinstance(s, int) or s < 0:
            raise ValidationError(f"seeds[{i}]: expected a non-negative integer")
    return seeds


def parse_cost_model(cfg: dict) -> CostModel:
    node = _get(cfg, "cost_model", expect=dict, required=False, default=None)
    if node is None:
        return CostModel()
    try:
        return CostModel(
            r_draft=float(node.get("r_draft", 0.1)),
            c_verify_overhead=float(node.get("c_verify_overhead", 0.0)))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"cost_model: {exc}")


def parse_horizon(cfg: dict, prompts: list[list[int]]) -> int:
    horizon = _get(cfg, "horizon", expect=int)
    longest = max(len(p) for p in prompts)
    if horizon <= longest:
        raise ValidationError(
            f"horizon: {horizon} must exceed the longest prompt ({longest})")
    return horizon


# -- subcommands --------------------------------------------------------------


def cmd_decode(cfg: dict, out_dir: str, seed_override: int | None,
               fmt: str) -> int:
    target, draft = parse_models(cfg)
    mode = parse_mode(cfg)
    policy_factory, _ = parse_policy(cfg)
    prompts = parse_prompts(cfg, target.vocab_size)
    seeds = parse_seeds(cfg, seed_override)
    horizon = parse_horizon(cfg, prompts)

    results = []
    for seed in seeds:
        for pi, prompt in enumerate(prompts):
            rng = make_rng((seed, pi))
            result = speculative_decode(target, draft, prompt, horizon,
                                        policy_factory(), mode, rng)
            results.append(result)
            tokens = " ".join(str(t) for t in result.output_tokens)
            write_atomic(os.path.join(out_dir, f"tokens_seed{seed}_prompt{pi}.txt"),
                         tokens + "\n")
    write_csv(os.path.join(out_dir, "rounds.csv"),
              ["decode_index", "round_index", "proposed", "accepted",
               "correction", "bonus", "mean_entropy", "next_entropy"],
              round_csv_rows(results))
    return 0


def cmd_experiment(cfg: dict, out_dir: str, seed_override: int | None,
                   fmt: str) -> int:
    target, draft = parse_models(cfg)
    mode = parse_mode(cfg)
    policy_factory, policy_label = parse_policy(cfg)
    prompts = parse_prompts(cfg, target.vocab_size)
    seeds = parse_seeds(cfg, seed_override)
    horizon = parse_horizon(cfg, prompts)
    config = ExperimentConfig(
        target=target, draft=draft,
        policy_factory=policy_factory, policy_label=policy_label,
        mode=mode, horizon=horizon, prompts=prompts, seeds=seeds,
        cost_model=parse_cost_model(cfg),
        oracle_cap=_get(cfg, "oracle_cap", expect=int, required=False,
                        default=DEFAULT_CAP),
        kl_window=_get(cfg, "kl_window", expect=int, required=False, default=4),
        label=_get(cfg, "label", expect=str, required=False, default=""),
    )
    report = run_experiment(config)
    doc = report.to_jsonable()
    doc["tool_version"] = __version__
    doc["config_echo"] = cfg
    write_json(os.path.join(out_dir, "report.json"), doc)
    write_csv(os.path.join(out_dir, "rounds.csv"),
              ["decode_index", "round_index", "proposed", "accepted",
               "correction", "bonus", "mean_entropy", "next_entropy"],
              round_csv_rows(report.results))
    return 0


def cmd_bounds_eval(cfg: dict, out_dir: str, seed_override: int | None,
                    fmt: str) -> int:
    _get(cfg, "pairs", expect=dict)
    count = _get(cfg, "pairs.count", expect=int)
    vocab = _get(cfg, "pairs.vocab", expect=int)
    seed = seed_override if seed_override is not None else \
        _get(cfg, "pairs.seed", expect=int)
    kind = _get(cfg, "pairs.kind", expect=str, required=False,
                default="independent")
    tau = float(_get(cfg, "pairs.tau", expect=(int, float), required=False,
                     default=2.0))
    eps = float(_get(cfg, "pairs.eps", expect=(int, float), required=False,
                     default=0.1))
    c = float(_get(cfg, "c", expect=(int, float), required=False, default=0.18))
    if count < 1:
        raise ValidationError("pairs.count: must be >= 1")
    if vocab < 2:
        raise ValidationError("pairs.vocab: must be >= 2")
    if kind not in ("independent", "tempered"):
        raise ValidationError(f"pairs.kind: unknown kind {kind!r}")
    if c <= 0:
        raise ValidationError("c: must be positive")

    rng = make_rng(seed)
    reports = []
    for _ in range(count):
        p, q = sample_pair(vocab, rng, kind=kind, tau=tau, eps=eps)
        reports.append(bound_report(p, q, c))
    reports.sort(key=lambda r: r.beta)
    rows = [{
        "beta": r.beta, "tvd": r.tvd, "kl_q_p": r.kl_q_p,
        "pinsker": r.pinsker, "bh": r.bh, "approx": r.approx,
        "h_q": r.h_q, "h_qp": r.h_qp,
        "gamma_ratio": None if math.isnan(r.gamma_ratio) else r.gamma_ratio,
        "valid": validity_condition(r.gamma_ratio, c),
    } for r in reports]
    fields = ["beta", "tvd", "kl_q_p", "pinsker", "bh", "approx",
              "h_q", "h_qp", "gamma_ratio", "valid"]
    if fmt == "json":
        write_json(os.path.join(out_dir, "bounds.json"),
                   {"c": c, "rows": rows})
    else:
        write_csv(os.path.join(out_dir, "bounds.csv"), fields, rows)
    return 0


def cmd_equivalence(cfg: dict, out_dir: str, seed_override: int | None,
                    fmt: str) -> int:
    target, draft = parse_models(cfg)
    mode = parse_mode(cfg)
    policy_factory, policy_label = parse_policy(cfg)
    prompt = _get(cfg, "prompt", expect=list)
    for t in prompt:
        if not isinstance(t, int) or not 0 <= t < target.vocab_size:
            raise ValidationError(f"prompt: token {t!r} out of vocab")
    if not prompt:
        raise ValidationError("prompt: must be non-empty")
    horizon = _get(cfg, "horizon", expect=int)
    n_samples = _get(cfg, "n_samples", expect=int)
    seed = seed_override if seed_override is not None else \
        _get(cfg, "seed", expect=int)
    threshold = float(_get(cfg, "threshold", expect=(int, float),
                           required=False, default=0.01))
    if target.vocab_size ** horizon > 10_000:
        raise ValidationError(
            f"horizon: state space too large ({target.vocab_size}^{horizon} "
            "sequences; limit 10000)")
    if n_samples < 10_000:
        raise ValidationError("n_samples: must be >= 10000")

    verdict = equivalence_test(target, draft, policy_factory, prompt, horizon,
                               n_samples, make_rng(seed), threshold, mode)
    write_json(os.path.join(out_dir, "verdict.json"), {
        "tvd": verdict.tvd, "passed": verdict.passed,
        "threshold": verdict.threshold, "n_samples": verdict.n_samples,
        "policy": policy_label,
    })
    print(f"equivalence: tvd={fmt9(verdict.tvd)} threshold={fmt9(threshold)} "
          f"{'PASS' if verdict.passed else 'FAIL'}")
    return 0 if verdict.passed else 3


def cmd_oracle_stats(cfg: dict, out_dir: str, seed_override: int | None,
                     fmt: str) -> int:
    target, draft = parse_models(cfg)
    mode = parse_mode(cfg)
    prompts = parse_prompts(cfg, target.vocab_size)
    cap = _get(cfg, "cap", expect=int, required=False, default=DEFAULT_CAP)
    n_runs = _get(cfg, "n_runs", expect=int, required=False, default=1)
    seed = seed_override if seed_override is not None else \
        _get(cfg, "seed", expect=int)
    if cap < 1:
        raise ValidationError("cap: must be >= 1")
    if n_runs < 1:
        raise ValidationError("n_runs: must be >= 1")

    mean, variance, histogram = oracle_length_stats(
        target, draft, prompts, mode, make_rng(seed), cap, n_runs)
    summary = {"mean": mean, "variance": variance, "cap": cap,
               "n_runs": n_runs, "n_prompts": len(prompts),
               "histogram": histogram.tolist()}
    if fmt == "csv":
        write_csv(os.path.join(out_dir, "oracle_histogram.csv"),
                  ["length", "count"],
                  ({"length": i, "count": int(c)} for i, c in enumerate(histogram)))
    write_json(os.path.join(out_dir, "oracle_stats.json"), summary)
    return 0


# -- entry point --------------------------------------------------------------


_COMMANDS = {
    "decode": cmd_decode,
    "experiment": cmd_experiment,
    "bounds-eval": cmd_bounds_eval,
    "equivalence": cmd_equivalence,
    "oracle-stats": cmd_oracle_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speclab",
        description="Speculative decoding laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config path")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed-override", type=int, default=None,
                        help="replace the config's seed(s) with one value")
    common.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="tabular output format where applicable")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("decode", parents=[common],
                   help="run speculative decodes, write tokens and round CSV")
    sub.add_parser("experiment", parents=[common],
                   help="run an experiment suite, write report JSON and round CSV")
    sub.add_parser("bounds-eval", parents=[common],
                   help="evaluate acceptance-rate bounds on sampled pairs")
    sub.add_parser("equivalence", parents=[common],
                   help="Monte Carlo output-distribution equivalence verdict")
    sub.add_parser("oracle-stats", parents=[common],
                   help="oracle draft length statistics")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](cfg, args.out, args.seed_override,
                                       args.format)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
