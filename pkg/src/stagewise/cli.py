"""Command-line entry point.

Subcommands: solve one question, run a benchmark, sweep the scaling grid,
calibrate reward statistics, run the dataset pipeline, and check the sim
engine against exact enumeration. Settings come from an optional JSON config
file with flags taking precedence; secrets only ever come from environment
variables.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields, replace
from typing import Optional

from .backends import (
    BackendError,
    EndpointConfig,
    Generator,
    HttpGenerator,
    HttpRewardScorer,
    RewardScorer,
    SimWorld,
    SimWorldConfig,
)
from .datagen import load_sources, run_pipeline
from .harness import (
    default_grid,
    grade,
    load_items,
    oracle_grade,
    run_benchmark,
    run_simcheck,
    scaling_experiment,
)
from .search import (
    CalibrationStats,
    ConfigError,
    LoopSemantics,
    SearchConfig,
    SearchExhaustedError,
    Strategy,
    calibrate,
    run_strategy,
)
from .stages import DEFAULT_SCHEMA, parse_staged

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_EXHAUSTED = 4

_STRATEGY_ALIASES = {
    "best_of_n": Strategy.BEST_OF_N,
    "bon": Strategy.BEST_OF_N,
    "beam": Strategy.STAGE_BEAM,
    "stage_beam": Strategy.STAGE_BEAM,
    "swires": Strategy.SWIRES,
}


@dataclass
class AppConfig:
    backend: str = "sim"
    generator: Optional[EndpointConfig] = None
    reward: Optional[EndpointConfig] = None
    judge: Optional[EndpointConfig] = None
    sim: SimWorldConfig = SimWorldConfig()
    search: SearchConfig = SearchConfig()
    run_seed: int = 0
    parallelism: int = 1


_SEARCH_KEYS = {
    "candidates_per_stage",
    "beam_width",
    "retrace_limit",
    "cutoff_zscore",
    "reward_mean",
    "reward_std",
    "min_pass_count",
    "summary_candidates",
    "strategy",
    "loop_semantics",
    "temperature",
    "max_new_tokens",
}
_ENDPOINT_KEYS = {f.name for f in fields(EndpointConfig)}
_SIM_KEYS = {"success", "recovery", "mean_correct", "mean_incorrect", "noise_std", "rng_seed"}
_TOP_KEYS = {"backend", "generator", "reward", "judge", "sim", "search", "run_seed", "parallelism"}


def _reject_unknown(data: dict, allowed: set, context: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} config keys: {sorted(unknown)}")


def _parse_search_section(data: dict) -> SearchConfig:
    _reject_unknown(data, _SEARCH_KEYS, "search")
    kwargs = dict(data)
    stats_kwargs = {}
    if "reward_mean" in kwargs:
        stats_kwargs["reward_mean"] = float(kwargs.pop("reward_mean"))
    if "reward_std" in kwargs:
        stats_kwargs["reward_std"] = float(kwargs.pop("reward_std"))
    if "strategy" in kwargs:
        kwargs["strategy"] = _parse_strategy(kwargs["strategy"])
    if "loop_semantics" in kwargs:
        kwargs["loop_semantics"] = _parse_loop_semantics(kwargs["loop_semantics"])
    cfg = SearchConfig(**kwargs)
    if stats_kwargs:
        base = cfg.stats
        cfg = replace(
            cfg,
            stats=CalibrationStats(
                stats_kwargs.get("reward_mean", base.reward_mean),
                stats_kwargs.get("reward_std", base.reward_std),
                base.sample_count,
            ),
        )
    return cfg


def _parse_strategy(name: str) -> Strategy:
    try:
        return _STRATEGY_ALIASES[str(name).lower()]
    except KeyError:
        raise ConfigError(f"unknown strategy: {name!r}") from None


def _parse_loop_semantics(name: str) -> LoopSemantics:
    try:
        return LoopSemantics(str(name).lower())
    except ValueError:
        raise ConfigError(f"unknown loop semantics: {name!r}") from None


def load_config(path: Optional[str]) -> AppConfig:
    if path is None:
        return AppConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(data, _TOP_KEYS, "top-level")
    cfg = AppConfig()
    try:
        if "backend" in data:
            cfg.backend = str(data["backend"])
        for side in ("generator", "reward", "judge"):
            if side in data:
                _reject_unknown(data[side], _ENDPOINT_KEYS, side)
                setattr(cfg, side, EndpointConfig(**data[side]))
        if "sim" in data:
            _reject_unknown(data["sim"], _SIM_KEYS, "sim")
            cfg.sim = SimWorldConfig.from_dict(data["sim"])
        if "search" in data:
            cfg.search = _parse_search_section(data["search"])
        if "run_seed" in data:
            cfg.run_seed = int(data["run_seed"])
        if "parallelism" in data:
            cfg.parallelism = int(data["parallelism"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    if cfg.backend not in ("sim", "http"):
        raise ConfigError(f"backend must be 'sim' or 'http', got {cfg.backend!r}")
    return cfg


def apply_flags(cfg: AppConfig, args: argparse.Namespace) -> AppConfig:
    search = cfg.search
    if args.strategy is not None:
        search = replace(search, strategy=_parse_strategy(args.strategy))
    if args.m is not None:
        search = replace(search, candidates_per_stage=args.m)
    if args.n is not None:
        search = replace(search, beam_width=args.n)
    if args.retraces is not None:
        search = replace(search, retrace_limit=args.retraces)
    if args.z is not None:
        search = replace(search, cutoff_zscore=args.z)
    if args.reward_mean is not None or args.reward_std is not None:
        stats = search.stats
        search = replace(
            search,
            stats=CalibrationStats(
                args.reward_mean if args.reward_mean is not None else stats.reward_mean,
                args.reward_std if args.reward_std is not None else stats.reward_std,
                stats.sample_count,
            ),
        )
    if args.min_pass is not None:
        search = replace(search, min_pass_count=args.min_pass)
    if args.loop_semantics is not None:
        search = replace(search, loop_semantics=_parse_loop_semantics(args.loop_semantics))
    cfg.search = search
    if args.backend is not None:
        cfg.backend = args.backend
    if args.seed is not None:
        cfg.run_seed = args.seed
    if args.parallelism is not None:
        cfg.parallelism = args.parallelism
    return cfg


def make_generator(cfg: AppConfig) -> Generator:
    if cfg.backend == "sim":
        return SimWorld(cfg.sim)
    if cfg.generator is None:
        raise ConfigError("http backend requires a generator endpoint config")
    return HttpGenerator(cfg.generator)


def make_backends(cfg: AppConfig) -> tuple[Generator, RewardScorer]:
    if cfg.backend == "sim":
        sim = SimWorld(cfg.sim)
        return sim, sim
    if cfg.reward is None:
        raise ConfigError("http backend requires generator and reward endpoint configs")
    return make_generator(cfg), HttpRewardScorer(cfg.reward)


def _grader_for(cfg: AppConfig):
    return oracle_grade if cfg.backend == "sim" else grade


def _summary(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_solve(cfg: AppConfig, args: argparse.Namespace) -> int:
    generator, reward = make_backends(cfg)
    result = run_strategy(
        args.question,
        cfg.search,
        generator,
        reward,
        image_ref=args.image,
        run_seed=cfg.run_seed,
        collect_trace=True,
        parallelism=cfg.parallelism,
    )
    for block in result.answer.blocks:
        print(f"[{block.kind.name}]")
        print(block.text)
    print(f"ANSWER: {result.final_text}")
    if args.trace:
        result.trace.write(args.trace)
    print(f"wall_time_s={result.ledger.wall_time_s:.3f}", file=sys.stderr)
    _summary(
        {
            "command": "solve",
            "conclusion": result.final_text,
            "generator_calls": result.ledger.generator_calls,
            "reward_calls": result.ledger.reward_calls,
        }
    )
    return EXIT_OK


def cmd_bench(cfg: AppConfig, args: argparse.Namespace) -> int:
    items = load_items(args.items)
    categories = args.categories.split(",") if args.categories else None
    result = run_benchmark(
        items,
        cfg.search,
        *make_backends(cfg),
        out_dir=args.out,
        grader=_grader_for(cfg),
        run_seed=cfg.run_seed,
        categories=categories,
        collect_traces=args.save_traces,
        parallelism=cfg.parallelism,
    )
    _summary(
        {
            "command": "bench",
            "items": len(result.records),
            "accuracy": result.accuracy,
            "generator_calls": result.ledger.generator_calls,
            "reward_calls": result.ledger.reward_calls,
        }
    )
    return EXIT_OK


def cmd_scale(cfg: AppConfig, args: argparse.Namespace) -> int:
    items = load_items(args.items)
    points = scaling_experiment(
        items,
        *make_backends(cfg),
        grid=default_grid(cfg.search),
        out_csv=args.out,
        out_dir=args.log_dir,
        grader=_grader_for(cfg),
        run_seed=cfg.run_seed,
        zero_wall_time=args.zero_wall_time,
        parallelism=cfg.parallelism,
    )
    _summary({"command": "scale", "rows": len(points), "table": str(args.out)})
    return EXIT_OK


def cmd_calibrate(cfg: AppConfig, args: argparse.Namespace) -> int:
    _, reward = make_backends(cfg)
    corpus = []
    with open(args.corpus, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            try:
                trajectory = parse_staged(data["response"], DEFAULT_SCHEMA)
            except Exception as exc:
                raise ConfigError(f"{args.corpus}:{lineno}: bad trajectory: {exc}") from exc
            corpus.append((data["question"], trajectory))
    stats = calibrate(reward, corpus)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "reward_mean": stats.reward_mean,
                    "reward_std": stats.reward_std,
                    "sample_count": stats.sample_count,
                },
                fh,
            )
    _summary(
        {
            "command": "calibrate",
            "reward_mean": stats.reward_mean,
            "reward_std": stats.reward_std,
            "sample_count": stats.sample_count,
        }
    )
    return EXIT_OK


def cmd_datagen(cfg: AppConfig, args: argparse.Namespace) -> int:
    generator = make_generator(cfg)
    if cfg.backend == "http" and cfg.judge is not None:
        judge = HttpGenerator(cfg.judge)
    else:
        judge = generator  # same endpoint serves both roles; sim judges via its oracle
    sources = load_sources(args.sources)
    counts = run_pipeline(sources, generator, judge, args.out, resume=not args.no_resume)
    _summary({"command": "datagen", **counts})
    return EXIT_OK


def cmd_simcheck(cfg: AppConfig, args: argparse.Namespace) -> int:
    rows = run_simcheck(trials=args.trials, run_seed=cfg.run_seed)
    for row in rows:
        status = "ok" if row["ok"] else "FAIL"
        print(
            f"{status} {row['check']}: exact={row['exact']:.6f} "
            f"mc={row['monte_carlo']:.6f} delta={row['delta']:+.6f} "
            f"tol={row['tolerance_3se']:.6f}"
        )
    all_ok = all(row["ok"] for row in rows)
    _summary({"command": "simcheck", "checks": len(rows), "all_within_3se": all_ok})
    return EXIT_OK if all_ok else EXIT_ERROR


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagewise",
        description="Staged reasoning search: best-of-N, stage-wise beam search, "
        "and stage-wise retracing search over generator/reward backends.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--backend", choices=["sim", "http"], help="backend kind")
    common.add_argument(
        "--strategy",
        choices=sorted(_STRATEGY_ALIASES),
        help="search strategy",
    )
    common.add_argument("--m", type=int, help="candidates generated per stage")
    common.add_argument("--n", type=int, help="beam width (and best-of-N's N)")
    common.add_argument("--retraces", type=int, help="retrace budget C")
    common.add_argument("--z", type=float, help="cutoff z-score")
    common.add_argument("--reward-mean", type=float, help="calibrated reward mean")
    common.add_argument("--reward-std", type=float, help="calibrated reward std")
    common.add_argument("--min-pass", type=int, help="reasonings that must clear the cutoff")
    common.add_argument(
        "--loop-semantics",
        choices=[s.value for s in LoopSemantics],
        help="how the retrace budget counts passes",
    )
    common.add_argument("--seed", type=int, help="run seed for full determinism on sim")
    common.add_argument("--parallelism", type=int, help="max concurrent backend calls")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="answer one question")
    p.add_argument("question")
    p.add_argument("--image", help="opaque image reference")
    p.add_argument("--trace", metavar="PATH", help="write the search trace here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", parents=[common], help="run a benchmark file")
    p.add_argument("--items", required=True, help="benchmark items (JSON lines)")
    p.add_argument("--out", help="output directory for run records and traces")
    p.add_argument("--categories", help="comma-separated category filter")
    p.add_argument("--save-traces", action="store_true", help="persist per-item traces")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scale", parents=[common], help="run the scaling grid")
    p.add_argument("--items", required=True, help="benchmark items (JSON lines)")
    p.add_argument("--out", required=True, help="curve table CSV path")
    p.add_argument("--log-dir", help="directory for per-cell run records")
    p.add_argument(
        "--zero-wall-time",
        action="store_true",
        help="write wall_time_s as 0.000 for byte-reproducible tables",
    )
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("calibrate", parents=[common], help="fit reward statistics")
    p.add_argument("--corpus", required=True, help="JSON lines of {question, response}")
    p.add_argument("--out", help="write stats JSON here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("datagen", parents=[common], help="run the dataset pipeline")
    p.add_argument("--sources", required=True, help="source records (JSON lines)")
    p.add_argument("--out", required=True, help="output records path (JSON lines)")
    p.add_argument("--no-resume", action="store_true", help="do not skip existing ids")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("simcheck", parents=[common], help="enumeration vs Monte Carlo")
    p.add_argument("--trials", type=int, default=20_000, help="Monte Carlo trials per check")
    p.set_defaults(func=cmd_simcheck)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = apply_flags(load_config(args.config), args)
        cfg.search.validate()
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SearchExhaustedError as exc:
        print(f"search exhausted: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
