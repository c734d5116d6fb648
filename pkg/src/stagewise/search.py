"""Inference-time search over staged responses.

Three strategies share one generation/scoring engine:

* best-of-N: sample N complete responses, score each once, keep the best.
* stage-wise beam search: per stage, generate M candidates across the
  surviving beams, score them, and keep the top N.
* stage-wise retracing search (SWIRES): beam search whose caption/reasoning
  body re-runs when no reasoning clears a calibrated reward cutoff, pooling
  reasoning candidates across passes.

All randomness is routed through per-call seeds derived from
(run seed, question, stage, pass, slot), so runs against the sim backend are
bit-reproducible and the strategies share one RNG stream discipline: a
retracing search that never retraces emits the same trace as a beam search.
"""

from __future__ import annotations

import enum
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from statistics import fmean, stdev
from typing import Callable, Optional, Sequence

from .backends import (
    Generator,
    GeneratorRequest,
    RewardRequest,
    RewardScorer,
    SamplingParams,
    stable_u64,
    text_digest,
)
from .stages import (
    CANONICAL_ORDER,
    DEFAULT_SCHEMA,
    EMPTY_RESPONSE,
    StagedResponse,
    StageFormatError,
    StageKind,
    TagSchema,
    parse_complete_continuation,
    parse_stage_continuation,
)

NEG_INF = float("-inf")


class SearchError(Exception):
    """Base class for search failures."""


class ConfigError(SearchError):
    """Invalid search or application configuration."""


class InsufficientCandidatesError(SearchError):
    """Fewer candidates available than the selection requires."""


class SearchExhaustedError(SearchError):
    """Every candidate of a stage failed to parse across all passes."""


class EmptyCorpusError(SearchError):
    """Calibration requires a non-empty corpus."""


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationStats:
    """Mean and sample standard deviation (n-1 convention) of reward scores."""

    reward_mean: float
    reward_std: float
    sample_count: int = 1

    def __post_init__(self) -> None:
        if self.reward_std < 0:
            raise ValueError("reward_std must be >= 0")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")


# Reference reward statistics and cutoff z-score shipped as defaults; the
# z-score is the 60th-percentile standard-normal quantile.
DEFAULT_STATS = CalibrationStats(reward_mean=-0.77, reward_std=2.08, sample_count=1)
DEFAULT_CUTOFF_ZSCORE = 0.2533


def backtrack_cutoff(stats: CalibrationStats, z: float) -> float:
    """Reward threshold below which a pass's candidates trigger a retrace."""
    return stats.reward_mean + z * stats.reward_std


def calibrate(
    reward: RewardScorer,
    corpus: Sequence[tuple[str, StagedResponse]],
) -> CalibrationStats:
    """Score a corpus of (question, trajectory) pairs and fit reward stats.

    The trajectories are expected to run through the stage whose score
    distribution sets the retrace cutoff (the reasoning stage by default).
    Standard deviation uses the sample (n-1) convention and is 0.0 for a
    single-item corpus.
    """
    if not corpus:
        raise EmptyCorpusError("calibration corpus is empty")
    scores = [
        reward.score(RewardRequest(question=q, trajectory=traj)) for q, traj in corpus
    ]
    std = stdev(scores) if len(scores) > 1 else 0.0
    return CalibrationStats(fmean(scores), std, len(scores))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class Strategy(enum.Enum):
    BEST_OF_N = "best_of_n"
    STAGE_BEAM = "beam"
    SWIRES = "swires"


class LoopSemantics(enum.Enum):
    """How the retrace bound counts passes.

    ALGORITHM_ONE caps the total number of caption/reasoning passes at C
    (always running at least one); MAIN_TEXT runs an initial pass plus up
    to C retraces (C+1 passes total).
    """

    ALGORITHM_ONE = "algorithm_one"
    MAIN_TEXT = "main_text"


@dataclass(frozen=True)
class SearchConfig:
    """Knobs shared by the three strategies.

    ``candidates_per_stage`` (M) is how many candidates each searched stage
    generates; ``beam_width`` (N) how many survive selection, and it must
    divide M; ``retrace_limit`` (C) bounds retracing; the retrace cutoff is
    ``stats.reward_mean + cutoff_zscore * stats.reward_std``. Best-of-N uses
    ``beam_width`` as its N. ``pipeline`` may be any canonical-order
    subsequence of the four stages, which keeps degenerate single-stage
    searches expressible for oracle tests.
    """

    candidates_per_stage: int = 4
    beam_width: int = 2
    retrace_limit: int = 3
    cutoff_zscore: float = DEFAULT_CUTOFF_ZSCORE
    stats: CalibrationStats = DEFAULT_STATS
    min_pass_count: int = 1
    retrace_start: StageKind = StageKind.CAPTION
    summary_candidates: int = 1
    strategy: Strategy = Strategy.SWIRES
    loop_semantics: LoopSemantics = LoopSemantics.ALGORITHM_ONE
    pipeline: tuple[StageKind, ...] = CANONICAL_ORDER
    temperature: float = 1.0
    max_new_tokens: int = 1024
    schema: TagSchema = DEFAULT_SCHEMA

    @property
    def cutoff(self) -> float:
        return backtrack_cutoff(self.stats, self.cutoff_zscore)

    @property
    def max_passes(self) -> int:
        if self.loop_semantics is LoopSemantics.ALGORITHM_ONE:
            return max(1, self.retrace_limit)
        return self.retrace_limit + 1

    def validate(self) -> None:
        problems = []
        if self.candidates_per_stage < 1:
            problems.append("candidates_per_stage must be >= 1")
        if self.beam_width < 1:
            problems.append("beam_width must be >= 1")
        elif self.candidates_per_stage % self.beam_width != 0:
            problems.append("beam_width must divide candidates_per_stage")
        if self.retrace_limit < 0:
            problems.append("retrace_limit must be >= 0")
        if not 1 <= self.min_pass_count <= max(1, self.beam_width):
            problems.append("min_pass_count must be in [1, beam_width]")
        if self.summary_candidates < 1:
            problems.append("summary_candidates must be >= 1")
        if self.temperature < 0:
            problems.append("temperature must be >= 0")
        if self.max_new_tokens < 1:
            problems.append("max_new_tokens must be >= 1")
        if not isinstance(self.strategy, Strategy):
            problems.append(f"unknown strategy: {self.strategy!r}")
        if not isinstance(self.loop_semantics, LoopSemantics):
            problems.append(f"unknown loop semantics: {self.loop_semantics!r}")
        if not self.pipeline:
            problems.append("pipeline must not be empty")
        else:
            order = [s for s in CANONICAL_ORDER if s in self.pipeline]
            if len(set(self.pipeline)) != len(self.pipeline) or list(self.pipeline) != order:
                problems.append("pipeline must be a canonical-order subsequence of stages")
        if isinstance(self.strategy, Strategy) and self.strategy is Strategy.SWIRES and self.pipeline:
            if self.retrace_start not in self.pipeline:
                problems.append("retrace_start must be a pipeline stage")
            elif self.pipeline.index(self.retrace_start) >= len(self.pipeline) - 1:
                problems.append("retrace_start must precede the final pipeline stage")
        if problems:
            raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------------------
# Candidates, accounting, traces
# ---------------------------------------------------------------------------


@dataclass
class Candidate:
    """A trajectory prefix plus the reward scores of its scored stages.

    ``birth`` is (pass index, per-search generation sequence number); it is
    unique within a search and is the deterministic tie-break everywhere.
    """

    trajectory: StagedResponse
    stage_scores: dict[StageKind, float]
    birth: tuple[int, int]
    lineage: Optional[tuple[int, int]] = None
    rendered: str = ""

    def score_at(self, stage: StageKind) -> float:
        return self.stage_scores[stage]


_ROOT = Candidate(EMPTY_RESPONSE, {}, (-1, -1))


@dataclass
class BudgetLedger:
    """Exact backend call counts plus wall time, with per-stage breakdowns."""

    generator_calls: int = 0
    reward_calls: int = 0
    wall_time_s: float = 0.0
    generator_by_stage: dict[str, int] = field(default_factory=dict)
    reward_by_stage: dict[str, int] = field(default_factory=dict)

    def tally_generate(self, key: str) -> None:
        self.generator_calls += 1
        self.generator_by_stage[key] = self.generator_by_stage.get(key, 0) + 1

    def tally_score(self, key: str) -> None:
        self.reward_calls += 1
        self.reward_by_stage[key] = self.reward_by_stage.get(key, 0) + 1

    def add(self, other: "BudgetLedger") -> None:
        self.generator_calls += other.generator_calls
        self.reward_calls += other.reward_calls
        self.wall_time_s += other.wall_time_s
        for key, n in other.generator_by_stage.items():
            self.generator_by_stage[key] = self.generator_by_stage.get(key, 0) + n
        for key, n in other.reward_by_stage.items():
            self.reward_by_stage[key] = self.reward_by_stage.get(key, 0) + n

    def counts_dict(self) -> dict:
        """Deterministic view: every call count, no wall-clock time."""
        return {
            "generator_calls": self.generator_calls,
            "reward_calls": self.reward_calls,
            "generator_by_stage": dict(self.generator_by_stage),
            "reward_by_stage": dict(self.reward_by_stage),
        }

    def as_dict(self) -> dict:
        return {**self.counts_dict(), "wall_time_s": self.wall_time_s}


class SearchTrace:
    """Ordered audit log of every generation, score, selection, and retrace.

    Serializes to line-delimited JSON: one header record followed by one
    record per event. Events carry no wall-clock data, so two runs with the
    same seeds produce byte-identical event records.
    """

    def __init__(self, header: Optional[dict] = None):
        self.header: dict = dict(header or {})
        self.events: list[dict] = []

    def log(self, event: str, fields: dict) -> None:
        record = {"seq": len(self.events), "event": event}
        record.update(fields)
        self.events.append(record)

    def events_jsonl(self) -> str:
        return "\n".join(
            json.dumps(e, sort_keys=True, separators=(",", ":")) for e in self.events
        )

    def to_jsonl(self) -> str:
        head = json.dumps(
            {"record": "header", **self.header}, sort_keys=True, separators=(",", ":")
        )
        body = self.events_jsonl()
        return head + ("\n" + body if body else "")

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl() + "\n")

    @staticmethod
    def read(path) -> tuple[dict, list[dict]]:
        header: dict = {}
        events: list[dict] = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                if record.get("record") == "header":
                    header = record
                else:
                    events.append(record)
        return header, events


@dataclass
class SearchResult:
    answer: StagedResponse
    candidate: Candidate
    ledger: BudgetLedger
    trace: Optional[SearchTrace] = None

    @property
    def final_text(self) -> str:
        return self.answer.final_text


def select_top(cands: Sequence[Candidate], n: int, stage: StageKind) -> list[Candidate]:
    """Top-n candidates by score at ``stage``; ties go to the earlier birth."""
    if n > len(cands):
        raise InsufficientCandidatesError(
            f"need {n} candidates at {stage.name}, have {len(cands)}"
        )
    try:
        ranked = sorted(cands, key=lambda c: (-c.stage_scores[stage], c.birth))
    except KeyError:
        raise SearchError(f"candidate not scored at stage {stage.name}") from None
    return ranked[:n]


def _best(cands: Sequence[Candidate], stage: StageKind) -> Candidate:
    return select_top(cands, 1, stage)[0]


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class _Engine:
    """Shared per-search state: seeds, births, ledger, trace, concurrency."""

    def __init__(
        self,
        question: str,
        cfg: SearchConfig,
        generator: Generator,
        reward: RewardScorer,
        image_ref: Optional[str],
        run_seed: int,
        trace: Optional[SearchTrace],
        parallelism: int,
    ):
        self.question = question
        self.cfg = cfg
        self.generator = generator
        self.reward = reward
        self.image_ref = image_ref
        self.run_seed = run_seed
        self.trace = trace
        self.parallelism = max(1, parallelism)
        self.qdigest = text_digest(question)
        self._seq = 0

        self.ledger = BudgetLedger()

    def call_seed(self, stage: StageKind, pass_index: int, slot: int) -> int:
        return stable_u64(
            str(self.run_seed), self.qdigest, stage.value, str(pass_index), str(slot)
        )

    def next_birth(self, pass_index: int) -> tuple[int, int]:
        birth = (pass_index, self._seq)
        self._seq += 1
        return birth

    def run_calls(self, fns: list[Callable]) -> list:
        if self.parallelism > 1 and len(fns) > 1:
            with ThreadPoolExecutor(max_workers=min(self.parallelism, len(fns))) as pool:
                return list(pool.map(lambda f: f(), fns))
        return [fn() for fn in fns]

    def sampling(self, stop: Optional[str]) -> SamplingParams:
        return SamplingParams(self.cfg.temperature, self.cfg.max_new_tokens, stop)

    # -- batched stage expansion -------------------------------------------

    def expand_and_score(
        self,
        stage: StageKind,
        pass_index: int,
        parents: Sequence[Candidate],
        total: int,
        do_score: bool,
    ) -> list[Candidate]:
        """Generate ``total`` children of ``parents`` at ``stage``, then score.

        Children are assigned to parents evenly (earlier parents absorb any
        remainder). Results are processed in slot order regardless of the
        backend's concurrency, so traces and ledgers do not depend on thread
        scheduling. Candidates whose continuation fails to parse are logged
        with score -inf and dropped; they never reach the reward backend.
        """
        assignments: list[Candidate] = []
        per_parent, remainder = divmod(total, len(parents))
        for rank, parent in enumerate(parents):
            assignments.extend([parent] * (per_parent + (1 if rank < remainder else 0)))

        schema = self.cfg.schema
        stop = schema.close(stage)
        requests = [
            GeneratorRequest(
                question=self.question,
                target_stages=(stage,),
                prior_stages=parent.trajectory,
                image_ref=self.image_ref,
                sampling=self.sampling(stop),
                seed=self.call_seed(stage, pass_index, slot),
            )
            for slot, parent in enumerate(assignments)
        ]
        raws = self.run_calls(
            [lambda r=req: self.generator.generate(r) for req in requests]
        )

        produced: list[tuple[int, Optional[Candidate], Optional[str]]] = []
        for slot, (parent, raw) in enumerate(zip(assignments, raws)):
            self.ledger.tally_generate(stage.value)
            birth = self.next_birth(pass_index)
            parse_error: Optional[str] = None
            candidate: Optional[Candidate] = None
            try:
                block = parse_stage_continuation(raw, stage, schema)
            except StageFormatError as exc:
                parse_error = f"{type(exc).__name__}: {exc}"
            else:
                wrapped = f"{schema.open(stage)}{block.text}{schema.close(stage)}"
                rendered = (
                    parent.rendered + "\n" + wrapped if parent.rendered else wrapped
                )
                candidate = Candidate(
                    trajectory=parent.trajectory.append(block),
                    stage_scores=dict(parent.stage_scores),
                    birth=birth,
                    lineage=parent.birth if parent is not _ROOT else None,
                    rendered=rendered,
                )
            if self.trace is not None:
                event = {
                    "stage": stage.value,
                    "pass": pass_index,
                    "slot": slot,
                    "birth": list(birth),
                    "parent": None if parent is _ROOT else list(parent.birth),
                    "input_digest": text_digest(self.question + "\n" + parent.rendered),
                    "output_digest": text_digest(raw),
                }
                if parse_error:
                    event["parse_error"] = parse_error
                self.trace.log("generate", event)
            produced.append((slot, candidate, parse_error))

        if not do_score:
            return [c for _, c, _ in produced if c is not None]

        scorable = [c for _, c, _ in produced if c is not None]
        values = self.run_calls(
            [
                lambda c=cand: self.reward.score(
                    RewardRequest(self.question, c.trajectory, self.image_ref)
                )
                for cand in scorable
            ]
        )
        scored = iter(zip(scorable, values))
        for slot, candidate, parse_error in produced:
            if candidate is None:
                if self.trace is not None:
                    self.trace.log(
                        "score",
                        {
                            "stage": stage.value,
                            "pass": pass_index,
                            "slot": slot,
                            "score": NEG_INF,
                            "parse_error": parse_error,
                        },
                    )
                continue
            cand, value = next(scored)
            assert cand is candidate
            self.ledger.tally_score(stage.value)
            candidate.stage_scores[stage] = value
            if self.trace is not None:
                self.trace.log(
                    "score",
                    {
                        "stage": stage.value,
                        "pass": pass_index,
                        "slot": slot,
                        "birth": list(candidate.birth),
                        "score": value,
                    },
                )
        return scorable

    def log_select(self, stage: StageKind, pass_index: int, kept: Sequence[Candidate]) -> None:
        if self.trace is not None:
            self.trace.log(
                "select",
                {
                    "stage": stage.value,
                    "pass": pass_index,
                    "kept": [list(c.birth) for c in kept],
                },
            )

    def finish(self, winner: Candidate, stage: StageKind, started: float) -> SearchResult:
        self.ledger.wall_time_s = time.perf_counter() - started
        if self.trace is not None:
            self.trace.log(
                "answer",
                {
                    "stage": stage.value,
                    "birth": list(winner.birth),
                    "score": winner.stage_scores.get(stage),
                },
            )
        return SearchResult(winner.trajectory, winner, self.ledger, self.trace)


def _make_trace(cfg: SearchConfig, question: str, run_seed: int, collect: bool) -> Optional[SearchTrace]:
    if not collect:
        return None
    return SearchTrace(
        {
            "strategy": cfg.strategy.value,
            "question_digest": text_digest(question),
            "run_seed": run_seed,
            "config": {
                "candidates_per_stage": cfg.candidates_per_stage,
                "beam_width": cfg.beam_width,
                "retrace_limit": cfg.retrace_limit,
                "cutoff_zscore": cfg.cutoff_zscore,
                "reward_mean": cfg.stats.reward_mean,
                "reward_std": cfg.stats.reward_std,
                "min_pass_count": cfg.min_pass_count,
                "summary_candidates": cfg.summary_candidates,
                "loop_semantics": cfg.loop_semantics.value,
                "pipeline": [s.value for s in cfg.pipeline],
            },
        }
    )


def _batch_size(cfg: SearchConfig, stage: StageKind, index: int, survivors: int) -> int:
    last = index == len(cfg.pipeline) - 1
    if stage is StageKind.SUMMARY:
        return cfg.summary_candidates
    if last and index > 0:
        # The final stage extends each survivor exactly once; the winner is
        # the argmax over those conclusions.
        return survivors
    return cfg.candidates_per_stage


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


def best_of_n(
    question: str,
    n: int,
    generator: Generator,
    reward: RewardScorer,
    *,
    cfg: Optional[SearchConfig] = None,
    image_ref: Optional[str] = None,
    run_seed: int = 0,
    collect_trace: bool = True,
    parallelism: int = 1,
) -> SearchResult:
    """Generate n complete responses in one call each and keep the best.

    Each response is parsed as a full pipeline; responses that fail to parse
    are recorded with score -inf and never scored by the reward backend.
    """
    if n < 1:
        raise ConfigError("best_of_n requires n >= 1")
    cfg = replace(cfg or SearchConfig(), strategy=Strategy.BEST_OF_N)
    cfg.validate()
    started = time.perf_counter()
    trace = _make_trace(cfg, question, run_seed, collect_trace)
    engine = _Engine(question, cfg, generator, reward, image_ref, run_seed, trace, parallelism)

    pipeline = cfg.pipeline
    schema = cfg.schema
    stop = schema.close(pipeline[-1])
    requests = [
        GeneratorRequest(
            question=question,
            target_stages=pipeline,
            image_ref=image_ref,
            sampling=engine.sampling(stop),
            seed=engine.call_seed(pipeline[0], 0, slot),
        )
        for slot in range(n)
    ]
    raws = engine.run_calls([lambda r=req: generator.generate(r) for req in requests])

    produced: list[tuple[int, Optional[Candidate], Optional[str]]] = []
    for slot, raw in enumerate(raws):
        engine.ledger.tally_generate("response")
        birth = engine.next_birth(0)
        candidate: Optional[Candidate] = None
        parse_error: Optional[str] = None
        try:
            traj = parse_complete_continuation(raw, pipeline, schema)
        except StageFormatError as exc:
            parse_error = f"{type(exc).__name__}: {exc}"
        else:
            candidate = Candidate(traj, {}, birth)
        if trace is not None:
            event = {
                "stage": "response",
                "pass": 0,
                "slot": slot,
                "birth": list(birth),
                "parent": None,
                "input_digest": text_digest(question + "\n"),
                "output_digest": text_digest(raw),
            }
            if parse_error:
                event["parse_error"] = parse_error
            trace.log("generate", event)
        produced.append((slot, candidate, parse_error))

    final_stage = pipeline[-1]
    scorable = [c for _, c, _ in produced if c is not None]
    values = engine.run_calls(
        [
            lambda c=cand: reward.score(RewardRequest(question, c.trajectory, image_ref))
            for cand in scorable
        ]
    )
    scored = iter(zip(scorable, values))
    for slot, candidate, parse_error in produced:
        if candidate is None:
            if trace is not None:
                trace.log(
                    "score",
                    {
                        "stage": "response",
                        "pass": 0,
                        "slot": slot,
                        "score": NEG_INF,
                        "parse_error": parse_error,
                    },
                )
            continue
        cand, value = next(scored)
        engine.ledger.tally_score("response")
        cand.stage_scores[final_stage] = value
        if trace is not None:
            trace.log(
                "score",
                {
                    "stage": "response",
                    "pass": 0,
                    "slot": slot,
                    "birth": list(cand.birth),
                    "score": value,
                },
            )

    if not scorable:
        raise SearchExhaustedError("no complete response parsed")
    winner = _best(scorable, final_stage)
    return engine.finish(winner, final_stage, started)


def stage_wise_beam(
    question: str,
    cfg: SearchConfig,
    generator: Generator,
    reward: RewardScorer,
    *,
    image_ref: Optional[str] = None,
    run_seed: int = 0,
    collect_trace: bool = True,
    parallelism: int = 1,
) -> SearchResult:
    """Per-stage generate-M / keep-top-N search over the pipeline.

    The summary stage generates ``summary_candidates`` (one by default,
    unscored when single); every other searched stage generates M candidates
    distributed over the current survivors; the final stage extends each
    survivor once and the highest-scoring conclusion wins.
    """
    cfg = replace(cfg, strategy=Strategy.STAGE_BEAM)
    cfg.validate()
    started = time.perf_counter()
    trace = _make_trace(cfg, question, run_seed, collect_trace)
    engine = _Engine(question, cfg, generator, reward, image_ref, run_seed, trace, parallelism)

    survivors = [_ROOT]
    for index, stage in enumerate(cfg.pipeline):
        last = index == len(cfg.pipeline) - 1
        total = _batch_size(cfg, stage, index, len(survivors))
        do_score = not (stage is StageKind.SUMMARY and total == 1)
        batch = engine.expand_and_score(stage, 0, survivors, total, do_score)
        if not batch:
            raise SearchExhaustedError(f"all candidates failed to parse at {stage.name}")
        if last:
            winner = _best(batch, stage) if do_score else batch[0]
            return engine.finish(winner, stage, started)
        if do_score:
            survivors = select_top(batch, min(cfg.beam_width, len(batch)), stage)
            engine.log_select(stage, 0, survivors)
        else:
            survivors = batch
    raise AssertionError("unreachable: empty pipeline rejected by validate()")


def swires(
    question: str,
    cfg: SearchConfig,
    generator: Generator,
    reward: RewardScorer,
    *,
    image_ref: Optional[str] = None,
    run_seed: int = 0,
    collect_trace: bool = True,
    parallelism: int = 1,
) -> SearchResult:
    """Stage-wise retracing search.

    One summary is generated up front. Each pass regenerates the body stages
    (caption through reasoning by default): M captions scored and pruned to
    the top N, then M reasonings (M/N per kept caption) scored and appended
    to a persistent pool. A pass is accepted when at least ``min_pass_count``
    of its reasonings score strictly above the calibrated cutoff; otherwise
    the search retraces, up to the pass bound set by ``loop_semantics`` and
    ``retrace_limit``. The top N pooled reasonings each generate one
    conclusion and the best-scoring conclusion is the answer.
    """
    cfg = replace(cfg, strategy=Strategy.SWIRES)
    cfg.validate()
    started = time.perf_counter()
    trace = _make_trace(cfg, question, run_seed, collect_trace)
    engine = _Engine(question, cfg, generator, reward, image_ref, run_seed, trace, parallelism)

    pipeline = cfg.pipeline
    start_index = pipeline.index(cfg.retrace_start)
    prefix_stages = pipeline[:start_index]
    body = pipeline[start_index:-1]
    final_stage = pipeline[-1]
    pool_stage = body[-1]

    # Fixed prefix: generated once, outside the retrace loop.
    prefix_survivors = [_ROOT]
    for index, stage in enumerate(prefix_stages):
        total = _batch_size(cfg, stage, index, len(prefix_survivors))
        do_score = not (stage is StageKind.SUMMARY and total == 1)
        batch = engine.expand_and_score(stage, 0, prefix_survivors, total, do_score)
        if not batch:
            raise SearchExhaustedError(f"all candidates failed to parse at {stage.name}")
        if do_score:
            prefix_survivors = select_top(batch, min(cfg.beam_width, len(batch)), stage)
            engine.log_select(stage, 0, prefix_survivors)
        else:
            prefix_survivors = batch

    cutoff = cfg.cutoff
    pool: list[Candidate] = []
    last_pass = 0
    for pass_index in range(cfg.max_passes):
        last_pass = pass_index
        parents = prefix_survivors
        cleared = 0
        for stage in body[:-1]:
            batch = engine.expand_and_score(
                stage, pass_index, parents, cfg.candidates_per_stage, True
            )
            if not batch:
                parents = []
                break
            parents = select_top(batch, min(cfg.beam_width, len(batch)), stage)
            engine.log_select(stage, pass_index, parents)
        if parents:
            additions = engine.expand_and_score(
                pool_stage, pass_index, parents, cfg.candidates_per_stage, True
            )
            pool.extend(additions)
            cleared = sum(1 for c in additions if c.stage_scores[pool_stage] > cutoff)
        if cleared >= cfg.min_pass_count:
            break
        if pass_index + 1 < cfg.max_passes and trace is not None:
            trace.log(
                "retrace",
                {
                    "stage": pool_stage.value,
                    "pass": pass_index,
                    "threshold": cutoff,
                    "cleared": cleared,
                    "required": cfg.min_pass_count,
                },
            )

    if not pool:
        raise SearchExhaustedError(
            f"all candidates failed to parse at {pool_stage.name} across all passes"
        )
    kept = select_top(pool, min(cfg.beam_width, len(pool)), pool_stage)
    engine.log_select(pool_stage, last_pass, kept)

    conclusions = engine.expand_and_score(final_stage, 0, kept, len(kept), True)
    if not conclusions:
        raise SearchExhaustedError(f"all candidates failed to parse at {final_stage.name}")
    winner = _best(conclusions, final_stage)
    return engine.finish(winner, final_stage, started)


def run_strategy(
    question: str,
    cfg: SearchConfig,
    generator: Generator,
    reward: RewardScorer,
    *,
    image_ref: Optional[str] = None,
    run_seed: int = 0,
    collect_trace: bool = True,
    parallelism: int = 1,
) -> SearchResult:
    """Dispatch to the configured strategy under one seeding discipline."""
    cfg.validate()
    kwargs = dict(
        image_ref=image_ref,
        run_seed=run_seed,
        collect_trace=collect_trace,
        parallelism=parallelism,
    )
    if cfg.strategy is Strategy.BEST_OF_N:
        return best_of_n(question, cfg.beam_width, generator, reward, cfg=cfg, **kwargs)
    if cfg.strategy is Strategy.STAGE_BEAM:
        return stage_wise_beam(question, cfg, generator, reward, **kwargs)
    if cfg.strategy is Strategy.SWIRES:
        return swires(question, cfg, generator, reward, **kwargs)
    raise ConfigError(f"unknown strategy: {cfg.strategy!r}")
