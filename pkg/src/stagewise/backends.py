"""Generator and reward-scorer backends.

Two implementations of each interface: HTTP clients speaking a
chat-completions-style wire format, and a seeded simulated world that stands
in for a real model + reward model at desk scale. The sim is a pure function
of (config, request): it draws latent per-stage correctness from configured
probabilities and emits synthetic text carrying an in-band correctness mark
that only the sim scorer and the oracle grader ever read.
"""

from __future__ import annotations

import abc
import math
import threading
import time
from dataclasses import dataclass
from hashlib import blake2b
from statistics import NormalDist
from typing import Mapping, Optional, Union

import requests

from .stages import (
    CANONICAL_ORDER,
    DEFAULT_SCHEMA,
    EMPTY_RESPONSE,
    StagedResponse,
    StageKind,
    TagSchema,
    render_staged,
)

RewardScore = float  # scalar reward, higher is better; always finite

_TWO64 = 2**64
_STD_NORMAL = NormalDist()


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """Timeout, connection failure, or error status after retries exhausted."""


class MalformedReplyError(BackendError):
    """The endpoint replied but the reply carries no usable content."""


def stable_u64(*parts: str) -> int:
    """Keyed 64-bit value from a tuple of string parts; stable across runs."""
    h = blake2b("|".join(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def text_digest(text: str) -> str:
    """Short stable digest used to reference texts in traces."""
    return blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    max_new_tokens: int = 1024
    stop: Optional[str] = None


@dataclass(frozen=True)
class GeneratorRequest:
    """Context for generating one candidate continuation.

    ``target_stages`` lists the consecutive stages this call must produce:
    a single stage during stage-level search, the whole pipeline for
    one-shot complete responses, or empty for a plain (judge-style)
    completion. ``prior_stages`` is the trajectory prefix ending immediately
    before the first target stage.
    """

    question: str
    target_stages: tuple[StageKind, ...]
    prior_stages: StagedResponse = EMPTY_RESPONSE
    image_ref: Optional[str] = None
    system_prompt: Optional[str] = None
    sampling: SamplingParams = SamplingParams()
    seed: Optional[int] = None


@dataclass(frozen=True)
class RewardRequest:
    """A trajectory prefix to be scored, through the stage under evaluation."""

    question: str
    trajectory: StagedResponse
    image_ref: Optional[str] = None


class Generator(abc.ABC):
    @abc.abstractmethod
    def generate(self, request: GeneratorRequest) -> str:
        """Return the raw text of one candidate continuation.

        The text is truncated at the request's stop sequence with the stop
        sequence itself stripped.
        """


class RewardScorer(abc.ABC):
    @abc.abstractmethod
    def score(self, request: RewardRequest) -> RewardScore:
        """Return a finite scalar score for the trajectory; higher is better."""


# ---------------------------------------------------------------------------
# HTTP backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EndpointConfig:
    """Connection settings for one HTTP endpoint.

    The auth token is read from the environment variable named by
    ``token_env``, never from configuration files. Retries back off at
    ``backoff_s`` seconds, quadrupling per attempt (1 s then 4 s at the
    defaults).
    """

    base_url: str
    model: str = ""
    token_env: str = "STAGEWISE_API_KEY"
    timeout_s: float = 30.0
    retries: int = 2
    backoff_s: float = 1.0

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


_thread_local = threading.local()


def _session() -> requests.Session:
    session = getattr(_thread_local, "session", None)
    if session is None:
        session = requests.Session()
        _thread_local.session = session
    return session


def _post_json(config: EndpointConfig, body: dict) -> dict:
    import os

    headers = {"Content-Type": "application/json"}
    token = os.environ.get(config.token_env, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    last_error: Optional[Exception] = None
    for attempt in range(config.retries + 1):
        if attempt > 0:
            time.sleep(config.backoff_s * 4 ** (attempt - 1))
        try:
            reply = _session().post(
                config.base_url, json=body, headers=headers, timeout=config.timeout_s
            )
            if reply.status_code // 100 != 2:
                last_error = TransportError(
                    f"HTTP {reply.status_code} from {config.base_url}"
                )
                continue
            try:
                return reply.json()
            except ValueError as exc:
                raise MalformedReplyError(f"non-JSON reply: {exc}") from exc
        except requests.RequestException as exc:
            last_error = exc
    raise TransportError(
        f"request to {config.base_url} failed after {config.retries + 1} attempts: "
        f"{last_error}"
    )


def _truncate_at_stop(text: str, stop: Optional[str]) -> str:
    if stop:
        cut = text.find(stop)
        if cut != -1:
            return text[:cut]
    return text


class HttpGenerator(Generator):
    """Chat-completions-style generator client.

    Request body: ``model``, ``messages`` (optional system, user carrying the
    question and optional image reference, optional assistant prefix holding
    the rendered prior stages), ``stop``, ``temperature``, ``max_tokens`` and
    optional ``seed``. The reply's first choice text is returned.
    """

    def __init__(self, config: EndpointConfig, schema: TagSchema = DEFAULT_SCHEMA):
        self.config = config
        self.schema = schema

    def generate(self, request: GeneratorRequest) -> str:
        body = {
            "model": self.config.model,
            "messages": self._messages(request),
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_new_tokens,
        }
        if request.sampling.stop:
            body["stop"] = [request.sampling.stop]
        if request.seed is not None:
            # Endpoints expect a signed 64-bit value at most.
            body["seed"] = request.seed % (2**63)
        reply = _post_json(self.config, body)
        try:
            choice = reply["choices"][0]
            text = choice["message"]["content"] if "message" in choice else choice["text"]
        except (KeyError, IndexError, TypeError):
            raise MalformedReplyError("reply lacks choices[0] text content") from None
        if not isinstance(text, str):
            raise MalformedReplyError("reply text content is not a string")
        return _truncate_at_stop(text, request.sampling.stop)

    def _messages(self, request: GeneratorRequest) -> list[dict]:
        messages: list[dict] = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        content: Union[str, list]
        if request.image_ref:
            content = [
                {"type": "text", "text": request.question},
                {"type": "image_url", "image_url": {"url": request.image_ref}},
            ]
        else:
            content = request.question
        messages.append({"role": "user", "content": content})
        if request.prior_stages.blocks:
            messages.append(
                {"role": "assistant", "content": render_staged(request.prior_stages, self.schema)}
            )
        return messages


class HttpRewardScorer(RewardScorer):
    """Reward endpoint client.

    Request body: ``model``, ``question``, ``response`` (the rendered
    trajectory). The reply must carry a single numeric ``score`` field.
    """

    def __init__(self, config: EndpointConfig, schema: TagSchema = DEFAULT_SCHEMA):
        self.config = config
        self.schema = schema

    def score(self, request: RewardRequest) -> RewardScore:
        body = {
            "model": self.config.model,
            "question": request.question,
            "response": render_staged(request.trajectory, self.schema),
        }
        reply = _post_json(self.config, body)
        try:
            value = float(reply["score"])
        except (KeyError, TypeError, ValueError):
            raise MalformedReplyError("reply lacks a numeric 'score' field") from None
        if not math.isfinite(value):
            raise MalformedReplyError(f"reward score {value!r} is not finite")
        return value


# ---------------------------------------------------------------------------
# Simulated world
# ---------------------------------------------------------------------------

CORRECT_MARK = "[[sim::ok]]"
INCORRECT_MARK = "[[sim::bad]]"


def oracle_correct(text: str) -> bool:
    """Read the hidden correctness mark of a sim-generated text."""
    if CORRECT_MARK in text:
        return True
    if INCORRECT_MARK in text:
        return False
    raise MalformedReplyError("text carries no sim correctness mark")


def _normalize_stage_map(
    value: Union[float, Mapping[StageKind, float]], default: float
) -> dict[StageKind, float]:
    if isinstance(value, Mapping):
        table = {kind: float(value.get(kind, default)) for kind in CANONICAL_ORDER}
    else:
        table = {kind: float(value) for kind in CANONICAL_ORDER}
    for kind, p in table.items():
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability for {kind.name} out of [0,1]: {p}")
    return table


@dataclass(frozen=True)
class SimWorldConfig:
    """Latent-correctness generative model for desk-scale oracle testing.

    ``success`` gives each stage's probability of being correct when every
    prior stage is correct; ``recovery`` applies when some prior stage is
    incorrect (0 by default: errors are never silently repaired). Rewards
    are emitted at ``mean_correct``/``mean_incorrect`` plus Gaussian noise;
    ``noise_std == 0`` is the perfect separating-reward regime.
    """

    success: Union[float, Mapping[StageKind, float]] = 1.0
    recovery: Union[float, Mapping[StageKind, float]] = 0.0
    mean_correct: float = 1.0
    mean_incorrect: float = -1.0
    noise_std: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "success", _normalize_stage_map(self.success, 1.0))
        object.__setattr__(self, "recovery", _normalize_stage_map(self.recovery, 0.0))
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def as_dict(self) -> dict:
        return {
            "success": {k.value: v for k, v in self.success.items()},
            "recovery": {k.value: v for k, v in self.recovery.items()},
            "mean_correct": self.mean_correct,
            "mean_incorrect": self.mean_incorrect,
            "noise_std": self.noise_std,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimWorldConfig":
        kwargs = dict(data)
        for key in ("success", "recovery"):
            if key in kwargs and isinstance(kwargs[key], Mapping):
                kwargs[key] = {
                    StageKind.from_name(name): float(p)
                    for name, p in kwargs[key].items()
                }
        return cls(**kwargs)


class SimWorld(Generator, RewardScorer):
    """Deterministic generator + scorer over a latent-correctness world.

    Every output is a pure function of (config, request): correctness draws
    and reward noise come from a keyed hash, so repeated runs and arbitrary
    thread schedules reproduce identical bytes. A request with empty
    ``target_stages`` is treated as a judge-style completion and answers
    "valid"/"invalid" from the correctness mark embedded in the prompt.
    """

    def __init__(self, config: SimWorldConfig = SimWorldConfig(), schema: TagSchema = DEFAULT_SCHEMA):
        self.config = config
        self.schema = schema

    def _uniform(self, *parts: str) -> float:
        return (stable_u64(str(self.config.rng_seed), *parts) + 0.5) / _TWO64

    def generate(self, request: GeneratorRequest) -> str:
        if not request.target_stages:
            return "valid" if CORRECT_MARK in request.question else "invalid"
        seed = request.seed
        if seed is None:
            seed = stable_u64(
                request.question,
                render_staged(request.prior_stages, self.schema),
                request.target_stages[0].value,
            )
        all_ok = all(oracle_correct(b.text) for b in request.prior_stages.blocks)
        parts = []
        for i, kind in enumerate(request.target_stages):
            p = self.config.success[kind] if all_ok else self.config.recovery[kind]
            stage_ok = self._uniform("gen", str(seed), str(i)) < p
            all_ok = all_ok and stage_ok
            mark = CORRECT_MARK if stage_ok else INCORRECT_MARK
            text = f"{kind.value} {seed & 0xFFFFFFFFFFFFFFFF:016x}-{i} {mark}"
            parts.append(f"{self.schema.open(kind)}{text}{self.schema.close(kind)}")
        return _truncate_at_stop("\n".join(parts), request.sampling.stop)

    def score(self, request: RewardRequest) -> RewardScore:
        if not request.trajectory.blocks:
            raise MalformedReplyError("cannot score an empty trajectory")
        last = request.trajectory.blocks[-1]
        value = (
            self.config.mean_correct
            if oracle_correct(last.text)
            else self.config.mean_incorrect
        )
        if self.config.noise_std > 0:
            u = self._uniform("score", last.text)
            value += self.config.noise_std * _STD_NORMAL.inv_cdf(u)
        return value
