"""Text-generation backends behind one ``generate`` contract.

``MockBackend`` is a deterministic template engine used by every test;
``ReplayBackend`` serves recorded completions; ``HttpBackend`` calls a remote
completion endpoint. Edge completers and cloud responders share the interface.
"""

from __future__ import annotations

import json
import logging
import random
import re
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import httpx

from .protocol import normalize_for_dedup

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    """The remote endpoint timed out, refused or answered garbage."""


class ReplayMiss(BackendError, LookupError):
    """No recorded completion for this prompt."""


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_new_tokens: int = 128
    temperature: float = 0.0

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    confidence: float = 0.0
    latency_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        if self.latency_s < 0:
            raise ValueError("latency_s must be >= 0")


class Backend(ABC):
    name = "backend"

    @abstractmethod
    def generate(self, req: GenerationRequest) -> GenerationResult: ...

    def generate_batch(self, reqs: Sequence[GenerationRequest]) -> list[GenerationResult]:
        return [self.generate(r) for r in reqs]


# ---- prompt templates understood by the mock ------------------------------

_STOPWORDS = frozenset(
    "a an the of in on at to for and or with near me my is are be where what which how who "
    "i you we it this that some any by from about can do does good".split()
)
INTENT_PREFIX = "I would like to know about"


def stem(word: str) -> str:
    if len(word) > 4 and word.endswith("ies"):
        return word[:-3] + "y"
    if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
        return word[:-1]
    return word


def keywords(text: str) -> set[str]:
    return {stem(w) for w in re.findall(r"[a-z0-9]+", text.lower()) if w not in _STOPWORDS}


def build_completion_prompt(concise: str, facts: Sequence[str], max_facts: int, region: str = "") -> str:
    """Prompt handed to an edge completer: location facts followed by the user's prompt."""
    lines = [f"### region: {region}", f"### facts (use at most {max_facts}):"]
    lines += [f"- {f}" for f in facts]
    lines += ["### concise prompt:", concise]
    return "\n".join(lines)


_COMPLETION_RE = re.compile(
    r"\A### region: (?P<region>[^\n]*)\n### facts \(use at most (?P<k>\d+)\):\n(?P<facts>(?:- [^\n]*\n)*)"
    r"### concise prompt:\n(?P<concise>.*)\Z",
    re.S,
)


def parse_completion_prompt(prompt: str):
    m = _COMPLETION_RE.match(prompt)
    if not m:
        return None
    facts = [line[2:] for line in m.group("facts").splitlines()]
    return m.group("concise"), facts, int(m.group("k")), m.group("region")


def select_facts(concise: str, facts: Sequence[str], max_facts: int) -> list[str]:
    """Facts ranked by keyword overlap with the prompt; ties keep profile order."""
    kw = keywords(concise)
    scored = [(-len(kw & keywords(f)), i, f) for i, f in enumerate(facts)]
    return [f for score, _, f in sorted(scored) if score < 0][:max_facts]


def coverage(query: str, context: Iterable[str]) -> float:
    kw = keywords(query)
    if not kw:
        return 0.0
    seen: set[str] = set()
    for c in context:
        seen |= keywords(c)
    return len(kw & seen) / len(kw)


def _topic(concise: str) -> str:
    return concise.strip().rstrip("?.!").strip() or concise


_RESPONSE_OPENERS = (
    "Here is a detailed answer to your request",
    "Based on your request",
    "Considering the details you gave",
)


class MockBackend(Backend):
    """Deterministic stand-in for both the edge completer and the cloud responder.

    Completion prompts (see :func:`build_completion_prompt`) are expanded with the
    facts sharing the most keywords with the concise prompt, then an
    intent-expansion clause. Anything else is answered with a templated response
    that quotes the prompt. Confidence is the share of the prompt's keywords
    covered by the chosen facts.
    """

    name = "mock"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def complete(self, concise: str, facts: Sequence[str], max_facts: int) -> GenerationResult:
        chosen = select_facts(concise, facts, max_facts)
        head = concise.strip()
        if head and head[-1] not in ".?!":
            head += "."
        text = " ".join([head, *chosen, f"{INTENT_PREFIX} {_topic(concise)}."])
        return GenerationResult(text, coverage(concise, chosen))

    def respond(self, prompt: str, rng: random.Random | None) -> GenerationResult:
        body = re.split(rf"\s*{INTENT_PREFIX} ", prompt, maxsplit=1)[0]
        query, sep, context = body.partition(". ")
        conf = coverage(query, [context]) if sep else 0.0
        opener = _RESPONSE_OPENERS[0] if rng is None else rng.choice(_RESPONSE_OPENERS)
        return GenerationResult(f"{opener}: {prompt}", conf)

    def generate(self, req: GenerationRequest) -> GenerationResult:
        t0 = time.perf_counter()
        rng = None
        if req.temperature > 0:
            rng = random.Random(f"{self.seed}-{req.temperature}-{req.prompt}")
        parsed = parse_completion_prompt(req.prompt)
        if parsed is not None:
            concise, facts, k, _ = parsed
            res = self.complete(concise, facts, k)
        else:
            res = self.respond(req.prompt, rng)
        return GenerationResult(res.text, res.confidence, time.perf_counter() - t0)


class EchoBackend(Backend):
    name = "echo"

    def generate(self, req: GenerationRequest) -> GenerationResult:
        return GenerationResult(req.prompt, 1.0, 0.0)


class ReplayBackend(Backend):
    """Completions looked up by normalized prompt from a JSON-lines corpus.

    Each line: ``{"prompt": ..., "completion": ..., "confidence": 0.5}``
    (confidence optional, default 0).
    """

    name = "replay"

    def __init__(self, entries: dict[str, tuple[str, float]] | None = None):
        self._entries: dict[str, tuple[str, float]] = {}
        for prompt, value in (entries or {}).items():
            text, conf = value if isinstance(value, tuple) else (value, 0.0)
            self._entries[normalize_for_dedup(prompt)] = (text, conf)

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBackend":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    entries[rec["prompt"]] = (rec["completion"], float(rec.get("confidence", 0.0)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad replay record ({exc})") from None
        return cls(entries)

    @staticmethod
    def record(backend: Backend, prompts: Iterable[str], path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for p in prompts:
                res = backend.generate(GenerationRequest(p))
                rec = {"prompt": normalize_for_dedup(p), "completion": res.text, "confidence": res.confidence}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._entries)

    def generate(self, req: GenerationRequest) -> GenerationResult:
        hit = self._entries.get(normalize_for_dedup(req.prompt))
        if hit is None:
            raise ReplayMiss(req.prompt[:80])
        return GenerationResult(hit[0], hit[1], 0.0)


class RecordingBackend(Backend):
    """Pass-through wrapper that remembers every prompt and result, for building replay corpora."""

    name = "recording"

    def __init__(self, inner: Backend):
        self.inner = inner
        self.log: dict[str, GenerationResult] = {}
        self._lock = threading.Lock()

    def generate(self, req: GenerationRequest) -> GenerationResult:
        res = self.inner.generate(req)
        with self._lock:
            self.log[req.prompt] = res
        return res

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for prompt, res in self.log.items():
                rec = {"prompt": prompt, "completion": res.text, "confidence": res.confidence}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _substitute(node, values: dict):
    if isinstance(node, str):
        for k, v in values.items():
            if node == "{" + k + "}":
                return v
        for k, v in values.items():
            node = node.replace("{" + k + "}", str(v))
        return node
    if isinstance(node, list):
        return [_substitute(x, values) for x in node]
    if isinstance(node, dict):
        return {k: _substitute(v, values) for k, v in node.items()}
    return node


def _dig(obj, path: str):
    for part in path.split(".") if path else []:
        if isinstance(obj, list):
            obj = obj[int(part)]
        else:
            obj = obj[part]
    return obj


class HttpBackend(Backend):
    """Client for a completion-style HTTP endpoint.

    ``request_template`` is a JSON document whose string values may contain
    ``{prompt}``, ``{max_new_tokens}`` and ``{temperature}``. ``response_path``
    is a dotted path to the generated text in the JSON reply.
    """

    name = "http"

    def __init__(
        self,
        endpoint: str,
        request_template: str = '{"prompt": "{prompt}"}',
        response_path: str = "text",
        confidence_path: str = "",
        timeout_s: float = 30.0,
        max_in_flight: int = 8,
    ):
        self.endpoint = endpoint
        self.template = json.loads(request_template)
        self.response_path = response_path
        self.confidence_path = confidence_path
        self.timeout_s = timeout_s
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def generate(self, req: GenerationRequest) -> GenerationResult:
        body = _substitute(
            self.template,
            {"prompt": req.prompt, "max_new_tokens": req.max_new_tokens, "temperature": req.temperature},
        )
        with self._slots:
            t0 = time.perf_counter()
            try:
                resp = httpx.post(self.endpoint, json=body, timeout=self.timeout_s)
                resp.raise_for_status()
                payload = resp.json()
            except (httpx.HTTPError, ValueError) as exc:
                raise TransportError(f"{self.endpoint}: {exc}") from exc
            latency = time.perf_counter() - t0
        try:
            text = str(_dig(payload, self.response_path))
            conf = float(_dig(payload, self.confidence_path)) if self.confidence_path else 0.0
        except (KeyError, IndexError, ValueError, TypeError) as exc:
            raise TransportError(f"{self.endpoint}: unexpected response shape ({exc})") from exc
        return GenerationResult(text, min(max(conf, 0.0), 1.0), latency)


def make_backend(name: str, config=None, section: str = "") -> Backend:
    """Build a backend by name; ``config`` supplies replay/http settings."""
    name = name.strip().lower()
    if name == "mock":
        return MockBackend()
    if name == "echo":
        return EchoBackend()
    if name == "replay":
        path = config.get("backend.replay", "corpus", "") if config is not None else ""
        if not path:
            raise ValueError("replay backend needs backend.replay.corpus")
        return ReplayBackend.load(path)
    if name == "http":
        sec = "backend.http"
        return HttpBackend(
            endpoint=config.get(sec, "endpoint"),
            request_template=config.get(sec, "request_template", '{"prompt": "{prompt}"}'),
            response_path=config.get(sec, "response_path", "text"),
            confidence_path=config.get(sec, "confidence_path", ""),
            timeout_s=config.get_float(sec, "timeout_s", 30.0),
            max_in_flight=config.get_int(sec, "max_in_flight", 8),
        )
    raise ValueError(f"unknown backend {name!r}")
