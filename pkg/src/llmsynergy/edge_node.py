"""Edge service: de-duplication, prompt enhancement, local termination and batched forwarding."""

from __future__ import annotations

import asyncio
import configparser
import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .model_backend import Backend, GenerationRequest, build_completion_prompt
from .protocol import (
    FrameDecoder,
    PromptEnvelope,
    ProtocolError,
    Stage,
    StageError,
    WorkflowGraph,
    canonical_workflow,
    encode,
    encode_batch,
    read_message,
    validate_workflow,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocationProfile:
    bs_id: str
    region_name: str = ""
    facts: tuple[str, ...] = ()
    max_facts_per_prompt: int = 1

    def __post_init__(self):
        object.__setattr__(self, "facts", tuple(self.facts))
        for f in self.facts:
            if "\n" in f or any(f"{p} " in f.strip() for p in ".!?"):
                raise ValueError(f"profile {self.bs_id}: fact is not a single sentence: {f!r}")
        if self.max_facts_per_prompt < 0:
            raise ValueError("max_facts_per_prompt must be >= 0")

    @classmethod
    def from_file(cls, path: str | Path) -> "LocationProfile":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read(path, encoding="utf-8")
        sec = cp["profile"]
        facts = [line.strip() for line in sec.get("facts", "").splitlines() if line.strip()]
        prof = cls(
            bs_id=sec["bs_id"],
            region_name=sec.get("region_name", ""),
            facts=tuple(facts),
            max_facts_per_prompt=sec.getint("max_facts_per_prompt", 1),
        )
        if not prof.facts:
            raise ValueError(f"{path}: registered profile needs at least one fact")
        return prof


def fallback_profile(bs_id: str) -> LocationProfile:
    return LocationProfile(bs_id=bs_id, region_name="", facts=(), max_facts_per_prompt=0)


class ProfileStore(Mapping[str, LocationProfile]):
    def __init__(self, profiles: Sequence[LocationProfile] = ()):
        self._by_id = {p.bs_id: p for p in profiles}
        self._warned: set[str] = set()

    @classmethod
    def load_dir(cls, directory: str | Path) -> "ProfileStore":
        return cls([LocationProfile.from_file(p) for p in sorted(Path(directory).glob("*.conf"))])

    @classmethod
    def builtin(cls) -> "ProfileStore":
        from importlib import resources

        return cls.load_dir(Path(str(resources.files("llmsynergy") / "data" / "profiles")))

    def __getitem__(self, bs_id: str) -> LocationProfile:
        return self._by_id[bs_id]

    def __iter__(self):
        return iter(self._by_id)

    def __len__(self) -> int:
        return len(self._by_id)

    def resolve(self, bs_id: str) -> LocationProfile:
        prof = self._by_id.get(bs_id)
        if prof is None:
            if bs_id in self._warned:
                return fallback_profile(bs_id)
            self._warned.add(bs_id)
            log.warning("no location profile for base station %r; enhancing without personalization", bs_id)
            return fallback_profile(bs_id)
        return prof


@dataclass(frozen=True)
class EdgeFineTuneSample:
    concise: str
    intended: str
    bs_id: str

    def __post_init__(self):
        if not self.concise or not self.intended:
            raise ValueError("samples need nonempty concise and intended prompts")
        if len(self.intended) <= len(self.concise):
            raise ValueError("intended prompt must be longer than the concise prompt")


# ---- operations -------------------------------------------------------------


def enhance(env: PromptEnvelope, profile: LocationProfile | Mapping[str, LocationProfile], backend: Backend) -> PromptEnvelope:
    """Concise -> comprehensive prompt personalised with the base station's facts.

    The concise text is always kept verbatim. A failing backend degrades to
    passing the concise text through at the comprehensive stage.
    """
    if env.stage is not Stage.CONCISE:
        raise StageError(f"enhance expects a concise prompt, got {env.stage.value}")
    if not isinstance(profile, LocationProfile):
        store = profile if isinstance(profile, ProfileStore) else ProfileStore(list(profile.values()))
        profile = store.resolve(env.origin_bs_id)
    if not profile.facts or profile.max_facts_per_prompt == 0:
        return env.advance(Stage.COMPREHENSIVE, env.text)
    prompt = build_completion_prompt(env.text, profile.facts, profile.max_facts_per_prompt, profile.region_name)
    try:
        text = backend.generate(GenerationRequest(prompt)).text
    except Exception as exc:  # degraded mode covers any backend fault
        log.warning("completer failed for %s (%s); passing concise prompt through", env.request_id, exc)
        return env.advance(Stage.COMPREHENSIVE, env.text)
    if env.text not in text:
        text = f"{env.text} {text}".strip()
    return env.advance(Stage.COMPREHENSIVE, text)


@dataclass(frozen=True)
class Lookup:
    kind: str  # "fresh" | "duplicate" | "cached"
    of: str | None = None
    response: PromptEnvelope | None = None


@dataclass
class _Entry:
    owner: str
    created: float
    response: PromptEnvelope | None = None
    pending: list[str] = field(default_factory=list)


class DedupCache:
    """Keys seen recently at the edge, with the owning request or its response.

    Bounded by ``capacity`` with oldest-first eviction; entries older than
    ``ttl_s`` are treated as absent.
    """

    def __init__(self, ttl_s: float = 60.0, capacity: int = 10_000, clock=time.monotonic):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.ttl_s = ttl_s
        self.capacity = capacity
        self.clock = clock
        self._entries: OrderedDict[int, _Entry] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, env: PromptEnvelope, now: float | None = None) -> Lookup:
        now = self.clock() if now is None else now
        with self._lock:
            entry = self._entries.get(env.dedup_key)
            if entry is not None and now - entry.created < self.ttl_s:
                self.hits += 1
                if entry.response is not None:
                    return Lookup("cached", entry.owner, entry.response)
                entry.pending.append(env.request_id)
                return Lookup("duplicate", entry.owner)
            if entry is not None:
                del self._entries[env.dedup_key]
            self._entries[env.dedup_key] = _Entry(env.request_id, now)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
            return Lookup("fresh")

    def complete(self, key: int, owner: str, response: PromptEnvelope) -> None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None and entry.owner == owner:
                entry.response = response

    def forget(self, key: int, owner: str) -> None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None and entry.owner == owner:
                del self._entries[key]


def dedup_lookup(cache: DedupCache, env: PromptEnvelope, now: float | None = None) -> Lookup:
    if env.stage is not Stage.CONCISE:
        raise StageError("dedup_lookup expects a concise prompt")
    return cache.lookup(env, now)


@dataclass(frozen=True)
class Decision:
    action: str  # "respond" | "forward"
    response: PromptEnvelope | None = None
    confidence: float = 0.0


def maybe_terminate(env: PromptEnvelope, backend: Backend, threshold: float = 0.9) -> Decision:
    """Answer at the edge when the local result's confidence reaches ``threshold``."""
    if env.stage is not Stage.COMPREHENSIVE:
        raise StageError("maybe_terminate expects a comprehensive prompt")
    try:
        res = backend.generate(GenerationRequest(env.text))
    except Exception as exc:
        log.info("edge responder unavailable for %s (%s); forwarding", env.request_id, exc)
        return Decision("forward")
    if res.confidence >= threshold:
        return Decision("respond", env.advance(Stage.RESPONSE, res.text, terminated_at_edge=True), res.confidence)
    return Decision("forward", None, res.confidence)


@dataclass
class Batch:
    close_time: float
    items: list


def batch_forward(pending: Sequence[tuple[float, PromptEnvelope]], window_s: float, max_batch: int) -> list[Batch]:
    """Group time-ordered (arrival, envelope) pairs into forwarding batches.

    A batch opens with its first arrival and closes when full or when
    ``window_s`` has elapsed since that arrival (an arrival exactly at the
    deadline starts the next batch).
    """
    if max_batch < 1:
        raise ValueError("max_batch must be >= 1")
    batches: list[Batch] = []
    cur: list = []
    opened = 0.0
    last = None
    for t, env in pending:
        if last is not None and t < last:
            raise ValueError("pending envelopes must be time-ordered")
        last = t
        if cur and t >= opened + window_s:
            batches.append(Batch(opened + window_s, cur))
            cur = []
        if not cur:
            opened = t
        cur.append(env)
        if len(cur) == max_batch:
            batches.append(Batch(t, cur))
            cur = []
    if cur:
        batches.append(Batch(opened + window_s, cur))
    return batches


# ---- service ----------------------------------------------------------------


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


@dataclass
class EdgeSettings:
    listen: str = "127.0.0.1:0"
    cloud_address: str = "127.0.0.1:7702"
    metrics_listen: str | None = None
    dedup_ttl_s: float = 60.0
    dedup_capacity: int = 10_000
    termination_threshold: float = 0.9
    batch_window_s: float = 0.01
    max_batch: int = 10


class CloudLink:
    """Persistent connection to the cloud; batches are answered in send order."""

    def __init__(self, address: str):
        self.address = address
        self._reader = None
        self._writer = None
        self._waiting: asyncio.Queue | None = None
        self._reader_task = None
        self._lock = asyncio.Lock()

    async def _connect(self):
        host, port = parse_address(self.address)
        self._reader, self._writer = await asyncio.open_connection(host, port)
        self._waiting = asyncio.Queue()
        self._reader_task = asyncio.create_task(self._read_loop())

    async def _read_loop(self):
        waiting = self._waiting
        try:
            while True:
                msg = await read_message(self._reader)
                if msg is None:
                    break
                fut = await waiting.get()
                if not fut.done():
                    fut.set_result(msg if isinstance(msg, list) else [msg])
        except (ConnectionError, ProtocolError, asyncio.IncompleteReadError) as exc:
            log.warning("cloud link read failed: %s", exc)
        finally:
            self._writer = None
            while not waiting.empty():
                fut = waiting.get_nowait()
                if not fut.done():
                    fut.set_exception(ConnectionError("cloud connection closed"))

    async def send(self, batch: list[PromptEnvelope]) -> list[PromptEnvelope]:
        async with self._lock:
            if self._writer is None:
                await self._connect()
            fut = asyncio.get_running_loop().create_future()
            await self._waiting.put(fut)
            self._writer.write(encode_batch(batch))
            await self._writer.drain()
        return await fut

    async def close(self):
        if self._writer is not None:
            self._writer.close()
        if self._reader_task is not None:
            self._reader_task.cancel()


class _Batcher:
    def __init__(self, service: "EdgeService"):
        self.service = service
        self.items: list[tuple[PromptEnvelope, asyncio.Future]] = []
        self._timer: asyncio.TimerHandle | None = None

    def add(self, env: PromptEnvelope) -> asyncio.Future:
        fut = asyncio.get_running_loop().create_future()
        if not self.items:
            self._timer = asyncio.get_running_loop().call_later(self.service.settings.batch_window_s, self.flush)
        self.items.append((env, fut))
        if len(self.items) >= self.service.settings.max_batch:
            self.flush()
        return fut

    def flush(self):
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if self.items:
            batch, self.items = self.items, []
            asyncio.get_running_loop().create_task(self.service._forward(batch))


class EdgeService:
    def __init__(
        self,
        completer: Backend,
        profiles: ProfileStore | None = None,
        settings: EdgeSettings | None = None,
        responder: Backend | None = None,
        workflow: WorkflowGraph | None = None,
    ):
        problems = validate_workflow(workflow or canonical_workflow())
        if problems:
            raise ValueError("invalid workflow: " + "; ".join(problems))
        self.completer = completer
        self.responder = responder or completer
        self.profiles = profiles if profiles is not None else ProfileStore()
        self.settings = settings or EdgeSettings()
        self.cache = DedupCache(self.settings.dedup_ttl_s, self.settings.dedup_capacity)
        self.cloud = CloudLink(self.settings.cloud_address)
        self.counters = {
            "requests": 0,
            "dedup_hits": 0,
            "local_terminations": 0,
            "forwarded_requests": 0,
            "forwarded_batches": 0,
            "errors": 0,
        }
        self._inflight: dict[str, asyncio.Future] = {}
        self._batcher: _Batcher | None = None
        self._servers: list[asyncio.base_events.Server] = []

    # -- lifecycle
    async def start(self) -> tuple[str, int]:
        self._batcher = _Batcher(self)
        host, port = parse_address(self.settings.listen)
        srv = await asyncio.start_server(self._handle_client, host, port)
        self._servers.append(srv)
        if self.settings.metrics_listen:
            mhost, mport = parse_address(self.settings.metrics_listen)
            self._servers.append(await asyncio.start_server(self._handle_metrics, mhost, mport))
        return srv.sockets[0].getsockname()[:2]

    @property
    def metrics_address(self) -> tuple[str, int] | None:
        if len(self._servers) < 2:
            return None
        return self._servers[1].sockets[0].getsockname()[:2]

    async def stop(self):
        for s in self._servers:
            s.close()
            await s.wait_closed()
        await self.cloud.close()

    def metrics_text(self) -> str:
        return "".join(f"edge_{k} {v}\n" for k, v in self.counters.items())

    # -- request path
    async def _handle_client(self, reader, writer):
        write_lock = asyncio.Lock()
        decoder = FrameDecoder()
        tasks = set()

        async def reply(resp: PromptEnvelope):
            async with write_lock:
                writer.write(encode(resp))
                await writer.drain()

        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                for msg in decoder.feed(data):
                    for env in msg if isinstance(msg, list) else [msg]:
                        t = asyncio.create_task(self._serve_one(env, reply))
                        tasks.add(t)
                        t.add_done_callback(tasks.discard)
        except ProtocolError as exc:
            log.warning("client sent a bad frame: %s", exc)
        except ConnectionError:
            pass
        finally:
            if tasks:
                await asyncio.gather(*tasks, return_exceptions=True)
            writer.close()

    async def _serve_one(self, env: PromptEnvelope, reply):
        resp = await self.handle(env)
        if resp is not None:
            await reply(resp)

    async def handle(self, env: PromptEnvelope) -> PromptEnvelope | None:
        """Resolve one incoming envelope to exactly one response envelope."""
        self.counters["requests"] += 1
        if env.stage is Stage.RESPONSE:
            log.warning("ignoring response-stage envelope %s from client", env.request_id)
            self.counters["errors"] += 1
            return None
        if env.stage is Stage.COMPREHENSIVE:
            return await self._forward_one(env)

        found = dedup_lookup(self.cache, env)
        if found.kind == "cached":
            self.counters["dedup_hits"] += 1
            return replace(found.response, request_id=env.request_id, origin_bs_id=env.origin_bs_id)
        if found.kind == "duplicate":
            self.counters["dedup_hits"] += 1
            owner = self._inflight.get(found.of)
            if owner is not None:
                resp = await asyncio.shield(owner)
                return replace(resp, request_id=env.request_id, origin_bs_id=env.origin_bs_id)
            # owner finished between lookup and now without caching; serve it fresh

        fut = asyncio.get_running_loop().create_future()
        self._inflight[env.request_id] = fut
        try:
            resp = await self._process(env)
        except Exception as exc:  # never drop a request
            log.exception("edge pipeline failed for %s", env.request_id)
            self.counters["errors"] += 1
            resp = env.advance(Stage.RESPONSE, "", error=f"edge failure: {exc}")
        if resp.error:
            self.cache.forget(env.dedup_key, env.request_id)
        else:
            self.cache.complete(env.dedup_key, env.request_id, resp)
        fut.set_result(resp)
        del self._inflight[env.request_id]
        return resp

    async def _process(self, env: PromptEnvelope) -> PromptEnvelope:
        profile = self.profiles.resolve(env.origin_bs_id)
        comp = await asyncio.to_thread(enhance, env, profile, self.completer)
        decision = await asyncio.to_thread(maybe_terminate, comp, self.responder, self.settings.termination_threshold)
        if decision.action == "respond":
            self.counters["local_terminations"] += 1
            return decision.response
        return await self._forward_one(comp)

    async def _forward_one(self, comp: PromptEnvelope) -> PromptEnvelope:
        return await self._batcher.add(comp)

    async def _forward(self, batch):
        envs = [e for e, _ in batch]
        self.counters["forwarded_batches"] += 1
        self.counters["forwarded_requests"] += len(envs)
        err = "missing cloud response"
        try:
            responses = await self.cloud.send(envs)
            by_id = {r.request_id: r for r in responses}
        except (OSError, ProtocolError) as exc:
            log.warning("forwarding batch of %d failed: %s", len(envs), exc)
            self.counters["errors"] += 1
            by_id = {}
            err = f"cloud unavailable: {exc}"
        for env, fut in batch:
            resp = by_id.get(env.request_id)
            if resp is None:
                resp = env.advance(Stage.RESPONSE, "", error=err)
            if not fut.done():
                fut.set_result(resp)

    async def _handle_metrics(self, reader, writer):
        try:
            await reader.readline()
        except ConnectionError:
            pass
        body = self.metrics_text().encode()
        writer.write(
            b"HTTP/1.0 200 OK\r\nContent-Type: text/plain; charset=utf-8\r\n"
            + f"Content-Length: {len(body)}\r\n\r\n".encode()
            + body
        )
        try:
            await writer.drain()
        finally:
            writer.close()
