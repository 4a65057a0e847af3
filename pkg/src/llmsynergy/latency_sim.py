"""Deterministic discrete-event simulation of a prompt workload per framework.

Time is kept in integer nanoseconds. All requests arrive at t=0 unless an
arrival jitter is configured. Queues are FIFO single servers.

Per framework:

* cloud-only: every request opens its own connection to the cloud front end.
  The single cloud worker performs the handshake, receives the payload and
  runs inference before taking the next request.
* synergy: concise prompts cross the end->edge link, duplicates are absorbed
  at the edge, fresh prompts are batched (window / max size), enhanced on the
  edge server and forwarded as comprehensive prompts over one persistent
  edge->cloud connection. The cloud serves a batch at
  ``cloud_infer / cloud_batch_speedup`` per request.
* offload: the edge serves every request at ``edge_infer`` per request.
* splitting: the edge runs ``split_fraction`` of the cloud model, ships the
  intermediate activation and the cloud runs the rest.
"""

from __future__ import annotations

import enum
import heapq
import json
import random
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .cost_model import FRAMEWORK_ORDER, Framework, LinkSpec, SpecError

NS = 1_000_000_000


class EventKind(str, enum.Enum):
    ARRIVE = "Arrive"
    HANDSHAKE_DONE = "HandshakeDone"
    EDGE_BATCH_START = "EdgeBatchStart"
    EDGE_DONE = "EdgeDone"
    FORWARD_START = "ForwardStart"
    CLOUD_START = "CloudStart"
    CLOUD_DONE = "CloudDone"
    DELIVER = "Deliver"
    DEDUP_HIT = "DedupHit"


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS))


def tx_ns(n_bytes: float, link: LinkSpec) -> int:
    return int(round(n_bytes * 8 * NS / link.rate_bits_per_s))


@dataclass(frozen=True)
class SimParams:
    n_requests: int = 100
    concise_bytes: int = 12
    comprehensive_bytes: int = 95
    end_edge: LinkSpec = LinkSpec(1e9, 0.0)
    edge_cloud: LinkSpec = LinkSpec(1e9, 0.0)
    cloud_infer_s_per_request: float = 0.1
    edge_infer_s_per_request: float = 0.01
    batch_window_s: float = 0.01
    max_batch: int = 10
    cloud_batch_speedup: float = 1.0
    duplicate_fraction: float = 0.0
    rng_seed: int = 0
    split_fraction: float = 0.25
    split_payload_bytes: int = 131072
    arrival_jitter_s: float = 0.0

    def __post_init__(self):
        if self.n_requests < 0:
            raise SpecError("n_requests must be >= 0")
        times = (
            self.cloud_infer_s_per_request,
            self.edge_infer_s_per_request,
            self.batch_window_s,
            self.arrival_jitter_s,
        )
        if any(t < 0 for t in times):
            raise SpecError("simulation times must be >= 0")
        if self.cloud_batch_speedup < 1:
            raise SpecError("cloud_batch_speedup must be >= 1")
        if self.max_batch < 1:
            raise SpecError("max_batch must be >= 1")
        if not 0.0 <= self.duplicate_fraction <= 1.0:
            raise SpecError("duplicate_fraction must lie in [0, 1]")
        if not 0.0 < self.split_fraction < 1.0:
            raise SpecError("split_fraction must lie in (0, 1)")
        if self.concise_bytes < 0 or self.comprehensive_bytes < 0 or self.split_payload_bytes < 0:
            raise SpecError("payload sizes must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SimEvent:
    time_ns: int
    kind: EventKind
    request_id: int

    @property
    def time_s(self) -> float:
        return self.time_ns / NS

    def to_line(self) -> str:
        return f"{self.time_ns}\t{self.kind.value}\t{self.request_id}"


@dataclass
class SimTrace:
    framework: Framework
    params: SimParams
    events: list[SimEvent]
    per_request_latency: list[float]
    end_to_end_s: float

    def to_log(self) -> str:
        return "".join(e.to_line() + "\n" for e in self.events)

    def of_kind(self, kind: EventKind) -> list[SimEvent]:
        return [e for e in self.events if e.kind is kind]


def parse_log(text: str) -> list[SimEvent]:
    events = []
    for line in text.splitlines():
        if not line.strip():
            continue
        t, kind, rid = line.split("\t")
        events.append(SimEvent(int(t), EventKind(kind), int(rid)))
    return events


class _Engine:
    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.events: list[SimEvent] = []

    def at(self, time_ns: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (time_ns, self._seq, fn))
        self._seq += 1

    def log(self, time_ns: int, kind: EventKind, rid: int) -> None:
        self.events.append(SimEvent(time_ns, kind, rid))

    def run(self) -> None:
        while self._heap:
            t, _, fn = heapq.heappop(self._heap)
            self.now = t
            fn()


class _FifoServer:
    """Single non-preemptive server; starts the next job the moment it frees up."""

    def __init__(self, engine: _Engine):
        self.engine = engine
        self.queue: list = []
        self.busy = False

    def submit(self, service_ns: int, on_start: Callable[[int], None], on_done: Callable[[int], None]) -> None:
        self.queue.append((service_ns, on_start, on_done))
        if not self.busy:
            self._next()

    def _next(self) -> None:
        if not self.queue:
            self.busy = False
            return
        self.busy = True
        service_ns, on_start, on_done = self.queue.pop(0)
        start = self.engine.now
        on_start(start)

        def finish():
            on_done(self.engine.now)
            self._next()

        self.engine.at(start + service_ns, finish)


def duplicate_plan(n: int, fraction: float, seed: int) -> list[int]:
    """Content id per request; with probability ``fraction`` a request copies a
    uniformly chosen earlier request."""
    rng = random.Random(seed)
    content = []
    for i in range(n):
        if i > 0 and rng.random() < fraction:
            content.append(content[rng.randrange(i)])
        else:
            content.append(i)
    return content


def _arrivals(p: SimParams) -> list[int]:
    if p.arrival_jitter_s <= 0:
        return [0] * p.n_requests
    rng = random.Random(f"arrivals-{p.rng_seed}")
    return [to_ns(rng.uniform(0.0, p.arrival_jitter_s)) for _ in range(p.n_requests)]


def simulate(framework: Framework | str, p: SimParams) -> SimTrace:
    fw = Framework.parse(framework)
    n = p.n_requests
    eng = _Engine()
    arrive = _arrivals(p)
    done_at: dict[int, int] = {}

    for rid in sorted(range(n), key=lambda r: (arrive[r], r)):
        eng.log(arrive[rid], EventKind.ARRIVE, rid)

    if fw is Framework.CLOUD_ONLY:
        _cloud_only(eng, p, arrive, done_at)
    elif fw is Framework.SYNERGY:
        _synergy(eng, p, arrive, done_at)
    elif fw is Framework.OFFLOAD:
        _offload(eng, p, arrive, done_at)
    elif fw is Framework.SPLITTING:
        _splitting(eng, p, arrive, done_at)
    else:  # pragma: no cover - Framework.parse already rejects
        raise SpecError(f"unknown framework {framework!r}")
    eng.run()

    order = {k: i for i, k in enumerate(EventKind)}
    events = sorted(eng.events, key=lambda e: (e.time_ns, e.request_id, order[e.kind]))
    latency = [(done_at[r] - arrive[r]) / NS for r in range(n)]
    end = max((e.time_ns for e in events), default=0) / NS
    return SimTrace(fw, p, events, latency, end)


def _uplink(eng: _Engine, p: SimParams, arrive: list[int], on_edge: Callable[[int], None]) -> None:
    link = _FifoServer(eng)
    service = to_ns(p.end_edge.per_request_handshake_s) + tx_ns(p.concise_bytes, p.end_edge)
    for rid in sorted(range(p.n_requests), key=lambda r: (arrive[r], r)):
        eng.at(
            arrive[rid],
            lambda rid=rid: link.submit(service, lambda t: None, lambda t, rid=rid: on_edge(rid)),
        )


def _cloud_only(eng, p, arrive, done_at):
    cloud = _FifoServer(eng)
    hs = to_ns(p.edge_cloud.per_request_handshake_s)
    tx = tx_ns(p.concise_bytes, p.edge_cloud)
    infer = to_ns(p.cloud_infer_s_per_request)

    def start(rid, t):
        eng.log(t + hs, EventKind.HANDSHAKE_DONE, rid)
        eng.log(t + hs, EventKind.FORWARD_START, rid)
        eng.log(t + hs + tx, EventKind.CLOUD_START, rid)

    def done(rid, t):
        eng.log(t, EventKind.CLOUD_DONE, rid)
        eng.log(t, EventKind.DELIVER, rid)
        done_at[rid] = t

    for rid in sorted(range(p.n_requests), key=lambda r: (arrive[r], r)):
        eng.at(
            arrive[rid],
            lambda rid=rid: cloud.submit(
                hs + tx + infer, lambda t, rid=rid: start(rid, t), lambda t, rid=rid: done(rid, t)
            ),
        )


def _synergy(eng, p, arrive, done_at):
    content = duplicate_plan(p.n_requests, p.duplicate_fraction, p.rng_seed)
    edge = _FifoServer(eng)
    link = _FifoServer(eng)
    cloud = _FifoServer(eng)
    connected = [False]
    owner: dict[int, int] = {}  # content id -> first request id
    waiters: dict[int, list[int]] = defaultdict(list)
    open_batch: list[int] = []
    batch_no = [0]
    hs = to_ns(p.edge_cloud.per_request_handshake_s)
    edge_per = to_ns(p.edge_infer_s_per_request)
    cloud_per = p.cloud_infer_s_per_request / p.cloud_batch_speedup

    def deliver(rid, t):
        eng.log(t, EventKind.CLOUD_DONE, rid)
        eng.log(t, EventKind.DELIVER, rid)
        done_at[rid] = t
        for w in waiters.pop(rid, []):
            done_at[w] = t

    def to_cloud(batch):
        cloud.submit(
            to_ns(len(batch) * cloud_per),
            lambda t: [eng.log(t, EventKind.CLOUD_START, r) for r in batch],
            lambda t: [deliver(r, t) for r in batch],
        )

    def forward(batch):
        setup = 0 if connected[0] else hs
        connected[0] = True

        def started(t):
            if setup:
                eng.log(t + setup, EventKind.HANDSHAKE_DONE, batch[0])
            for r in batch:
                eng.log(t + setup, EventKind.FORWARD_START, r)

        link.submit(setup + tx_ns(len(batch) * p.comprehensive_bytes, p.edge_cloud), started, lambda t: to_cloud(batch))

    def close(batch):
        def started(t):
            for r in batch:
                eng.log(t, EventKind.EDGE_BATCH_START, r)

        def finished(t):
            for r in batch:
                eng.log(t, EventKind.EDGE_DONE, r)
            forward(batch)

        edge.submit(len(batch) * edge_per, started, finished)

    def window_expired(no):
        if batch_no[0] == no and open_batch:
            batch = open_batch[:]
            open_batch.clear()
            batch_no[0] += 1
            close(batch)

    def at_edge(rid):
        key = content[rid]
        first = owner.get(key)
        if first is not None:
            eng.log(eng.now, EventKind.DEDUP_HIT, rid)
            if first in done_at:
                done_at[rid] = eng.now
            else:
                waiters[first].append(rid)
            return
        owner[key] = rid
        if not open_batch:
            no = batch_no[0]
            eng.at(eng.now + to_ns(p.batch_window_s), lambda: window_expired(no))
        open_batch.append(rid)
        if len(open_batch) >= p.max_batch:
            batch = open_batch[:]
            open_batch.clear()
            batch_no[0] += 1
            close(batch)

    _uplink(eng, p, arrive, at_edge)


def _offload(eng, p, arrive, done_at):
    edge = _FifoServer(eng)
    per = to_ns(p.edge_infer_s_per_request)

    def finished(rid, t):
        eng.log(t, EventKind.EDGE_DONE, rid)
        eng.log(t, EventKind.DELIVER, rid)
        done_at[rid] = t

    def at_edge(rid):
        edge.submit(
            per,
            lambda t: eng.log(t, EventKind.EDGE_BATCH_START, rid),
            lambda t: finished(rid, t),
        )

    _uplink(eng, p, arrive, at_edge)


def _splitting(eng, p, arrive, done_at):
    edge = _FifoServer(eng)
    link = _FifoServer(eng)
    cloud = _FifoServer(eng)
    connected = [False]
    hs = to_ns(p.edge_cloud.per_request_handshake_s)
    edge_part = to_ns(p.split_fraction * p.cloud_infer_s_per_request)
    cloud_part = to_ns((1.0 - p.split_fraction) * p.cloud_infer_s_per_request)
    payload = tx_ns(p.split_payload_bytes, p.edge_cloud)

    def finished(rid, t):
        eng.log(t, EventKind.CLOUD_DONE, rid)
        eng.log(t, EventKind.DELIVER, rid)
        done_at[rid] = t

    def forward(rid):
        setup = 0 if connected[0] else hs
        connected[0] = True

        def started(t):
            if setup:
                eng.log(t + setup, EventKind.HANDSHAKE_DONE, rid)
            eng.log(t + setup, EventKind.FORWARD_START, rid)

        link.submit(
            setup + payload,
            started,
            lambda t: cloud.submit(
                cloud_part, lambda t: eng.log(t, EventKind.CLOUD_START, rid), lambda t: finished(rid, t)
            ),
        )

    def at_edge(rid):
        def done(t):
            eng.log(t, EventKind.EDGE_DONE, rid)
            forward(rid)

        edge.submit(edge_part, lambda t: eng.log(t, EventKind.EDGE_BATCH_START, rid), done)

    _uplink(eng, p, arrive, at_edge)


# ---- analysis ----------------------------------------------------------


@dataclass
class SimSummary:
    framework: str
    n_requests: int
    end_to_end_s: float
    mean_latency_s: float
    median_latency_s: float
    p95_latency_s: float
    delivered: int
    dedup_hits: int
    forwarded: int
    bytes_end_edge: int
    bytes_edge_cloud: int
    total_bytes: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def bytes_moved(trace: SimTrace) -> tuple[int, int]:
    """(end->edge, edge->cloud) bytes counted from the trace events.

    For cloud-only the single end->cloud hop is reported as edge->cloud.
    """
    p = trace.params
    n_arrive = len(trace.of_kind(EventKind.ARRIVE))
    n_fwd = len(trace.of_kind(EventKind.FORWARD_START))
    fw = trace.framework
    if fw is Framework.CLOUD_ONLY:
        return 0, n_fwd * p.concise_bytes
    up = n_arrive * p.concise_bytes
    if fw is Framework.SYNERGY:
        return up, n_fwd * p.comprehensive_bytes
    if fw is Framework.SPLITTING:
        return up, n_fwd * p.split_payload_bytes
    return up, 0


def summarize(trace: SimTrace) -> SimSummary:
    lat = trace.per_request_latency
    up, down = bytes_moved(trace)
    return SimSummary(
        framework=trace.framework.value,
        n_requests=trace.params.n_requests,
        end_to_end_s=trace.end_to_end_s,
        mean_latency_s=statistics.fmean(lat) if lat else 0.0,
        median_latency_s=statistics.median(lat) if lat else 0.0,
        p95_latency_s=float(np.percentile(lat, 95)) if lat else 0.0,
        delivered=len(trace.of_kind(EventKind.DELIVER)),
        dedup_hits=len(trace.of_kind(EventKind.DEDUP_HIT)),
        forwarded=len(trace.of_kind(EventKind.FORWARD_START)),
        bytes_end_edge=up,
        bytes_edge_cloud=down,
        total_bytes=up + down,
    )


def compare_frameworks(p: SimParams) -> list[SimSummary]:
    return [summarize(simulate(fw, p)) for fw in FRAMEWORK_ORDER]


def render_comparison(rows: Iterable[SimSummary]) -> str:
    header = f"{'framework':<12} {'end-to-end (s)':>15} {'mean (s)':>10} {'p95 (s)':>10} {'bytes/request':>14} {'dedup hits':>11}"
    lines = [header, "-" * len(header)]
    for r in rows:
        per_req = r.total_bytes / r.n_requests if r.n_requests else 0.0
        lines.append(
            f"{r.framework:<12} {r.end_to_end_s:>15.2f} {r.mean_latency_s:>10.2f} "
            f"{r.p95_latency_s:>10.2f} {per_req:>14.2f} {r.dedup_hits:>11d}"
        )
    return "\n".join(lines) + "\n"


# ---- trace checks --------------------------------------------------------


def check_conservation(trace: SimTrace) -> list[str]:
    n = trace.params.n_requests
    delivered = len(trace.of_kind(EventKind.DELIVER))
    hits = len(trace.of_kind(EventKind.DEDUP_HIT))
    if trace.framework is Framework.SYNERGY:
        ok = delivered + hits == n
    else:
        ok = delivered == n and hits == 0
    return [] if ok else [f"delivered={delivered} dedup_hits={hits} n={n}"]


_CHAIN = [
    EventKind.ARRIVE,
    EventKind.HANDSHAKE_DONE,
    EventKind.EDGE_BATCH_START,
    EventKind.EDGE_DONE,
    EventKind.FORWARD_START,
    EventKind.CLOUD_START,
    EventKind.CLOUD_DONE,
    EventKind.DELIVER,
]


def check_causality(trace: SimTrace) -> list[str]:
    """Per request, lifecycle events occur in chain order with nondecreasing times.

    HandshakeDone is skipped: a shared connection's handshake is attributed to
    whichever request first used it.
    """
    per: dict[int, dict[EventKind, int]] = defaultdict(dict)
    problems = []
    for e in trace.events:
        if e.kind in per[e.request_id]:
            problems.append(f"request {e.request_id}: repeated {e.kind.value}")
        per[e.request_id][e.kind] = e.time_ns
    chain = [k for k in _CHAIN if k is not EventKind.HANDSHAKE_DONE]
    for rid, kinds in per.items():
        times = [kinds[k] for k in chain if k in kinds]
        if times != sorted(times):
            problems.append(f"request {rid}: lifecycle times out of order")
        if EventKind.DEDUP_HIT in kinds and EventKind.DELIVER in kinds:
            problems.append(f"request {rid}: both deduplicated and delivered")
    times = [e.time_ns for e in trace.events]
    if times != sorted(times):
        problems.append("trace not time-ordered")
    return problems


def check_work_conservation(trace: SimTrace) -> list[str]:
    """Rebuild cloud jobs from the trace and verify FIFO, no-idle-with-backlog service.

    A job is ready when its payload has fully arrived at the cloud; each job must
    start at ``max(ready, previous job done)``.
    """
    p = trace.params
    fw = trace.framework
    if fw is Framework.OFFLOAD:
        return []
    by_kind: dict[EventKind, dict[int, int]] = defaultdict(dict)
    for e in trace.events:
        by_kind[e.kind][e.request_id] = e.time_ns

    jobs = []  # (ready, start, done)
    if fw is Framework.CLOUD_ONLY:
        hs = to_ns(p.edge_cloud.per_request_handshake_s)
        for rid, done in by_kind[EventKind.CLOUD_DONE].items():
            start = by_kind[EventKind.HANDSHAKE_DONE][rid] - hs
            jobs.append((by_kind[EventKind.ARRIVE][rid], start, done, rid))
    elif fw is Framework.SPLITTING:
        payload = tx_ns(p.split_payload_bytes, p.edge_cloud)
        for rid, start in by_kind[EventKind.CLOUD_START].items():
            ready = by_kind[EventKind.FORWARD_START][rid] + payload
            jobs.append((ready, start, by_kind[EventKind.CLOUD_DONE][rid], rid))
    else:
        groups: dict[tuple[int, int, int], list[int]] = defaultdict(list)
        for rid, start in by_kind[EventKind.CLOUD_START].items():
            key = (by_kind[EventKind.FORWARD_START][rid], start, by_kind[EventKind.CLOUD_DONE][rid])
            groups[key].append(rid)
        for (fwd, start, done), members in groups.items():
            ready = fwd + tx_ns(len(members) * p.comprehensive_bytes, p.edge_cloud)
            jobs.append((ready, start, done, min(members)))

    problems = []
    prev_done = None
    for ready, start, done, rid in sorted(jobs, key=lambda j: (j[1], j[3])):
        expected = ready if prev_done is None else max(ready, prev_done)
        if start != expected:
            problems.append(f"cloud job {rid}: start {start} != expected {expected}")
        prev_done = done
    return problems
