"""Wire format and stage machine shared by the edge and cloud services.

A frame is a 4-byte big-endian body length followed by a UTF-8 JSON body.
Single envelopes are JSON objects with the fixed fields of
:class:`PromptEnvelope`; batches are ``{"batch": [<envelope>, ...]}``.
See PROTOCOL.md for the frozen field list and golden frames.
"""

from __future__ import annotations

import enum
import graphlib
import hashlib
import json
import struct
import time
import unicodedata
from dataclasses import dataclass, field, replace
from typing import Union

MAX_FRAME = 1 << 20
_LEN = struct.Struct(">I")

FIELDS = (
    "request_id",
    "stage",
    "text",
    "origin_bs_id",
    "terminated_at_edge",
    "created_unix_ms",
    "dedup_key",
    "error",
)


class ProtocolError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class NeedMoreBytes(ProtocolError):
    def __init__(self, needed: int):
        super().__init__(f"incomplete frame, need {needed} more bytes")
        self.needed = needed


class FrameTooLarge(ProtocolError):
    pass


class StageError(ValueError):
    pass


class Stage(str, enum.Enum):
    CONCISE = "concise"
    COMPREHENSIVE = "comprehensive"
    RESPONSE = "response"


_ALLOWED = {
    (Stage.CONCISE, Stage.COMPREHENSIVE),
    (Stage.COMPREHENSIVE, Stage.RESPONSE),
    (Stage.CONCISE, Stage.RESPONSE),
}


def normalize_for_dedup(text: str) -> str:
    """Lowercase, collapse whitespace runs, strip trailing punctuation."""
    s = " ".join(text.lower().split())
    end = len(s)
    while end and (s[end - 1].isspace() or unicodedata.category(s[end - 1]).startswith("P")):
        end -= 1
    return s[:end]


def dedup_key(text: str) -> int:
    """64-bit key of the normalized text. Collisions count as duplicates."""
    digest = hashlib.blake2b(normalize_for_dedup(text).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class PromptEnvelope:
    request_id: str
    stage: Stage
    text: str
    origin_bs_id: str = ""
    terminated_at_edge: bool = False
    created_unix_ms: int = 0
    dedup_key: int = field(default=-1)
    error: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        if self.dedup_key == -1:
            object.__setattr__(self, "dedup_key", dedup_key(self.text))
        self.validate()

    def validate(self) -> None:
        if not self.request_id:
            raise ValueError("request_id must be nonempty")
        if self.stage is not Stage.RESPONSE and not self.text:
            raise ValueError(f"{self.stage.value} envelope needs nonempty text")
        if not 0 <= self.dedup_key < 1 << 64:
            raise ValueError("dedup_key must be a 64-bit unsigned value")
        if self.dedup_key != dedup_key(self.text):
            raise ValueError("dedup_key does not match text")
        if self.terminated_at_edge and self.stage is not Stage.RESPONSE:
            raise ValueError("only responses can be terminated at the edge")

    @classmethod
    def concise(cls, request_id: str, text: str, origin_bs_id: str = "", created_unix_ms: int | None = None):
        if created_unix_ms is None:
            created_unix_ms = int(time.time() * 1000)
        return cls(request_id, Stage.CONCISE, text, origin_bs_id, False, created_unix_ms)

    def advance(self, stage: Stage, text: str, *, terminated_at_edge: bool = False, error: str = "") -> "PromptEnvelope":
        """Next-stage envelope for the same request."""
        stage = Stage(stage)
        if (self.stage, stage) not in _ALLOWED:
            raise StageError(f"illegal transition {self.stage.value} -> {stage.value}")
        return replace(
            self,
            stage=stage,
            text=text,
            terminated_at_edge=terminated_at_edge,
            dedup_key=dedup_key(text),
            error=error,
        )

    def to_obj(self) -> dict:
        return {
            "request_id": self.request_id,
            "stage": self.stage.value,
            "text": self.text,
            "origin_bs_id": self.origin_bs_id,
            "terminated_at_edge": self.terminated_at_edge,
            "created_unix_ms": self.created_unix_ms,
            "dedup_key": f"{self.dedup_key:016x}",
            "error": self.error,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "PromptEnvelope":
        if not isinstance(obj, dict) or tuple(obj) != FIELDS:
            raise ValueError(f"expected fields {list(FIELDS)}")
        if not isinstance(obj["terminated_at_edge"], bool) or type(obj["created_unix_ms"]) is not int:
            raise ValueError("bad field type")
        if not all(isinstance(obj[k], str) for k in ("request_id", "stage", "text", "origin_bs_id", "dedup_key", "error")):
            raise ValueError("bad field type")
        key = obj["dedup_key"]
        if len(key) != 16:
            raise ValueError("dedup_key must be 16 hex digits")
        return cls(
            request_id=obj["request_id"],
            stage=Stage(obj["stage"]),
            text=obj["text"],
            origin_bs_id=obj["origin_bs_id"],
            terminated_at_edge=obj["terminated_at_edge"],
            created_unix_ms=obj["created_unix_ms"],
            dedup_key=int(key, 16),
            error=obj["error"],
        )


Message = Union[PromptEnvelope, list]


def _frame(body_obj) -> bytes:
    body = json.dumps(body_obj, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise FrameTooLarge(f"frame body of {len(body)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(body)) + body


def encode(env: PromptEnvelope) -> bytes:
    env.validate()
    return _frame(env.to_obj())


def encode_batch(envs: list[PromptEnvelope]) -> bytes:
    for e in envs:
        e.validate()
    return _frame({"batch": [e.to_obj() for e in envs]})


def _parse_body(body: bytes, base: int) -> Message:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"body is not UTF-8: {exc.reason}", base + exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed body: {exc.msg}", base + len(text[: exc.pos].encode("utf-8"))) from None
    try:
        if isinstance(obj, dict) and set(obj) == {"batch"}:
            if not isinstance(obj["batch"], list):
                raise ValueError("batch must be a list")
            return [PromptEnvelope.from_obj(o) for o in obj["batch"]]
        return PromptEnvelope.from_obj(obj)
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"invalid envelope: {exc}", base) from None


def decode_frame(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame starting at ``offset``; returns (message, next offset)."""
    avail = len(buf) - offset
    if avail < 4:
        raise NeedMoreBytes(4 - avail)
    (length,) = _LEN.unpack_from(buf, offset)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"frame body of {length} bytes exceeds {MAX_FRAME}", offset)
    if avail < 4 + length:
        raise NeedMoreBytes(4 + length - avail)
    start = offset + 4
    return _parse_body(bytes(buf[start : start + length]), start), start + length


def decode(data: bytes) -> PromptEnvelope:
    msg, end = decode_frame(data)
    if end != len(data):
        raise ProtocolError("trailing bytes after frame", end)
    if not isinstance(msg, PromptEnvelope):
        raise ProtocolError("expected a single envelope, got a batch", 4)
    return msg


class FrameDecoder:
    """Incremental decoder for one stream; not shared between connections."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        pos = 0
        while True:
            try:
                msg, pos_next = decode_frame(self._buf, pos)
            except NeedMoreBytes:
                break
            out.append(msg)
            pos = pos_next
        del self._buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


async def read_message(reader) -> Message | None:
    """Read one frame from an asyncio StreamReader; None on clean EOF."""
    import asyncio

    try:
        head = await reader.readexactly(4)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise NeedMoreBytes(4 - len(exc.partial)) from None
        return None
    (length,) = _LEN.unpack(head)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"frame body of {length} bytes exceeds {MAX_FRAME}", 0)
    body = await reader.readexactly(length)
    return _parse_body(body, 4)


# ---- logical workflow ------------------------------------------------------


class Placement(str, enum.Enum):
    EDGE = "edge"
    CLOUD = "cloud"


@dataclass
class WorkflowGraph:
    nodes: dict[str, Placement]
    edges: list[tuple[str, str]] = field(default_factory=list)
    qos: dict[str, float] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "WorkflowGraph":
        """Parse chains like ``"edge:enhance -> cloud:generate; edge:enhance -> edge:log"``."""
        nodes: dict[str, Placement] = {}
        edges = []
        for chain in text.split(";"):
            names = []
            for item in chain.split("->"):
                item = item.strip()
                if not item:
                    continue
                place, _, name = item.partition(":")
                if not name:
                    raise ValueError(f"node {item!r} needs a placement prefix")
                place = Placement(place.strip())
                name = name.strip()
                if nodes.get(name, place) is not place:
                    raise ValueError(f"node {name!r} placed twice")
                nodes[name] = place
                names.append(name)
            edges.extend(zip(names, names[1:]))
        return cls(nodes, edges)


def canonical_workflow() -> WorkflowGraph:
    return WorkflowGraph({"enhance": Placement.EDGE, "generate": Placement.CLOUD}, [("enhance", "generate")])


def validate_workflow(g: WorkflowGraph) -> list[str]:
    """Violations as strings; an empty list means the graph is acceptable."""
    problems = []
    preds: dict[str, set[str]] = {n: set() for n in g.nodes}
    for a, b in g.edges:
        for n in (a, b):
            if n not in g.nodes:
                problems.append(f"unknown node: {n}")
        if a in preds and b in preds:
            preds[b].add(a)
    for n in g.qos:
        if n not in g.nodes:
            problems.append(f"qos for unknown node: {n}")
    try:
        order = list(graphlib.TopologicalSorter(preds).static_order())
    except graphlib.CycleError as exc:
        cycle = exc.args[1]
        problems.append("cycle: " + " -> ".join(cycle))
        return problems

    # covered: every path from a source to this node passes an edge-placed node
    covered: dict[str, bool] = {}
    for n in order:
        if g.nodes[n] is Placement.EDGE:
            covered[n] = True
        else:
            covered[n] = bool(preds[n]) and all(covered[p] for p in preds[n])
            if not covered[n]:
                problems.append(f"cloud precedes edge: {n}")
    return problems
