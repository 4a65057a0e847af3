"""Cloud service: answers comprehensive-prompt batches and keeps an adapter registry."""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .cost_model import LoraConfig, ModelShape, lora_adapter_bytes
from .edge_node import parse_address
from .model_backend import Backend, GenerationRequest
from .protocol import (
    PromptEnvelope,
    ProtocolError,
    Stage,
    StageError,
    encode,
    encode_batch,
    read_message,
)

log = logging.getLogger(__name__)


def respond_batch(batch: Sequence[PromptEnvelope], backend: Backend) -> list[PromptEnvelope]:
    """One response per envelope, same ids and order; the backend is called once."""
    if not batch:
        raise ValueError("batch must be nonempty")
    for env in batch:
        if env.stage is not Stage.COMPREHENSIVE:
            raise StageError(f"cloud expects comprehensive prompts, got {env.stage.value} for {env.request_id}")
    try:
        results = backend.generate_batch([GenerationRequest(e.text) for e in batch])
        if len(results) != len(batch):
            raise RuntimeError(f"backend returned {len(results)} results for {len(batch)} prompts")
    except Exception as exc:
        log.warning("responder failed on a batch of %d: %s", len(batch), exc)
        return [e.advance(Stage.RESPONSE, "", error=f"responder failure: {exc}") for e in batch]
    return [e.advance(Stage.RESPONSE, r.text) for e, r in zip(batch, results)]


@dataclass(frozen=True)
class AdapterRecord:
    adapter_id: str
    base_model: str
    rank: int
    scale_factor: float
    size_bytes: int

    def __post_init__(self):
        if not self.adapter_id:
            raise ValueError("adapter_id must be nonempty")
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        if self.size_bytes < 0:
            raise ValueError("size_bytes must be >= 0")


class AdapterRegistry:
    def __init__(self, models: Mapping[str, ModelShape]):
        self.models = dict(models)
        self._records: dict[str, AdapterRecord] = {}

    def expected_size(self, rec: AdapterRecord) -> int:
        shape = self.models.get(rec.base_model)
        if shape is None:
            raise ValueError(f"unknown base model {rec.base_model!r}")
        return lora_adapter_bytes(shape, LoraConfig(rec.rank, rec.scale_factor))

    def register(self, rec: AdapterRecord) -> None:
        if rec.adapter_id in self._records:
            raise ValueError(f"adapter {rec.adapter_id!r} already registered")
        expected = self.expected_size(rec)
        if abs(rec.size_bytes - expected) > 0.01 * expected:
            raise ValueError(
                f"adapter {rec.adapter_id!r} size {rec.size_bytes} inconsistent with rank {rec.rank}: "
                f"expected {expected} bytes (+/-1%)"
            )
        self._records[rec.adapter_id] = rec

    def __contains__(self, adapter_id: str) -> bool:
        return adapter_id in self._records

    def list(self) -> list[AdapterRecord]:
        return sorted(self._records.values(), key=lambda r: r.adapter_id)

    def load(self, path: str | Path) -> None:
        for obj in json.loads(Path(path).read_text(encoding="utf-8")):
            self.register(AdapterRecord(**obj))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps([asdict(r) for r in self.list()], indent=2) + "\n", encoding="utf-8")


def register_adapter(registry: AdapterRegistry, rec: AdapterRecord) -> None:
    registry.register(rec)


class CloudService:
    def __init__(self, backend: Backend, listen: str = "127.0.0.1:0", registry: AdapterRegistry | None = None):
        self.backend = backend
        self.listen = listen
        self.registry = registry
        self.batches = 0
        self._server = None

    async def start(self) -> tuple[str, int]:
        host, port = parse_address(self.listen)
        self._server = await asyncio.start_server(self._handle, host, port)
        return self._server.sockets[0].getsockname()[:2]

    async def stop(self):
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _handle(self, reader, writer):
        # batches on one connection are answered strictly in arrival order
        try:
            while True:
                msg = await read_message(reader)
                if msg is None:
                    break
                single = isinstance(msg, PromptEnvelope)
                batch = [msg] if single else msg
                if not batch:
                    writer.write(encode_batch([]))
                    continue
                self.batches += 1
                try:
                    responses = await asyncio.to_thread(respond_batch, batch, self.backend)
                except StageError as exc:
                    log.warning("rejecting batch: %s", exc)
                    # response-stage inputs never yield another response
                    responses = [e.advance(Stage.RESPONSE, "", error=str(exc)) for e in batch if e.stage is not Stage.RESPONSE]
                    if not responses:
                        continue
                writer.write(encode(responses[0]) if single else encode_batch(responses))
                await writer.drain()
        except (ProtocolError, asyncio.IncompleteReadError) as exc:
            log.warning("dropping connection after bad frame: %s", exc)
        except ConnectionError:
            pass
        finally:
            writer.close()
