import asyncio
import random
import struct
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from golden_frames import GOLDEN, hexdump
from llmsynergy.protocol import (
    MAX_FRAME,
    FrameDecoder,
    FrameTooLarge,
    NeedMoreBytes,
    PromptEnvelope,
    ProtocolError,
    Stage,
    StageError,
    WorkflowGraph,
    canonical_workflow,
    decode,
    decode_frame,
    dedup_key,
    encode,
    encode_batch,
    normalize_for_dedup,
    read_message,
    validate_workflow,
)

ROOT = Path(__file__).resolve().parent.parent
ALPHABET = "abc XYZ\t\n.,!?;:é中文🙂-'\"\\ 。"


def random_text(rng: random.Random, lo: int = 0, hi: int = 40) -> str:
    return "".join(rng.choice(ALPHABET) for _ in range(rng.randint(lo, hi)))


def random_envelope(rng: random.Random) -> PromptEnvelope:
    stage = rng.choice(list(Stage))
    text = random_text(rng, 0 if stage is Stage.RESPONSE else 1)
    return PromptEnvelope(
        request_id=f"r{rng.randrange(10**9)}",
        stage=stage,
        text=text,
        origin_bs_id=rng.choice(["", "bs-hz-01", "基站-7"]),
        terminated_at_edge=stage is Stage.RESPONSE and rng.random() < 0.5,
        created_unix_ms=rng.randrange(0, 1 << 53),
        error=rng.choice(["", "cloud unavailable"]),
    )


def sample_envelopes(n: int, seed: int = 0) -> list[PromptEnvelope]:
    rng = random.Random(seed)
    return [random_envelope(rng) for _ in range(n)]


class TestRoundTrip:
    def test_ten_thousand_envelopes(self):
        envs = sample_envelopes(10_000)
        assert all(decode(encode(e)) == e for e in envs)

    def test_batch(self):
        envs = sample_envelopes(25, seed=1)
        msg, end = decode_frame(encode_batch(envs))
        assert msg == envs and end == len(encode_batch(envs))

    def test_stream_split_anywhere(self):
        envs = sample_envelopes(50, seed=2)
        stream = b"".join(encode(e) for e in envs)
        rng = random.Random(3)
        dec, got, pos = FrameDecoder(), [], 0
        while pos < len(stream):
            step = rng.randint(1, 60)
            got += dec.feed(stream[pos : pos + step])
            pos += step
        assert got == envs and dec.pending == 0

    def test_stream_reader(self):
        envs = sample_envelopes(5, seed=4)

        async def run():
            reader = asyncio.StreamReader()
            reader.feed_data(b"".join(encode(e) for e in envs))
            reader.feed_eof()
            out = []
            while (msg := await read_message(reader)) is not None:
                out.append(msg)
            return out

        assert asyncio.run(run()) == envs


class TestGoldenFrames:
    @pytest.mark.parametrize("name", sorted(GOLDEN))
    def test_byte_stable(self, name):
        expected = (ROOT / "tests" / "golden" / f"{name}.hex").read_text()
        assert hexdump(encode(GOLDEN[name])) == expected

    @pytest.mark.parametrize("name", sorted(GOLDEN))
    def test_documented(self, name):
        assert hexdump(encode(GOLDEN[name])) in (ROOT / "PROTOCOL.md").read_text()


class TestErrors:
    def test_short_header(self):
        with pytest.raises(NeedMoreBytes) as err:
            decode_frame(b"\x00\x00")
        assert err.value.needed == 2

    def test_short_body(self):
        frame = encode(GOLDEN["concise"])
        with pytest.raises(NeedMoreBytes) as err:
            decode_frame(frame[:-5])
        assert err.value.needed == 5

    def test_oversize(self):
        with pytest.raises(FrameTooLarge):
            decode_frame(struct.pack(">I", MAX_FRAME + 1))
        big = PromptEnvelope.concise("r", "x" * (MAX_FRAME + 1), created_unix_ms=0)
        with pytest.raises(FrameTooLarge):
            encode(big)

    def test_malformed_json_offset(self):
        body = b'{"request_id":'
        with pytest.raises(ProtocolError) as err:
            decode(struct.pack(">I", len(body)) + body)
        assert err.value.offset == 4 + len(body)

    def test_bad_utf8_offset(self):
        body = b'{"a":"\xff"}'
        with pytest.raises(ProtocolError) as err:
            decode(struct.pack(">I", len(body)) + body)
        assert err.value.offset == 4 + 6

    def test_field_order_enforced(self):
        obj = GOLDEN["concise"].to_obj()
        swapped = dict(reversed(list(obj.items())))
        with pytest.raises(ValueError):
            PromptEnvelope.from_obj(swapped)

    def test_trailing_bytes(self):
        with pytest.raises(ProtocolError, match="trailing"):
            decode(encode(GOLDEN["concise"]) + b"\x00")

    def test_wrong_dedup_key(self):
        with pytest.raises(ValueError):
            PromptEnvelope("r", Stage.CONCISE, "hi", dedup_key=5)

    def test_empty_concise_rejected(self):
        with pytest.raises(ValueError):
            PromptEnvelope.concise("r", "")


class TestStages:
    def test_allowed(self):
        c = GOLDEN["concise"]
        assert c.advance(Stage.COMPREHENSIVE, "x").stage is Stage.COMPREHENSIVE
        assert c.advance(Stage.RESPONSE, "x", terminated_at_edge=True).terminated_at_edge

    @pytest.mark.parametrize("src,dst", [("response", "concise"), ("comprehensive", "concise"), ("response", "comprehensive")])
    def test_illegal(self, src, dst):
        env = PromptEnvelope("r", Stage(src), "x")
        with pytest.raises(StageError):
            env.advance(Stage(dst), "y")

    def test_advance_keeps_identity(self):
        c, r = GOLDEN["concise"], GOLDEN["response"]
        assert (r.request_id, r.origin_bs_id, r.created_unix_ms) == (c.request_id, c.origin_bs_id, c.created_unix_ms)
        assert r.dedup_key == dedup_key(r.text)


class TestNormalization:
    def test_idempotent_on_random_strings(self):
        rng = random.Random(7)
        for _ in range(10_000):
            s = random_text(rng, 0, 30)
            once = normalize_for_dedup(s)
            assert normalize_for_dedup(once) == once

    @given(st.text())
    def test_idempotent_hypothesis(self, s):
        assert normalize_for_dedup(normalize_for_dedup(s)) == normalize_for_dedup(s)

    def test_examples(self):
        assert normalize_for_dedup("  Best   Libraries?! ") == "best libraries"
        assert dedup_key("best libraries") == dedup_key("BEST libraries.")
        assert dedup_key("best libraries") != dedup_key("best library")


class TestWorkflow:
    def test_canonical_ok(self):
        assert validate_workflow(canonical_workflow()) == []

    def test_parse_dag(self):
        g = WorkflowGraph.parse("edge:enhance -> cloud:generate; edge:enhance -> edge:log")
        assert validate_workflow(g) == []

    def test_cycle(self):
        g = WorkflowGraph.parse("edge:a -> edge:b -> edge:a")
        assert any(p.startswith("cycle") for p in validate_workflow(g))

    def test_cloud_before_edge(self):
        g = WorkflowGraph.parse("cloud:generate -> edge:enhance")
        assert "cloud precedes edge: generate" in validate_workflow(g)

    def test_unknown_node(self):
        g = WorkflowGraph(canonical_workflow().nodes, [("enhance", "ghost")])
        assert "unknown node: ghost" in validate_workflow(g)
