import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from llmsynergy.config import Config
from llmsynergy.model_backend import (
    INTENT_PREFIX,
    EchoBackend,
    GenerationRequest,
    GenerationResult,
    HttpBackend,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayMiss,
    TransportError,
    build_completion_prompt,
    coverage,
    keywords,
    make_backend,
    parse_completion_prompt,
    select_facts,
)

FACTS = (
    "The city library holds rare collections.",
    "Parks near the lake host tai chi at dawn.",
    "Night markets open after seven.",
)


class TestRequestTypes:
    def test_validation(self):
        with pytest.raises(ValueError):
            GenerationRequest("")
        with pytest.raises(ValueError):
            GenerationRequest("x", max_new_tokens=0)
        with pytest.raises(ValueError):
            GenerationResult("x", confidence=1.5)


class TestPromptTemplate:
    def test_round_trip(self):
        prompt = build_completion_prompt("best libraries", FACTS, 1, "Hangzhou")
        assert parse_completion_prompt(prompt) == ("best libraries", list(FACTS), 1, "Hangzhou")

    def test_other_text_not_parsed(self):
        assert parse_completion_prompt("hello") is None

    def test_keywords_stem(self):
        assert keywords("The libraries are open") == {"library", "open"}

    def test_select_by_overlap(self):
        assert select_facts("best libraries", FACTS, 1) == [FACTS[0]]
        assert select_facts("weather", FACTS, 2) == []

    def test_coverage(self):
        assert coverage("best libraries", [FACTS[0]]) == 0.5
        assert coverage("", FACTS) == 0.0


class TestMock:
    def test_completion(self):
        res = MockBackend().generate(GenerationRequest(build_completion_prompt("night market", FACTS, 1)))
        assert res.text == f"night market. {FACTS[2]} {INTENT_PREFIX} night market."
        assert res.confidence == 1.0

    def test_response_confidence_excludes_intent_clause(self):
        text = f"night market. {FACTS[2]} {INTENT_PREFIX} night market."
        assert MockBackend().generate(GenerationRequest(text)).confidence == 1.0
        assert MockBackend().generate(GenerationRequest(f"quiet parks. {INTENT_PREFIX} quiet parks.")).confidence == 0.0

    def test_deterministic_with_temperature(self):
        req = GenerationRequest("tell me more", temperature=0.7)
        assert MockBackend(1).generate(req).text == MockBackend(1).generate(req).text

    def test_echo(self):
        assert EchoBackend().generate(GenerationRequest("hi")).text == "hi"


class TestReplay:
    def test_record_and_load(self, tmp_path):
        path = tmp_path / "replay.jsonl"
        ReplayBackend.record(MockBackend(), ["Hello there", "night market"], path)
        replay = ReplayBackend.load(path)
        assert len(replay) == 2
        assert replay.generate(GenerationRequest("hello  THERE!")).text == MockBackend().generate(GenerationRequest("Hello there")).text

    def test_miss(self):
        with pytest.raises(ReplayMiss):
            ReplayBackend({}).generate(GenerationRequest("x"))

    def test_bad_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"prompt": "a"}\n')
        with pytest.raises(ValueError, match="bad.jsonl:1"):
            ReplayBackend.load(path)

    def test_recording_wrapper(self, tmp_path):
        rec = RecordingBackend(MockBackend())
        out = rec.generate(GenerationRequest("abc"))
        rec.dump(tmp_path / "r.jsonl")
        assert ReplayBackend.load(tmp_path / "r.jsonl").generate(GenerationRequest("abc")) == GenerationResult(out.text, out.confidence, 0.0)


class _Stub(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if body["prompt"] == "garbage":
            payload = b"not json"
        else:
            payload = json.dumps({"choices": [{"text": body["prompt"].upper()}], "score": 0.75}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    srv = HTTPServer(("127.0.0.1", 0), _Stub)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/v1/completions"
    srv.shutdown()


class TestHttp:
    def test_round_trip(self, stub_server):
        be = HttpBackend(stub_server, '{"prompt": "{prompt}", "n": 1}', "choices.0.text", "score")
        res = be.generate(GenerationRequest("hi"))
        assert res.text == "HI" and res.confidence == 0.75

    def test_garbage_reply(self, stub_server):
        with pytest.raises(TransportError):
            HttpBackend(stub_server).generate(GenerationRequest("garbage"))

    def test_wrong_path(self, stub_server):
        with pytest.raises(TransportError, match="response shape"):
            HttpBackend(stub_server, response_path="missing").generate(GenerationRequest("hi"))

    def test_dead_endpoint(self):
        with pytest.raises(TransportError):
            HttpBackend("http://127.0.0.1:1/x", timeout_s=1).generate(GenerationRequest("hi"))

    def test_from_config(self, stub_server):
        cfg = Config.load(env={"LLMSYNERGY_BACKEND__HTTP__ENDPOINT": stub_server})
        assert make_backend("http", cfg).generate(GenerationRequest("ok")).text == "OK"


class TestFactory:
    def test_names(self):
        assert isinstance(make_backend("mock"), MockBackend)
        with pytest.raises(ValueError):
            make_backend("gpt")
        with pytest.raises(ValueError):
            make_backend("replay", Config.load(env={}))
