import json
import re
import subprocess
import sys
import time

import pytest

from llmsynergy.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_TRANSPORT, main


def run(*argv) -> int:
    return main([str(a) for a in argv])


class TestCost:
    def test_full_report(self, tmp_path, capsys):
        assert run("cost", "--out", tmp_path) == EXIT_OK
        assert "(~10,922)" in (tmp_path / "cost_report.txt").read_text()
        data = json.loads((tmp_path / "cost_report.json").read_text())
        assert data["frameworks"]["synergy"]["bytes_transferred_per_request"] == 31
        assert "synergy" in capsys.readouterr().out

    def test_single_framework(self, tmp_path):
        assert run("cost", "--framework", "offload", "--out", tmp_path) == EXIT_OK
        assert list(json.loads((tmp_path / "cost_report.json").read_text())["frameworks"]) == ["offload"]

    def test_missing_config(self, tmp_path, capsys):
        assert run("cost", "--config", tmp_path / "missing.conf", "--out", tmp_path) == EXIT_CONFIG
        assert "missing.conf" in capsys.readouterr().err

    def test_bad_key_named(self, tmp_path, capsys):
        conf = tmp_path / "bad.conf"
        conf.write_text("[workload]\nn_requests = lots\n")
        assert run("cost", "--config", conf, "--out", tmp_path) == EXIT_CONFIG
        assert "workload.n_requests" in capsys.readouterr().err

    def test_unknown_framework(self, tmp_path):
        assert run("cost", "--framework", "fog", "--out", tmp_path) == EXIT_CONFIG


class TestSimulate:
    def test_calibrated_figures(self, tmp_path):
        for fw, target in (("cloud-only", 20.19), ("synergy", 3.35)):
            assert run("simulate", "--framework", fw, "--n", 100, "--out", tmp_path) == EXIT_OK
            summary = json.loads((tmp_path / f"sim_{fw}_summary.json").read_text())
            assert summary["end_to_end_s"] == pytest.approx(target, rel=0.01)

    def test_same_seed_identical_traces(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("simulate", "--n", 50, "--seed", 7, "--duplicates", 0.3, "--out", out) == EXIT_OK
        for name in ("sim_synergy.log", "sim_cloud-only.log", "sim_comparison.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LLMSYNERGY_SIMULATION__N_REQUESTS", "10")
        assert run("simulate", "--framework", "offload", "--out", tmp_path) == EXIT_OK
        assert json.loads((tmp_path / "sim_offload_summary.json").read_text())["n_requests"] == 10


class TestNetmgmt:
    def test_popularity_defaults(self, tmp_path):
        argv = ["popularity", "--interval-hours", 6, "--top", 20, "--split", 0.95, "--out", tmp_path]
        assert run(*argv) == EXIT_OK
        report = json.loads((tmp_path / "popularity_report.json").read_text())
        assert 0.0 <= report["accuracy"] <= 1.0
        assert all(0.0 <= v <= 1.0 for v in report["per_title"].values())

    def test_popularity_bad_csv(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("when,what\n1,a\n")
        assert run("popularity", "--csv", bad, "--out", tmp_path) == EXIT_DATA

    def test_intent_golden(self, tmp_path):
        assert run("intent", "--extractor", "rules", "--out", tmp_path) == EXIT_OK
        rows = [json.loads(line) for line in (tmp_path / "intent_predictions.jsonl").read_text().splitlines()]
        first = rows[0]
        assert "10 Gbps connection from Access 1 to Cloud 2" in first["utterance"]
        assert first["predicted"] == first["gold"]
        assert json.loads((tmp_path / "intent_report.json").read_text())["exact_match"] >= 0.95

    def test_intent_missing_dataset(self, tmp_path):
        assert run("intent", "--dataset", tmp_path / "none.tsv", "--out", tmp_path) == EXIT_DATA

    def test_corpus(self, tmp_path, capsys):
        assert run("corpus", "--n", 50, "--out", tmp_path) == EXIT_OK
        assert len((tmp_path / "edge_corpus.jsonl").read_text().splitlines()) == 50


class TestClient:
    def test_dead_edge(self, tmp_path):
        prompts = tmp_path / "p.txt"
        prompts.write_text("hello\n")
        assert run("client", "--send", prompts, "--edge", "127.0.0.1:1", "--metrics", "", "--out", tmp_path) == EXIT_TRANSPORT

    def test_empty_prompt_file(self, tmp_path):
        prompts = tmp_path / "p.txt"
        prompts.write_text("# nothing\n")
        assert run("client", "--send", prompts, "--out", tmp_path) == EXIT_DATA


def _start(argv, pattern):
    proc = subprocess.Popen(
        [sys.executable, "-m", "llmsynergy.cli", *argv], stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True
    )
    lines = []
    deadline = time.time() + 15
    while time.time() < deadline:
        line = proc.stdout.readline()
        lines.append(line)
        m = re.search(pattern, line)
        if m:
            return proc, m, lines
    proc.kill()
    raise AssertionError(f"service did not start: {lines}")


class TestServeLoopback:
    def test_three_prompts_and_dedup_metrics(self, tmp_path):
        procs = []
        try:
            cloud, m, _ = _start(["serve", "cloud", "--listen", "127.0.0.1:0", "--out", tmp_path], r"listening on (\S+)")
            procs.append(cloud)
            cloud_addr = m.group(1)
            edge, m, lines = _start(
                ["serve", "edge", "--listen", "127.0.0.1:0", "--cloud", cloud_addr, "--out", tmp_path],
                r"listening on (\S+)",
            )
            procs.append(edge)
            edge_addr = m.group(1)
            metrics_line = edge.stdout.readline()
            metrics_addr = re.search(r"http://(\S+)/metrics", metrics_line).group(1)

            prompts = tmp_path / "prompts.txt"
            prompts.write_text("bs-hz-01\tbest libraries\nbs-hz-01\tbest libraries\nbs-sh-02\tlive music\n")
            code = run("client", "--send", prompts, "--edge", edge_addr, "--metrics", metrics_addr, "--out", tmp_path)
            assert code == EXIT_OK
            responses = [json.loads(x) for x in (tmp_path / "client_responses.jsonl").read_text().splitlines()]
            assert len(responses) == 3 and all(r["stage"] == "response" for r in responses)
            metrics = (tmp_path / "edge_metrics.txt").read_text()
            hits = float(re.search(r"edge_dedup_hits (\S+)", metrics).group(1))
            assert hits >= 1
        finally:
            for p in procs:
                p.terminate()
                p.wait(timeout=10)
