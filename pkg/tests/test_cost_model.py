import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from llmsynergy.config import Config
from llmsynergy.cost_model import (
    GB,
    MB,
    AdaptedMatrix,
    DatumSize,
    DeploymentSpec,
    Framework,
    LinkSpec,
    LoraConfig,
    ModelShape,
    SpecError,
    cost_report,
    framework_cost,
    full_finetune_storage,
    lora_adapter_bytes,
    lora_adapter_params,
    parse_matrices,
    split_ratio,
    transmission_latency,
)

GBPS = LinkSpec(1e9)


@pytest.fixture(scope="module")
def cfg():
    return Config.load(env={})


class TestSplitRatio:
    def test_bits_reading(self):
        assert round(split_ratio(4096, (32, "bits"), 12), 2) == 10922.67

    def test_bytes_reading(self):
        assert round(split_ratio(4096, DatumSize(4, "bytes"), 12), 2) == 1365.33

    def test_rejects_nonpositive(self):
        with pytest.raises(SpecError):
            split_ratio(0, (32, "bits"), 12)
        with pytest.raises(SpecError):
            split_ratio(4096, (32, "bits"), 0)

    @given(st.integers(1, 1 << 16), st.integers(1, 64), st.integers(1, 10_000))
    def test_matches_rational_oracle(self, h, d, b):
        assert split_ratio(h, (d, "bits"), b) == pytest.approx(float(Fraction(h * d, b)), rel=1e-12)


class TestTransmissionLatency:
    def test_concise_workload(self):
        assert transmission_latency(10_000, 12, GBPS) == pytest.approx(0.96e-3, abs=1e-15)

    def test_comprehensive_workload(self):
        assert transmission_latency(10_000, 95, GBPS) == pytest.approx(7.6e-3, abs=1e-15)

    def test_zero_requests(self):
        assert transmission_latency(0, 95, LinkSpec(1e9, 0.5), shared_connection=False) == 0.0

    def test_handshake_per_connection(self):
        link = LinkSpec(1e9, 0.01)
        assert transmission_latency(10, 0, link, shared_connection=False) == pytest.approx(0.1)
        assert transmission_latency(10, 0, link, shared_connection=True) == pytest.approx(0.01)

    def test_bad_link(self):
        with pytest.raises(SpecError):
            LinkSpec(0)

    @given(st.integers(0, 10**6), st.integers(0, 10**5), st.integers(1, 10**10))
    def test_linear_in_bytes(self, n, size, rate):
        got = transmission_latency(n, size, LinkSpec(rate))
        assert got == pytest.approx(n * size * 8 / rate, rel=1e-12, abs=1e-300)


class TestLora:
    def test_default_adapter_size(self, cfg):
        llama = cfg.model("llama-7b")
        n = lora_adapter_params(llama, cfg.lora())
        assert n == 32 * 4 * 8 * (4096 + 4096)
        assert lora_adapter_bytes(llama, cfg.lora()) == 32 * MB

    def test_adapter_size_brackets_reference_figure(self, cfg):
        size = lora_adapter_bytes(cfg.model("llama-7b"), cfg.lora())
        assert 16 * MB <= size <= 80 * MB

    def test_rank_must_be_small(self):
        shape = ModelShape("tiny", 1000, 2, 16, 2, (AdaptedMatrix(16, 16, 1),))
        with pytest.raises(SpecError, match="rank 4 too large"):
            lora_adapter_params(shape, LoraConfig(4))
        assert lora_adapter_params(shape, LoraConfig(3)) == 2 * 3 * 32

    def test_rank_positive(self):
        with pytest.raises(SpecError):
            LoraConfig(0)

    @given(st.integers(1, 16), st.integers(1, 8), st.integers(1, 48))
    def test_linear_in_rank(self, r, inst, layers):
        shape = ModelShape("m", 10**9, layers, 4096, 2, (AdaptedMatrix(4096, 1024, inst),))
        assert lora_adapter_params(shape, LoraConfig(r)) == r * lora_adapter_params(shape, LoraConfig(1))

    def test_parse_matrices(self):
        assert parse_matrices("4096x4096x4, 4096x11008") == (AdaptedMatrix(4096, 4096, 4), AdaptedMatrix(4096, 11008, 1))
        with pytest.raises(SpecError):
            parse_matrices("4096")


class TestStorageAndVram:
    def test_full_model_storage(self, cfg):
        assert full_finetune_storage(cfg.model("llama-7b")) / GB == pytest.approx(12.55, rel=0.10)

    def test_vram_figures(self, cfg):
        report = cost_report(cfg.deployments(), cfg.cost_links(), 10_000)
        llama = cfg.model("llama-7b")
        assert llama.storage_bytes * cfg.vram().full_finetune / GB == pytest.approx(112.0, abs=0.005)
        assert report.row("offload").edge_finetune_vram / GB == pytest.approx(28.0, abs=0.005)
        assert report.row("synergy").edge_inference_vram / GB == pytest.approx(1.65, abs=0.005)


class TestFrameworkCost:
    def test_synergy_bytes(self, cfg):
        report = cost_report(cfg.deployments(), cfg.cost_links(), 10_000)
        assert report.row("synergy").bytes_transferred_per_request == 31
        assert report.row("cloud-only").bytes_transferred_per_request == 12

    def test_cloud_only_has_no_edge_footprint(self, cfg):
        row = cost_report(cfg.deployments(["cloud-only"]), cfg.cost_links(), 10).row("cloud-only")
        assert (row.edge_storage, row.edge_finetune_vram, row.edge_inference_vram) == (0, 0, 0)

    def test_splitting_is_fraction_of_offload(self, cfg):
        report = cost_report(cfg.deployments(), cfg.cost_links(), 10_000)
        off, spl = report.row("offload"), report.row("splitting")
        assert spl.edge_storage == pytest.approx(0.25 * off.edge_storage)
        assert spl.bytes_transferred_per_request == 12 + 4096 * 32

    def test_missing_models_named(self):
        with pytest.raises(SpecError, match="requires cloud_model"):
            DeploymentSpec(Framework.OFFLOAD)
        with pytest.raises(SpecError, match="requires edge_model"):
            DeploymentSpec(Framework.SYNERGY, cloud_model=ModelShape("c", 10, 1, 8, 2))

    def test_cloud_only_edge_model_rejected(self):
        m = ModelShape("m", 10, 1, 8, 2)
        with pytest.raises(SpecError):
            DeploymentSpec(Framework.CLOUD_ONLY, edge_model=m, cloud_model=m)

    def test_zero_workload(self, cfg):
        rows = cost_report(cfg.deployments(), cfg.cost_links(), 0).rows
        assert all(r.transmission_latency_s == 0 for r in rows)

    def test_framework_parse(self):
        assert Framework.parse("cloud_only") is Framework.CLOUD_ONLY
        with pytest.raises(SpecError):
            Framework.parse("fog")


class TestReport:
    def test_text_mentions_d(self, cfg):
        text = cost_report(cfg.deployments(), cfg.cost_links(), 10_000).to_text()
        assert "10922.67 (~10,922)" in text

    def test_json_round(self, cfg):
        data = json.loads(cost_report(cfg.deployments(), cfg.cost_links(), 10_000).to_json())
        assert set(data["frameworks"]) == {"cloud-only", "offload", "splitting", "synergy"}
        assert math.isclose(data["split_ratio_D"], 4096 * 32 / 12)

    def test_single_row(self, cfg):
        rep = cost_report(cfg.deployments(["offload"]), cfg.cost_links(), 10)
        assert [r.framework for r in rep.rows] == [Framework.OFFLOAD]
        with pytest.raises(KeyError):
            rep.row("synergy")

    def test_framework_cost_direct(self, cfg):
        spec = cfg.deployments(["synergy"])[0]
        row = framework_cost(spec, (GBPS, GBPS), 10_000)
        assert row.transmission_latency_s == pytest.approx(0.96e-3 + 10_000 * 19 * 8 / 1e9)
