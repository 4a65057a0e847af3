"""Cloud-edge LLM serving: cost model, latency simulator, edge/cloud services and netmgmt harnesses."""

from .cost_model import Framework, cost_report, framework_cost, split_ratio, transmission_latency
from .latency_sim import SimParams, simulate, summarize
from .protocol import PromptEnvelope, Stage, decode, encode

__version__ = "0.1.0"

__all__ = [
    "Framework",
    "PromptEnvelope",
    "SimParams",
    "Stage",
    "cost_report",
    "decode",
    "encode",
    "framework_cost",
    "simulate",
    "split_ratio",
    "summarize",
    "transmission_latency",
]
