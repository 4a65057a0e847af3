"""Analytical resource and transmission cost of the four cloud-edge frameworks.

Every function here is pure. Sizes are in bytes, rates in bits per second and
times in seconds. Human-readable reports use binary units (1 GB = 2**30 bytes),
which is the convention under which the reference storage figures line up.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

GB = 2**30
MB = 2**20


class SpecError(ValueError):
    """A cost-model input violates its invariants."""


class Framework(str, enum.Enum):
    CLOUD_ONLY = "cloud-only"
    OFFLOAD = "offload"
    SPLITTING = "splitting"
    SYNERGY = "synergy"

    @classmethod
    def parse(cls, value: "str | Framework") -> "Framework":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"cloudonly": "cloud-only", "cloud": "cloud-only", "split": "splitting"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise SpecError(f"unknown framework kind {value!r}") from None


# Report row order, also used by the simulator comparison table.
FRAMEWORK_ORDER = (Framework.CLOUD_ONLY, Framework.OFFLOAD, Framework.SPLITTING, Framework.SYNERGY)


@dataclass(frozen=True)
class AdaptedMatrix:
    d_in: int
    d_out: int
    instances_per_layer: int = 1


@dataclass(frozen=True)
class ModelShape:
    name: str
    total_params: int
    num_layers: int
    hidden_dim: int
    bytes_per_param: int
    applies_lora_to: tuple[AdaptedMatrix, ...] = ()

    def __post_init__(self):
        if self.total_params <= 0:
            raise SpecError(f"{self.name}: total_params must be > 0")
        if self.num_layers <= 0:
            raise SpecError(f"{self.name}: num_layers must be > 0")
        if self.hidden_dim <= 0:
            raise SpecError(f"{self.name}: hidden_dim must be > 0")
        if self.bytes_per_param not in (1, 2, 4, 8):
            raise SpecError(f"{self.name}: bytes_per_param must be one of 1, 2, 4, 8")
        object.__setattr__(
            self,
            "applies_lora_to",
            tuple(m if isinstance(m, AdaptedMatrix) else AdaptedMatrix(*m) for m in self.applies_lora_to),
        )

    @property
    def storage_bytes(self) -> int:
        return self.total_params * self.bytes_per_param


@dataclass(frozen=True)
class LoraConfig:
    rank: int
    scale_factor: float = 16.0
    adapter_bytes_per_param: int = 4

    def __post_init__(self):
        if self.rank < 1:
            raise SpecError("LoRA rank must be >= 1")

    def check(self, matrix: AdaptedMatrix) -> None:
        # r << min(d_in, d_out), made concrete as r < min/4
        if 4 * self.rank >= min(matrix.d_in, matrix.d_out):
            raise SpecError(
                f"rank {self.rank} too large for adapted matrix {matrix.d_in}x{matrix.d_out} "
                f"(needs rank < {min(matrix.d_in, matrix.d_out) / 4:g})"
            )


@dataclass(frozen=True)
class LinkSpec:
    rate_bits_per_s: float
    per_request_handshake_s: float = 0.0

    def __post_init__(self):
        if not self.rate_bits_per_s > 0:
            raise SpecError("rate_bits_per_s must be > 0")
        if self.per_request_handshake_s < 0:
            raise SpecError("per_request_handshake_s must be >= 0")


@dataclass(frozen=True)
class DatumSize:
    value: int
    unit: str = "bits"

    def __post_init__(self):
        if self.unit not in ("bits", "bytes"):
            raise SpecError(f"datum unit must be 'bits' or 'bytes', got {self.unit!r}")
        if self.value <= 0:
            raise SpecError("datum size must be > 0")


@dataclass(frozen=True)
class VramFactors:
    """Multipliers applied to raw weight bytes to estimate GPU memory."""

    inference: float = 1.0
    full_finetune: float = 1.0
    lora_finetune: float = 1.0


@dataclass(frozen=True)
class DeploymentSpec:
    kind: Framework
    edge_model: ModelShape | None = None
    cloud_model: ModelShape | None = None
    split_fraction: float = 0.0
    dedup_forward_fraction: float = 1.0
    concise_bytes: float = 12
    comprehensive_bytes: float = 95
    datum_size: DatumSize = DatumSize(32, "bits")
    lora: LoraConfig | None = None
    vram: VramFactors = field(default_factory=VramFactors)

    def __post_init__(self):
        object.__setattr__(self, "kind", Framework.parse(self.kind))
        self.validate()

    def validate(self) -> None:
        kind = self.kind
        if not 0.0 <= self.dedup_forward_fraction <= 1.0:
            raise SpecError("dedup_forward_fraction must lie in [0, 1]")
        if not 0.0 <= self.split_fraction <= 1.0:
            raise SpecError("split_fraction must lie in [0, 1]")
        if self.concise_bytes < 0 or self.comprehensive_bytes < 0:
            raise SpecError("prompt sizes must be >= 0")
        if kind is Framework.CLOUD_ONLY and self.edge_model is not None:
            raise SpecError("cloud-only deployment must not set edge_model")
        if kind in (Framework.OFFLOAD, Framework.SPLITTING) and self.cloud_model is None:
            raise SpecError(f"{kind.value} deployment requires cloud_model")
        if kind is Framework.SPLITTING and not 0.0 < self.split_fraction < 1.0:
            raise SpecError("splitting deployment requires 0 < split_fraction < 1")
        if kind is Framework.SYNERGY:
            if self.edge_model is None:
                raise SpecError("synergy deployment requires edge_model")
            if self.cloud_model is None:
                raise SpecError("synergy deployment requires cloud_model")


@dataclass(frozen=True)
class FrameworkCost:
    framework: Framework
    edge_storage: float
    edge_finetune_vram: float
    edge_inference_vram: float
    transmission_latency_s: float
    bytes_transferred_per_request: float


@dataclass
class CostReport:
    rows: list[FrameworkCost]
    workload_n: int
    split_ratio: float | None = None

    def row(self, framework: "Framework | str") -> FrameworkCost:
        fw = Framework.parse(framework)
        for r in self.rows:
            if r.framework is fw:
                return r
        raise KeyError(fw.value)

    def to_dict(self) -> dict:
        out: dict = {"workload_n": self.workload_n, "split_ratio_D": self.split_ratio, "frameworks": {}}
        for r in self.rows:
            d = asdict(r)
            d.pop("framework")
            out["frameworks"][r.framework.value] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        header = (
            f"{'framework':<12} {'edge storage (GB)':>18} {'edge fine-tune VRAM (GB)':>25} "
            f"{'edge inference VRAM (GB)':>25} {'transmission (ms)':>18} {'bytes/request':>14}"
        )
        lines = [f"workload: {self.workload_n} requests", header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.framework.value:<12} {r.edge_storage / GB:>18.2f} {r.edge_finetune_vram / GB:>25.2f} "
                f"{r.edge_inference_vram / GB:>25.2f} {r.transmission_latency_s * 1e3:>18.2f} "
                f"{r.bytes_transferred_per_request:>14.2f}"
            )
        if self.split_ratio is not None:
            lines.append(f"D ratio (splitting): {self.split_ratio:.2f} (~{math.floor(self.split_ratio):,})")
        return "\n".join(lines) + "\n"


def lora_adapter_params(shape: ModelShape, cfg: LoraConfig) -> int:
    """Trainable parameters added by rank-``cfg.rank`` adapters on every adapted matrix.

    Each adapted d_in x d_out matrix gets A (d_in x r) and B (r x d_out).
    """
    total = 0
    for m in shape.applies_lora_to:
        cfg.check(m)
        total += shape.num_layers * m.instances_per_layer * cfg.rank * (m.d_in + m.d_out)
    return total


def lora_adapter_bytes(shape: ModelShape, cfg: LoraConfig) -> int:
    return lora_adapter_params(shape, cfg) * cfg.adapter_bytes_per_param


def full_finetune_storage(shape: ModelShape) -> int:
    return shape.storage_bytes


def _datum_bits(datum: DatumSize) -> int:
    return datum.value if datum.unit == "bits" else datum.value * 8


def split_ratio(hidden_dim: int, datum_size: DatumSize | tuple[int, str], avg_input_bytes: float) -> float:
    """Intermediate-activation volume relative to the input size.

    ``hidden_dim * datum_size / avg_input_bytes`` with the datum size taken in
    its own unit: ``(4096, 32 bits, 12)`` gives 10,922.67 while
    ``(4096, 4 bytes, 12)`` gives 1,365.33.
    """
    if not isinstance(datum_size, DatumSize):
        datum_size = DatumSize(*datum_size)
    if hidden_dim <= 0 or avg_input_bytes <= 0:
        raise SpecError("split_ratio inputs must be > 0")
    return hidden_dim * datum_size.value / avg_input_bytes


def splitting_payload_bytes(hidden_dim: int, datum_size: DatumSize) -> int:
    """Bytes shipped edge->cloud per request under splitting (``D * avg_input``).

    Computed without the division so the simulator and the cost model agree
    to the byte.
    """
    return hidden_dim * datum_size.value


def transmission_latency(
    n_requests: int, payload_bytes: float, link: LinkSpec, shared_connection: bool = True
) -> float:
    if n_requests < 0:
        raise SpecError("n_requests must be >= 0")
    if n_requests == 0:
        return 0.0
    handshakes = 1 if shared_connection else n_requests
    return n_requests * payload_bytes * 8 / link.rate_bits_per_s + link.per_request_handshake_s * handshakes


def _inference_vram(shape: ModelShape, vram: VramFactors) -> float:
    return shape.storage_bytes * vram.inference


def _finetune_vram(shape: ModelShape, vram: VramFactors, lora: LoraConfig | None) -> float:
    factor = vram.lora_finetune if lora is not None else vram.full_finetune
    return shape.storage_bytes * factor


def framework_cost(
    spec: DeploymentSpec, links: tuple[LinkSpec, LinkSpec], workload_n: int
) -> FrameworkCost:
    """Edge resources and transmission cost of one deployment for ``workload_n`` requests."""
    spec.validate()
    end_edge, edge_cloud = links
    kind = spec.kind
    concise = spec.concise_bytes

    if kind is Framework.CLOUD_ONLY:
        # one connection per request straight to the cloud
        return FrameworkCost(
            kind, 0.0, 0.0, 0.0,
            transmission_latency(workload_n, concise, edge_cloud, shared_connection=False),
            float(concise),
        )

    uplink = transmission_latency(workload_n, concise, end_edge, shared_connection=False)
    cloud = spec.cloud_model

    if kind is Framework.OFFLOAD:
        return FrameworkCost(
            kind,
            float(cloud.storage_bytes),
            _finetune_vram(cloud, spec.vram, spec.lora),
            _inference_vram(cloud, spec.vram),
            uplink,
            float(concise),
        )

    if kind is Framework.SPLITTING:
        frac = spec.split_fraction
        payload = splitting_payload_bytes(cloud.hidden_dim, spec.datum_size)
        return FrameworkCost(
            kind,
            frac * cloud.storage_bytes,
            frac * _finetune_vram(cloud, spec.vram, spec.lora),
            frac * _inference_vram(cloud, spec.vram),
            uplink + transmission_latency(workload_n, payload, edge_cloud, shared_connection=True),
            float(concise + payload),
        )

    # synergy: the small edge model is fine-tuned directly, forwarding is deduplicated
    edge = spec.edge_model
    forwarded = spec.comprehensive_bytes * spec.dedup_forward_fraction
    return FrameworkCost(
        kind,
        float(edge.storage_bytes),
        _finetune_vram(edge, spec.vram, None),
        _inference_vram(edge, spec.vram),
        uplink + transmission_latency(workload_n, forwarded, edge_cloud, shared_connection=True),
        concise + forwarded,
    )


def cost_report(
    specs: Iterable[DeploymentSpec], links: tuple[LinkSpec, LinkSpec], workload_n: int
) -> CostReport:
    specs = sorted(specs, key=lambda s: FRAMEWORK_ORDER.index(s.kind))
    rows = [framework_cost(s, links, workload_n) for s in specs]
    ratio = None
    for s in specs:
        if s.cloud_model is not None:
            ratio = split_ratio(s.cloud_model.hidden_dim, s.datum_size, s.concise_bytes)
            break
    return CostReport(rows=rows, workload_n=workload_n, split_ratio=ratio)


def parse_matrices(text: str) -> tuple[AdaptedMatrix, ...]:
    """Parse ``"4096x4096x4, 4096x11008x2"`` (d_in x d_out x instances)."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = [int(p) for p in item.lower().split("x")]
        if len(parts) == 2:
            parts.append(1)
        if len(parts) != 3:
            raise SpecError(f"bad adapted-matrix entry {item!r}")
        out.append(AdaptedMatrix(*parts))
    return tuple(out)


def deployments_for(
    kinds: Sequence[Framework],
    edge_model: ModelShape,
    cloud_model: ModelShape,
    **common,
) -> list[DeploymentSpec]:
    """One spec per framework sharing models and workload fields."""
    specs = []
    for kind in kinds:
        kw = dict(common)
        if kind is not Framework.SPLITTING:
            kw.pop("split_fraction", None)
        specs.append(
            DeploymentSpec(
                kind=kind,
                edge_model=None if kind is Framework.CLOUD_ONLY else edge_model,
                cloud_model=cloud_model,
                **kw,
            )
        )
    return specs
