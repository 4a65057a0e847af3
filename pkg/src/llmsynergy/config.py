"""Config files: INI-style key/value sections, nested by dotted section names.

Any key can be overridden from the environment as
``LLMSYNERGY_<SECTION>__<KEY>`` where dots and dashes in the section name
become ``__`` and ``_``, e.g. ``LLMSYNERGY_SIMULATION__N_REQUESTS=50``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Mapping

from .cost_model import (
    DatumSize,
    DeploymentSpec,
    Framework,
    LinkSpec,
    LoraConfig,
    ModelShape,
    VramFactors,
    deployments_for,
    parse_matrices,
)

if TYPE_CHECKING:
    from .latency_sim import SimParams

ENV_PREFIX = "LLMSYNERGY_"


class ConfigError(Exception):
    """Missing or malformed configuration; ``key`` names the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def default_config_path() -> Path:
    return Path(str(resources.files("llmsynergy") / "data" / "defaults.paper.conf"))


def _to_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        value = float(text)  # accepts 6.7e9-style counts
        if not value.is_integer():
            raise
        return int(value)


def _env_name(section: str, key: str) -> str:
    sec = section.upper().replace(".", "__").replace("-", "_")
    return f"{ENV_PREFIX}{sec}__{key.upper().replace('-', '_')}"


class Config:
    def __init__(self, parser: configparser.ConfigParser, source: str = "<memory>"):
        self._p = parser
        self.source = source

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, env: Mapping[str, str] | None = None) -> "Config":
        path = Path(path) if path is not None else default_config_path()
        if not path.is_file():
            raise ConfigError(str(path), "config file not found")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(str(path), f"cannot parse: {exc}") from exc
        cfg = cls(parser, str(path))
        cfg.apply_env(os.environ if env is None else env)
        return cfg

    @classmethod
    def from_string(cls, text: str) -> "Config":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.read_string(text)
        return cls(parser)

    def apply_env(self, env: Mapping[str, str]) -> None:
        names = {}
        for section in self._p.sections():
            for key in self._p[section]:
                names[_env_name(section, key)] = (section, key)
        for name, value in env.items():
            if name in names:
                section, key = names[name]
                self._p[section][key] = value

    def has(self, section: str, key: str | None = None) -> bool:
        if not self._p.has_section(section):
            return False
        return key is None or self._p.has_option(section, key)

    def sections(self, prefix: str = "") -> list[str]:
        return [s for s in self._p.sections() if s.startswith(prefix)]

    def get(self, section: str, key: str, default=None) -> str:
        if self._p.has_option(section, key):
            return self._p[section][key]
        if default is not None:
            return default
        raise ConfigError(f"{section}.{key}", "missing")

    def _typed(self, section, key, default, conv, kind):
        raw = self.get(section, key, None if default is None else str(default))
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"expected {kind}, got {raw!r}") from None

    def get_int(self, section: str, key: str, default: int | None = None) -> int:
        return self._typed(section, key, default, _to_int, "integer")

    def get_float(self, section: str, key: str, default: float | None = None) -> float:
        return self._typed(section, key, default, float, "number")

    def get_bool(self, section: str, key: str, default: bool | None = None) -> bool:
        def conv(s: str) -> bool:
            low = s.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)

        return self._typed(section, key, default, conv, "boolean")

    # ---- typed views -------------------------------------------------

    def model(self, name: str) -> ModelShape:
        sec = f"model.{name}"
        if not self.has(sec):
            raise ConfigError(sec, "model section missing")
        try:
            return ModelShape(
                name=self.get(sec, "name", name),
                total_params=self.get_int(sec, "total_params"),
                num_layers=self.get_int(sec, "num_layers"),
                hidden_dim=self.get_int(sec, "hidden_dim"),
                bytes_per_param=self.get_int(sec, "bytes_per_param"),
                applies_lora_to=parse_matrices(self.get(sec, "lora_targets", "")),
            )
        except ValueError as exc:
            raise ConfigError(sec, str(exc)) from exc

    def lora(self) -> LoraConfig:
        return LoraConfig(
            rank=self.get_int("lora", "rank"),
            scale_factor=self.get_float("lora", "scale_factor", 16.0),
            adapter_bytes_per_param=self.get_int("lora", "adapter_bytes_per_param", 4),
        )

    def vram(self) -> VramFactors:
        return VramFactors(
            inference=self.get_float("vram", "inference_overhead"),
            full_finetune=self.get_float("vram", "full_finetune_overhead"),
            lora_finetune=self.get_float("vram", "lora_finetune_overhead"),
        )

    def link(self, section: str) -> LinkSpec:
        return LinkSpec(
            rate_bits_per_s=self.get_float(section, "rate_bits_per_s"),
            per_request_handshake_s=self.get_float(section, "handshake_s", 0.0),
        )

    def cost_links(self) -> tuple[LinkSpec, LinkSpec]:
        return self.link("cost.links.end_edge"), self.link("cost.links.edge_cloud")

    def datum_size(self) -> DatumSize:
        return DatumSize(self.get_int("split", "datum_size"), self.get("split", "datum_unit", "bits"))

    def sim_params(self, **overrides) -> "SimParams":
        from .cost_model import splitting_payload_bytes
        from .latency_sim import SimParams

        sec = "simulation"
        cloud = self.model(self.get("deployment", "cloud_model"))
        kw = dict(
            n_requests=self.get_int(sec, "n_requests"),
            concise_bytes=self.get_int(sec, "concise_bytes"),
            comprehensive_bytes=self.get_int(sec, "comprehensive_bytes"),
            end_edge=self.link("simulation.links.end_edge"),
            edge_cloud=self.link("simulation.links.edge_cloud"),
            cloud_infer_s_per_request=self.get_float(sec, "cloud_infer_s_per_request"),
            edge_infer_s_per_request=self.get_float(sec, "edge_infer_s_per_request"),
            batch_window_s=self.get_float(sec, "batch_window_s"),
            max_batch=self.get_int(sec, "max_batch"),
            cloud_batch_speedup=self.get_float(sec, "cloud_batch_speedup"),
            duplicate_fraction=self.get_float(sec, "duplicate_fraction", 0.0),
            rng_seed=self.get_int(sec, "rng_seed", 0),
            arrival_jitter_s=self.get_float(sec, "arrival_jitter_s", 0.0),
            split_fraction=self.get_float("split", "fraction"),
            split_payload_bytes=splitting_payload_bytes(cloud.hidden_dim, self.datum_size()),
        )
        kw.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return SimParams(**kw)
        except ValueError as exc:
            raise ConfigError(sec, str(exc)) from exc

    def deployments(self, kinds=None) -> list[DeploymentSpec]:
        from .cost_model import FRAMEWORK_ORDER

        kinds = [Framework.parse(k) for k in (kinds or FRAMEWORK_ORDER)]
        try:
            return deployments_for(
                kinds,
                edge_model=self.model(self.get("deployment", "edge_model")),
                cloud_model=self.model(self.get("deployment", "cloud_model")),
                split_fraction=self.get_float("split", "fraction"),
                dedup_forward_fraction=self.get_float("workload", "dedup_forward_fraction"),
                concise_bytes=self.get_float("workload", "concise_bytes"),
                comprehensive_bytes=self.get_float("workload", "comprehensive_bytes"),
                datum_size=self.datum_size(),
                lora=self.lora(),
                vram=self.vram(),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError("deployment", str(exc)) from exc


@dataclass
class RunConfig:
    """Merged config plus the output directory for one CLI run."""

    config: Config
    out_dir: Path

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError("--out", f"output directory not writable: {exc}") from exc
        if not os.access(self.out_dir, os.W_OK):
            raise ConfigError("--out", "output directory not writable")
