"""JSON configuration files.

Units are part of the key name (``_mb``, ``_gbps``, ``_ms``, ``_tflops``) and are
converted to bytes, bytes/s, seconds and ops/s at parse time. Unknown keys
are rejected. Example::

    {
      "cluster": {"throughput_tflops": 100,
                  "levels": [{"name": "dc", "scaling_factor": 8,
                              "domain_size": 1, "bandwidth_gbps": 128}]},
      "workload": {"data_size_mb": 8, "expert_size_mb": 4.7,
                   "experts_per_gpu": 1, "pre_blocks": 0,
                   "pre_expert_latency_ms": 0.049, "expert_latency_ms": 0.01},
      "plan": {"p": "4/7"},
      "compression": {"ratio": 50},
      "sim": {"layers": 1, "overlap": "ideal", "seed": 0}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from hybridep import units
from hybridep.errors import ConfigError, DomainError
from hybridep.perfmodel import WorkloadSpec, data_size_from_dims
from hybridep.plan import OVERLAP_MODES
from hybridep.sparsecomp import CompressionConfig
from hybridep.topology import ClusterSpec, LevelSpec, validate_cluster

_TOP = {"cluster", "workload", "plan", "compression", "sim"}
_CLUSTER = {"levels", "throughput_tflops", "total_gpus"}
_LEVEL = {"name", "scaling_factor", "domain_size", "bandwidth_gbps"}
_WORKLOAD = {
    "data_size_mb", "data_dims", "expert_size_mb", "experts_per_gpu", "pre_blocks",
    "attn_latency_ms", "ffn_latency_ms", "expert_latency_ms", "pre_expert_latency_ms",
    "gemm_dims", "backward_const_ms", "tokens",
}
_DATA_DIMS = {"top_k", "batch", "seq_len", "hidden", "bytes_per_element"}
_PLAN = {"p", "domain_sizes"}
_COMPRESSION = {"ratio", "k", "index_width", "value_width", "per_matrix", "experts", "hidden", "inner", "noise"}
_SIM = {"layers", "encode_cost_ms", "decode_cost_ms", "overlap", "fused", "seed"}


@dataclass
class DemoSettings:
    experts: int = 8
    hidden: int = 256
    inner: int = 512
    noise: float = 0.05


@dataclass
class SimSettings:
    layers: int = 1
    encode_cost: float = 0.0
    decode_cost: float = 0.0
    overlap: str = "ideal"
    fused: bool = True
    seed: int = 0

    def plan_options(self) -> Dict[str, Any]:
        return {
            "layers": self.layers,
            "encode_cost": self.encode_cost,
            "decode_cost": self.decode_cost,
            "overlap": self.overlap,
            "fused": self.fused,
        }


@dataclass
class ConfigFile:
    cluster: ClusterSpec
    workload: Optional[WorkloadSpec]
    plan_p: Optional[Fraction] = None
    plan_domains: Optional[Tuple[int, ...]] = None
    compression: CompressionConfig = field(default_factory=lambda: CompressionConfig(ratio=50))
    demo: DemoSettings = field(default_factory=DemoSettings)
    sim: SimSettings = field(default_factory=SimSettings)


def _keys(section: Any, allowed: set, where: str, errors: List[str]) -> dict:
    if not isinstance(section, dict):
        errors.append(f"{where}: expected an object")
        return {}
    for key in sorted(set(section) - allowed):
        errors.append(f"{where}: unknown key {key!r}")
    return section


def _parse_cluster(raw: dict, errors: List[str]) -> Optional[ClusterSpec]:
    raw = _keys(raw, _CLUSTER, "cluster", errors)
    levels_raw = raw.get("levels")
    if not isinstance(levels_raw, list):
        errors.append("cluster.levels: expected a list")
        return None
    levels = []
    for i, lv in enumerate(levels_raw):
        lv = _keys(lv, _LEVEL, f"cluster.levels[{i}]", errors)
        try:
            levels.append(
                LevelSpec(
                    scaling_factor=int(lv["scaling_factor"]),
                    domain_size=int(lv.get("domain_size", 1)),
                    bandwidth=units.gbps(float(lv["bandwidth_gbps"])),
                    name=str(lv.get("name", f"level{i}")),
                )
            )
        except KeyError as exc:
            errors.append(f"cluster.levels[{i}]: missing {exc.args[0]!r}")
    throughput = raw.get("throughput_tflops")
    cluster = ClusterSpec(
        tuple(levels),
        throughput=None if throughput is None else units.tflops(float(throughput)),
        declared_gpus=raw.get("total_gpus"),
    )
    violations = validate_cluster(cluster)
    errors.extend(f"cluster: {v}" for v in violations)
    return cluster


def _parse_workload(raw: dict, throughput: Optional[float], errors: List[str]) -> Optional[WorkloadSpec]:
    raw = _keys(raw, _WORKLOAD, "workload", errors)
    if not raw:
        errors.append("workload: section is empty")
        return None
    try:
        if "data_dims" in raw:
            dims = _keys(raw["data_dims"], _DATA_DIMS, "workload.data_dims", errors)
            data = data_size_from_dims(**dims)
        else:
            data = units.mb(float(raw["data_size_mb"]))
        m = int(raw.get("pre_blocks", 0))
        common = dict(
            data_size=data,
            expert_size=units.mb(float(raw["expert_size_mb"])),
            experts_per_gpu=int(raw.get("experts_per_gpu", 1)),
            pre_blocks=m,
            backward_const=units.ms(float(raw.get("backward_const_ms", 0.0))),
            tokens=int(raw.get("tokens", 1)),
        )
        if "gemm_dims" in raw:
            if throughput is None:
                errors.append("workload.gemm_dims needs cluster.throughput_tflops")
                return None
            return WorkloadSpec.from_gemm_dims(raw["gemm_dims"], throughput, **common)
        if "pre_expert_latency_ms" in raw:
            # split evenly over the (m + 1) attention and m FFN passes
            share = units.ms(float(raw["pre_expert_latency_ms"])) / (2 * m + 1)
            attn = ffn = share
        else:
            attn = units.ms(float(raw["attn_latency_ms"]))
            ffn = units.ms(float(raw.get("ffn_latency_ms", raw["attn_latency_ms"])))
        return WorkloadSpec(
            attn_latency=attn,
            ffn_latency=ffn,
            expert_latency=units.ms(float(raw["expert_latency_ms"])),
            **common,
        )
    except KeyError as exc:
        errors.append(f"workload: missing {exc.args[0]!r}")
    except (DomainError, TypeError, ValueError) as exc:
        errors.append(f"workload: {exc}")
    return None


def parse_config(doc: dict) -> ConfigFile:
    errors: List[str] = []
    doc = _keys(doc, _TOP, "config", errors)
    if "cluster" not in doc:
        raise ConfigError(errors + ["config: missing 'cluster'"])
    cluster = _parse_cluster(doc["cluster"], errors)
    workload = None
    if "workload" in doc:
        workload = _parse_workload(doc["workload"], cluster.throughput if cluster else None, errors)

    plan_raw = _keys(doc.get("plan", {}), _PLAN, "plan", errors)
    plan_p = None
    if "p" in plan_raw:
        try:
            plan_p = Fraction(str(plan_raw["p"])).limit_denominator(1 << 20)
        except ValueError:
            errors.append(f"plan.p: cannot parse {plan_raw['p']!r}")
    plan_domains = tuple(int(s) for s in plan_raw["domain_sizes"]) if "domain_sizes" in plan_raw else None
    if plan_p is not None and plan_domains is not None:
        errors.append("plan: give p or domain_sizes, not both")

    comp_raw = dict(_keys(doc.get("compression", {}), _COMPRESSION, "compression", errors))
    demo = DemoSettings(**{k: comp_raw.pop(k) for k in ("experts", "hidden", "inner", "noise") if k in comp_raw})
    if "ratio" not in comp_raw and "k" not in comp_raw:
        comp_raw["ratio"] = 50
    try:
        compression = CompressionConfig(**comp_raw)
    except DomainError as exc:
        errors.append(f"compression: {exc}")
        compression = CompressionConfig(ratio=50)

    sim_raw = _keys(doc.get("sim", {}), _SIM, "sim", errors)
    sim = SimSettings(
        layers=int(sim_raw.get("layers", 1)),
        encode_cost=units.ms(float(sim_raw.get("encode_cost_ms", 0.0))),
        decode_cost=units.ms(float(sim_raw.get("decode_cost_ms", 0.0))),
        overlap=str(sim_raw.get("overlap", "ideal")),
        fused=bool(sim_raw.get("fused", True)),
        seed=int(sim_raw.get("seed", 0)),
    )
    if sim.overlap not in OVERLAP_MODES:
        errors.append(f"sim.overlap: expected one of {OVERLAP_MODES}, got {sim.overlap!r}")
    if sim.layers < 1:
        errors.append("sim.layers: must be >= 1")
    if errors:
        raise ConfigError(errors)
    return ConfigFile(cluster, workload, plan_p, plan_domains, compression, demo, sim)


def load_config(path) -> ConfigFile:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc)
