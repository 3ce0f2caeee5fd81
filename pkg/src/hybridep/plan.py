"""Hybrid plans: a proportion ``p`` realized as per-level expert-domain sizes."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Optional, Sequence, Tuple

from hybridep import perfmodel
from hybridep.errors import ConfigError, DomainError
from hybridep.perfmodel import DeviceSpec, PlanPoint, WorkloadSpec
from hybridep.topology import ClusterSpec, validate_cluster

OVERLAP_MODES = ("ideal", "serial")


@dataclass(frozen=True)
class HybridPlan:
    """What the simulator executes.

    ``overlap="ideal"`` runs expert compute on a side stream that never
    gates communication, which is the fully-overlapped assumption of the
    analytic model. ``"serial"`` puts it on the GPU's compute stream between
    dispatch and combine.
    """

    p: Fraction
    domain_sizes: Tuple[int, ...]
    layers: int = 1
    encode_cost: float = 0.0
    decode_cost: float = 0.0
    overlap: str = "ideal"
    fused: bool = True
    encode_fusion: float = 0.70
    decode_fusion: float = 0.55
    point: Optional[PlanPoint] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "domain_sizes", tuple(int(s) for s in self.domain_sizes))
        if self.layers < 1:
            raise DomainError(f"layers must be >= 1, got {self.layers}")
        if self.encode_cost < 0 or self.decode_cost < 0:
            raise DomainError("encode/decode costs must be >= 0")
        if self.overlap not in OVERLAP_MODES:
            raise DomainError(f"overlap must be one of {OVERLAP_MODES}, got {self.overlap!r}")

    @property
    def effective_domain_size(self) -> int:
        return math.prod(self.domain_sizes)

    @property
    def matched(self) -> bool:
        return self.encode_cost == 0 and self.decode_cost == 0 and self.overlap == "ideal"

    def encode_charge(self, n_experts: int) -> float:
        factor = self.encode_fusion if self.fused else 1.0
        return self.encode_cost * factor * n_experts

    def decode_charge(self, n_experts: int) -> float:
        factor = self.decode_fusion if self.fused else 1.0
        return self.decode_cost * factor * n_experts


def check_plan(plan: HybridPlan, cluster: ClusterSpec) -> None:
    if len(plan.domain_sizes) != cluster.num_levels:
        raise ConfigError(
            f"plan has {len(plan.domain_sizes)} domain sizes, cluster has {cluster.num_levels} levels"
        )
    violations = validate_cluster(cluster.with_domains(plan.domain_sizes))
    if not violations:
        g = cluster.total_gpus
        expected = perfmodel.domain_to_p(plan.effective_domain_size, g) if g > 1 else Fraction(1)
        if Fraction(plan.p) != expected:
            violations.append(f"p={plan.p} inconsistent with domain sizes {plan.domain_sizes} (expected {expected})")
    if violations:
        raise ConfigError(violations)


def factorizations(cluster: ClusterSpec) -> Dict[int, Tuple[int, ...]]:
    """Effective domain size -> per-level domain sizes realizing it.

    When several factorizations give the same size, the one that keeps the
    domain on the innermost (fastest) levels wins.
    """
    options = [perfmodel.divisors(lv.scaling_factor) for lv in cluster.levels]
    out: Dict[int, Tuple[int, ...]] = {}
    for combo in itertools.product(*options):
        size = math.prod(combo)
        best = out.get(size)
        if best is None or combo[::-1] > best[::-1]:
            out[size] = combo
    return out


def model_device(cluster: ClusterSpec, throughput: Optional[float] = None) -> DeviceSpec:
    """Flat device seen by the analytic model: the slowest level's bandwidth."""
    tp = throughput or cluster.throughput or 1.0
    return DeviceSpec(throughput=tp, bandwidth=min(lv.bandwidth for lv in cluster.levels))


def plan_for_cluster(
    cluster: ClusterSpec,
    workload: WorkloadSpec,
    p: Optional[Fraction] = None,
    domain_sizes: Optional[Sequence[int]] = None,
    device: Optional[DeviceSpec] = None,
    **sim_options,
) -> HybridPlan:
    """Optimal plan for the cluster, or the plan pinned by ``p`` / ``domain_sizes``."""
    g = cluster.total_gpus
    if g < 2:
        raise DomainError("planning needs at least two GPUs")
    device = device or model_device(cluster)
    sizes = factorizations(cluster)
    if domain_sizes is not None:
        if len(domain_sizes) != cluster.num_levels:
            raise DomainError(f"expected {cluster.num_levels} domain sizes, got {len(domain_sizes)}")
        combo = tuple(int(s) for s in domain_sizes)
        point = perfmodel.evaluate_domain(workload, device, g, math.prod(combo))
    elif p is not None:
        s = perfmodel.p_to_domain(Fraction(p), g)
        if s not in sizes:
            raise DomainError(f"p={p} needs domain size {s}, not realizable on SF={cluster.scaling_factors}")
        combo = sizes[s]
        point = perfmodel.evaluate_domain(workload, device, g, s)
    else:
        point = perfmodel.solve_optimal_p(workload, device, g, candidates=sizes.keys())
        combo = sizes[point.domain_size]
    plan = HybridPlan(p=point.p, domain_sizes=combo, point=point, **sim_options)
    check_plan(plan, cluster)
    return plan


def ep_plan(cluster: ClusterSpec, **sim_options) -> HybridPlan:
    return HybridPlan(p=Fraction(1), domain_sizes=(1,) * cluster.num_levels, **sim_options)
