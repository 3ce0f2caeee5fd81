"""Stream-based latency model for one MoE block and the A2A/AG proportion solver.

A GPU's routed data ``D`` is split into ``G`` chunks. A proportion ``p`` of the
``G - 1`` remote chunks travels through All-to-All; the rest is replaced by
gathering the corresponding experts (``P_E`` bytes each) through All-Gather.
With an expert domain of ``S`` GPUs, ``p = (G - S) / (G - 1)``.

All quantities are in bytes, seconds and operations per second.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence, Tuple, Union

from hybridep.errors import DomainError

Proportion = Union[Fraction, float]

GRID_TOL = 1e-9


class CaseTag(str, enum.Enum):
    CASE1 = "CASE1"
    CASE2_1 = "CASE2_1"
    CASE2_2 = "CASE2_2"


def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not value > 0:
            raise DomainError(f"{name} must be > 0, got {value!r}")


def gemm_latency(rows: float, inner: float, cols: float, throughput: float) -> float:
    """Latency of a ``(rows, inner) x (inner, cols)`` GeMM on a device of ``throughput`` ops/s."""
    _require_positive(rows=rows, inner=inner, cols=cols, throughput=throughput)
    return rows * cols * inner / throughput


GemmDims = Mapping[str, Sequence[Tuple[int, int, int]]]


@dataclass(frozen=True)
class WorkloadSpec:
    """One MoE block preceded by ``pre_blocks`` dense transformer blocks.

    ``data_size`` is the routed activation volume of one GPU for ``tokens``
    tokens; ``expert_size`` is the parameter volume gathered per remote GPU.
    """

    data_size: float
    expert_size: float
    experts_per_gpu: int
    pre_blocks: int
    attn_latency: float
    ffn_latency: float
    expert_latency: float
    backward_const: float = 0.0
    tokens: int = 1
    gemm_dims: Optional[GemmDims] = field(default=None, compare=False)

    def __post_init__(self):
        _require_positive(
            data_size=self.data_size,
            expert_size=self.expert_size,
            experts_per_gpu=self.experts_per_gpu,
            attn_latency=self.attn_latency,
            ffn_latency=self.ffn_latency,
            expert_latency=self.expert_latency,
            tokens=self.tokens,
        )
        if self.pre_blocks < 0:
            raise DomainError(f"pre_blocks must be >= 0, got {self.pre_blocks}")
        if self.backward_const < 0:
            raise DomainError(f"backward_const must be >= 0, got {self.backward_const}")

    @classmethod
    def from_gemm_dims(cls, gemm_dims: GemmDims, throughput: float, **kwargs) -> "WorkloadSpec":
        """Build a workload whose attention/FFN/expert latencies are sums of GeMM latencies.

        ``gemm_dims`` maps ``"attn"``, ``"ffn"`` and ``"expert"`` to lists of
        ``(L, H, M)`` triples. Any latency passed in ``kwargs`` is overwritten.
        """
        missing = {"attn", "ffn", "expert"} - set(gemm_dims)
        if missing:
            raise DomainError(f"gemm_dims lacks {sorted(missing)}")
        derived = {
            f"{part}_latency": sum(gemm_latency(L, H, M, throughput) for L, H, M in gemm_dims[part])
            for part in ("attn", "ffn", "expert")
        }
        kwargs.update(derived)
        frozen_dims = {k: tuple(tuple(t) for t in v) for k, v in gemm_dims.items()}
        return cls(gemm_dims=frozen_dims, **kwargs)

    def with_tokens(self, tokens: int) -> "WorkloadSpec":
        """Same workload with the routed data rescaled to ``tokens`` tokens."""
        return replace(self, data_size=self.data_size * tokens / self.tokens, tokens=tokens)


def data_size_from_dims(top_k: int, batch: int, seq_len: int, hidden: int, bytes_per_element: int = 4) -> float:
    return float(top_k * batch * seq_len * hidden * bytes_per_element)


@dataclass(frozen=True)
class DeviceSpec:
    throughput: float
    bandwidth: float

    def __post_init__(self):
        _require_positive(throughput=self.throughput, bandwidth=self.bandwidth)


@dataclass(frozen=True)
class LatencyBreakdown:
    comp: float
    pre_expert: float
    comm_a2a: float  # one direction; the block pays it twice
    comm_ag: float
    overlap: float
    backward: float
    final: float

    @property
    def comm(self) -> float:
        return self.comm_ag + 2 * self.comm_a2a


@dataclass(frozen=True)
class PlanPoint:
    p: Fraction
    domain_size: int
    latency: LatencyBreakdown
    case_tag: CaseTag


def comp_stream_latency(w: WorkloadSpec) -> Tuple[float, float]:
    """(pre-expert latency, total compute latency) of the block."""
    pre_expert = (w.pre_blocks + 1) * w.attn_latency + w.pre_blocks * w.ffn_latency
    return pre_expert, pre_expert + w.experts_per_gpu * w.expert_latency


def a2a_cost(data_size: float, group_size: int, bandwidth: float) -> Tuple[float, float]:
    if group_size < 1:
        raise DomainError(f"group_size must be >= 1, got {group_size}")
    _require_positive(data_size=data_size, bandwidth=bandwidth)
    volume = data_size / group_size * (group_size - 1)
    return volume, volume / bandwidth


def ag_cost(expert_size: float, group_size: int, bandwidth: float) -> Tuple[float, float]:
    if group_size < 1:
        raise DomainError(f"group_size must be >= 1, got {group_size}")
    _require_positive(expert_size=expert_size, bandwidth=bandwidth)
    volume = expert_size * (group_size - 1)
    return volume, volume / bandwidth


def check_proportion(p: Proportion, num_gpus: int, relaxed: bool = False) -> None:
    if num_gpus < 2:
        raise DomainError(f"need G > 1, got {num_gpus}")
    if not 0 <= p <= 1:
        raise DomainError(f"p must lie in [0, 1], got {p}")
    if relaxed:
        return
    steps = p * (num_gpus - 1)
    if isinstance(steps, Fraction):
        on_grid = steps.denominator == 1
    else:
        on_grid = abs(steps - round(steps)) <= GRID_TOL * max(1.0, abs(steps))
    if not on_grid:
        raise DomainError(f"p={p} is not on the grid k/{num_gpus - 1}")


def hybrid_volumes(
    p: Proportion, data_size: float, expert_size: float, num_gpus: int, relaxed: bool = False
) -> Tuple[float, float]:
    """Per-GPU (A2A bytes per direction, AG bytes) at proportion ``p``.

    Each of the ``(1 - p)(G - 1)`` converted chunks removes ``D / G`` from the
    A2A volume and adds one expert of ``P_E`` bytes to the AG volume.
    """
    check_proportion(p, num_gpus, relaxed)
    remote = num_gpus - 1
    v_a2a = float(p) * data_size * remote / num_gpus
    v_ag = (1 - float(p)) * expert_size * remote
    return v_a2a, v_ag


def comm_stream_latency(
    p: Proportion, w: WorkloadSpec, d: DeviceSpec, num_gpus: int, relaxed: bool = False
) -> Tuple[float, float, float]:
    """(A2A latency per direction, AG latency, total communication latency)."""
    v_a2a, v_ag = hybrid_volumes(p, w.data_size, w.expert_size, num_gpus, relaxed)
    a2a = v_a2a / d.bandwidth
    ag = v_ag / d.bandwidth
    return a2a, ag, ag + 2 * a2a


def overlap_latency(pre_expert: float, ag: float, n_experts: int, expert_latency: float) -> float:
    # expert compute is assumed fully hidden behind AG and A2A
    return min(pre_expert, ag) + n_experts * expert_latency


def final_latency(
    p: Proportion, w: WorkloadSpec, d: DeviceSpec, num_gpus: int, relaxed: bool = False
) -> LatencyBreakdown:
    pre_expert, comp = comp_stream_latency(w)
    a2a, ag, comm = comm_stream_latency(p, w, d, num_gpus, relaxed)
    overlap = overlap_latency(pre_expert, ag, w.experts_per_gpu, w.expert_latency)
    final = comp + comm - overlap + w.backward_const
    return LatencyBreakdown(
        comp=comp,
        pre_expert=pre_expert,
        comm_a2a=a2a,
        comm_ag=ag,
        overlap=overlap,
        backward=w.backward_const,
        final=final,
    )


def boundary_p(w: WorkloadSpec, d: DeviceSpec, num_gpus: int) -> float:
    """Proportion at which the AG latency equals the pre-expert latency.

    Above it the pre-expert compute hides the AG completely. The value may
    fall below 0 when AG is hidden even at ``p = 0``.
    """
    pre_expert, _ = comp_stream_latency(w)
    gathered = w.expert_size * (num_gpus - 1)
    return (gathered - d.bandwidth * pre_expert) / gathered


def classify_case(data_size: float, expert_size: float, num_gpus: int) -> CaseTag:
    _require_positive(data_size=data_size, expert_size=expert_size, num_gpus=num_gpus)
    if 2 * data_size - num_gpus * expert_size < 0:
        return CaseTag.CASE2_1
    return CaseTag.CASE2_2


def continuous_optimum(w: WorkloadSpec, d: DeviceSpec, num_gpus: int) -> float:
    if classify_case(w.data_size, w.expert_size, num_gpus) is CaseTag.CASE2_2:
        return 0.0
    return min(1.0, max(0.0, boundary_p(w, d, num_gpus)))


def domain_to_p(domain_size: int, num_gpus: int) -> Fraction:
    if not 1 <= domain_size <= num_gpus:
        raise DomainError(f"domain size {domain_size} outside [1, {num_gpus}]")
    return Fraction(num_gpus - domain_size, num_gpus - 1)


def p_to_domain(p: Proportion, num_gpus: int) -> int:
    check_proportion(p, num_gpus)
    return num_gpus - round(p * (num_gpus - 1))


def divisors(n: int) -> list:
    small, large = [], []
    for i in range(1, math.isqrt(n) + 1):
        if n % i == 0:
            small.append(i)
            if i != n // i:
                large.append(n // i)
    return small + large[::-1]


def point_case(latency: LatencyBreakdown, w: WorkloadSpec, num_gpus: int) -> CaseTag:
    if latency.pre_expert >= latency.comm_ag:
        return CaseTag.CASE1
    return classify_case(w.data_size, w.expert_size, num_gpus)


def evaluate_domain(w: WorkloadSpec, d: DeviceSpec, num_gpus: int, domain_size: int) -> PlanPoint:
    p = domain_to_p(domain_size, num_gpus)
    latency = final_latency(p, w, d, num_gpus)
    return PlanPoint(p, domain_size, latency, point_case(latency, w, num_gpus))


def solve_optimal_p(
    w: WorkloadSpec,
    d: DeviceSpec,
    num_gpus: int,
    candidates: Optional[Iterable[int]] = None,
    full_grid: bool = False,
) -> PlanPoint:
    """Best feasible plan point.

    Feasible domain sizes are the divisors of ``G`` unless ``candidates`` is
    given; ``full_grid`` admits every ``k / (G - 1)`` for analysis. The
    latency is convex and piecewise linear in ``p``, so only the feasible
    points adjacent to the continuous optimum are evaluated. Equal latencies
    go to the larger domain.
    """
    if num_gpus <= 1:
        raise DomainError(f"need G > 1, got {num_gpus}")
    if full_grid:
        sizes = range(1, num_gpus + 1)
    elif candidates is None:
        sizes = divisors(num_gpus)
    else:
        sizes = candidates
    # sort by p ascending, i.e. by domain size descending
    points = sorted({int(s) for s in sizes}, reverse=True)
    if not points:
        raise DomainError("no candidate domain sizes")
    p_star = continuous_optimum(w, d, num_gpus)
    ps = [float(domain_to_p(s, num_gpus)) for s in points]
    above = next((i for i, p in enumerate(ps) if p >= p_star), len(ps) - 1)
    # one extra neighbour on each side absorbs rounding at near-flat slopes
    window = range(max(0, above - 2), min(len(ps), above + 2))
    best = None
    for i in window:
        point = evaluate_domain(w, d, num_gpus, points[i])
        if best is None or point.latency.final < best.latency.final:
            best = point
    return best
