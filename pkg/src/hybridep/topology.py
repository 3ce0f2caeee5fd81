"""GPU-level hybrid communication topology of a hierarchical cluster.

Level 0 is the outermost level (e.g. data centers) and level ``L - 1`` the
innermost (GPUs of one node). A GPU's global index is the mixed-radix number
whose digits are its per-level worker numbers.

Two GPUs talk at level ``l`` only when that is the single level at which
their coordinates differ. Within an expert domain they exchange experts (AG);
across domains, GPUs with the same in-domain offset exchange data (A2A).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from hybridep.errors import ConfigError, DomainError

log = logging.getLogger(__name__)

DENSE_LIMIT = 4096


class CommType(enum.IntEnum):
    NONE = 0
    AG = 1
    A2A = 2


@dataclass(frozen=True)
class LevelSpec:
    scaling_factor: int
    domain_size: int
    bandwidth: float
    name: str = ""


@dataclass(frozen=True)
class ClusterSpec:
    levels: Tuple[LevelSpec, ...]
    throughput: Optional[float] = None
    declared_gpus: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def total_gpus(self) -> int:
        return math.prod(lv.scaling_factor for lv in self.levels)

    @property
    def scaling_factors(self) -> Tuple[int, ...]:
        return tuple(lv.scaling_factor for lv in self.levels)

    @property
    def domain_sizes(self) -> Tuple[int, ...]:
        return tuple(lv.domain_size for lv in self.levels)

    @property
    def effective_domain_size(self) -> int:
        """Number of GPUs whose experts a GPU ends up holding."""
        return math.prod(self.domain_sizes)

    def with_domains(self, domain_sizes: Sequence[int]) -> "ClusterSpec":
        if len(domain_sizes) != self.num_levels:
            raise DomainError(f"expected {self.num_levels} domain sizes, got {len(domain_sizes)}")
        levels = tuple(
            LevelSpec(lv.scaling_factor, int(s), lv.bandwidth, lv.name)
            for lv, s in zip(self.levels, domain_sizes)
        )
        return ClusterSpec(levels, self.throughput, self.declared_gpus)

    @classmethod
    def flat(cls, num_gpus: int, domain_size: int, bandwidth: float, throughput: Optional[float] = None):
        return cls((LevelSpec(num_gpus, domain_size, bandwidth),), throughput)


def validate_cluster(cluster: ClusterSpec) -> List[str]:
    violations = []
    if not cluster.levels:
        return ["cluster must have at least one level"]
    for i, lv in enumerate(cluster.levels):
        where = f"level {i}"
        if lv.scaling_factor < 1:
            violations.append(f"{where}: SF must be >= 1, got {lv.scaling_factor}")
            continue
        if not 1 <= lv.domain_size <= lv.scaling_factor:
            violations.append(f"{where}: SED must lie in [1, SF={lv.scaling_factor}], got {lv.domain_size}")
        elif lv.scaling_factor % lv.domain_size:
            violations.append(f"{where}: SED must divide SF ({lv.domain_size} does not divide {lv.scaling_factor})")
        if not lv.bandwidth > 0:
            violations.append(f"{where}: bandwidth must be > 0, got {lv.bandwidth}")
    if cluster.declared_gpus is not None and cluster.declared_gpus != cluster.total_gpus:
        violations.append(f"declared G={cluster.declared_gpus} != product of SF={cluster.total_gpus}")
    if cluster.throughput is not None and not cluster.throughput > 0:
        violations.append(f"throughput must be > 0, got {cluster.throughput}")
    bws = [lv.bandwidth for lv in cluster.levels]
    if not violations and any(outer > inner for outer, inner in zip(bws, bws[1:])):
        log.warning("outer level bandwidth exceeds an inner one: %s", bws)
    return violations


def require_valid(cluster: ClusterSpec) -> None:
    violations = validate_cluster(cluster)
    if violations:
        raise ConfigError(violations)


def _suffix_products(sf: Sequence[int]) -> List[int]:
    """``out[i]`` is the product of ``sf[i+1:]``."""
    out = [1] * len(sf)
    for i in range(len(sf) - 2, -1, -1):
        out[i] = out[i + 1] * sf[i + 1]
    return out


def renumber(m: int, cluster: ClusterSpec) -> Tuple[int, ...]:
    g = cluster.total_gpus
    if not 0 <= m < g:
        raise DomainError(f"GPU index {m} outside [0, {g})")
    sf = cluster.scaling_factors
    return tuple((m // s) % f for s, f in zip(_suffix_products(sf), sf))


def global_index(coords: Sequence[int], cluster: ClusterSpec) -> int:
    sf = cluster.scaling_factors
    if len(coords) != len(sf):
        raise DomainError(f"expected {len(sf)} coordinates, got {len(coords)}")
    m = 0
    for x, f in zip(coords, sf):
        if not 0 <= x < f:
            raise DomainError(f"coordinate {x} outside [0, {f})")
        m = m * f + x
    return m


def domain_of(coords: Sequence[int], level: int, cluster: ClusterSpec) -> Tuple[int, int]:
    sed = cluster.levels[level].domain_size
    return coords[level] // sed, coords[level] % sed


def comm_type(m: int, n: int, level: int, cluster: ClusterSpec) -> CommType:
    if m == n:
        raise DomainError("a GPU does not communicate with itself")
    if not 0 <= level < cluster.num_levels:
        raise DomainError(f"level {level} outside [0, {cluster.num_levels})")
    loc_m = renumber(m, cluster)
    loc_n = renumber(n, cluster)
    # pairs must differ at exactly this level
    if loc_m[level + 1:] != loc_n[level + 1:] or loc_m[:level] != loc_n[:level]:
        return CommType.NONE
    ed_m, off_m = domain_of(loc_m, level, cluster)
    ed_n, off_n = domain_of(loc_n, level, cluster)
    if ed_m == ed_n and off_m != off_n:
        return CommType.AG
    if ed_m != ed_n and off_m == off_n:
        return CommType.A2A
    return CommType.NONE


def closed_form_counts(cluster: ClusterSpec) -> List[Dict[str, int]]:
    """Directed (A2A, AG) pair counts per level without enumerating pairs."""
    g = cluster.total_gpus
    return [
        {"A2A": g * (lv.scaling_factor // lv.domain_size - 1), "AG": g * (lv.domain_size - 1)}
        for lv in cluster.levels
    ]


@dataclass
class CommTopology:
    cluster: ClusterSpec
    # (levels, G, G) of CommType values; None above DENSE_LIMIT GPUs
    types: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dense(self) -> bool:
        return self.types is not None

    def type_of(self, m: int, n: int, level: int) -> CommType:
        if self.types is not None:
            return CommType(int(self.types[level, m, n]))
        return comm_type(m, n, level, self.cluster)

    def peers(self, m: int, level: int, kind: CommType) -> List[int]:
        """Peers of GPU ``m`` at ``level``, rotated so that peer ``k`` of GPU ``m`` is
        ``k`` domains (A2A) or ``k`` offsets (AG) ahead of it."""
        cl = self.cluster
        coords = list(renumber(m, cl))
        lv = cl.levels[level]
        ed, off = divmod(coords[level], lv.domain_size)
        out = []
        if kind is CommType.AG:
            for k in range(1, lv.domain_size):
                coords[level] = ed * lv.domain_size + (off + k) % lv.domain_size
                out.append(global_index(coords, cl))
        elif kind is CommType.A2A:
            n_dom = lv.scaling_factor // lv.domain_size
            for k in range(1, n_dom):
                coords[level] = ((ed + k) % n_dom) * lv.domain_size + off
                out.append(global_index(coords, cl))
        return out

    def pairs(self) -> Iterator[Tuple[int, int, int, CommType]]:
        """All non-NONE ``(m, n, level, type)`` records in a fixed order."""
        g = self.cluster.total_gpus
        for m in range(g):
            for level in range(self.cluster.num_levels):
                for kind in (CommType.AG, CommType.A2A):
                    for n in sorted(self.peers(m, level, kind)):
                        yield m, n, level, kind

    def frequency_report(self) -> List[Dict[str, int]]:
        if self.types is None:
            return closed_form_counts(self.cluster)
        return [
            {
                "A2A": int(np.count_nonzero(self.types[l] == CommType.A2A)),
                "AG": int(np.count_nonzero(self.types[l] == CommType.AG)),
            }
            for l in range(self.cluster.num_levels)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["m", "n", "level", "type"])
        for m, n, level, kind in self.pairs():
            writer.writerow([m, n, level, kind.name])
        return buf.getvalue()


def build_topology(cluster: ClusterSpec, dense: Optional[bool] = None) -> CommTopology:
    require_valid(cluster)
    g = cluster.total_gpus
    if dense is None:
        dense = g <= DENSE_LIMIT
    if not dense:
        return CommTopology(cluster)
    sf = cluster.scaling_factors
    suffix = _suffix_products(sf)
    idx = np.arange(g)
    types = np.zeros((cluster.num_levels, g, g), dtype=np.int8)
    for l, lv in enumerate(cluster.levels):
        deeper = idx % suffix[l]
        shallower = idx // (suffix[l] * sf[l])
        worker = (idx // suffix[l]) % sf[l]
        ed, off = worker // lv.domain_size, worker % lv.domain_size
        same_deeper = (deeper[:, None] == deeper[None, :]) & (shallower[:, None] == shallower[None, :])
        same_ed = ed[:, None] == ed[None, :]
        same_off = off[:, None] == off[None, :]
        types[l][same_deeper & same_ed & ~same_off] = CommType.AG
        types[l][same_deeper & ~same_ed & same_off] = CommType.A2A
    return CommTopology(cluster, types)


def frequency_report(topology: CommTopology) -> List[Dict[str, int]]:
    return topology.frequency_report()


def a2a_pair_bytes(cluster: ClusterSpec, level: int, data_size: float) -> float:
    """Bytes per directed A2A pair at ``level`` for one direction (dispatch or combine).

    Data is routed one level at a time; every hop keeps a GPU's buffer at
    ``data_size`` and splits it evenly over the level's expert domains.
    """
    lv = cluster.levels[level]
    return data_size * lv.domain_size / lv.scaling_factor


def ag_pair_bytes(cluster: ClusterSpec, level: int, expert_size: float) -> float:
    """Bytes per directed AG pair at ``level``.

    Gathering runs innermost level first, so at ``level`` a GPU forwards the
    experts of every deeper-level domain member it already holds.
    """
    deeper = math.prod(lv.domain_size for lv in cluster.levels[level + 1:])
    return expert_size * deeper


def traffic_report(
    topology: CommTopology, workload, plan=None, tokens: Optional[int] = None, layers: int = 1
) -> dict:
    """Bytes moved per iteration, per level and in total.

    A2A bytes count dispatch and combine. ``tokens`` rescales the routed data
    relative to ``workload.tokens``; ``layers`` MoE blocks each move the same
    volume.
    """
    cluster = topology.cluster
    if plan is not None and tuple(plan.domain_sizes) != cluster.domain_sizes:
        raise DomainError(f"plan domain sizes {plan.domain_sizes} != cluster {cluster.domain_sizes}")
    if tokens is not None:
        workload = workload.with_tokens(tokens)
    counts = topology.frequency_report()
    levels = []
    for l, c in enumerate(counts):
        a2a = layers * 2 * c["A2A"] * a2a_pair_bytes(cluster, l, workload.data_size)
        ag = layers * c["AG"] * ag_pair_bytes(cluster, l, workload.expert_size)
        levels.append({"level": l, "A2A": a2a, "AG": ag, "total": a2a + ag})
    total_a2a = sum(x["A2A"] for x in levels)
    total_ag = sum(x["AG"] for x in levels)
    return {
        "tokens": workload.tokens,
        "levels": levels,
        "A2A": total_a2a,
        "AG": total_ag,
        "total": total_a2a + total_ag,
    }


def frequency_json(topology: CommTopology) -> str:
    counts = topology.frequency_report()
    doc = {
        "total_gpus": topology.cluster.total_gpus,
        "domain_sizes": list(topology.cluster.domain_sizes),
        "levels": [{"level": l, **c} for l, c in enumerate(counts)],
        "A2A": sum(c["A2A"] for c in counts),
        "AG": sum(c["AG"] for c in counts),
    }
    return json.dumps(doc, indent=2, sort_keys=True)
