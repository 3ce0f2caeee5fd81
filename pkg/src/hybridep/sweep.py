"""Analytic EP-vs-hybrid sweeps over one configuration axis.

Sweeps use the closed-form model only, so they scale to thousands of data
centers. Three ways of choosing the hybrid point per value:

* ``optimal``: the solver's pick over realizable domain sizes;
* ``fixed-sed``: a fixed effective domain size ``S`` (``p = (G-S)/(G-1)``);
* ``fixed-p``: a fixed proportion, evaluated on the continuous relaxation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

from hybridep import perfmodel, units
from hybridep.errors import DomainError
from hybridep.perfmodel import WorkloadSpec
from hybridep.plan import factorizations, model_device
from hybridep.topology import ClusterSpec, LevelSpec

AXES = ("dc_count", "bandwidth", "data_size", "expert_size")
MODES = ("optimal", "fixed-sed", "fixed-p")


@dataclass(frozen=True)
class SweepRow:
    value: float
    ep_latency: float
    hybrid_latency: float
    speedup: float
    p: float
    domain_size: float


def _apply(cluster: ClusterSpec, workload: WorkloadSpec, axis: str, value: float):
    outer = cluster.levels[0]
    if axis == "dc_count":
        lv = LevelSpec(int(value), 1, outer.bandwidth, outer.name)
        cluster = ClusterSpec((lv,) + cluster.levels[1:], cluster.throughput)
    elif axis == "bandwidth":
        lv = LevelSpec(outer.scaling_factor, outer.domain_size, units.gbps(value), outer.name)
        cluster = ClusterSpec((lv,) + cluster.levels[1:], cluster.throughput)
    elif axis == "data_size":
        workload = replace(workload, data_size=units.mb(value))
    elif axis == "expert_size":
        workload = replace(workload, expert_size=units.mb(value))
    else:
        raise DomainError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    return cluster, workload


def sweep_point(
    cluster: ClusterSpec,
    workload: WorkloadSpec,
    mode: str = "optimal",
    sed: Optional[int] = None,
    p: Optional[float] = None,
    value: float = math.nan,
) -> SweepRow:
    g = cluster.total_gpus
    device = model_device(cluster)
    ep = perfmodel.final_latency(1, workload, device, g).final
    if mode == "optimal":
        point = perfmodel.solve_optimal_p(workload, device, g, candidates=factorizations(cluster).keys())
        hp, size, hybrid = float(point.p), point.domain_size, point.latency.final
    elif mode == "fixed-sed":
        if sed is None or not 1 <= sed <= g:
            raise DomainError(f"fixed-sed needs 1 <= sed <= G={g}, got {sed}")
        hp = perfmodel.domain_to_p(sed, g)
        hybrid = perfmodel.final_latency(hp, workload, device, g).final
        hp, size = float(hp), sed
    elif mode == "fixed-p":
        if p is None:
            raise DomainError("fixed-p needs p")
        hybrid = perfmodel.final_latency(p, workload, device, g, relaxed=True).final
        hp, size = float(p), g - p * (g - 1)
    else:
        raise DomainError(f"unknown sweep mode {mode!r}; expected one of {MODES}")
    return SweepRow(value, ep, hybrid, ep / hybrid, hp, size)


def run_sweep(
    cluster: ClusterSpec,
    workload: WorkloadSpec,
    axis: str,
    values: Sequence[float],
    mode: str = "optimal",
    sed: Optional[int] = None,
    p: Optional[float] = None,
) -> List[SweepRow]:
    if axis not in AXES:
        raise DomainError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    values = list(values)
    if not values:
        raise DomainError("sweep needs at least one value")
    diffs = [b - a for a, b in zip(values, values[1:])]
    if not (all(d > 0 for d in diffs) or all(d < 0 for d in diffs)):
        raise DomainError("sweep values must be strictly monotone")
    rows = []
    for v in values:
        cl, wl = _apply(cluster, workload, axis, v)
        rows.append(sweep_point(cl, wl, mode, sed, p, value=v))
    return rows


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["value", "ep_latency", "hybrid_latency", "speedup", "p", "domain_size"])
    for r in rows:
        writer.writerow([repr(r.value), repr(r.ep_latency), repr(r.hybrid_latency), repr(r.speedup), repr(r.p), repr(r.domain_size)])
    return buf.getvalue()
