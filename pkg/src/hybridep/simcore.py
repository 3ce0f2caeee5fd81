"""Deterministic discrete-event simulation of one MoE training iteration.

Resources: one compute stream per GPU, one outbound NIC per GPU and level
(FIFO, bandwidth of that level), and in ideal-overlap mode a side stream per
GPU for expert compute. Jobs wait for all their dependencies, then queue on
their resource ordered by (ready time, job id).
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from hybridep import perfmodel
from hybridep.errors import DomainError, ScheduleError
from hybridep.perfmodel import WorkloadSpec
from hybridep.plan import HybridPlan, check_plan, ep_plan, model_device, plan_for_cluster
from hybridep.topology import (
    ClusterSpec,
    CommType,
    a2a_pair_bytes,
    ag_pair_bytes,
    build_topology,
    traffic_report,
)


class JobKind(str, enum.Enum):
    OPTIMIZER = "OPTIMIZER"
    PRE_EXPERT = "PRE_EXPERT"
    EXPERT = "EXPERT"
    SRENCODE = "SRENCODE"
    SRDECODE = "SRDECODE"
    BACKWARD = "BACKWARD"
    AG = "AG"
    A2A_DISPATCH = "A2A_dispatch"
    A2A_COMBINE = "A2A_combine"


TRANSFER_KINDS = (JobKind.AG, JobKind.A2A_DISPATCH, JobKind.A2A_COMBINE)


@dataclass
class ComputeJob:
    id: int
    gpu: int
    kind: JobKind
    duration: float
    deps: Tuple[int, ...]
    layer: int = -1
    hidden: bool = False

    @property
    def resource(self) -> str:
        return f"gpu{self.gpu}:expert" if self.hidden else f"gpu{self.gpu}:compute"


@dataclass
class TransferJob:
    id: int
    src: int
    dst: int
    nbytes: float
    kind: JobKind
    level: int
    deps: Tuple[int, ...]
    layer: int = -1
    hidden = False

    def __post_init__(self):
        if self.nbytes <= 0:
            raise DomainError(f"transfer {self.id} has {self.nbytes} bytes")
        if self.src == self.dst:
            raise DomainError(f"transfer {self.id} loops on GPU {self.src}")

    @property
    def gpu(self) -> int:
        return self.src

    @property
    def resource(self) -> str:
        return f"gpu{self.src}:nic{self.level}"


@dataclass
class JobGraph:
    jobs: List = field(default_factory=list)

    def add_compute(self, gpu, kind, duration, deps=(), layer=-1, hidden=False) -> int:
        job = ComputeJob(len(self.jobs), gpu, kind, duration, tuple(deps), layer, hidden)
        self.jobs.append(job)
        return job.id

    def add_transfer(self, src, dst, nbytes, kind, level, deps=(), layer=-1) -> int:
        job = TransferJob(len(self.jobs), src, dst, nbytes, kind, level, tuple(deps), layer)
        self.jobs.append(job)
        return job.id

    def count(self, kind: JobKind) -> int:
        return sum(1 for j in self.jobs if j.kind is kind)

    def __len__(self):
        return len(self.jobs)


def build_schedule(cluster: ClusterSpec, workload: WorkloadSpec, plan: HybridPlan) -> JobGraph:
    """Job graph of one iteration with ``plan.layers`` (pre-expert, expert) pairs."""
    check_plan(plan, cluster)
    cl = cluster.with_domains(plan.domain_sizes)
    topo = build_topology(cl, dense=False)
    g = cl.total_gpus
    n_levels = cl.num_levels
    pre_expert, _ = perfmodel.comp_stream_latency(workload)
    n = workload.experts_per_gpu
    gathered = cl.effective_domain_size - 1
    # innermost first: AG forwards deeper-level bundles, dispatch hops inward-out
    ag_levels = [l for l in reversed(range(n_levels)) if cl.levels[l].domain_size > 1]
    a2a_levels = [
        l for l in reversed(range(n_levels)) if cl.levels[l].scaling_factor // cl.levels[l].domain_size > 1
    ]
    combine_levels = a2a_levels[::-1]

    graph = JobGraph()
    encode = plan.encode_charge(n * plan.layers) if gathered else 0.0
    optimizer = [graph.add_compute(m, JobKind.OPTIMIZER, encode) for m in range(g)]
    layer_done = [[optimizer[m]] for m in range(g)]

    # Send Queue: every layer's AG is eligible once the fused encode finishes
    ag_into: List[List[List[int]]] = []
    for layer in range(plan.layers):
        into = [[] for _ in range(g)]
        by_level: Dict[int, List[List[int]]] = {}
        for l in ag_levels:
            recv = [[] for _ in range(g)]
            for m in range(g):
                fwd = [j for lo in ag_levels if lo > l for j in by_level[lo][m]]
                for peer in topo.peers(m, l, CommType.AG):
                    jid = graph.add_transfer(
                        m, peer, ag_pair_bytes(cl, l, workload.expert_size), JobKind.AG, l,
                        [optimizer[m], *fwd], layer,
                    )
                    recv[peer].append(jid)
            by_level[l] = recv
            for m in range(g):
                into[m].extend(recv[m])
        ag_into.append(into)

    for layer in range(plan.layers):
        pre = [
            graph.add_compute(m, JobKind.PRE_EXPERT, pre_expert, layer_done[m], layer) for m in range(g)
        ]
        # dispatch[l][m][src] = transfer src -> m at level l
        dispatch: Dict[int, List[Dict[int, int]]] = {}
        prev = [[pre[m]] for m in range(g)]
        for l in a2a_levels:
            recv = [dict() for _ in range(g)]
            for m in range(g):
                for peer in topo.peers(m, l, CommType.A2A):
                    jid = graph.add_transfer(
                        m, peer, a2a_pair_bytes(cl, l, workload.data_size), JobKind.A2A_DISPATCH, l,
                        prev[m], layer,
                    )
                    recv[peer][m] = jid
            dispatch[l] = recv
            prev = [[pre[m], *recv[m].values()] for m in range(g)]

        expert = []
        for m in range(g):
            deps = [pre[m], *ag_into[layer][m]]
            if a2a_levels:
                deps.extend(dispatch[a2a_levels[-1]][m].values())
            duration = n * workload.expert_latency + plan.decode_charge(n * gathered)
            expert.append(
                graph.add_compute(m, JobKind.EXPERT, duration, deps, layer, hidden=plan.overlap == "ideal")
            )

        combine_into = [[] for _ in range(g)]
        for i, l in enumerate(combine_levels):
            recv = [[] for _ in range(g)]
            for m in range(g):
                for peer in topo.peers(m, l, CommType.A2A):
                    if i == 0:
                        # results for peer's chunk stream back once that chunk has arrived
                        deps = [dispatch[l][m][peer]]
                    else:
                        deps = list(combine_into[m])
                    if plan.overlap == "serial":
                        deps.append(expert[m])
                    jid = graph.add_transfer(
                        m, peer, a2a_pair_bytes(cl, l, workload.data_size), JobKind.A2A_COMBINE, l,
                        deps, layer,
                    )
                    recv[peer].append(jid)
            combine_into = recv

        for m in range(g):
            done = [pre[m], *ag_into[layer][m], *combine_into[m]]
            if plan.overlap == "serial":
                done.append(expert[m])
            layer_done[m] = done

    for m in range(g):
        graph.add_compute(m, JobKind.BACKWARD, workload.backward_const, layer_done[m])
    return graph


@dataclass(frozen=True)
class TraceEvent:
    time: float
    resource: str
    job_id: int
    kind: str
    phase: str
    gpu: int
    layer: int


@dataclass
class IterationTrace:
    events: List[TraceEvent]
    start: List[float]
    end: List[float]
    binding: List[Optional[int]]
    graph: JobGraph
    link_bytes: Dict[str, float]
    makespan: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "resource", "job_id", "kind", "phase", "gpu", "layer"])
        for ev in self.events:
            writer.writerow([repr(ev.time), ev.resource, ev.job_id, ev.kind, ev.phase, ev.gpu, ev.layer])
        return buf.getvalue()


def _check_acyclic(graph: JobGraph) -> List[List[int]]:
    n = len(graph.jobs)
    succ: List[List[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for job in graph.jobs:
        for dep in job.deps:
            if not 0 <= dep < n:
                raise ScheduleError(f"job {job.id} depends on unknown job {dep}")
            succ[dep].append(job.id)
            indeg[job.id] += 1
    frontier = [j for j in range(n) if indeg[j] == 0]
    seen = 0
    remaining = list(indeg)
    while frontier:
        j = frontier.pop()
        seen += 1
        for s in succ[j]:
            remaining[s] -= 1
            if remaining[s] == 0:
                frontier.append(s)
    if seen != n:
        raise ScheduleError(f"job graph has a cycle ({n - seen} jobs unreachable)")
    return succ


def run(graph: JobGraph, cluster: ClusterSpec) -> IterationTrace:
    succ = _check_acyclic(graph)
    jobs = graph.jobs
    n = len(jobs)

    def duration(job) -> float:
        if isinstance(job, TransferJob):
            return job.nbytes / cluster.levels[job.level].bandwidth
        return job.duration

    durations = [duration(j) for j in jobs]
    pending = [len(j.deps) for j in jobs]
    ready_at = [math.nan] * n
    start = [math.nan] * n
    end = [math.nan] * n
    binding: List[Optional[int]] = [None] * n
    queues: Dict[str, list] = defaultdict(list)
    busy: Dict[str, bool] = defaultdict(bool)
    last_on: Dict[str, Optional[int]] = {}
    running: list = []
    link_bytes: Dict[str, float] = defaultdict(float)

    def make_ready(j: int, t: float, touched: set) -> None:
        ready_at[j] = t
        res = jobs[j].resource
        heapq.heappush(queues[res], (t, j))
        touched.add(res)

    def try_start(res: str, now: float) -> None:
        if busy[res] or not queues[res]:
            return
        rt, j = heapq.heappop(queues[res])
        start[j] = now
        end[j] = now + durations[j]
        busy[res] = True
        if now > rt:
            binding[j] = last_on.get(res)
        elif jobs[j].deps:
            binding[j] = max(jobs[j].deps, key=lambda d: (end[d], d))
        heapq.heappush(running, (end[j], j))

    touched: set = set()
    for j in range(n):
        if pending[j] == 0:
            make_ready(j, 0.0, touched)
    now = 0.0
    for res in sorted(touched):
        try_start(res, now)

    while running:
        now = running[0][0]
        finished = []
        while running and running[0][0] == now:
            finished.append(heapq.heappop(running)[1])
        touched = set()
        for j in sorted(finished):
            res = jobs[j].resource
            busy[res] = False
            last_on[res] = j
            touched.add(res)
            if isinstance(jobs[j], TransferJob):
                link_bytes[res] += jobs[j].nbytes
            for s in succ[j]:
                pending[s] -= 1
                if pending[s] == 0:
                    make_ready(s, now, touched)
        for res in sorted(touched):
            try_start(res, now)

    if any(math.isnan(t) for t in end):
        raise ScheduleError("simulation stalled with unfinished jobs")

    events = []
    for j, job in enumerate(jobs):
        kind = job.kind.value
        events.append(TraceEvent(start[j], job.resource, j, kind, "start", job.gpu, job.layer))
        events.append(TraceEvent(end[j], job.resource, j, kind, "end", job.gpu, job.layer))
    # at equal times: ends, then starts, then ends of zero-length jobs
    def order(e):
        if e.phase == "start":
            return (e.time, 1, e.job_id)
        return (e.time, 2 if start[e.job_id] == end[e.job_id] else 0, e.job_id)

    events.sort(key=order)
    trace = IterationTrace(events, start, end, binding, graph, dict(link_bytes), 0.0)
    trace.makespan = iteration_latency(trace)
    return trace


def iteration_latency(trace: IterationTrace) -> float:
    """Slowest GPU's finish time; hidden side-stream work does not count."""
    finish: Dict[int, float] = {}
    for job in trace.graph.jobs:
        if job.hidden:
            continue
        finish[job.gpu] = max(finish.get(job.gpu, 0.0), trace.end[job.id])
    return max(finish.values(), default=0.0)


def critical_path(trace: IterationTrace) -> List[int]:
    """Job ids from the first to the makespan-defining job, following whichever
    dependency or resource predecessor actually released each job."""
    visible = [j.id for j in trace.graph.jobs if not j.hidden]
    if not visible:
        return []
    last = max(visible, key=lambda j: (trace.end[j], j))
    path = [last]
    while trace.binding[path[-1]] is not None:
        path.append(trace.binding[path[-1]])
    return path[::-1]


def ag_stall(trace: IterationTrace) -> float:
    """Time the critical path spends in AG transfers."""
    return sum(
        trace.end[j] - trace.start[j] for j in critical_path(trace) if trace.graph.jobs[j].kind is JobKind.AG
    )


def max_busy(trace: IterationTrace, kinds: Sequence[JobKind], layer: Optional[int] = 0) -> float:
    """Largest per-GPU total duration of jobs of ``kinds``."""
    per_gpu: Dict[int, float] = defaultdict(float)
    for job in trace.graph.jobs:
        if job.kind in kinds and (layer is None or job.layer == layer):
            per_gpu[job.gpu] += trace.end[job.id] - trace.start[job.id]
    return max(per_gpu.values(), default=0.0)


def expert_overrun(trace: IterationTrace) -> float:
    """How far hidden expert work extends past the makespan."""
    hidden_end = max((trace.end[j.id] for j in trace.graph.jobs if j.hidden), default=0.0)
    return max(0.0, hidden_end - trace.makespan)


def simulate(cluster: ClusterSpec, workload: WorkloadSpec, plan: HybridPlan) -> IterationTrace:
    cl = cluster.with_domains(plan.domain_sizes)
    return run(build_schedule(cl, workload, plan), cl)


def _rel_error(sim: float, analytic: float) -> float:
    if analytic == 0:
        return 0.0 if sim == 0 else math.inf
    return abs(sim - analytic) / abs(analytic)


def validate_against_model(
    cluster: ClusterSpec, workload: WorkloadSpec, plan: HybridPlan, tolerance: float = 0.01
) -> dict:
    """Relative error of simulated components against the analytic breakdown."""
    if cluster.num_levels != 1:
        raise DomainError("analytic comparison needs a single-level cluster")
    if not plan.matched:
        raise DomainError("analytic comparison needs zero encode/decode cost and ideal overlap")
    g = cluster.total_gpus
    device = model_device(cluster)
    analytic = perfmodel.final_latency(plan.p, workload, device, g)
    if plan.layers != 1:
        raise DomainError("analytic comparison covers a single layer")
    trace = simulate(cluster, workload, plan)
    sim = {
        "compute": max_busy(trace, (JobKind.PRE_EXPERT, JobKind.EXPERT)),
        "pre_expert": max_busy(trace, (JobKind.PRE_EXPERT,)),
        "a2a": max_busy(trace, (JobKind.A2A_DISPATCH,)),
        "ag": max_busy(trace, (JobKind.AG,)),
        "end_to_end": trace.makespan,
    }
    expected = {
        "compute": analytic.comp,
        "pre_expert": analytic.pre_expert,
        "a2a": analytic.comm_a2a,
        "ag": analytic.comm_ag,
        "end_to_end": analytic.final,
    }
    errors = {k: _rel_error(sim[k], expected[k]) for k in sim}
    return {
        "simulated": sim,
        "analytic": expected,
        "errors": errors,
        "tolerance": tolerance,
        "ok": all(e <= tolerance for e in errors.values()),
    }


def summarize(trace: IterationTrace, cluster: ClusterSpec, workload: WorkloadSpec, plan: HybridPlan) -> dict:
    cl = cluster.with_domains(plan.domain_sizes)
    topo = build_topology(cl, dense=False)
    per_level: Dict[int, float] = defaultdict(float)
    for res, nbytes in trace.link_bytes.items():
        per_level[int(res.rsplit("nic", 1)[1])] += nbytes
    return {
        "makespan": trace.makespan,
        "p": str(plan.p),
        "domain_sizes": list(plan.domain_sizes),
        "layers": plan.layers,
        "overlap": plan.overlap,
        "components": {
            "pre_expert": max_busy(trace, (JobKind.PRE_EXPERT,), None),
            "expert": max_busy(trace, (JobKind.EXPERT,), None),
            "a2a_dispatch": max_busy(trace, (JobKind.A2A_DISPATCH,), None),
            "a2a_combine": max_busy(trace, (JobKind.A2A_COMBINE,), None),
            "ag": max_busy(trace, (JobKind.AG,), None),
        },
        "ag_stall": ag_stall(trace),
        "expert_overrun": expert_overrun(trace),
        "level_bytes": {str(l): per_level.get(l, 0.0) for l in range(cl.num_levels)},
        "traffic": traffic_report(topo, workload, plan, layers=plan.layers),
        "frequency": topo.frequency_report(),
        "jobs": len(trace.graph),
    }


def compare_ep(cluster: ClusterSpec, workload: WorkloadSpec, plan: Optional[HybridPlan] = None, **sim_options) -> dict:
    """Simulate standard EP and the hybrid plan on the same cluster."""
    ep = ep_plan(cluster, **sim_options)
    hybrid = plan or plan_for_cluster(cluster, workload, **sim_options)
    ep_trace = simulate(cluster, workload, ep)
    hy_trace = simulate(cluster, workload, hybrid)
    ep_sum = summarize(ep_trace, cluster, workload, ep)
    hy_sum = summarize(hy_trace, cluster, workload, hybrid)
    freq_delta = [
        {k: h[k] - e[k] for k in ("A2A", "AG")} for e, h in zip(ep_sum["frequency"], hy_sum["frequency"])
    ]
    return {
        "ep_latency": ep_trace.makespan,
        "hybrid_latency": hy_trace.makespan,
        "speedup": ep_trace.makespan / hy_trace.makespan,
        "ep": ep_sum,
        "hybrid": hy_sum,
        "frequency_delta": freq_delta,
    }


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True)
