"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line (with runtime against its budget)
that the terminal summary prints at the end of the session. Run this file
directly to print the lines without pytest.
"""

import math
import random
import time

import numpy as np

from conftest import VERIFICATION_ROWS, random_config, workload
from hybridep import perfmodel, simcore, sparsecomp, sweep, units
from hybridep.perfmodel import CaseTag, DeviceSpec
from hybridep.plan import ep_plan, plan_for_cluster
from hybridep.sparsecomp import CompressionConfig, ExpertWeights
from hybridep.topology import (
    ClusterSpec,
    LevelSpec,
    build_topology,
    global_index,
    renumber,
    traffic_report,
    validate_cluster,
)

RESULTS = []


def record(number, title, budget_s):
    """Decorator: time the check, record a result line, assert pass."""

    def wrap(check):
        def test():
            t0 = time.perf_counter()
            ok, detail = check()
            elapsed = time.perf_counter() - t0
            in_time = elapsed < budget_s
            status = "PASS" if ok and in_time else "FAIL"
            line = f"[{status}] {number:>2}. {title}: {detail} ({elapsed:.2f}s / {budget_s:g}s)"
            RESULTS.append(line)
            print(line)
            assert ok, detail
            assert in_time, f"took {elapsed:.2f}s, budget {budget_s}s"

        test.__name__ = check.__name__
        test.__doc__ = check.__doc__
        return test

    return wrap


FREQUENCY_TABLE = {
    8: {1: (56, 0), 2: (24, 8), 4: (8, 24), 8: (0, 56)},
    16: {1: (240, 0), 2: (112, 16), 4: (48, 48), 8: (16, 112), 16: (0, 240)},
    32: {1: (992, 0), 2: (480, 32), 4: (224, 96), 8: (96, 224), 16: (32, 480), 32: (0, 992)},
}


@record(1, "frequency table", 1)
def test_frequency_table():
    bad = []
    populated = blanks = 0
    for g in FREQUENCY_TABLE:
        for s in (1, 2, 4, 8, 16, 32):
            cluster = ClusterSpec.flat(g, s, 1.0)
            if s > g:
                # the table leaves these positions blank: no such domain exists
                blanks += bool(validate_cluster(cluster))
                continue
            got = build_topology(cluster).frequency_report()[0]
            populated += 1
            if (got["A2A"], got["AG"]) != FREQUENCY_TABLE[g][s]:
                bad.append((g, s, got))
    ok = not bad and populated == 15 and blanks == 3
    detail = f"{populated - len(bad)}/15 populated columns exact (30 counts), {blanks}/3 blank positions rejected"
    return ok, detail + (f", mismatches {bad}" if bad else "")


@record(2, "case classification", 1)
def test_case_classification():
    expected = {"mix1": CaseTag.CASE2_1, "mix2": CaseTag.CASE2_1, "agonly1": CaseTag.CASE2_2, "agonly2": CaseTag.CASE2_2}
    dev = DeviceSpec(1e14, units.gbps(128))
    problems = []
    for name, (pre, d, pe) in VERIFICATION_ROWS.items():
        tag = perfmodel.classify_case(units.mb(d), units.mb(pe), 8)
        if tag is not expected[name]:
            problems.append(f"{name}={tag.value}")
        if expected[name] is CaseTag.CASE2_2:
            w = workload(pre, d, pe)
            if perfmodel.continuous_optimum(w, dev, 8) != 0 or perfmodel.solve_optimal_p(w, dev, 8).p != 0:
                problems.append(f"{name} p*!=0")
    return not problems, "4/4 rows" if not problems else ", ".join(problems)


@record(3, "solver vs exhaustive oracle", 10)
def test_solver_oracle():
    rng = random.Random(2024)
    n, mismatches = 1200, 0
    for _ in range(n):
        w, d, g = random_config(rng)
        got = perfmodel.solve_optimal_p(w, d, g).latency.final
        best = min(
            perfmodel.final_latency(perfmodel.domain_to_p(s, g), w, d, g).final for s in perfmodel.divisors(g)
        )
        mismatches += got != best
    return mismatches == 0, f"{n - mismatches}/{n} configs equal"


def piecewise(p, w, d, g):
    pre = (w.pre_blocks + 1) * w.attn_latency + w.pre_blocks * w.ffn_latency
    pe, dd, b = w.expert_size, w.data_size, d.bandwidth
    p_b = (pe * (g - 1) - b * pre) / (pe * (g - 1))
    if p >= p_b:
        return pre + 2 * dd * (g - 1) / (g * b) * p + w.backward_const
    return p * (g - 1) * (2 * dd - g * pe) / (b * g) + (g - 1) * pe / b + w.backward_const


@record(4, "closed-form agreement", 5)
def test_closed_form():
    rng = random.Random(7)
    worst = worst_cont = 0.0
    boundary_checks = 0
    for _ in range(1000):
        w, d, g = random_config(rng)
        for p in (rng.random(), float(perfmodel.domain_to_p(rng.choice(perfmodel.divisors(g)), g))):
            lat = perfmodel.final_latency(p, w, d, g, relaxed=True)
            assembled = lat.comp + lat.comm - lat.overlap + lat.backward
            ref = piecewise(p, w, d, g)
            worst = max(worst, abs(assembled - ref) / ref)
        p_b = perfmodel.boundary_p(w, d, g)
        if 0 < p_b < 1:
            boundary_checks += 1
            left = perfmodel.final_latency(math.nextafter(p_b, 0), w, d, g, relaxed=True).final
            at = perfmodel.final_latency(p_b, w, d, g, relaxed=True).final
            worst_cont = max(worst_cont, abs(left - at) / at)
    ok = worst <= 1e-9 and worst_cont <= 1e-9 and boundary_checks > 0
    return ok, f"max rel err {worst:.1e}, boundary jump {worst_cont:.1e} over {boundary_checks} boundaries"


@record(5, "EP degeneracy", 5)
def test_ep_degeneracy():
    rng = random.Random(5)
    worst = 0.0
    ag_pairs = 0
    for _ in range(20):
        w, d, g = random_config(rng)
        g = min(g, 32)
        cluster = ClusterSpec.flat(g, 1, d.bandwidth)
        ag_pairs += build_topology(cluster).frequency_report()[0]["AG"]
        trace = simcore.simulate(cluster, w, ep_plan(cluster))
        pre, _ = perfmodel.comp_stream_latency(w)
        expected = pre + 2 * w.data_size * (g - 1) / (g * d.bandwidth) + w.backward_const
        worst = max(worst, abs(trace.makespan - expected) / expected)
    return ag_pairs == 0 and worst <= 1e-6, f"AG pairs {ag_pairs}, max rel err {worst:.1e}"


def random_sf(rng, max_gpus=10_000):
    while True:
        sf = [rng.randint(1, 40) for _ in range(rng.randint(1, 4))]
        if math.prod(sf) <= max_gpus:
            return sf


@record(6, "renumbering bijection", 5)
def test_renumbering():
    rng = random.Random(6)
    failures = 0
    total = 0
    for _ in range(100):
        cluster = ClusterSpec(tuple(LevelSpec(f, 1, 1.0) for f in random_sf(rng)))
        g = cluster.total_gpus
        total += g
        failures += sum(global_index(renumber(m, cluster), cluster) != m for m in range(g))
    return failures == 0, f"{total} indices over 100 SF lists, {failures} failures"


def best_drop_errors(residual):
    """Exhaustive: for every k, the smallest error over all kept subsets of size k."""
    n = residual.size
    masks = ((np.arange(1 << n)[:, None] >> np.arange(n)) & 1).astype(bool)
    kept = masks @ (residual**2)
    sizes = masks.sum(axis=1)
    total = float(np.sum(residual**2))
    return [math.sqrt(max(total - kept[sizes == k].max(), 0.0)) for k in range(n + 1)]


@record(7, "compression round-trip and optimality", 10)
def test_compression_roundtrip():
    rng = np.random.default_rng(7)
    experts = [
        ExpertWeights(rng.standard_normal((16, 24)).astype(np.float32), rng.standard_normal((24, 16)).astype(np.float32))
        for _ in range(100)
    ]
    shared = sparsecomp.init_shared(experts)
    exact = 0
    for e in experts:
        comp = sparsecomp.sr_encode(e, shared, CompressionConfig(k=e.size, value_width=8))
        out = sparsecomp.sr_decode(sparsecomp.CompressedResidual.from_bytes(comp.to_bytes()), shared)
        exact += np.array_equal(out.w_up, e.w_up) and np.array_equal(out.w_down, e.w_down)

    optimal = True
    for _ in range(3):
        e = ExpertWeights(rng.standard_normal((3, 3)), rng.standard_normal((3, 3)))
        s = ExpertWeights(rng.standard_normal((3, 3)), rng.standard_normal((3, 3)))
        oracle = best_drop_errors(e.flat() - s.flat())
        for k, best in enumerate(oracle):
            got = sparsecomp.reconstruction_error(
                e, sparsecomp.sr_decode(sparsecomp.sr_encode(e, s, CompressionConfig(k=k, value_width=8)), s)
            )[1]
            optimal &= abs(got - best) <= 1e-9 * max(1.0, best)

    e = experts[0]
    errs = [
        sparsecomp.reconstruction_error(e, sparsecomp.sr_decode(sparsecomp.sr_encode(e, shared, CompressionConfig(k=k)), shared))[1]
        for k in range(0, e.size + 1, 16)
    ]
    monotone = all(b <= a for a, b in zip(errs, errs[1:]))
    ok = exact == 100 and optimal and monotone
    return ok, f"{exact}/100 bit-exact, top-k optimal={optimal}, error non-increasing in k={monotone}"


@record(8, "compression ratio", 1)
def test_compression_ratio():
    rng = np.random.default_rng(8)
    e = ExpertWeights(rng.standard_normal((200, 500)).astype(np.float32), rng.standard_normal((500, 200)).astype(np.float32))
    s = ExpertWeights(np.zeros_like(e.w_up), np.zeros_like(e.w_down))
    comp = sparsecomp.sr_encode(e, s, CompressionConfig(k=e.size // 100, index_width=4, value_width=4))
    cr = sparsecomp.compression_ratio(comp, e.nbytes)
    return abs(cr - 50) / 50 <= 0.02, f"CR {cr:.3f}x including header"


@record(9, "simulator vs analytic model", 30)
def test_sim_vs_analytic():
    rng = random.Random(9)
    worst = 0.0
    cases = set()
    for _ in range(100):
        w, d, g = random_config(rng)
        g = min(g, 24)
        cluster = ClusterSpec.flat(g, 1, d.bandwidth)
        s = rng.choice(perfmodel.divisors(g))
        plan = plan_for_cluster(cluster, w, domain_sizes=(s,), device=d)
        cases.add(perfmodel.classify_case(w.data_size, w.expert_size, g))
        analytic = perfmodel.final_latency(plan.p, w, d, g).final
        worst = max(worst, abs(simcore.simulate(cluster, w, plan).makespan - analytic) / analytic)
    ok = worst <= 0.01 and len(cases) == 2
    return ok, f"max rel err {worst:.1e}, cases {sorted(c.value for c in cases)}"


@record(10, "traffic characteristic", 1)
def test_traffic():
    w = workload(0.05, 8, 2)
    out = {}
    for s, label in ((8, "p=0"), (1, "p=1")):
        cluster = ClusterSpec.flat(8, s, units.gbps(100))
        topo = build_topology(cluster)
        plan = plan_for_cluster(cluster, w, domain_sizes=(s,))
        model = [traffic_report(topo, w, tokens=t)["total"] for t in (1, 2, 4)]
        simulated = [sum(simcore.simulate(cluster, w.with_tokens(t), plan).link_bytes.values()) for t in (1, 2, 4)]
        out[label] = (model, simulated)
    ag_model, ag_sim = out["p=0"]
    ep_model, ep_sim = out["p=1"]
    ok = (
        ag_model[0] == ag_model[1] == ag_model[2]
        and ag_sim[0] == ag_sim[1] == ag_sim[2]
        and [x / ep_model[0] for x in ep_model[1:]] == [2.0, 4.0]
        and [x / ep_sim[0] for x in ep_sim[1:]] == [2.0, 4.0]
    )
    return ok, f"p=0 bytes {ag_model}, p=1 ratios {[x / ep_model[0] for x in ep_model[1:]]}"


DC_COUNTS = [10, 20, 50, 100, 200, 500, 1000]


def geo(bw_gbps):
    return ClusterSpec((LevelSpec(10, 1, units.gbps(bw_gbps), "dc"), LevelSpec(8, 1, units.gbps(128), "node")))


@record(11, "large-scale trends", 60)
def test_large_scale_trend():
    # gathered experts stay hidden behind pre-expert compute at every scale
    w = workload(20.0, 8.0, 0.002)
    slack = 1e-9

    def column(bw, **kw):
        return [r.speedup for r in sweep.run_sweep(geo(bw), w, "dc_count", DC_COUNTS, **kw)]

    sed_fast, sed_slow = column(10, mode="fixed-sed", sed=8), column(5, mode="fixed-sed", sed=8)
    p_fast, p_slow = column(10, mode="fixed-p", p=0.5), column(5, mode="fixed-p", p=0.5)
    nonincr = all(b <= a + slack for a, b in zip(sed_fast, sed_fast[1:]))
    nondecr = all(b >= a - slack for a, b in zip(p_fast, p_fast[1:]))
    lower_bw = all(s >= f - slack for s, f in zip(sed_slow + p_slow, sed_fast + p_fast))
    ok = nonincr and nondecr and lower_bw
    return ok, (
        f"fixed-S {sed_fast[0]:.3f}->{sed_fast[-1]:.3f} non-increasing={nonincr}, "
        f"fixed-p {p_fast[0]:.3f}->{p_fast[-1]:.3f} non-decreasing={nondecr}, lower-B >= {lower_bw}"
    )


@record(12, "overlap realization", 5)
def test_overlap_realization():
    cluster = ClusterSpec.flat(8, 1, units.gbps(128))
    w = workload(1.0, 8.0, 0.5)
    plans = [plan_for_cluster(cluster, w, domain_sizes=(s,)) for s in (2, 4, 8)]
    hidden = all(p.point.latency.comm_ag < p.point.latency.pre_expert for p in plans)
    stalls = []
    for plan in plans:
        trace = simcore.simulate(cluster, w, plan)
        on_path = [j for j in simcore.critical_path(trace) if trace.graph.jobs[j].kind is simcore.JobKind.AG]
        stalls.append((simcore.ag_stall(trace), len(on_path)))
    ok = hidden and all(st == 0.0 and n == 0 for st, n in stalls)
    return ok, f"AG stall on critical path for S=2,4,8: {[st for st, _ in stalls]}"


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
            except AssertionError:
                pass
