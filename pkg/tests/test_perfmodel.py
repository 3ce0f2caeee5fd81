import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import VERIFICATION_ROWS, random_config, workload
from hybridep import perfmodel, units
from hybridep.errors import DomainError
from hybridep.perfmodel import CaseTag, DeviceSpec, WorkloadSpec

B128 = DeviceSpec(throughput=1e14, bandwidth=units.gbps(128))


def piecewise_oracle(p, w, d, g):
    """Direct two-branch evaluation, written independently of the library."""
    pre = (w.pre_blocks + 1) * w.attn_latency + w.pre_blocks * w.ffn_latency
    d_, pe, b = w.data_size, w.expert_size, d.bandwidth
    p_b = (pe * (g - 1) - b * pre) / (pe * (g - 1))
    if p >= p_b:
        lat = pre + 2 * d_ * (g - 1) / (g * b) * p
    else:
        lat = p * (g - 1) * (2 * d_ - g * pe) / (b * g) + (g - 1) * pe / b
    return lat + w.backward_const


def brute_force(w, d, g, sizes=None):
    sizes = sizes or perfmodel.divisors(g)
    return min(perfmodel.final_latency(perfmodel.domain_to_p(s, g), w, d, g).final for s in sizes)


class TestComponents:
    def test_gemm_latency(self):
        assert perfmodel.gemm_latency(2, 3, 4, 6.0) == pytest.approx(4.0)

    def test_gemm_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            perfmodel.gemm_latency(0, 3, 4, 1.0)

    def test_comp_stream(self):
        w = WorkloadSpec(1.0, 1.0, 3, 2, attn_latency=1.0, ffn_latency=10.0, expert_latency=100.0)
        pre, total = perfmodel.comp_stream_latency(w)
        assert pre == 3 * 1.0 + 2 * 10.0
        assert total == pre + 300.0

    def test_from_gemm_dims(self):
        dims = {"attn": [(2, 2, 2)], "ffn": [(1, 1, 1), (1, 1, 1)], "expert": [(4, 1, 1)]}
        w = WorkloadSpec.from_gemm_dims(
            dims, 2.0, data_size=1.0, expert_size=1.0, experts_per_gpu=1, pre_blocks=1
        )
        assert (w.attn_latency, w.ffn_latency, w.expert_latency) == (4.0, 1.0, 2.0)

    def test_a2a_cost(self):
        v, lat = perfmodel.a2a_cost(8.0, 8, 2.0)
        assert v == 7.0 and lat == 3.5

    def test_ag_cost(self):
        v, lat = perfmodel.ag_cost(2.0, 8, 2.0)
        assert v == 14.0 and lat == 7.0

    def test_single_member_groups_are_free(self):
        assert perfmodel.a2a_cost(8.0, 1, 1.0) == (0.0, 0.0)
        assert perfmodel.ag_cost(8.0, 1, 1.0) == (0.0, 0.0)

    def test_volumes_endpoints(self):
        assert perfmodel.hybrid_volumes(1, 8.0, 2.0, 8) == (7.0, 0.0)
        assert perfmodel.hybrid_volumes(0, 8.0, 2.0, 8) == (0.0, 14.0)

    def test_exchange_rate(self):
        # converting one chunk trades D/G of A2A for one expert of AG
        g, d, pe = 8, 8.0, 3.0
        a_hi, g_hi = perfmodel.hybrid_volumes(Fraction(7, 7), d, pe, g)
        a_lo, g_lo = perfmodel.hybrid_volumes(Fraction(6, 7), d, pe, g)
        assert a_hi - a_lo == pytest.approx(d / g)
        assert g_lo - g_hi == pytest.approx(pe)

    def test_off_grid_p_rejected(self):
        with pytest.raises(DomainError):
            perfmodel.hybrid_volumes(0.3, 8.0, 2.0, 8)
        perfmodel.hybrid_volumes(0.3, 8.0, 2.0, 8, relaxed=True)

    def test_p_out_of_range(self):
        with pytest.raises(DomainError):
            perfmodel.check_proportion(1.5, 8, relaxed=True)

    def test_single_gpu_rejected(self):
        with pytest.raises(DomainError):
            perfmodel.check_proportion(1, 1)

    def test_overlap_min_branch(self, mix1):
        pre, _ = perfmodel.comp_stream_latency(mix1)
        _, ag, _ = perfmodel.comm_stream_latency(0, mix1, B128, 8)
        assert pre < ag
        ov = perfmodel.overlap_latency(pre, ag, mix1.experts_per_gpu, mix1.expert_latency)
        assert ov == pytest.approx(pre + mix1.expert_latency)

    def test_tokens_rescale_data(self, mix1):
        w4 = mix1.with_tokens(4)
        assert w4.data_size == 4 * mix1.data_size and w4.expert_size == mix1.expert_size


class TestCases:
    @pytest.mark.parametrize(
        "row,expected",
        [("mix1", CaseTag.CASE2_1), ("mix2", CaseTag.CASE2_1), ("agonly1", CaseTag.CASE2_2), ("agonly2", CaseTag.CASE2_2)],
    )
    def test_verification_rows(self, row, expected):
        pre, d, pe = VERIFICATION_ROWS[row]
        assert perfmodel.classify_case(units.mb(d), units.mb(pe), 8) is expected

    def test_boundary_is_equal_tie_goes_to_case2_2(self):
        assert perfmodel.classify_case(4.0, 1.0, 8) is CaseTag.CASE2_2

    @pytest.mark.parametrize("row", ["agonly1", "agonly2"])
    def test_ag_only_plan(self, row):
        w = workload(*VERIFICATION_ROWS[row])
        point = perfmodel.solve_optimal_p(w, B128, 8)
        assert point.p == 0 and point.domain_size == 8

    def test_huge_expert_gives_ep(self):
        w = workload(0.01, 8.0, 10_000.0)
        assert perfmodel.solve_optimal_p(w, B128, 8).p == 1

    def test_mix1_matches_brute_force(self, mix1):
        point = perfmodel.solve_optimal_p(mix1, B128, 8)
        assert point.latency.final == brute_force(mix1, B128, 8)

    def test_boundary_value(self, mix1):
        pe_g = mix1.expert_size * 7
        expected = (pe_g - B128.bandwidth * units.ms(0.049)) / pe_g
        assert perfmodel.boundary_p(mix1, B128, 8) == pytest.approx(expected, rel=1e-12)

    def test_tie_goes_to_larger_domain(self):
        g = 4
        w = WorkloadSpec(4.0, 2.0, 1, 0, attn_latency=1.0, ffn_latency=1.0, expert_latency=1.0)
        d = DeviceSpec(1.0, 1.0)
        # S=4: max(1, 6) + 0 = 6; S=2: max(1, 2) + 2*2 = 6; S=1: 1 + 2*3 = 7
        point = perfmodel.solve_optimal_p(w, d, g)
        assert point.latency.final == 6.0
        assert point.domain_size == 4

    def test_domain_mapping_roundtrip(self):
        for g in (2, 8, 12, 97):
            for s in range(1, g + 1):
                assert perfmodel.p_to_domain(perfmodel.domain_to_p(s, g), g) == s

    def test_divisors(self):
        assert perfmodel.divisors(12) == [1, 2, 3, 4, 6, 12]
        assert perfmodel.divisors(1) == [1]
        assert perfmodel.divisors(49) == [1, 7, 49]


class TestClosedForm:
    def test_random_agreement(self):
        rng = random.Random(1)
        for _ in range(300):
            w, d, g = random_config(rng)
            for s in perfmodel.divisors(g):
                p = perfmodel.domain_to_p(s, g)
                got = perfmodel.final_latency(p, w, d, g).final
                assert got == pytest.approx(piecewise_oracle(float(p), w, d, g), rel=1e-9)

    def test_continuity_at_boundary(self):
        rng = random.Random(2)
        checked = 0
        while checked < 100:
            w, d, g = random_config(rng)
            p_b = perfmodel.boundary_p(w, d, g)
            if not 0 < p_b < 1:
                continue
            left = perfmodel.final_latency(p_b * (1 - 1e-13), w, d, g, relaxed=True).final
            right = perfmodel.final_latency(p_b, w, d, g, relaxed=True).final
            assert left == pytest.approx(right, rel=1e-9)
            checked += 1

    def test_solver_random(self):
        rng = random.Random(3)
        for _ in range(300):
            w, d, g = random_config(rng)
            assert perfmodel.solve_optimal_p(w, d, g).latency.final == brute_force(w, d, g)

    def test_full_grid(self, mix1):
        point = perfmodel.solve_optimal_p(mix1, B128, 8, full_grid=True)
        assert point.latency.final == brute_force(mix1, B128, 8, sizes=range(1, 9))


pos = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(d=pos, pe=pos, pre=pos, g=st.integers(2, 64), b=pos)
def test_final_latency_is_convex_in_p(d, pe, pre, g, b):
    w = WorkloadSpec(d, pe, 1, 0, attn_latency=pre, ffn_latency=pre, expert_latency=1.0)
    dev = DeviceSpec(1.0, b)
    lats = [perfmodel.final_latency(Fraction(k, g - 1), w, dev, g).final for k in range(g)]
    for a, m, c in zip(lats, lats[1:], lats[2:]):
        assert m <= (a + c) / 2 + 1e-9 * max(abs(a), abs(c), 1.0)


@settings(max_examples=200, deadline=None)
@given(d=pos, pe=pos, pre=pos, g=st.integers(2, 64), b=pos)
def test_final_is_max_form(d, pe, pre, g, b):
    w = WorkloadSpec(d, pe, 2, 0, attn_latency=pre, ffn_latency=pre, expert_latency=0.5)
    dev = DeviceSpec(1.0, b)
    for k in (0, g - 1, (g - 1) // 2):
        lat = perfmodel.final_latency(Fraction(k, g - 1), w, dev, g)
        assert lat.final == pytest.approx(max(lat.pre_expert, lat.comm_ag) + 2 * lat.comm_a2a, rel=1e-12)


def test_p1_is_standard_ep(mix1):
    lat = perfmodel.final_latency(1, mix1, B128, 8)
    expected = units.ms(0.049) + 2 * mix1.data_size * 7 / (8 * B128.bandwidth)
    assert lat.final == pytest.approx(expected, rel=1e-12)
    assert lat.comm_ag == 0


def test_nonpositive_workload_rejected():
    with pytest.raises(DomainError):
        WorkloadSpec(0.0, 1.0, 1, 0, 1.0, 1.0, 1.0)
    with pytest.raises(DomainError):
        WorkloadSpec(1.0, 1.0, 1, -1, 1.0, 1.0, 1.0)
    assert not math.isnan(perfmodel.boundary_p(workload(0.1, 1, 1), B128, 8))
