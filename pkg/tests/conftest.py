import random

import pytest

from hybridep import units
from hybridep.perfmodel import DeviceSpec, WorkloadSpec
from hybridep.topology import ClusterSpec

# rows of the modeling-verification configurations: (pre-expert ms, D MB, PE MB)
VERIFICATION_ROWS = {
    "mix1": (0.049, 8.0, 4.7),
    "mix2": (0.049, 8.0, 2.35),
    "agonly1": (0.099, 3.0, 0.094),
    "agonly2": (0.099, 3.0, 0.047),
}


def workload(pre_ms, d_mb, pe_mb, expert_ms=0.01, n=1, backward_ms=0.0, tokens=1):
    return WorkloadSpec(
        data_size=units.mb(d_mb),
        expert_size=units.mb(pe_mb),
        experts_per_gpu=n,
        pre_blocks=0,
        attn_latency=units.ms(pre_ms),
        ffn_latency=units.ms(pre_ms),
        expert_latency=units.ms(expert_ms),
        backward_const=units.ms(backward_ms),
        tokens=tokens,
    )


def random_config(rng: random.Random):
    """Random (workload, device, G) spanning both cost regimes."""
    g = rng.choice([2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 100, 128])
    w = WorkloadSpec(
        data_size=rng.uniform(0.1, 64) * 1e6,
        expert_size=10 ** rng.uniform(-2, 1.5) * 1e6,
        experts_per_gpu=rng.randint(1, 4),
        pre_blocks=rng.randint(0, 3),
        attn_latency=rng.uniform(0.005, 0.5) * 1e-3,
        ffn_latency=rng.uniform(0.005, 0.5) * 1e-3,
        expert_latency=rng.uniform(0.001, 0.2) * 1e-3,
        backward_const=rng.uniform(0, 1) * 1e-3,
    )
    d = DeviceSpec(throughput=1e14, bandwidth=units.gbps(rng.choice([10, 25, 50, 100, 128, 200, 400])))
    return w, d, g


@pytest.fixture
def mix1():
    return workload(*VERIFICATION_ROWS["mix1"])


@pytest.fixture
def flat8():
    return ClusterSpec.flat(8, 1, units.gbps(128), throughput=1e14)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda l: int(l.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
