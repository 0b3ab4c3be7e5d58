import numpy as np
import pytest

from mfmarket.network import GeneratorSpec, LineSpec, Network, ptdf_from_branches


def two_gen_one_bus():
    gens = [GeneratorSpec(0, 0, 0.01, 20.0, 200.0), GeneratorSpec(1, 0, 0.02, 30.0, 200.0)]
    return Network(1, [], gens)


def congested_triangle(f_max=30.0):
    """Cheap unit at bus 0, dear unit at bus 1, load at bus 2; line 0-2 limited."""
    P = ptdf_from_branches(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)])
    lines = [LineSpec(0, tuple(P[0]), 200.0), LineSpec(1, tuple(P[1]), 200.0), LineSpec(2, tuple(P[2]), f_max)]
    gens = [GeneratorSpec(0, 0, 0.05, 10.0, 200.0), GeneratorSpec(1, 1, 0.1, 20.0, 200.0)]
    return Network(3, lines, gens), np.array([10.0, 20.0, 60.0])


@pytest.fixture
def one_bus():
    return two_gen_one_bus()


@pytest.fixture
def triangle():
    return congested_triangle()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
