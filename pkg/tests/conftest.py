import math
import os

import numpy as np
import pytest

from edcapf.config import AcClass, NetworkConfig, edca_classes

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCENARIOS = os.path.join(ROOT, "scenarios")
GOLDEN = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden")

AC = ("BK", "BE", "VI", "VO")


def fig2_config(p_vi=1e-6, cw=15.0):
    """Four ACs at 54 Mbps, one station each, near error-free except VI."""
    classes = edca_classes(
        n=dict.fromkeys(AC, 1),
        p={"BK": 1e-6, "BE": 1e-6, "VI": p_vi, "VO": 1e-6},
        r=dict.fromkeys(AC, 54.0),
        d={"BK": 400.0, "BE": 400.0, "VI": 250.0, "VO": 200.0},
        cw_min=dict.fromkeys(AC, cw),
    )
    return NetworkConfig(classes)


def fig4_config(n=None):
    """Join/leave scenario: BK and BE at 36 Mbps, VI and VO at 54 Mbps."""
    n = n or dict.fromkeys(AC, 1)
    classes = edca_classes(
        n=n,
        p={"BK": 0.001, "BE": 0.001, "VI": 0.01, "VO": 0.01},
        r={"BK": 36.0, "BE": 36.0, "VI": 54.0, "VO": 54.0},
        d=dict.fromkeys(AC, 400.0),
    )
    return NetworkConfig(classes)


# Adaptivity-scenario population after each membership event.
FIG4_SEGMENTS = (
    {"BK": 1, "BE": 1, "VI": 1, "VO": 1},
    {"BK": 1, "BE": 1, "VI": 1, "VO": 0},
    {"BK": 1, "BE": 2, "VI": 1, "VO": 0},
    {"BK": 1, "BE": 2, "VI": 0, "VO": 0},
)


def single(n=1, p=0.0, cw=15.0, M=1, t=2, r=54.0, d=math.inf, m=5):
    return NetworkConfig((AcClass("A", n, p, r, t, M, d, cw),), m=m)


def random_config(rng, max_classes=4, max_n=10):
    """A valid random network (N <= 4, n_i <= 10) with every class populated."""
    N = int(rng.integers(1, max_classes + 1))
    classes = []
    for i in range(N):
        classes.append(AcClass(
            name=f"C{i}", n=int(rng.integers(1, max_n + 1)),
            p=float(10 ** rng.uniform(-6, -1)), r=float(rng.choice([6.0, 24.0, 36.0, 54.0])),
            t=int(rng.integers(1, 8)), M=int(rng.integers(1, 5)),
        ))
    return NetworkConfig(tuple(classes), m=int(rng.integers(0, 8)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
