import numpy as np
import pytest

from skip2lora import ModelSpec, TrainConfig, build, pretrain, seeding
from skip2lora.data import DriftSpec, gen_drifted, normalize


def ref_matmul(a, b):
    """Triple-loop float64 product; the independent oracle for the kernels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    P, Q = a.shape
    S = b.shape[1]
    out = np.zeros((P, S))
    for p in range(P):
        for s in range(S):
            acc = 0.0
            for q in range(Q):
                acc += a[p, q] * b[q, s]
            out[p, s] = acc
    return out


def bits(a):
    return np.ascontiguousarray(a, dtype=np.float32).view(np.uint32)


def assert_bitwise(a, b):
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    assert a.shape == b.shape
    assert np.array_equal(bits(a), bits(b))


def randomize(model, seed=123):
    """Give BN stats/affine and adapter W_B non-trivial values so every path carries signal."""
    rng = seeding.stream(seed, 9)
    for bn in model.bns:
        bn.running_mean[...] = rng.normal(0.0, 0.2, bn.dim)
        bn.running_var[...] = rng.uniform(0.5, 1.5, bn.dim)
        bn.gamma[...] = rng.uniform(0.7, 1.3, bn.dim)
        bn.beta[...] = rng.uniform(0.3, 0.8, bn.dim)
    for ad in model.adapters:
        ad.W_B[...] = rng.normal(0.0, 0.5, ad.W_B.shape)
    return model


@pytest.fixture(scope="session")
def drift_surrogate():
    """Normalised 256-feature, 3-class drift surrogate with 470/470/470 splits."""
    pre, ft, te = gen_drifted(DriftSpec(seed=0))
    pre, (ft, te), _ = normalize(pre, [ft, te])
    return pre, ft, te


@pytest.fixture(scope="session")
def pretrained_base(drift_surrogate):
    pre, _, _ = drift_surrogate
    base = build(ModelSpec((256, 96, 96, 3), mode="ft-all", seed=0))
    pretrain(base, pre, TrainConfig(epochs=100, mode="ft-all", seed=0))
    return base


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per criterion, echoed in the terminal summary."""
    def report(tag, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {tag}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
