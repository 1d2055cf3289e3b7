import numpy as np
import pytest

from mca.embedding_io import EmbeddingMatrix
from mca.synthetic import SynthConfig, generate


def unit_rows(a):
    a = np.asarray(a, dtype=np.float64)
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def random_matrix(rng, n, d, ids=None) -> EmbeddingMatrix:
    return EmbeddingMatrix(unit_rows(rng.normal(size=(n, d))).astype(np.float32), ids)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    """Small 3-cluster bundle used by trainer / bench / CLI tests."""
    cfg = SynthConfig(c=3, n_img=60, words_per_cluster=20, d=16, noise=0.1,
                      misalignment=0.2, seed=3)
    ds, vocab, truth = generate(cfg)
    return cfg, ds, vocab, truth


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
