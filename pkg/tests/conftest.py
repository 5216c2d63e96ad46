import numpy as np
import pytest

from cospec.core import EmbeddingTable, Vocabulary
from cospec.models import TabularModel
from cospec.pipeline import ClusterSpec, DrafterSpec
from cospec.synthetic import build_world, make_workload


@pytest.fixture(scope="session")
def world():
    return build_world(0)


@pytest.fixture(scope="session")
def cluster(world):
    drafters = [DrafterSpec(f"drafter-{d}", m, d) for d, m in zip(world.domains, world.drafters)]
    return ClusterSpec(world.vocab, world.embeddings, world.target, drafters)


@pytest.fixture
def small_workload(world):
    return make_workload(world, 8, seed=1, prompt_len=6, max_new=12)


def point_mass_chain(size: int) -> TabularModel:
    """Deterministic order-1 model: t -> (t + 1) mod (size - 1); never emits the last id."""
    rows = {}
    for t in range(size):
        row = np.zeros(size)
        row[(t + 1) % (size - 1)] = 1.0
        rows[(t,)] = row
    fallback = np.zeros(size)
    fallback[0] = 1.0
    return TabularModel(1, rows, fallback, name="chain")


def tiny_cluster(target, drafters, **kw) -> ClusterSpec:
    size = target.vocab_size
    vocab = Vocabulary(tuple(f"t{i}" for i in range(size)), size - 1)
    emb = EmbeddingTable(np.eye(size))
    specs = [DrafterSpec(f"d{i}", m) for i, m in enumerate(drafters)]
    return ClusterSpec(vocab, emb, target, specs, **kw)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record (and echo) one pass/fail line per acceptance criterion."""
    def emit(number: int, title: str, passed: bool, detail: str):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
