import numpy as np
import pytest

from composed_retrieval.config import DESK_SCALE, RunConfig
from composed_retrieval.data import fixture_vocabulary, generate_fixture
from composed_retrieval.model import CompositionConfig, RetrievalModel
from composed_retrieval.text_encoder import EncoderConfig

TINY_ENCODER = EncoderConfig(
    num_layers=4, hidden_dim=8, num_heads=2, intermediate_dim=12,
    sentence_layers=2, max_positions=16, dropout_rate=0.0,
)
TINY_COMPOSITION = CompositionConfig(embed_dim=6, hidden_dim=5, category_dim=3)


def tiny_model(seed=0, feature_dim=4, vocab_size=None, num_corpus_categories=3):
    vocab_size = vocab_size or fixture_vocabulary().size
    return RetrievalModel.init(
        TINY_ENCODER, TINY_COMPOSITION, vocab_size, feature_dim, seed, num_corpus_categories
    )


def matmul_oracle(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vocab():
    return fixture_vocabulary()


@pytest.fixture(scope="session")
def small_fixture():
    return generate_fixture(6, 8, seed=3)


@pytest.fixture
def desk_config():
    return RunConfig.from_dict(DESK_SCALE)


# --- acceptance summary -----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        )
