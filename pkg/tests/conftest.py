import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from matcrush.toylm import ToyLMConfig, generate_corpus, make_eval_set, train_toylm  # noqa: E402

LM_STEPS = 2000
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def lm_corpus():
    return generate_corpus(0, 100_000, 20_000)


@pytest.fixture(scope="session")
def lm_model(lm_corpus):
    start = time.perf_counter()
    model = train_toylm(lm_corpus, ToyLMConfig(seed=0), LM_STEPS)
    TIMINGS["toylm_train"] = time.perf_counter() - start
    return model


@pytest.fixture(scope="session")
def lm_eval(lm_corpus):
    return make_eval_set(lm_corpus.test, ToyLMConfig(), 0)


@pytest.fixture
def record():
    """Store one acceptance verdict: ``record(n, passed, detail)``."""
    def _record(n, passed, detail=""):
        ACCEPTANCE[n] = (bool(passed), detail)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
