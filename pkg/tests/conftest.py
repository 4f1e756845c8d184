import numpy as np
import pytest

from cptdst.model import Backbone, ModelConfig
from cptdst.stream import GeneratorConfig, generate_stream, generator_lexicon
from cptdst.vocab import Vocab


@pytest.fixture(scope="session")
def vocab():
    return Vocab.build(generator_lexicon())


@pytest.fixture(scope="session")
def tiny_config(vocab):
    return ModelConfig(len(vocab), d_model=16, n_layers=1, n_heads=2, max_seq_len=160, prompt_length=4)


@pytest.fixture
def tiny_backbone(vocab, tiny_config):
    return Backbone(tiny_config, vocab, seed=0).freeze()


@pytest.fixture(scope="session")
def small_stream():
    return generate_stream(GeneratorConfig(n_services=4, samples_per_service=(32, 40), seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[dict]()
ACCEPTANCE_COUNT = 10


@pytest.fixture(scope="session")
def acceptance_record(request):
    """Callable ``record(n, ok, detail)`` collecting one verdict per acceptance criterion."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n: int, ok: bool, detail: str) -> None:
        results[n] = (bool(ok), detail)
        print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        ok, detail = results.get(n, (False, "not evaluated"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
