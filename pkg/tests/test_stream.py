import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cptdst.codec import NONE_VALUE
from cptdst.errors import ContractError, CorpusError
from cptdst.stream import (GeneratorConfig, MemoryBuffer, generate_stream, ingest_schema_corpus,
                           proportional_budget, sample_memory, split_indices, validate_stream)


def test_generator_is_deterministic():
    cfg = GeneratorConfig(n_services=3, samples_per_service=(32, 34), seed=11)
    a, b = generate_stream(cfg), generate_stream(cfg)
    assert a.to_corpus() == b.to_corpus()
    assert a.manifest() == b.manifest()


def test_default_stream_shape():
    stream = generate_stream(GeneratorConfig())
    assert len(stream.task_ids) == 15
    for t in stream.task_ids:
        s = stream.service(t)
        assert 2 <= len(s.slots) <= 10
        sp = stream.splits[t]
        n = len(s.dialogs)
        assert abs(len(sp.train) - 0.7 * n) <= 1 and abs(len(sp.val) - 0.1 * n) <= 1
        assert 128 <= len(sp.train) <= 512
        parts = [set(sp.train), set(sp.val), set(sp.test)]
        assert sum(map(len, parts)) == n and set().union(*parts) == set(range(n))
    validate_stream(stream)


def test_values_are_substrings_or_absent(small_stream):
    for s in small_stream.services:
        for d in s.dialogs:
            for v in d.values.values():
                assert v != NONE_VALUE and v in d.text


def test_slot_types_are_shared_across_services():
    stream = generate_stream(GeneratorConfig())
    descriptions = [sl.description.split()[-1] for s in stream.services for sl in s.slots]
    assert len(set(descriptions)) < len(descriptions)


@pytest.mark.parametrize("bad", [dict(samples_per_service=(10, 20)), dict(n_services=0),
                                 dict(slots_per_service=(1, 3)), dict(mention_prob=0.0)])
def test_generator_config_validation(bad):
    with pytest.raises(ContractError):
        GeneratorConfig(**bad)


@given(st.integers(3, 3000), st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_split_ratio(n, seed):
    sp = split_indices(n, seed)
    assert len(sp.train) + len(sp.val) + len(sp.test) == n
    assert min(len(sp.train), len(sp.val), len(sp.test)) >= 1
    assert abs(len(sp.train) - 0.7 * n) <= 1.5 and abs(len(sp.val) - 0.1 * n) <= 1


def test_export_ingest_round_trip(small_stream, tmp_path):
    path = tmp_path / "corpus.json"
    small_stream.export(path)
    back = ingest_schema_corpus(path, seed=small_stream.seed)
    assert back.to_corpus() == small_stream.to_corpus()
    assert back.splits == small_stream.splits


def write(tmp_path, payload):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(payload) if not isinstance(payload, str) else payload)
    return path


def test_minimal_corpus(tmp_path):
    path = write(tmp_path, {"services": [{"name": "s", "slots": [{"name": "a", "description": "an a"}],
                                          "dialogs": [{"text": "hello", "values": {}}]}]})
    stream = ingest_schema_corpus(path)
    assert stream.task_ids == ["s"]


def test_duplicate_slot_names_rejected(tmp_path):
    path = write(tmp_path, {"services": [{"name": "s", "slots": [{"name": "a", "description": "x"},
                                                                 {"name": "a", "description": "y"}],
                                          "dialogs": [{"text": "hi"}]}]})
    with pytest.raises(CorpusError, match=r"slots\[1\]\.name"):
        ingest_schema_corpus(path)


def test_malformed_json_reports_position(tmp_path):
    path = write(tmp_path, '{"services": [\n  {"name": }\n]}')
    with pytest.raises(CorpusError, match="line 2"):
        ingest_schema_corpus(path)


def test_multi_service_dialogs_skipped(tmp_path):
    path = write(tmp_path, {"services": [{"name": "s", "slots": [{"name": "a", "description": "x"}],
                                          "dialogs": [{"text": "one"},
                                                      {"text": "two", "services": ["s", "t"]}]}]})
    stream = ingest_schema_corpus(path)
    assert stream.skipped == 1 and len(stream.service("s").dialogs) == 1


def test_memory_sampling(small_stream):
    t = small_stream.task_ids[0]
    n = len(small_stream.train(t))
    assert sample_memory(small_stream, t, 0, 1) == []
    assert sample_memory(small_stream, t, n + 10, 1) == list(range(n))
    a = sample_memory(small_stream, t, 5, 42)
    assert a == sample_memory(small_stream, t, 5, 42) and len(set(a)) == 5
    assert all(0 <= i < n for i in a)
    buf = MemoryBuffer()
    buf.add(t, a, 5)
    train = small_stream.train(t)
    assert all(d in train for d in buf.examples(small_stream, t))
    with pytest.raises(ContractError):
        buf.add(t, a, 4)
    assert MemoryBuffer.from_dict(json.loads(json.dumps(buf.to_dict()))) == buf


def test_proportional_budget_examples():
    assert proportional_budget({"a": 100, "b": 300}, 100) == {"a": 25, "b": 75}
    assert proportional_budget({t: 80 for t in "abc"}, 150) == {t: 50 for t in "abc"}
    with pytest.raises(ContractError):
        proportional_budget({"a": 1, "b": 1}, 1)


def largest_remainder(sizes, budget):
    """Textbook Hamilton apportionment, valid when every quota is at least 1."""
    total = sum(sizes)
    quotas = [budget * s / total for s in sizes]
    caps = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: -(quotas[i] - caps[i]))
    for i in order[:budget - sum(caps)]:
        caps[i] += 1
    return caps


@given(st.lists(st.integers(1, 500), min_size=1, max_size=20), st.integers(0, 2000))
@settings(max_examples=200, deadline=None)
def test_budget_preserves_total(sizes, extra):
    budget = len(sizes) + extra
    caps = proportional_budget({f"t{i}": s for i, s in enumerate(sizes)}, budget)
    assert sum(caps.values()) == budget and min(caps.values()) >= 1
    quotas = [budget * s / sum(sizes) for s in sizes]
    if min(quotas) >= 1:
        fractional = [q - int(q) for q in quotas]
        if len(set(fractional)) == len(fractional):  # no remainder ties
            assert list(caps.values()) == largest_remainder(sizes, budget)
