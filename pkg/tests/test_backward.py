import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cptdst import autodiff as ad
from cptdst.backward import accept_rule, accept_update, backward_transfer_task, gated_gradient
from cptdst.data import dataset_loss, task_pairs, task_query
from cptdst.errors import ContractError
from cptdst.forward import PromptBank, Schedule
from cptdst.model import init_prompt_random

SCHED = Schedule(batch_size=8, backward_lr=0.05, backward_optimizer="sgd")


def test_gate_examples():
    g, d = gated_gradient(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert d.applied and d.dot == 5.0
    np.testing.assert_array_equal(g, [1.0, 2.0])
    g, d = gated_gradient(np.array([1.0, -3.0]), np.array([-1.0, 3.0]))
    assert not d.applied and not g.any()
    g, d = gated_gradient(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert d.dot == 0.0 and not d.applied and not g.any()


def test_gate_shape_and_finiteness():
    with pytest.raises(ContractError):
        gated_gradient(np.ones(2), np.ones(3))
    with pytest.raises(FloatingPointError):
        gated_gradient(np.array([np.nan]), np.ones(1))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=8), st.data())
def test_gate_property(a, data):
    b = data.draw(st.lists(st.integers(-5, 5), min_size=len(a), max_size=len(a)))
    g_ori, g_ref = np.array(a, float), np.array(b, float)
    g, d = gated_gradient(g_ori, g_ref)
    dot = sum(x * y for x, y in zip(a, b))  # exact integer arithmetic
    assert d.applied == (dot > 0)
    np.testing.assert_array_equal(g, g_ori if dot > 0 else np.zeros_like(g_ori))


def fit(model, prompt, pairs, steps):
    opt = ad.Adam(0.3)
    for _ in range(steps):
        ad.backward(model.loss([p[0] for p in pairs], [p[1] for p in pairs], prompt))
        opt.step([prompt.group()])
    return prompt


@pytest.fixture
def task_setup(tiny_backbone, small_stream):
    t = small_stream.task_ids[0]
    train = task_pairs(tiny_backbone, small_stream, t, small_stream.train(t))
    prompt = fit(tiny_backbone, init_prompt_random(tiny_backbone, 0, t), train[:16], 10)
    return t, train, prompt


def test_zero_epochs_and_isolation(tiny_backbone, task_setup):
    t, train, prompt = task_setup
    before = prompt.digest()
    res = backward_transfer_task(tiny_backbone, prompt, train[:8], train[8:16], 0, 0, SCHED)
    assert res.candidate.digest() == before and res.applied_fraction == 0.0
    backward_transfer_task(tiny_backbone, prompt, train[:8], train[8:16], 1, 0, SCHED)
    assert prompt.digest() == before
    with pytest.raises(ContractError):
        backward_transfer_task(tiny_backbone, prompt, train[:8], [], 1, 0, SCHED)


def test_twin_task_gate_mostly_applies(tiny_backbone, small_stream):
    t = small_stream.task_ids[0]
    train = task_pairs(tiny_backbone, small_stream, t, small_stream.train(t))
    prompt = init_prompt_random(tiny_backbone, 0, t)
    res = backward_transfer_task(tiny_backbone, prompt, train[:16], train[16:], 3, 1, SCHED)
    assert res.applied_fraction >= 0.8
    assert all(e["dot"] > 0 for e in res.gate_log if e["applied"])


def test_adversarial_data_keeps_memory_loss(tiny_backbone, task_setup):
    t, train, prompt = task_setup
    memory = train[:8]
    prompt = fit(tiny_backbone, prompt.copy(), memory, 40)
    # the memory inputs paired with each other's targets
    shuffled = [(inp, memory[(n + 1) % 8][1]) for n, (inp, _) in enumerate(memory)]
    start = dataset_loss(tiny_backbone, prompt, memory, per_token=False)
    trace = []
    res = backward_transfer_task(tiny_backbone, prompt, shuffled, memory, 2, 2,
                                 Schedule(batch_size=8, backward_lr=0.01, backward_optimizer="sgd", clip_norm=None),
                                 on_step=lambda c, d: trace.append(dataset_loss(tiny_backbone, c, memory,
                                                                                per_token=False)))
    assert all(e["dot"] > 0 for e in res.gate_log if e["applied"])
    assert max(trace) <= start + 0.05 * abs(start)


def test_accept_rule():
    assert not accept_rule(1.0, 1.0, 0.5, 0.5)
    assert accept_rule(1.0, 0.9, 0.5, 0.5)
    assert not accept_rule(1.0, 0.9, 0.5, 0.4)
    assert accept_rule(1.0, 0.9, 0.5, 0.6)
    assert not accept_rule(1.0, 1.1, 0.5, 0.9)


def test_accept_update(tiny_backbone, small_stream, task_setup):
    t, train, prompt = task_setup
    bank = PromptBank()
    bank.add(t, prompt)
    snapshot = bank.digest()
    memory = small_stream.train(t)[:12]
    query = task_query(small_stream, t)
    same = accept_update(tiny_backbone, prompt, prompt.copy(), memory, query, bank, t)
    assert not same.accepted and bank.digest() == snapshot
    better = fit(tiny_backbone, prompt.copy(), task_pairs(tiny_backbone, small_stream, t, memory), 15)
    dec = accept_update(tiny_backbone, prompt, better, memory, query, bank, t)
    assert dec.new_loss < dec.old_loss
    assert dec.accepted == (dec.new_jga >= dec.old_jga)
    if dec.accepted:
        assert bank.get(t).digest() == better.digest()
    assert set(dec.to_dict()) == {"prev_task", "old_loss", "new_loss", "old_jga", "new_jga", "accepted"}
