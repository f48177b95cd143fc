import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_dpi.autograd import Tensor
from fewshot_dpi.optim import Adam, AdamState, WarmupLinearSchedule, adam_step, schedule_lr


def reference_adamw(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop version of decoupled-decay Adam."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * wd * theta
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_schedule_examples():
    s = WarmupLinearSchedule(warmup_steps=10, total_steps=110, peak_lr=3e-4)
    assert schedule_lr(s, 0) == 0.0
    assert schedule_lr(s, 5) == pytest.approx(1.5e-4)
    assert schedule_lr(s, 10) == pytest.approx(3e-4)
    assert schedule_lr(s, 60) == pytest.approx(1.5e-4)
    assert schedule_lr(s, 110) == 0.0


def test_schedule_errors():
    s = WarmupLinearSchedule(2, 10, 1.0)
    for bad in (-1, 11):
        with pytest.raises(ValueError):
            schedule_lr(s, bad)
    with pytest.raises(ValueError):
        WarmupLinearSchedule(10, 10, 1.0)
    with pytest.raises(ValueError):
        WarmupLinearSchedule(-1, 10, 1.0)


def test_zero_warmup_starts_at_peak():
    s = WarmupLinearSchedule(0, 4, 2.0)
    assert [schedule_lr(s, i) for i in range(5)] == [2.0, 1.5, 1.0, 0.5, 0.0]


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 50), st.integers(1, 200), st.floats(1e-6, 1.0))
def test_schedule_piecewise_linear(warmup, extra, peak):
    s = WarmupLinearSchedule(warmup, warmup + extra, peak)
    values = np.array([schedule_lr(s, i) for i in range(s.total_steps + 1)])
    assert values.min() >= 0 and values.max() <= peak * (1 + 1e-12)
    assert values[warmup] == pytest.approx(peak)
    assert values[-1] == 0.0
    # second differences vanish away from the single kink at ``warmup``
    second = np.diff(values, 2)
    kink = warmup - 1
    mask = np.ones_like(second, dtype=bool)
    if 0 <= kink < second.size:
        mask[kink] = False
    assert np.allclose(second[mask], 0.0, atol=1e-12 * max(1.0, peak))


def test_warmup_fraction():
    s = WarmupLinearSchedule.with_warmup_fraction(200, 1e-3, 0.1)
    assert s.warmup_steps == 20


def test_zero_grad_no_decay_is_noop():
    p = Tensor(np.array([1.0, -2.0, 3.0]), dtype=np.float64)
    before = p.data.copy()
    state = AdamState(learning_rate=0.1, weight_decay=0.0)
    adam_step([p], [np.zeros(3)], state)
    np.testing.assert_array_equal(p.data, before)
    assert state.step == 1


def test_zero_grad_with_decay_scales():
    p = Tensor(np.array([1.0, -2.0, 3.0]), dtype=np.float64)
    state = AdamState(learning_rate=0.1, weight_decay=0.5)
    adam_step([p], [np.zeros(3)], state)
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.5), rtol=1e-15)


def test_decay_mask_exempts():
    a = Tensor(np.ones(2), dtype=np.float64)
    b = Tensor(np.ones(2), dtype=np.float64)
    adam_step([a, b], [np.zeros(2), np.zeros(2)], AdamState(learning_rate=0.1, weight_decay=1.0),
              decay_mask=[True, False])
    np.testing.assert_allclose(a.data, 0.9)
    np.testing.assert_array_equal(b.data, 1.0)


def test_matches_scalar_reference():
    grads = [0.3, -1.2, 0.7, 2.0, -0.1]
    p = Tensor(np.array([0.8]), dtype=np.float64)
    state = AdamState(learning_rate=0.05, weight_decay=0.02)
    for g in grads:
        adam_step([p], [np.array([g])], state)
    assert p.data[0] == pytest.approx(reference_adamw(0.8, grads, 0.05, 0.02), abs=1e-14)


def test_quadratic_decreases():
    theta = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([theta], AdamState(learning_rate=0.05, weight_decay=0.0))
    for _ in range(10):
        opt.zero_grad()
        (theta * theta).sum().backward()
        opt.step()
    assert abs(theta.data[0]) < 1.0
    assert opt.state.step == 10


def test_scheduled_optimizer_uses_lr_of_current_step():
    p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([p], AdamState(weight_decay=0.0), WarmupLinearSchedule(2, 4, 1.0))
    lrs = []
    for _ in range(4):
        p.grad = np.array([1.0])
        lrs.append(opt.step())
    assert lrs == [0.0, 0.5, 1.0, 0.5]


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([Tensor(np.zeros(3))], [np.zeros(2)], AdamState())
