import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyra.sched import ConstCosineSchedule, lr_at


def test_default_switch_is_two_thirds():
    assert ConstCosineSchedule(0.01, 100).switch_step == 66
    assert ConstCosineSchedule(0.01, 3000).switch_step == 2000


def test_endpoints_and_midpoint():
    s = ConstCosineSchedule(0.01, 100, 66, 0.001)
    assert s(0) == 0.01
    assert s(66) == 0.01
    assert s(100) == 0.001
    # midpoint of the decay (step 83) is exactly the average
    assert s(83) == (0.01 + 0.001) / 2


def test_rows_and_module_function():
    s = ConstCosineSchedule(0.01, 100)
    rows = s.rows()
    assert len(rows) == 101
    assert rows[0] == (0, 0.01) and rows[-1] == (100, 0.0)
    assert lr_at(70, s) == s.lr_at(70)


def test_hand_value_inside_decay():
    s = ConstCosineSchedule(1.0, 10, 4, 0.0)
    assert s(6) == pytest.approx(0.5 * (1 + math.cos(math.pi * 2 / 6)))


def test_out_of_range_steps():
    s = ConstCosineSchedule(0.01, 10)
    with pytest.raises(ValueError):
        s(11)
    with pytest.raises(ValueError):
        s(-1)


@pytest.mark.parametrize("kw", [dict(base_lr=0.0, total_steps=10), dict(base_lr=0.1, total_steps=0),
                                dict(base_lr=0.1, total_steps=10, switch_step=10),
                                dict(base_lr=0.1, total_steps=10, final_lr=-1.0)])
def test_invalid(kw):
    with pytest.raises(ValueError):
        ConstCosineSchedule(**kw)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-5, 1.0), st.integers(2, 500), st.floats(0.0, 1.0), st.floats(0.0, 0.99))
def test_monotone_non_increasing(base, T, frac_final, frac_switch):
    s = ConstCosineSchedule(base, T, int(frac_switch * (T - 1)), base * frac_final)
    lrs = np.array([v for _, v in s.rows()])
    assert np.all(np.diff(lrs) <= 0)
    assert lrs[0] == base and lrs[-1] == s.final_lr
