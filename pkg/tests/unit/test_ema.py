import math

import numpy as np
import pytest

from carp_tools.carplib.ema import CosineSchedule, EmaSchedule, ema_update, schedule_value
from carp_tools.carplib.errors import ContractError
from tests.testlib import small_params


def test_schedule_endpoints():
    s = CosineSchedule(0.99, 1.0, 1000)
    assert schedule_value(s, 0) == 0.99
    assert schedule_value(s, 1000) == 1.0
    assert schedule_value(s, 500) == pytest.approx(0.995)


def test_schedule_monotone():
    s = CosineSchedule(0.6, 0.006, 37)
    values = [schedule_value(s, i) for i in range(38)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[-1] == 0.006


def test_schedule_formula():
    s = CosineSchedule(2.0, 1.0, 8)
    assert schedule_value(s, 2) == pytest.approx(1.0 + 0.5 * (1 + math.cos(math.pi / 4)))


@pytest.mark.parametrize("step", [-1, 11])
def test_schedule_out_of_range(step):
    with pytest.raises(ContractError):
        schedule_value(CosineSchedule(1.0, 0.0, 10), step)


def test_schedule_needs_steps():
    with pytest.raises(ContractError):
        CosineSchedule(1.0, 0.0, 0)


def test_ema_schedule():
    s = EmaSchedule(0.99, 1.0, 10)
    assert s.value(0) == 0.99
    assert s.value(10) == 1.0
    with pytest.raises(ContractError):
        EmaSchedule(0.9, 0.5, 10)


def test_ema_update():
    teacher, student = small_params(1), small_params(2)
    t0 = {k: v.copy() for k, v in teacher.leaves().items()}
    ret = ema_update(teacher, student, 0.75)
    assert ret is teacher
    for name, leaf in teacher.leaves().items():
        assert np.allclose(leaf, 0.75 * t0[name] + 0.25 * student.leaves()[name])


def test_ema_update_one_keeps_teacher():
    teacher, student = small_params(1), small_params(2)
    t0 = {k: v.copy() for k, v in teacher.leaves().items()}
    ema_update(teacher, student, 1.0)
    assert all(np.array_equal(t0[k], v) for k, v in teacher.leaves().items())


def test_ema_update_zero_copies_student():
    teacher, student = small_params(1), small_params(2)
    ema_update(teacher, student, 0.0)
    s = student.leaves()
    assert all(np.array_equal(s[k], v) for k, v in teacher.leaves().items())
    # A copy, not an alias.
    teacher.prototypes[0, 0] += 1
    assert teacher.prototypes[0, 0] != student.prototypes[0, 0]


def test_ema_update_rejects_mismatch():
    with pytest.raises(ContractError):
        ema_update(small_params(1), small_params(1, hidden=3), 0.5)
    with pytest.raises(ContractError):
        ema_update(small_params(1), small_params(2), 1.5)
