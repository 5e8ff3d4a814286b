import math

import numpy as np
import pytest

from stdplm.errors import ShapeError, ValidationError
from stdplm.metrics import MetricAccumulator, metrics


def test_arithmetic_example():
    m = metrics([1.0, 2.0], [2.0, 4.0], [1, 1])
    assert m["mae"] == pytest.approx(1.5)
    assert m["rmse"] == pytest.approx(math.sqrt(2.5))
    assert m["mape"] == pytest.approx(50.0)


def test_perfect_prediction():
    assert metrics([3.0, 4.0], [3.0, 4.0], [1, 1]) == {"mae": 0.0, "rmse": 0.0, "mape": 0.0}


def test_zero_target_excluded_from_mape_only():
    m = metrics([1.0, 2.0], [0.0, 4.0], [1, 1])
    assert m["mae"] == pytest.approx(1.5)
    assert m["mape"] == pytest.approx(50.0)


def test_mask_and_errors():
    assert metrics([1.0, 100.0], [2.0, 0.0], [1, 0])["mae"] == 1.0
    with pytest.raises(ValidationError):
        metrics([1.0], [1.0], [0])
    with pytest.raises(ShapeError):
        metrics([1.0, 2.0], [1.0], [1])


def test_streaming_equals_one_shot():
    rng = np.random.default_rng(0)
    y, t = rng.normal(size=(50, 6)), rng.normal(size=(50, 6))
    mask = rng.random((50, 6)) > 0.3
    acc = MetricAccumulator()
    for i in range(0, 50, 7):
        acc.update(y[i:i + 7], t[i:i + 7], mask[i:i + 7])
    one = metrics(y, t, mask)
    for key, value in acc.result().items():
        assert value == pytest.approx(one[key], rel=1e-12)
