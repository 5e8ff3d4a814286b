import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stdplm.errors import ValidationError
from stdplm.masks import (
    condition_missing,
    condition_missing_batch,
    generate_cm,
    generate_rm,
    graph_regions,
    is_block_closed,
    load_mask,
    save_mask,
)
from stdplm.synthetic import random_graph


def test_rm_extremes():
    assert generate_rm((5, 4, 1), 0.0, 0).all()
    assert not generate_rm((5, 4, 1), 1.0, 0).any()
    with pytest.raises(ValidationError):
        generate_rm((2, 2), 1.5, 0)


def test_rm_seeded():
    a, b = generate_rm((50, 10, 1), 0.7, 3), generate_rm((50, 10, 1), 0.7, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_rm((50, 10, 1), 0.7, 4))


def test_cm_extremes_and_structure():
    graph = random_graph(20, 0.15, 0)
    assert generate_cm(graph, 100, 1, 0.0, 0).all()
    mask = generate_cm(graph, 1000, 1, 0.7, 0, n_regions=4)
    regions = graph_regions(graph, 4, 0)
    assert is_block_closed(mask, regions)
    largest = 3 * np.bincount(regions).max()
    assert abs((1 - mask.mean()) * mask.size - 0.7 * mask.size) <= largest


def test_block_closure_detects_violations():
    regions = np.array([0, 0, 1])
    mask = np.ones((6, 3, 1), dtype=bool)
    mask[0:3, 0:2] = False
    assert is_block_closed(mask, regions)
    mask[4, 2] = False
    assert not is_block_closed(mask, regions)


def test_regions_on_disconnected_graph():
    a = np.zeros((8, 8))
    a[0, 1] = a[1, 2] = a[2, 3] = 1
    a[4, 5] = a[5, 6] = a[6, 7] = 1
    regions = graph_regions(a + a.T, 2, 0)
    assert set(regions[:4]).isdisjoint(regions[4:])


def test_default_region_count():
    graph = random_graph(70, 0.05, 1)
    assert len(np.unique(graph_regions(graph))) == 2


def test_condition_missing_contract():
    rng = np.random.default_rng(0)
    mask_in = rng.random((12, 10, 1)) > 0.3
    model_mask, eval_mask = condition_missing(mask_in, (0.1, 0.9), 5)
    assert not np.any(model_mask & eval_mask)
    assert not np.any(eval_mask & ~mask_in)
    assert np.array_equal(model_mask | eval_mask, mask_in)


def test_condition_missing_fixed_ratio():
    model_mask, eval_mask = condition_missing(np.ones((12, 10, 1), dtype=bool), (0.5, 0.5), 0)
    assert abs(eval_mask.sum() - 60) <= 1
    model_mask, eval_mask = condition_missing(np.ones((12, 10, 1), dtype=bool), (0.0, 0.0), 0)
    assert model_mask.all() and not eval_mask.any()


def test_condition_missing_needs_observations():
    with pytest.raises(ValidationError):
        condition_missing(np.zeros((3, 2), dtype=bool), (0.1, 0.9), 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), lo=st.floats(0, 1), width=st.floats(0, 1))
def test_condition_missing_properties(seed, lo, width):
    hi = min(1.0, lo + width)
    rng = np.random.default_rng(seed)
    mask_in = rng.random((4, 6, 5)) > 0.4
    model_mask, eval_mask = condition_missing_batch(mask_in, (lo, hi), rng)
    assert not np.any(model_mask & eval_mask)
    assert not np.any(eval_mask & ~mask_in)
    n_obs = mask_in.reshape(4, -1).sum(1)
    hidden = eval_mask.reshape(4, -1).sum(1)
    assert np.all(hidden >= np.floor(lo * n_obs) - 1) and np.all(hidden <= np.ceil(hi * n_obs) + 1)


def test_mask_persistence(tmp_path):
    mask = generate_rm((13, 7, 2), 0.4, 1)
    save_mask(tmp_path, mask, "rm", 0.4, 1)
    back, meta = load_mask(tmp_path)
    assert np.array_equal(back, mask)
    assert meta["pattern"] == "rm" and meta["seed"] == 1 and meta["shape"] == [13, 7, 2]
    assert meta["missing_fraction"] == pytest.approx(1 - mask.mean())
