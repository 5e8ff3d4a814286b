import numpy as np
import pytest

from stdplm.data import (
    NormalizationStats,
    SpatialTemporalDataset,
    few_shot_count,
    load_pems,
    make_windows,
    save_dataset,
    split_6_2_2,
    synthesize_timestamps,
)
from stdplm.errors import ShapeError, ValidationError
from stdplm.spectral import SensorGraph, time_indices
from stdplm.synthetic import diffusion_sinusoid


def _write_pems(tmp_path, data, edges, name="toy"):
    np.savez(tmp_path / f"{name}.npz", data=data)
    lines = ["from,to,cost"] + [f"{a},{b},{c}" for a, b, c in edges]
    (tmp_path / f"{name}.csv").write_text("\n".join(lines) + "\n")
    return tmp_path / f"{name}.npz", tmp_path / f"{name}.csv"


def test_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(100, 5, 2))
    npz, csv = _write_pems(tmp_path, data, [(0, 1, 3.5), (1, 2, 1.0), (3, 4, 2.0)])
    ds = load_pems(npz, csv, channels=None)
    assert ds.data.shape == (100, 5, 2)
    np.testing.assert_array_equal(ds.data, data)
    assert ds.graph.n_edges == 3
    assert ds.graph.adjacency[0, 1] == 1.0 and ds.graph.adjacency[1, 0] == 0.0
    assert np.all(np.diff(ds.timestamps) == 300)
    assert load_pems(npz, csv).data.shape == (100, 5, 1)
    weighted = load_pems(npz, csv, binarize=False)
    assert weighted.graph.adjacency[0, 1] == 3.5


def test_missing_entries_become_unobserved(tmp_path):
    data = np.ones((50, 3, 1))
    data[4, 1, 0] = np.nan
    npz, csv = _write_pems(tmp_path, data, [(0, 1, 1.0)])
    ds = load_pems(npz, csv)
    assert not ds.observed[4, 1, 0] and ds.data[4, 1, 0] == 0.0
    assert ds.observed.sum() == data.size - 1


def test_load_errors(tmp_path):
    npz, csv = _write_pems(tmp_path, np.ones((30, 3)), [(0, 3, 1.0)])
    with pytest.raises(ValidationError):
        load_pems(npz, csv)
    np.savez(tmp_path / "bad.npz", data=np.array(["a", "b"]))
    with pytest.raises(ValidationError):
        load_pems(tmp_path / "bad.npz", csv)
    (tmp_path / "noheader.csv").write_text("0,1,1.0\n")
    npz, _ = _write_pems(tmp_path, np.ones((30, 3)), [])
    with pytest.raises(ValidationError):
        load_pems(npz, tmp_path / "noheader.csv")


def test_save_dataset_round_trip(tmp_path):
    ds = diffusion_sinusoid(6, 120, seed=1)
    npz, csv = save_dataset(ds, tmp_path)
    back = load_pems(npz, csv, name=ds.name)
    np.testing.assert_allclose(back.data, ds.data)
    np.testing.assert_array_equal(back.timestamps, ds.timestamps)
    np.testing.assert_array_equal(back.graph.adjacency, ds.graph.adjacency)


def test_dataset_validation():
    graph = SensorGraph.from_adjacency(np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        SpatialTemporalDataset(np.zeros((10, 4, 1)), synthesize_timestamps(10), graph)
    stamps = synthesize_timestamps(10)
    stamps[5] += 1
    with pytest.raises(ValidationError):
        SpatialTemporalDataset(np.zeros((10, 3, 1)), stamps, graph)


def test_synthesized_timestamps_start_monday_midnight():
    tod, dow = time_indices(synthesize_timestamps(3), 300)
    assert tod.tolist() == [0, 1, 2] and dow.tolist() == [0, 0, 0]


@pytest.mark.parametrize("n,expected", [(100, (60, 20, 20)), (101, (60, 20, 21)), (17856, (10713, 3571, 3572))])
def test_split(n, expected):
    split = split_6_2_2(n)
    assert tuple(len(r) for r in split) == expected
    assert split.train.start == 0 and split.train.stop == split.val.start
    assert split.val.stop == split.test.start and split.test.stop == n


def test_split_too_short():
    with pytest.raises(ValidationError):
        split_6_2_2(50)


def test_forecast_window_counts_and_content():
    values = np.arange(40.0).reshape(40, 1, 1)
    stamps = synthesize_timestamps(40)
    assert len(make_windows(values, stamps, range(0, 24), "forecast")) == 1
    ws = make_windows(values, stamps, range(5, 35), "forecast")
    assert len(ws) == 30 - 23
    s = ws[0]
    assert s.x_in[:, 0, 0].tolist() == list(range(5, 17))
    assert s.target[:, 0, 0].tolist() == list(range(17, 29))
    assert s.eval_mask.all()


def test_window_count_on_pems_sized_range():
    n = 17856 * 6 // 10
    values = np.zeros((n, 1, 1))
    assert len(make_windows(values, synthesize_timestamps(n), range(0, n), "forecast")) == n - 23


def test_windows_do_not_cross_split_boundaries():
    values = np.arange(200.0).reshape(200, 1, 1)
    stamps = synthesize_timestamps(200)
    split = split_6_2_2(200)
    ws = make_windows(values, stamps, split.val, "forecast")
    b = ws.batch(np.arange(len(ws)))
    assert len(ws) == 40 - 23
    assert b["x"].min() >= split.val.start and b["target"].max() < split.val.stop


def test_impute_window():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(12, 4, 1))
    observed = rng.random(values.shape) > 0.1
    available = observed & (rng.random(values.shape) > 0.5)
    ws = make_windows(values, synthesize_timestamps(12), range(0, 12), "impute", observed, available)
    assert len(ws) == 1
    s = ws[0]
    np.testing.assert_array_equal(s.target, values)
    assert not np.any(s.eval_mask & ~observed)
    assert not np.any(s.eval_mask & s.mask_in)
    assert np.all(s.x_in[~s.mask_in] == 0)


def test_normalization_uses_observed_training_entries_only():
    data = np.zeros((10, 2, 2))
    data[:6, :, 0] = np.array([1.0, 3.0])
    data[:6, :, 1] = 5.0
    data[6:] = 1000.0  # outside the training range
    observed = np.ones(data.shape, dtype=bool)
    observed[0, 0, 0] = False
    data[0, 0, 0] = -999.0
    stats = NormalizationStats.fit(data, observed, range(0, 6))
    assert stats.mean[0] == pytest.approx(np.mean([3.0] + [1.0, 3.0] * 5))
    assert stats.std[1] == 1.0  # constant channel
    z = stats.normalize(data)
    np.testing.assert_allclose(stats.denormalize(z), data)
    back = NormalizationStats.from_dict(stats.to_dict())
    np.testing.assert_array_equal(back.mean, stats.mean)


def test_few_shot_count():
    assert few_shot_count(1000, 0.1) == 100
    assert few_shot_count(1000, 1.0) == 1000
    assert few_shot_count(7, 0.3) == 2
    with pytest.raises(ValidationError):
        few_shot_count(5, 0.1)
    with pytest.raises(ValidationError):
        few_shot_count(5, 0.0)


def test_synthetic_dataset_is_deterministic():
    a, b = diffusion_sinusoid(8, 300, seed=3), diffusion_sinusoid(8, 300, seed=3)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.data.shape == (300, 8, 1)
    assert not np.array_equal(a.data, diffusion_sinusoid(8, 300, seed=4).data)


def test_synthetic_phase_options():
    shared = diffusion_sinusoid(8, 288, seed=0, noise=0.0)
    independent = diffusion_sinusoid(8, 288, seed=0, noise=0.0, phase_spread=None)
    assert shared.data.shape == independent.data.shape
    assert not np.array_equal(shared.data, independent.data)
