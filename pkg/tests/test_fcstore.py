import json

import numpy as np
import pytest

from rankcore.dataset import SynthConfig, generate_synthetic, window_dataset
from rankcore.fcstore import FcStore, compute_all
from rankcore.spi import get_operators


@pytest.fixture(scope="module")
def small_dataset():
    cfg = SynthConfig(n_regions=8, n_subjects=2, t_total=210, window_len=70,
                      stride=35, seed=4)
    # 2 subjects x 5 segments of length 70 = 10 samples
    return window_dataset(generate_synthetic(cfg), cfg.window_len, cfg.stride)


def test_compute_all_counts_and_layout(tmp_path, small_dataset):
    ops = get_operators()
    summary = compute_all(small_dataset, ops, tmp_path / "fc")
    assert summary.computed == 200
    assert summary.skipped == 0
    assert summary.failed == 0
    store = FcStore(tmp_path / "fc")
    assert store.operators == sorted(op.name for op in ops)
    sid = small_dataset.sample_ids[0]
    assert (tmp_path / "fc" / "pearson" / f"{sid}.csv").exists()
    fc = store.load("pearson", sid)
    assert fc.values.shape == (8, 8)

    # second run is a pure cache hit
    again = compute_all(small_dataset, ops, tmp_path / "fc")
    assert again.computed == 0
    assert again.skipped == 200
    assert again.failed == 0


def test_compute_all_isolates_corrupt_sample(tmp_path, small_dataset):
    ops = get_operators()
    bad = small_dataset.samples[3]
    bad.data[0, 0] = np.nan  # corrupt one sample in memory
    try:
        summary = compute_all(small_dataset, ops, tmp_path / "fc")
    finally:
        bad.data[0, 0] = 0.0
    assert summary.failed == 20
    assert summary.computed == 180
    assert all(f["sample_id"] == bad.sample_id for f in summary.failures)
    store = FcStore(tmp_path / "fc")
    assert not store.has("pearson", bad.sample_id)
    assert store.has("pearson", small_dataset.sample_ids[0])


def test_force_recomputes(tmp_path, small_dataset):
    ops = get_operators(["pearson"])
    compute_all(small_dataset, ops, tmp_path / "fc")
    summary = compute_all(small_dataset, ops, tmp_path / "fc", force=True)
    assert summary.computed == 10
    assert summary.skipped == 0


def test_parallel_matches_serial(tmp_path, small_dataset):
    ops = get_operators(["pearson", "spearman"])
    compute_all(small_dataset, ops, tmp_path / "serial", jobs=1)
    compute_all(small_dataset, ops, tmp_path / "parallel", jobs=2)
    for op in ops:
        for sid in small_dataset.sample_ids:
            a = (tmp_path / "serial" / op.name / f"{sid}.csv").read_bytes()
            b = (tmp_path / "parallel" / op.name / f"{sid}.csv").read_bytes()
            assert a == b


def test_index_carries_sample_metadata(tmp_path, small_dataset):
    compute_all(small_dataset, get_operators(["pearson"]), tmp_path / "fc")
    index = json.loads((tmp_path / "fc" / "index.json").read_text())
    sid = small_dataset.sample_ids[0]
    assert index["samples"][sid]["subject_id"] == small_dataset.samples[0].subject_id
    assert index["n_regions"] == 8
    assert index["operators"]["pearson"] == sorted(small_dataset.sample_ids)


def test_store_round_trip_precision(tmp_path, small_dataset):
    from rankcore.spi import compute_fc

    op = get_operators(["cov_empirical"])[0]
    compute_all(small_dataset, [op], tmp_path / "fc")
    store = FcStore(tmp_path / "fc")
    for s in small_dataset.samples[:3]:
        direct = compute_fc(op, s).values
        loaded = store.load(op.name, s.sample_id).values
        np.testing.assert_array_equal(loaded, direct)


def test_missing_entry_error(tmp_path, small_dataset):
    compute_all(small_dataset, get_operators(["pearson"]), tmp_path / "fc")
    store = FcStore(tmp_path / "fc")
    with pytest.raises(FileNotFoundError, match="spearman"):
        store.load("spearman", small_dataset.sample_ids[0])
