import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakloc.constraints import SupervisionLevel, build_constraints
from weakloc.model import DataError
from weakloc.pipeline import (ExperimentConfig, mix_assignment, relocate, run_level, run_mixed,
                              scale_tracks, split_train_calibration)


@pytest.mark.parametrize("n,frac,n_cal", [(10, 0.1, 1), (11, 0.1, 2), (3, 0.5, 2), (20, 0.25, 5)])
def test_calibration_split_takes_the_last_ids(n, frac, n_cal):
    ids = [f"v{i:02d}" for i in range(n)]
    train, calib = split_train_calibration(reversed(ids), frac)
    assert calib == ids[n - n_cal:] and train == ids[:n - n_cal]
    assert len(calib) == math.ceil(frac * n)


def test_calibration_split_errors():
    with pytest.raises(ValueError):
        split_train_calibration(["a", "b"], 0.0)
    with pytest.raises(ValueError):
        split_train_calibration(["a", "b"], 1.0)
    with pytest.raises(DataError):
        split_train_calibration(["a"], 0.5)


def test_relocate_packs_rows(small_synth):
    ds = small_synth.dataset
    lv = SupervisionLevel.parse("temporal")
    ids = ds.split_ids("train")[1::2]
    sets = build_constraints(ds, lv, small_synth.annotations(lv, ids), ids)
    rows, local = relocate(sets)
    pos = 0
    for s, t in zip(sets, local):
        assert t.row_start == pos and t.num_rows == s.num_rows
        assert np.array_equal(rows[pos:pos + s.num_rows], np.arange(s.row_start, s.row_end))
        shift = pos - s.row_start
        assert np.array_equal(t.fixed_one[:, 0], s.fixed_one[:, 0] + shift)
        assert np.array_equal(t.fixed_one[:, 1], s.fixed_one[:, 1])
        for a, b in zip(s.bags, t.bags):
            assert a.class_id == b.class_id and np.array_equal(b.rows, a.rows + shift)
        pos += s.num_rows
    assert len(rows) == pos


def test_scale_tracks(small_synth):
    ds = small_synth.dataset
    assert scale_tracks(ds, 1.0) is ds
    big = scale_tracks(ds, 2.0)
    for a, b in zip(ds.tracks, big.tracks):
        assert np.allclose(b.boxes[:, 2] - b.boxes[:, 0], 2 * (a.boxes[:, 2] - a.boxes[:, 0]))
        assert np.allclose(b.boxes[:, :2] + b.boxes[:, 2:], a.boxes[:, :2] + a.boxes[:, 2:])
    assert big.M == ds.M and big.instances == ds.instances


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 1000))
def test_mix_assignment_is_nested(n, seed):
    ids = [f"v{i}" for i in range(n)]
    prev = set()
    for f in np.linspace(0, 1, 11):
        strong = {v for v, s in mix_assignment(ids, f, seed).items() if s}
        assert len(strong) == round(f * n)
        assert prev <= strong
        prev = strong
    assert prev == set(ids)


def test_mix_assignment_rejects_bad_fraction():
    with pytest.raises(ValueError):
        mix_assignment(["a"], 1.5, 0)


def test_run_level_smoke(small_synth):
    cfg = ExperimentConfig(iterations=1500, calibrate_frac=0.25)
    res = run_level(small_synth.dataset, small_synth.features, small_synth.annotations,
                    SupervisionLevel.parse("full"), cfg)
    assert not set(res.train_ids) & set(res.calib_ids)
    assert set(res.test_ids) == set(small_synth.dataset.split_ids("test"))
    spans = [small_synth.dataset.rows_of(v) for v in res.train_ids]
    assert res.solve.Y.shape[0] == sum(b - a for a, b in spans)
    assert set(res.report["map"]) == {"0.2", "0.5"}
    assert res.report["map"]["0.5"] <= res.report["map"]["0.2"]


def test_mixed_endpoints_equal_pure_levels(small_synth):
    cfg = ExperimentConfig(iterations=800, calibrate_frac=0.25)
    args = (small_synth.dataset, small_synth.features, small_synth.annotations)
    video, full = SupervisionLevel.parse("video"), SupervisionLevel.parse("full")
    for f, lv in ((0.0, video), (1.0, full)):
        mixed = run_mixed(*args, video, full, f, cfg)
        pure = run_level(*args, lv, cfg)
        assert mixed.report == pure.report
        assert np.array_equal(mixed.solve.Y, pure.solve.Y)
