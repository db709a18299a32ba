import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sarmatch.cli import read_predictions
from sarmatch.metrics import compute_metrics, distances

DATA = Path(__file__).parent / "data"

# distances in the golden fixture: 0, 5 (3-4-5), 1, sqrt 2, 20, 10 (6-8-10)
GOLDEN = dict(rmse_all=(36 + math.sqrt(2)) / 6, cmr_1=2 / 6, cmr_5=4 / 6, rmse_5=(6 + math.sqrt(2)) / 4,
              fmr_5=2 / 6)


def golden_predictions():
    return read_predictions(DATA / "golden_predictions.csv")


class TestGolden:
    def test_hand_computed_values(self):
        report = compute_metrics(golden_predictions())
        for key, value in GOLDEN.items():
            assert getattr(report, key) == pytest.approx(value, abs=1e-12), key
        assert report.n_pairs == 6

    def test_json_matches_golden_file(self):
        report = compute_metrics(golden_predictions())
        assert report.to_json() == (DATA / "golden_report.json").read_text()

    def test_rms_mode(self):
        report = compute_metrics(golden_predictions(), metric_mode="rms")
        assert report.rmse_all == pytest.approx(math.sqrt(88), abs=1e-12)
        assert report.rmse_5 == pytest.approx(math.sqrt(7), abs=1e-12)
        assert report.cmr_5 == pytest.approx(4 / 6)

    def test_schema_is_stable(self):
        keys = list(json.loads(compute_metrics(golden_predictions()).to_json()))
        assert keys == ["version", "n_pairs", "metric_mode", "rmse_all", "cmr@1", "cmr@5", "rmse@5", "fmr@5",
                        "mean_ms_per_pair", "median_ms_per_pair"]


class TestEdgeCases:
    def test_all_exact(self):
        report = compute_metrics([((i, i), (i, i)) for i in range(5)])
        assert report.rmse_all == 0 and report.cmr_1 == report.cmr_5 == 1 and report.fmr_5 == 0

    def test_three_four_five_boundary(self):
        report = compute_metrics([((3, 4), (0, 0))])
        assert report.cmr_5 == 1 and report.rmse_5 == 5 and report.cmr_1 == 0

    def test_just_outside(self):
        report = compute_metrics([((3, 5), (0, 0))])
        assert report.cmr_5 == 0 and report.rmse_5 is None and report.fmr_5 == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_metrics([])

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            compute_metrics([((0, 0), (0, 0))], metric_mode="median")

    def test_timing(self):
        report = compute_metrics([((0, 0), (0, 0))] * 3, times_ms=[1.0, 2.0, 6.0])
        assert report.mean_ms_per_pair == 3.0 and report.median_ms_per_pair == 2.0


pairs_strategy = st.lists(st.tuples(st.tuples(st.integers(0, 64), st.integers(0, 64)),
                                    st.tuples(st.integers(0, 64), st.integers(0, 64))), min_size=1, max_size=40)


@settings(max_examples=50, deadline=None)
@given(preds=pairs_strategy, seed=st.integers(0, 1000))
def test_permutation_invariant(preds, seed):
    shuffled = [preds[i] for i in np.random.default_rng(seed).permutation(len(preds))]
    assert compute_metrics(preds).as_dict() == compute_metrics(shuffled).as_dict()


@settings(max_examples=50, deadline=None)
@given(preds=pairs_strategy)
def test_invariants(preds):
    report = compute_metrics(preds)
    d = distances(preds)
    rates = [float(np.mean(d <= t)) for t in np.linspace(0, 100, 41)]
    assert all(a <= b for a, b in zip(rates, rates[1:]))
    assert 0 <= report.cmr_1 <= report.cmr_5 <= 1
    assert report.fmr_5 == pytest.approx(1 - report.cmr_5)
    assert report.rmse_5 is None or report.rmse_5 <= 5 * math.sqrt(2)
