import json
import math

import numpy as np
import pytest

from vicount.errors import DataError
from vicount.metrics import (
    MetricsWarning,
    PairFlowRecord,
    VideoEvalRecord,
    mae_rmse,
    miae_mioe,
    miae_moae,
    summarize,
    wrae,
    write_report,
)


def record(y_true, y_pred, n_frames=10, clip_id="c", flows=()):
    return VideoEvalRecord(
        clip_id=clip_id, y_true=y_true, y_pred=y_pred, n_frames=n_frames,
        pair_flows=[PairFlowRecord(*f) for f in flows],
    )


class TestMaeRmse:
    def test_perfect_predictions(self):
        assert mae_rmse([record(10, 10), record(3, 3)]) == (0.0, 0.0)

    def test_single_video(self):
        mae, rmse = mae_rmse([record(100, 141)])
        assert mae == 41.0 and rmse == 41.0

    def test_two_videos_hand_arithmetic(self):
        mae, rmse = mae_rmse([record(10, 13), record(10, 6)])
        assert mae == 3.5
        assert rmse == pytest.approx(math.sqrt(12.5), rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            mae_rmse([])

    def test_mae_never_exceeds_rmse(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            records = [
                record(float(rng.integers(1, 500)), float(rng.uniform(0, 500)))
                for _ in range(n)
            ]
            mae, rmse = mae_rmse(records)
            assert mae <= rmse + 1e-12


class TestWrae:
    def test_perfect_predictions(self):
        assert wrae([record(10, 10), record(7, 7)]) == 0.0

    def test_single_video(self):
        assert wrae([record(10, 12)]) == pytest.approx(20.0, rel=1e-12)

    def test_weighted_two_videos(self):
        records = [record(10, 11, n_frames=10), record(20, 20, n_frames=30)]
        assert wrae(records) == pytest.approx(2.5, rel=1e-12)

    def test_scale_invariance(self, rng):
        records = [
            record(float(rng.integers(1, 100)), float(rng.uniform(1, 100)),
                   n_frames=int(rng.integers(1, 50)))
            for _ in range(8)
        ]
        base = wrae(records)
        scaled = [
            record(r.y_true * 3.7, r.y_pred * 3.7, n_frames=r.n_frames)
            for r in records
        ]
        assert wrae(scaled) == pytest.approx(base, rel=1e-9)

    def test_zero_truth_excluded_with_warning(self):
        with pytest.warns(MetricsWarning):
            value = wrae([record(0, 5, n_frames=100), record(10, 12, n_frames=10)])
        assert value == pytest.approx(20.0, rel=1e-12)

    def test_all_zero_truth_rejected(self):
        with pytest.warns(MetricsWarning):
            with pytest.raises(DataError):
                wrae([record(0, 5)])


class TestMiaeMoae:
    def test_oracle_predictions_near_zero(self):
        flows = [(3.0001, 3, 2.0002, 2), (1.0001, 1, 0.0001, 0)]
        miae, moae = miae_moae([record(10, 10, flows=flows)])
        assert miae <= 1e-2 and moae <= 1e-2

    def test_hand_arithmetic(self):
        flows = [(4, 3, 0, 0), (5, 2, 0, 0)]
        miae, _ = miae_moae([record(10, 10, flows=flows)])
        assert miae == 2.0

    def test_no_flows_rejected(self):
        with pytest.raises(DataError):
            miae_moae([record(10, 10)])

    def test_mioe_alias(self):
        assert miae_mioe is miae_moae

    def test_permutation_invariance(self, rng):
        flows = [tuple(rng.uniform(0, 9, 4)) for _ in range(6)]
        base = miae_moae([record(1, 1, flows=flows)])
        perm = list(flows)
        rng.shuffle(perm)
        assert miae_moae([record(1, 1, flows=perm)]) == pytest.approx(base)


class TestReport:
    def test_summarize_and_write(self, tmp_path):
        records = [
            record(10, 12, n_frames=4, clip_id="a", flows=[(1, 1, 2, 2)]),
            record(20, 18, n_frames=6, clip_id="b", flows=[(3, 1, 0, 1)]),
        ]
        report = write_report(records, tmp_path / "report.json", tmp_path / "report.csv")
        assert set(report) == {"MAE", "RMSE", "WRAE", "MIAE", "MOAE", "per_video"}
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["MAE"] == 2.0
        assert len(data["per_video"]) == 2
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines[0] == "clip_id,y_true,y_pred,abs_error,n_frames"
        assert len(lines) == 3

    def test_summarize_without_flows(self):
        report = summarize([record(5, 5)])
        assert report["MIAE"] is None and report["MOAE"] is None
