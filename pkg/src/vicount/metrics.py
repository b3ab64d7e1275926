"""Video-level counting metrics (MAE, RMSE, frame-weighted relative error)
and per-pair flow metrics (mean absolute inflow/outflow error).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError


class MetricsWarning(UserWarning):
    pass


@dataclass
class PairFlowRecord:
    inflow_pred: float
    inflow_true: float
    outflow_pred: float
    outflow_true: float


@dataclass
class VideoEvalRecord:
    clip_id: str
    y_true: float          # unique individuals in the video
    y_pred: float
    n_frames: int          # weight for the relative-error metric
    pair_flows: list = field(default_factory=list)


def mae_rmse(records) -> tuple[float, float]:
    """Video-level mean absolute and root-mean-square counting error."""
    records = list(records)
    if not records:
        raise DataError("mae_rmse needs at least one record")
    errors = [r.y_pred - r.y_true for r in records]
    mae = sum(abs(e) for e in errors) / len(errors)
    rmse = math.sqrt(sum(e * e for e in errors) / len(errors))
    return mae, rmse


def wrae(records) -> float:
    """Frame-count-weighted relative absolute error, in percent.

    Each video's |error|/truth is weighted by its share of total frames;
    zero-truth videos are excluded with a warning (weights renormalize over
    the rest).
    """
    records = list(records)
    if not records:
        raise DataError("wrae needs at least one record")
    usable = [r for r in records if r.y_true > 0]
    skipped = len(records) - len(usable)
    if skipped:
        warnings.warn(
            f"wrae: excluded {skipped} record(s) with y_true == 0",
            MetricsWarning,
            stacklevel=2,
        )
    if not usable:
        raise DataError("wrae: every record has y_true == 0")
    total_frames = sum(r.n_frames for r in usable)
    if total_frames <= 0:
        raise DataError("wrae: total frame count must be positive")
    return 100.0 * sum(
        (r.n_frames / total_frames) * abs(r.y_pred - r.y_true) / r.y_true
        for r in usable
    )


def miae_moae(records) -> tuple[float, float]:
    """Mean absolute inflow and outflow error over all evaluated pairs."""
    flows = [p for r in records for p in r.pair_flows]
    if not flows:
        raise DataError("miae_moae needs at least one pair flow")
    miae = sum(abs(p.inflow_pred - p.inflow_true) for p in flows) / len(flows)
    moae = sum(abs(p.outflow_pred - p.outflow_true) for p in flows) / len(flows)
    return miae, moae


# Some write-ups call the outflow metric MIOE; same quantity.
miae_mioe = miae_moae


def summarize(records) -> dict:
    """All metrics for a record set, as a flat report dict."""
    mae, rmse = mae_rmse(records)
    miae, moae = miae_moae(records) if any(r.pair_flows for r in records) else (None, None)
    return {
        "MAE": mae,
        "RMSE": rmse,
        "WRAE": wrae(records),
        "MIAE": miae,
        "MOAE": moae,
    }


def write_report(records, json_path, csv_path=None) -> dict:
    """Write the JSON eval report (and optional per-video CSV summary)."""
    records = list(records)
    report = summarize(records)
    report["per_video"] = [
        {
            "clip_id": r.clip_id,
            "y_true": r.y_true,
            "y_pred": r.y_pred,
            "n_frames": r.n_frames,
            "pair_flows": [
                [p.inflow_pred, p.inflow_true, p.outflow_pred, p.outflow_true]
                for p in r.pair_flows
            ],
        }
        for r in records
    ]
    Path(json_path).write_text(json.dumps(report, indent=2) + "\n")
    if csv_path is not None:
        with Path(csv_path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["clip_id", "y_true", "y_pred", "abs_error", "n_frames"])
            for r in records:
                writer.writerow(
                    [r.clip_id, r.y_true, r.y_pred, abs(r.y_pred - r.y_true), r.n_frames]
                )
    return report
