import numpy as np
import pytest

from src.errors import InvalidSegmentError, UsageError
from src.sst_select import (
    KINDS,
    LOW_CONFIDENCE,
    OVER_BUDGET,
    TOO_LONG,
    TOO_SHORT,
    HypSegment,
    duration_report,
    rejection_reason,
    select_segments,
    weighting_manifest,
)


def hyps_of(durations, confidence=0.9, kind="speech"):
    out, t = [], 0.0
    for duration in durations:
        out.append(HypSegment("rec", t, t + duration, kind, confidence))
        t += duration
    return out


def test_duration_filter():
    selected, report = select_segments(hyps_of([1.5, 5.0, 25.0, 10.0]), 2.0, 20.0, 0.0)
    assert [s.duration for s in selected] == [5.0, 10.0]
    assert report.rejections[TOO_SHORT] == 1
    assert report.rejections[TOO_LONG] == 1
    assert report.selected_speech_hours == pytest.approx(15.0 / 3600)


def test_bounds_are_inclusive():
    selected, _ = select_segments(hyps_of([2.0, 20.0]), 2.0, 20.0)
    assert len(selected) == 2


def test_low_confidence():
    segments = [HypSegment("rec", 0.0, 5.0, confidence=0.3), HypSegment("rec", 5.0, 10.0, confidence=0.6)]
    selected, report = select_segments(segments, 2.0, 20.0, 0.5)
    assert selected == segments[1:]
    assert report.rejections[LOW_CONFIDENCE] == 1


def test_reason_precedence():
    short_and_unsure = HypSegment("rec", 0.0, 1.0, confidence=0.1)
    assert rejection_reason(short_and_unsure, 2.0, 20.0, 0.5) == TOO_SHORT
    assert rejection_reason(HypSegment("rec", 0.0, 3.0), 2.0, 20.0, 0.5) is None


def test_hour_accounting_is_complete():
    segments = hyps_of([1.0, 3.0, 30.0]) + hyps_of([4.0], kind="non-speech")
    _, report = select_segments(segments, 2.0, 20.0)
    assert report.total_hours == pytest.approx(38.0 / 3600)
    assert report.counts == {"speech": 1, "non-speech": 1}


def test_budget_ranks_by_confidence():
    segments = [HypSegment("rec", 0.0, 4.0, confidence=0.7),
                HypSegment("rec", 4.0, 9.0, confidence=0.9),
                HypSegment("rec", 9.0, 19.0, confidence=0.8)]
    selected, report = select_segments(segments, 2.0, 20.0, target_hours={"speech": 10.0 / 3600})
    assert selected == [segments[1]]
    assert report.rejections[OVER_BUDGET] == 2


def test_bad_bounds_and_budget():
    with pytest.raises(UsageError):
        select_segments(hyps_of([5.0]), 20.0, 2.0)
    with pytest.raises(UsageError):
        select_segments(hyps_of([5.0]), target_hours={"speech": -1.0})


def test_duration_report():
    segments = [HypSegment("a", 0.0, 1800.0), HypSegment("a", 1800.0, 5400.0, "non-speech")]
    report = duration_report(segments)
    assert report.selected_speech_hours == pytest.approx(0.5)
    assert report.selected_nonspeech_hours == pytest.approx(1.0)
    frame = report.to_frame()
    assert len(frame) == 6
    assert frame.iloc[0].to_dict() == {"bucket": "selected", "kind": "speech", "count": 1, "hours": 0.5}


def test_empty_duration_report():
    report = duration_report([])
    assert report.total_hours == 0.0


def test_invalid_segments():
    with pytest.raises(InvalidSegmentError):
        HypSegment("rec", 2.0, 1.0)
    with pytest.raises(InvalidSegmentError):
        HypSegment("rec", 0.0, 1.0, confidence=1.5)
    with pytest.raises(InvalidSegmentError):
        HypSegment("rec", 0.0, 1.0, kind="music")


def test_manifest_weights():
    sup = [HypSegment("s1", 0.0, 3.0)]
    sst = [HypSegment("u1", 1.0, 4.5)]
    assert weighting_manifest(sup, sst, weight_sup=1.0, weight_unsup=2.0) == [
        "s1\t0.00\t3.00\t1\tsup", "u1\t1.00\t4.50\t2\tsst"]
    assert weighting_manifest(sup, sst, weight_sup=1.0, weight_unsup=1.0)[1].endswith("\t1\tsst")
    assert weighting_manifest(sup, [], weight_sup=1.0, weight_unsup=0.5) == ["s1\t0.00\t3.00\t1\tsup"]
    with pytest.raises(UsageError):
        weighting_manifest(sup, sst, weight_sup=0.0)


@pytest.mark.parametrize("weight_sup, weight_unsup", [(1.0, 2.0), (2.0, 1.0), (0.25, 1.5), (3.0, 0.125)])
def test_manifest_weights_read_back_as_configured(weight_sup, weight_unsup):
    lines = weighting_manifest([HypSegment("s1", 0.0, 3.0)], [HypSegment("u1", 1.0, 4.5)], weight_sup, weight_unsup)
    assert [float(line.split("\t")[3]) for line in lines] == [weight_sup, weight_unsup]


@pytest.mark.parametrize("seed", range(20))
def test_selection_ignores_input_order(seed):
    rng = np.random.default_rng(seed)
    segments = []
    for i in range(40):
        start = float(rng.uniform(0.0, 500.0))
        segments.append(HypSegment(f"rec{i % 3}", start, start + float(rng.uniform(0.5, 30.0)),
                                   KINDS[int(rng.integers(2))], float(rng.uniform())))
    budget = {"speech": 60.0 / 3600, "non-speech": 45.0 / 3600}
    selected, report = select_segments(segments, 2.0, 20.0, 0.4, target_hours=budget)
    shuffled = [segments[i] for i in rng.permutation(len(segments))]
    selected_shuffled, report_shuffled = select_segments(shuffled, 2.0, 20.0, 0.4, target_hours=budget)

    assert set(selected_shuffled) == set(selected)
    assert report_shuffled.counts == report.counts
    assert report_shuffled.rejections == report.rejections
    assert report_shuffled.total_hours == pytest.approx(report.total_hours)
    for reason, hours in report.rejected_hours.items():
        assert report_shuffled.rejected_hours[reason] == pytest.approx(hours)
