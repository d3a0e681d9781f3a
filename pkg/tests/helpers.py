from src.utils import LabeledSegment


def seg(start, end, label="speech"):
    return LabeledSegment(float(start), float(end), label)


def by_rec(**segments):
    """rec=[(start, end, label), ...] -> recording id -> LabeledSegments"""
    return {rec: [seg(*item) for item in items] for rec, items in segments.items()}
