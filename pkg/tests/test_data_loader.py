import struct

import numpy as np
import pytest

from src import data_loader
from src.errors import FormatError
from src.frontend import FeatureMatrix
from src.sst_select import HypSegment
from tests.helpers import by_rec, seg


def test_label_file(tmp_path):
    path = tmp_path / "ref.lab"
    path.write_text("# comment\nrecB 1.00 2.00 speech\nrecA 0.50 1.50 speech\nrecA 0.00 0.50 non-speech\n\n")
    segments = data_loader.read_label_file(path)
    assert list(segments) == ["recA", "recB"]
    assert segments["recA"] == [seg(0, 0.5, "non-speech"), seg(0.5, 1.5)]


def test_label_file_written_sorted(tmp_path):
    path = data_loader.write_label_file(tmp_path / "out.lab",
                                        by_rec(r2=[(1, 2, "speech")], r1=[(3, 4, "speech"), (0, 1, "non-speech")]))
    assert path.read_text() == "r1 0.00 1.00 non-speech\nr1 3.00 4.00 speech\nr2 1.00 2.00 speech\n"


@pytest.mark.parametrize("line, message", [
    ("recA 0.0 speech", "expected 4 fields"),
    ("recA zero 1.0 speech", "start is not a number"),
    ("recA 2.0 1.0 speech", "start < end"),
])
def test_label_file_errors_carry_line(tmp_path, line, message):
    path = tmp_path / "bad.lab"
    path.write_text("recA 0.0 1.0 speech\n" + line + "\n")
    with pytest.raises(FormatError, match=message) as info:
        data_loader.read_label_file(path)
    assert info.value.line == 2
    assert info.value.path == str(path)


def test_missing_file(tmp_path):
    with pytest.raises(FormatError, match="not found"):
        data_loader.read_label_file(tmp_path / "absent.lab")


def test_rttm(tmp_path):
    path = tmp_path / "ref.rttm"
    path.write_text(
        "SPKR-INFO rec1 1 <NA> <NA> <NA> unknown A <NA> <NA>\n"
        "SPEAKER rec1 1 0.50 1.25 <NA> <NA> A <NA> <NA>\n"
        "SPEAKER rec1 1 2.00 0.00 <NA> <NA> B <NA> <NA>\n"
        "SPEAKER rec1 1 0.00 0.50 <NA> <NA> B <NA> <NA>\n"
    )
    segments = data_loader.read_rttm(path)
    assert segments == {"rec1": [seg(0, 0.5, "B"), seg(0.5, 1.75, "A")]}

    out = data_loader.write_rttm(tmp_path / "copy.rttm", segments)
    assert out.read_text().splitlines()[0] == "SPEAKER rec1 1 0.00 0.50 <NA> <NA> B <NA> <NA>"
    assert data_loader.read_rttm(out) == segments


def test_rttm_short_line(tmp_path):
    path = tmp_path / "bad.rttm"
    path.write_text("SPEAKER rec1 1 0.5 1.0\n")
    with pytest.raises(FormatError) as info:
        data_loader.read_rttm(path)
    assert info.value.line == 1


def test_utt_ids():
    utt = data_loader.make_utt_id("rec_01", 1.5, 12.34)
    assert utt == "rec_01_0000150_0001234"
    assert data_loader.parse_utt_id(utt) == ("rec_01", 1.5, 12.34)
    assert data_loader.parse_utt_id("no-interval") is None


def test_transcripts(tmp_path):
    path = tmp_path / "ref.txt"
    path.write_text("u1 Go FLIGHT\nu2\n")
    assert data_loader.read_transcripts(path) == {"u1": ["go", "flight"], "u2": []}
    path.write_text("u1 go\nu1 again\n")
    with pytest.raises(FormatError, match="duplicate"):
        data_loader.read_transcripts(path)


def test_hyp_segments(tmp_path):
    path = tmp_path / "hyps.tsv"
    path.write_text("rec1\t0.0\t2.5\tspeech\t0.9\tgo flight\nrec1\t2.5\t3.0\tnon-speech\t0.8\n")
    segments = data_loader.read_hyp_segments(path)
    assert segments[0] == HypSegment("rec1", 0.0, 2.5, "speech", 0.9, ("go", "flight"))
    assert segments[1].transcript is None
    out = data_loader.write_hyp_segments(tmp_path / "copy.tsv", segments)
    assert out.read_text().splitlines()[0] == "rec1\t0.00\t2.50\tspeech\t0.9000\tgo\tflight"


def test_hyp_segment_bad_kind(tmp_path):
    path = tmp_path / "hyps.tsv"
    path.write_text("rec1 0.0 2.5 music 0.9\n")
    with pytest.raises(FormatError) as info:
        data_loader.read_hyp_segments(path)
    assert info.value.line == 1


def test_features(tmp_path):
    rows = np.arange(12, dtype=np.float64).reshape(4, 3) / 7
    path = data_loader.write_features(tmp_path / "x.feat", FeatureMatrix(rows, 100.0, "x"))
    feats = data_loader.read_features(path)
    assert feats.recording_id == "x"
    assert feats.frame_rate == 100.0
    assert np.allclose(feats.rows, rows, atol=1e-6)
    assert len(path.read_bytes()) == 4 + 4 + 4 + 4 + 8 + 12 * 4


def test_features_trailing_bytes(tmp_path):
    path = data_loader.write_features(tmp_path / "x.feat", FeatureMatrix(np.zeros((2, 2)), 100.0))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        data_loader.read_features(path)


def test_features_bad_magic(tmp_path):
    path = tmp_path / "x.feat"
    path.write_bytes(struct.pack("<4sIIId", b"JUNK", 1, 0, 0, 100.0))
    with pytest.raises(FormatError, match="magic"):
        data_loader.read_features(path)


def test_plda_codec(tmp_path):
    mu = np.array([1.0, -2.0])
    between = np.array([[2.0, 0.5], [0.5, 1.0]])
    within = np.eye(2) * 0.3
    path = data_loader.write_plda(tmp_path / "m.plda", mu, between, within)
    got = data_loader.read_plda(path)
    for expected, actual in zip((mu, between, within), got):
        assert np.array_equal(expected, actual)


def test_sadm_dimension_chain(tmp_path):
    layers = [(np.zeros((3, 4)), np.zeros(4)), (np.zeros((5, 2)), np.zeros(2))]
    path = data_loader.write_sadm(tmp_path / "bad.sadm", layers, np.zeros(3), np.ones(3))
    with pytest.raises(FormatError, match="chain"):
        data_loader.read_sadm(path)


def test_embedding_text_dimension_mismatch(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("r1 0.0 1.0 0.1 0.2\nr1 1.0 2.0 0.1 0.2 0.3\n")
    with pytest.raises(FormatError) as info:
        data_loader.read_embedding_rows(path)
    assert info.value.line == 2


def test_embedding_binary_and_empty(tmp_path):
    rows = [("r1", 0.0, 2.0, np.array([0.5, -1.0, 2.0]))]
    path = data_loader.write_embv(tmp_path / "emb.embv", rows, 3)
    got, dim = data_loader.read_embedding_rows(path)
    assert dim == 3
    assert got[0][:3] == ("r1", 0.0, 2.0)
    assert np.array_equal(got[0][3], rows[0][3])

    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert data_loader.read_embedding_rows(empty) == ([], 0)
