import logging
import math

import numpy as np
import pytest

from sleepegan import edf
from sleepegan.data import Stage
from sleepegan.edf import EdfHeader, Interval, SignalHeader


def one_channel_fixture(n_records=10, spr=100, label="EEG Fpz-Cz", pmin=-200, pmax=200, digital=None):
    sig = SignalHeader(label=label, physical_min=pmin, physical_max=pmax, samples_per_record=spr)
    hdr = EdfHeader(patient_id="SC4001 X X X", start_date="24.04.89", start_time="16.13.00",
                    n_records=n_records, record_duration=1, signals=[sig])
    if digital is None:
        digital = np.arange(n_records * spr) % 4096 - 2048
    return hdr, edf.write_edf(hdr, [digital])


def random_fixture(rng):
    ns = int(rng.integers(1, 5))
    sigs = []
    for i in range(ns):
        dmin = int(rng.integers(-32768, 0))
        dmax = int(rng.integers(1, 32768))
        pmin = float(rng.integers(-5000, 0)) + float(rng.choice([0, 0.5, 0.25]))
        pmax = float(rng.integers(1, 5000)) + float(rng.choice([0, 0.5, 0.125]))
        sigs.append(SignalHeader(label=f"CH{i} {rng.integers(100)}", transducer="AgAgCl", physical_min=pmin,
                                 physical_max=pmax, digital_min=dmin, digital_max=dmax,
                                 prefilter="HP:0.5Hz", samples_per_record=int(rng.integers(1, 60))))
    hdr = EdfHeader(patient_id=f"P{rng.integers(1000)}", recording_id="Startdate X",
                    start_date="01.02.03", start_time="04.05.06", n_records=int(rng.integers(0, 12)),
                    record_duration=float(rng.choice([1, 0.5, 2, 30, 0.25])), signals=sigs)
    data = [rng.integers(s.digital_min, s.digital_max + 1, hdr.n_records * s.samples_per_record) for s in sigs]
    return hdr, data


def test_header_layout_by_hand():
    hdr, buf = one_channel_fixture()
    assert len(buf) == 256 + 256 + 10 * 100 * 2
    assert buf[0:8] == b"0       "
    assert buf[184:192] == b"512     "
    assert buf[236:244] == b"10      "
    assert buf[244:252] == b"1       "
    assert buf[252:256] == b"1   "
    assert buf[256:272] == b"EEG Fpz-Cz      "
    # label 16 + transducer 80 + dim 8 + pmin 8 + pmax 8 + dmin 8 + dmax 8 + prefilter 80
    assert buf[256 + 216 : 256 + 224] == b"100     "
    assert buf[256 + 104 : 256 + 112] == b"-200    "


def test_parse_synthetic_fixture():
    _, buf = one_channel_fixture()
    rec = edf.parse_edf(buf, "EEG Fpz-Cz")
    assert len(rec.samples) == 1000
    assert rec.meta.sampling_rate == 100.0
    assert rec.meta.duration == 10.0
    assert len(rec.samples) == rec.meta.sampling_rate * rec.meta.duration
    assert rec.meta.subject_id == "SC4001"
    assert rec.meta.start_time.year == 1989


def test_calibration_of_zero():
    _, buf = one_channel_fixture(n_records=1, spr=4, digital=np.array([0, -2048, 2047, 1]))
    rec = edf.parse_edf(buf, "EEG Fpz-Cz")
    # (0 + 2048) * 400 / 4095 - 200
    assert rec.samples[0] == pytest.approx(2048 * 400 / 4095 - 200, abs=1e-12)
    assert rec.samples[0] == pytest.approx(0.0488, abs=1e-4)
    assert rec.samples[1] == -200.0 and rec.samples[2] == 200.0


def test_calibration_is_affine_in_physical_range():
    digital = np.random.default_rng(0).integers(-2048, 2048, 500)
    _, a = one_channel_fixture(n_records=5, digital=digital)
    _, b = one_channel_fixture(n_records=5, digital=digital, pmin=-400, pmax=400)
    ra, rb = edf.parse_edf(a, "EEG Fpz-Cz"), edf.parse_edf(b, "EEG Fpz-Cz")
    assert np.array_equal(rb.samples, 2.0 * ra.samples)


def test_missing_channel():
    _, buf = one_channel_fixture(label="EEG Pz-Oz")
    with pytest.raises(edf.MissingChannelError):
        edf.parse_edf(buf, "EEG Fpz-Cz")


def test_channel_match_ignores_whitespace():
    _, buf = one_channel_fixture(label="EEG  Fpz-Cz")
    assert len(edf.parse_edf(buf, " EEG Fpz-Cz ").samples) == 1000


def test_truncated_header():
    _, buf = one_channel_fixture()
    with pytest.raises(edf.TruncatedEdfError):
        edf.parse_edf(buf[:300], "EEG Fpz-Cz")
    with pytest.raises(edf.TruncatedEdfError):
        edf.parse_edf(buf[:100], "EEG Fpz-Cz")


def test_truncated_records():
    _, buf = one_channel_fixture()
    short = buf[:-50]
    with pytest.raises(edf.TruncatedEdfError) as exc:
        edf.parse_edf(short, "EEG Fpz-Cz")
    assert exc.value.offset == 512 + 9 * 200
    rec = edf.parse_edf(short, "EEG Fpz-Cz", allow_partial=True)
    assert len(rec.samples) == 900 and rec.meta.duration == 9.0


def test_non_ascii_header():
    _, buf = one_channel_fixture()
    bad = bytearray(buf)
    bad[20] = 0xE9
    with pytest.raises(edf.HeaderEncodingError) as exc:
        edf.parse_edf(bytes(bad), "EEG Fpz-Cz")
    assert exc.value.offset == 20


def test_zero_digital_range():
    sig = SignalHeader(label="EEG Fpz-Cz", digital_min=5, digital_max=5, samples_per_record=2)
    buf = edf.write_edf(EdfHeader(n_records=1, signals=[sig]), [np.array([5, 5])])
    with pytest.raises(edf.CalibrationError):
        edf.parse_edf(buf, "EEG Fpz-Cz")


def test_error_types_are_distinct():
    kinds = {edf.TruncatedEdfError, edf.HeaderEncodingError, edf.MissingChannelError, edf.CalibrationError}
    assert len(kinds) == 4 and all(issubclass(k, edf.EdfError) for k in kinds)


@pytest.mark.parametrize("seed", range(50))
def test_fuzzed_round_trip(seed):
    rng = np.random.default_rng(seed)
    hdr, data = random_fixture(rng)
    buf = edf.write_edf(hdr, data)
    parsed = edf.read_header(buf)
    assert parsed.signals == hdr.signals
    for name in ("version", "patient_id", "recording_id", "start_date", "start_time", "n_records",
                 "record_duration", "reserved"):
        assert getattr(parsed, name) == getattr(hdr, name)
    for i, s in enumerate(hdr.signals):
        dig = edf.read_digital(buf, parsed, i)
        assert np.array_equal(dig, data[i])
        rec = edf.parse_edf(buf, s.label)
        expected = (data[i].astype(np.float64) - s.digital_min) * s.gain + s.physical_min
        assert rec.samples.tobytes() == expected.tobytes()
    assert edf.write_edf(parsed, [edf.read_digital(buf, parsed, i) for i in range(parsed.n_signals)]) == buf


def test_writer_rejects_inexact_numbers():
    sig = SignalHeader(label="X", physical_min=-1 / 3, samples_per_record=1)
    with pytest.raises(ValueError):
        edf.write_edf(EdfHeader(n_records=1, signals=[sig]), [np.array([0])])


# -- hypnograms -------------------------------------------------------------


def test_text_triples():
    h = edf.parse_hypnogram("0,1800,Sleep stage W\n1800,600,Sleep stage 1\n")
    assert h.intervals == [Interval(0, 1800, "Sleep stage W"), Interval(1800, 600, "Sleep stage 1")]


def test_text_triples_tab_and_header(tmp_path):
    p = tmp_path / "hyp.txt"
    p.write_text("onset\tduration\tstage\n30\t30\tSleep stage 2\n0\t30\tSleep stage W\n")
    h = edf.parse_hypnogram(p)
    assert [iv.onset for iv in h.intervals] == [0, 30]
    assert edf.parse_hypnogram(str(p)).intervals == h.intervals


def test_unordered_is_sorted():
    h = edf.parse_hypnogram("60,30,W\n0,30,N1\n30,30,N2\n")
    assert [iv.token for iv in h.intervals] == ["N1", "N2", "W"]


def test_overlap_rejected():
    with pytest.raises(edf.HypnogramError):
        edf.parse_hypnogram("0,100,W\n50,100,N2\n")


def test_negative_duration_rejected():
    with pytest.raises(edf.HypnogramError):
        edf.parse_hypnogram("0,-30,W\n")


def test_edf_plus_hypnogram_round_trip():
    ivs = [Interval(0, 630, "Sleep stage W"), Interval(630, 30, "Sleep stage 1"),
           Interval(660, 90, "Sleep stage 2"), Interval(750, 30.5, "Movement time")]
    buf = edf.hypnogram_edf(ivs)
    assert edf.read_header(buf).is_edf_plus
    assert edf.parse_hypnogram(buf).intervals == ivs


def test_tal_parsing():
    raw = b"+0\x14\x14\x00+30\x1530\x14Sleep stage 2\x14\x00+60.5\x14Lights off\x14\x00\x00\x00"
    tals = edf.parse_tals(raw)
    assert tals == [(0.0, None, []), (30.0, 30.0, ["Sleep stage 2"]), (60.5, None, ["Lights off"])]


# -- stage mapping ------------------------------------------------------------


@pytest.mark.parametrize(
    "token,stage",
    [
        ("Sleep stage W", Stage.W),
        ("Sleep stage 1", Stage.N1),
        ("Sleep stage 2", Stage.N2),
        ("Sleep stage 3", Stage.N3),
        ("Sleep stage 4", Stage.N3),
        ("Sleep stage R", Stage.REM),
        ("N3", Stage.N3),
        ("REM", Stage.REM),
        ("Movement time", None),
        ("Sleep stage ?", None),
    ],
)
def test_map_stage(token, stage):
    assert edf.map_stage(token) is stage


def test_unknown_token_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert edf.map_stage("Sleep stage Q") is None
    assert "unrecognized" in caplog.text


# -- segmentation ---------------------------------------------------------------


def _recording(seconds, fs=100):
    return edf.Recording(edf.RecordingMeta("S1", "EEG Fpz-Cz", fs, seconds, None),
                         np.arange(int(seconds * fs), dtype=np.float64))


def test_segment_basic():
    hyp = edf.parse_hypnogram("0,60,Sleep stage W\n60,30,Sleep stage 1\n")
    eps = edf.segment_epochs(_recording(90), hyp)
    assert [e.stage for e in eps] == [Stage.W, Stage.W, Stage.N1]
    assert all(len(e.samples) == 3000 for e in eps)
    assert eps[2].samples[0] == 6000.0


def test_segment_drops_trailing_partial():
    hyp = edf.parse_hypnogram("0,95,Sleep stage W\n")
    assert len(edf.segment_epochs(_recording(95), hyp)) == 3


def test_segment_125hz():
    hyp = edf.parse_hypnogram("0,60,Sleep stage 2\n")
    eps = edf.segment_epochs(_recording(60, fs=125), hyp)
    assert len(eps) == 2 and len(eps[0].samples) == 3750


def test_segment_non_integer_epoch():
    with pytest.raises(edf.EpochConfigError):
        edf.segment_epochs(_recording(60, fs=100.01), edf.parse_hypnogram("0,60,W\n"))


def test_segment_count_formula_fuzz():
    rng = np.random.default_rng(5)
    tokens = ["Sleep stage W", "Sleep stage 1", "Sleep stage 2", "Sleep stage 3", "Sleep stage 4",
              "Sleep stage R", "Movement time", "Sleep stage ?"]
    for _ in range(40):
        n_iv = int(rng.integers(1, 12))
        durs = rng.integers(1, 6, n_iv) * 30
        onsets = np.concatenate([[0], np.cumsum(durs)[:-1]])
        toks = rng.choice(tokens, n_iv)
        hyp = edf.validate_intervals([Interval(float(o), float(d), str(t)) for o, d, t in zip(onsets, durs, toks)])
        seconds = float(rng.integers(10, int(durs.sum()) + 200))
        eps = edf.segment_epochs(_recording(seconds), hyp)
        n_total = math.floor(min(seconds, hyp.span) / 30)
        excluded = sum(1 for k in range(n_total) if edf.map_stage(hyp.label_at(30 * k + 15)) is None)
        assert len(eps) == n_total - excluded


def test_trim_wake():
    hyp_text = "0,3600,W\n3600,60,N2\n3660,3600,W\n"
    eps = edf.segment_epochs(_recording(7260), edf.parse_hypnogram(hyp_text))
    kept = edf.trim_wake(eps, max_minutes=30)
    idx = [e.index for e in kept]
    assert min(idx) == 120 - 60 and max(idx) == 121 + 60
    assert len(kept) == 60 + 2 + 60
