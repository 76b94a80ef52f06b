"""EDF/EDF+ reading, hypnogram decoding and 30-s epoch segmentation.

Only what single-channel sleep staging needs: the full header is decoded,
one target signal is materialized in physical units, and stage intervals
come either from an EDF+ annotation signal or a plain-text triple file.
A small writer is included so tests can build fixtures offline.
"""

from __future__ import annotations

import bisect
import datetime as dt
import logging
import os
import re
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import LabeledEpoch, REAL, Stage

log = logging.getLogger(__name__)

ANNOTATION_LABEL = "EDF Annotations"


class EdfError(ValueError):
    """Base class for EDF parsing failures. ``offset`` points into the file."""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class TruncatedEdfError(EdfError):
    pass


class HeaderEncodingError(EdfError):
    pass


class MissingChannelError(EdfError):
    pass


class CalibrationError(EdfError):
    pass


class HypnogramError(ValueError):
    pass


class EpochConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# header
# ---------------------------------------------------------------------------


@dataclass
class SignalHeader:
    label: str
    transducer: str = ""
    physical_dimension: str = "uV"
    physical_min: float = -200.0
    physical_max: float = 200.0
    digital_min: int = -2048
    digital_max: int = 2047
    prefilter: str = ""
    samples_per_record: int = 100
    reserved: str = ""

    @property
    def gain(self) -> float:
        span = self.digital_max - self.digital_min
        if span == 0:
            raise CalibrationError(f"signal {self.label!r} has zero digital range")
        return (self.physical_max - self.physical_min) / span

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        return (np.asarray(digital, dtype=np.float64) - self.digital_min) * self.gain + self.physical_min


@dataclass
class EdfHeader:
    version: str = "0"
    patient_id: str = ""
    recording_id: str = ""
    start_date: str = "01.01.00"
    start_time: str = "00.00.00"
    header_bytes: int = 0
    reserved: str = ""
    n_records: int = 0
    record_duration: float = 1.0
    signals: List[SignalHeader] = field(default_factory=list)

    @property
    def n_signals(self) -> int:
        return len(self.signals)

    @property
    def record_samples(self) -> int:
        return sum(s.samples_per_record for s in self.signals)

    @property
    def is_edf_plus(self) -> bool:
        return self.reserved.startswith("EDF+")

    def start(self) -> Optional[dt.datetime]:
        try:
            d, m, y = (int(v) for v in self.start_date.split("."))
            hh, mm, ss = (int(v) for v in self.start_time.split("."))
        except ValueError:
            return None
        year = 1900 + y if y >= 85 else 2000 + y
        try:
            return dt.datetime(year, m, d, hh, mm, ss)
        except ValueError:
            return None

    def signal_index(self, label: str) -> int:
        want = normalize_label(label)
        for i, s in enumerate(self.signals):
            if normalize_label(s.label) == want:
                return i
        raise MissingChannelError(
            f"channel {label!r} not found; available: {[s.label for s in self.signals]}"
        )


def normalize_label(label: str) -> str:
    return " ".join(label.split()).lower()


_GLOBAL_FIELDS = [
    ("version", 8),
    ("patient_id", 80),
    ("recording_id", 80),
    ("start_date", 8),
    ("start_time", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
]
_SIGNAL_FIELDS = [
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefilter", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
]
_INT_FIELDS = {"header_bytes", "n_records", "n_signals", "digital_min", "digital_max", "samples_per_record"}
_FLOAT_FIELDS = {"record_duration", "physical_min", "physical_max"}


def _ascii(raw: bytes, offset: int) -> str:
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise HeaderEncodingError("non-ASCII byte in EDF header", offset + exc.start) from None


def _convert(name: str, text: str, offset: int):
    text = text.strip()
    try:
        if name in _INT_FIELDS:
            return int(text)
        if name in _FLOAT_FIELDS:
            return float(text)
    except ValueError:
        raise EdfError(f"cannot parse header field {name}={text!r}", offset) from None
    return text


def read_header(buf: bytes) -> EdfHeader:
    if len(buf) < 256:
        raise TruncatedEdfError(f"file holds {len(buf)} bytes, EDF header needs 256", len(buf))
    pos = 0
    values = {}
    for name, width in _GLOBAL_FIELDS:
        values[name] = _convert(name, _ascii(buf[pos : pos + width], pos), pos)
        pos += width
    ns = values.pop("n_signals")
    if ns < 0:
        raise EdfError("negative signal count", 252)
    need = 256 * (ns + 1)
    if len(buf) < need:
        raise TruncatedEdfError(f"signal headers need {need} bytes, file holds {len(buf)}", len(buf))
    cols = {}
    for name, width in _SIGNAL_FIELDS:
        cols[name] = []
        for _ in range(ns):
            cols[name].append(_convert(name, _ascii(buf[pos : pos + width], pos), pos))
            pos += width
    signals = [SignalHeader(**{name: cols[name][i] for name, _ in _SIGNAL_FIELDS}) for i in range(ns)]
    hdr = EdfHeader(signals=signals, **values)
    if hdr.header_bytes != need:
        raise EdfError(f"header byte count {hdr.header_bytes} disagrees with {ns} signals", 184)
    return hdr


def _available_records(buf: bytes, hdr: EdfHeader, allow_partial: bool) -> int:
    rec_bytes = 2 * hdr.record_samples
    if rec_bytes == 0:
        return 0
    full = (len(buf) - hdr.header_bytes) // rec_bytes
    if hdr.n_records < 0:
        return full
    if full < hdr.n_records:
        if not allow_partial:
            raise TruncatedEdfError(
                f"header declares {hdr.n_records} data records but only {full} are complete",
                hdr.header_bytes + full * rec_bytes,
            )
        log.warning("EDF truncated: using %d of %d declared records", full, hdr.n_records)
        return full
    return hdr.n_records


def read_digital(buf: bytes, hdr: EdfHeader, index: int, allow_partial: bool = False) -> np.ndarray:
    """Raw 16-bit samples of signal ``index`` across all complete records."""
    n_rec = _available_records(buf, hdr, allow_partial)
    rec = hdr.record_samples
    data = np.frombuffer(buf, dtype="<i2", count=n_rec * rec, offset=hdr.header_bytes).reshape(n_rec, rec)
    start = sum(s.samples_per_record for s in hdr.signals[:index])
    stop = start + hdr.signals[index].samples_per_record
    return data[:, start:stop].reshape(-1).astype(np.int16)


# ---------------------------------------------------------------------------
# recordings
# ---------------------------------------------------------------------------


@dataclass
class RecordingMeta:
    subject_id: str
    channel_label: str
    sampling_rate: float
    duration: float
    start_time: Optional[dt.datetime]


@dataclass
class Recording:
    meta: RecordingMeta
    samples: np.ndarray


def parse_edf(buf: bytes, target_channel: str, subject_id: str = "", allow_partial: bool = False) -> Recording:
    """Decode ``buf`` and materialize ``target_channel`` in physical units."""
    hdr = read_header(buf)
    idx = hdr.signal_index(target_channel)
    sig = hdr.signals[idx]
    gain = sig.gain  # raises on zero digital range
    if hdr.record_duration <= 0:
        raise EdfError("record duration must be positive", 244)
    digital = read_digital(buf, hdr, idx, allow_partial)
    physical = (digital.astype(np.float64) - sig.digital_min) * gain + sig.physical_min
    n_rec = len(digital) // max(sig.samples_per_record, 1)
    fs = sig.samples_per_record / hdr.record_duration
    meta = RecordingMeta(
        subject_id=subject_id or hdr.patient_id.split(" ")[0],
        channel_label=sig.label,
        sampling_rate=fs,
        duration=n_rec * hdr.record_duration,
        start_time=hdr.start(),
    )
    return Recording(meta, physical)


def read_edf_file(path, target_channel: str, subject_id: str = "", allow_partial: bool = False) -> Recording:
    with open(path, "rb") as fh:
        return parse_edf(fh.read(), target_channel, subject_id, allow_partial)


# ---------------------------------------------------------------------------
# writer (fixtures)
# ---------------------------------------------------------------------------


def _fmt_number(value, width: int = 8) -> str:
    if isinstance(value, (int, np.integer)):
        text = str(int(value))
    else:
        v = float(value)
        text = None
        if v == int(v) and abs(v) < 10 ** (width - 1):
            text = str(int(v))
        else:
            for prec in range(width, 0, -1):
                cand = format(v, f".{prec}g")
                if len(cand) <= width and "e" not in cand:
                    text = cand
                    break
        if text is None or float(text) != v:
            raise ValueError(f"{value!r} cannot be stored exactly in {width} ASCII characters")
    if len(text) > width:
        raise ValueError(f"{value!r} does not fit in {width} characters")
    return text


def _field(text: str, width: int) -> bytes:
    raw = text.encode("ascii")
    if len(raw) > width:
        raise ValueError(f"header text {text!r} longer than {width} bytes")
    return raw.ljust(width, b" ")


def write_edf(hdr: EdfHeader, signals: Sequence[np.ndarray]) -> bytes:
    """Serialize ``hdr`` plus one int16 array per signal (all records).

    ``header_bytes`` is recomputed; ``n_records`` must match the payload.
    """
    if len(signals) != hdr.n_signals:
        raise ValueError("one sample array per signal header is required")
    hdr = replace(hdr, header_bytes=256 * (hdr.n_signals + 1))
    n_rec = hdr.n_records
    out = [
        _field(hdr.version, 8),
        _field(hdr.patient_id, 80),
        _field(hdr.recording_id, 80),
        _field(hdr.start_date, 8),
        _field(hdr.start_time, 8),
        _field(_fmt_number(hdr.header_bytes), 8),
        _field(hdr.reserved, 44),
        _field(_fmt_number(n_rec), 8),
        _field(_fmt_number(hdr.record_duration), 8),
        _field(_fmt_number(hdr.n_signals, 4), 4),
    ]
    for name, width in _SIGNAL_FIELDS:
        for s in hdr.signals:
            v = getattr(s, name)
            out.append(_field(v if isinstance(v, str) else _fmt_number(v, width), width))
    blocks = []
    for s, arr in zip(hdr.signals, signals):
        arr = np.asarray(arr)
        if arr.size != n_rec * s.samples_per_record:
            raise ValueError(f"signal {s.label!r}: expected {n_rec * s.samples_per_record} samples, got {arr.size}")
        if arr.size and (arr.min() < -32768 or arr.max() > 32767):
            raise ValueError("samples must fit in int16")
        blocks.append(arr.astype("<i2").reshape(n_rec, s.samples_per_record))
    if blocks:
        out.append(np.concatenate(blocks, axis=1).tobytes())
    return b"".join(out)


def physical_to_digital(values: np.ndarray, sig: SignalHeader) -> np.ndarray:
    d = np.round((np.asarray(values) - sig.physical_min) / sig.gain + sig.digital_min)
    return np.clip(d, sig.digital_min, sig.digital_max).astype(np.int16)


# ---------------------------------------------------------------------------
# annotations / hypnograms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    onset: float
    duration: float
    token: str


@dataclass
class Hypnogram:
    intervals: List[Interval]

    @property
    def span(self) -> float:
        return max((iv.onset + iv.duration for iv in self.intervals), default=0.0)

    def label_at(self, t: float) -> Optional[str]:
        onsets = [iv.onset for iv in self.intervals]
        k = bisect.bisect_right(onsets, t) - 1
        if k < 0:
            return None
        iv = self.intervals[k]
        return iv.token if iv.onset <= t < iv.onset + iv.duration else None


def validate_intervals(intervals: Sequence[Interval]) -> Hypnogram:
    for iv in intervals:
        if iv.duration < 0:
            raise HypnogramError(f"negative duration at onset {iv.onset}: {iv.duration}")
    ordered = sorted(intervals, key=lambda iv: (iv.onset, iv.duration))
    for a, b in zip(ordered, ordered[1:]):
        if b.onset < a.onset + a.duration:
            raise HypnogramError(
                f"overlapping intervals: {a.token!r}@{a.onset}+{a.duration} and {b.token!r}@{b.onset}"
            )
    return Hypnogram(list(ordered))


_TAL_RE = re.compile(rb"([+-]\d+(?:\.\d*)?)(?:\x15(\d+(?:\.\d*)?))?\x14(.*?)\x14\x00", re.S)


def parse_tals(raw: bytes) -> List[Tuple[float, Optional[float], List[str]]]:
    """Split an EDF+ annotation byte stream into (onset, duration, texts)."""
    out = []
    for m in _TAL_RE.finditer(raw):
        onset = float(m.group(1))
        dur = float(m.group(2)) if m.group(2) else None
        texts = [t.decode("utf-8", "replace") for t in m.group(3).split(b"\x14") if t]
        out.append((onset, dur, texts))
    return out


def edf_annotations(buf: bytes) -> List[Interval]:
    hdr = read_header(buf)
    idx = hdr.signal_index(ANNOTATION_LABEL)
    digital = read_digital(buf, hdr, idx, allow_partial=True)
    raw = digital.astype("<i2").tobytes()
    intervals = []
    for onset, dur, texts in parse_tals(raw):
        for text in texts:
            intervals.append(Interval(onset, 0.0 if dur is None else dur, text))
    return intervals


def parse_text_triples(text: str) -> List[Interval]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip().strip('"') for p in re.split(r"\t|,", line, maxsplit=2)]
        if len(parts) != 3:
            raise HypnogramError(f"line {lineno}: expected onset, duration, token")
        try:
            onset, dur = float(parts[0]), float(parts[1])
        except ValueError:
            if lineno == 1:
                continue  # header row
            raise HypnogramError(f"line {lineno}: non-numeric onset/duration") from None
        out.append(Interval(onset, dur, parts[2]))
    return out


def parse_hypnogram(source: Union[bytes, str]) -> Hypnogram:
    """Accept EDF+ bytes, text-triple bytes/str, or a path to either."""
    if isinstance(source, os.PathLike) or (isinstance(source, str) and os.path.isfile(source)):
        with open(source, "rb") as fh:
            source = fh.read()
    if isinstance(source, bytes):
        if source[:8] == b"0       " and len(source) >= 256:
            # zero-length annotations are events (lights off etc.), not stages
            return validate_intervals([iv for iv in edf_annotations(source) if iv.duration > 0])
        source = source.decode("utf-8")
    return validate_intervals(parse_text_triples(source))


def tal_bytes(intervals: Sequence[Interval], record_onset: float = 0.0) -> bytes:
    parts = [f"+{_fmt_number(record_onset, 32)}\x14\x14\x00".encode()]
    for iv in intervals:
        parts.append(f"+{_fmt_number(iv.onset, 32)}\x15{_fmt_number(iv.duration, 32)}\x14{iv.token}\x14\x00".encode())
    return b"".join(parts)


def hypnogram_edf(intervals: Sequence[Interval], patient_id: str = "X") -> bytes:
    """Single-record EDF+ file carrying ``intervals`` as annotations."""
    raw = tal_bytes(intervals)
    if len(raw) % 2:
        raw += b"\x00"
    n = len(raw) // 2
    sig = SignalHeader(label=ANNOTATION_LABEL, physical_dimension="", physical_min=-1, physical_max=1,
                       digital_min=-32768, digital_max=32767, samples_per_record=n)
    hdr = EdfHeader(patient_id=patient_id, reserved="EDF+C", n_records=1, record_duration=0, signals=[sig])
    return write_edf(hdr, [np.frombuffer(raw, dtype="<i2")])


# ---------------------------------------------------------------------------
# stages and epochs
# ---------------------------------------------------------------------------

_STAGE_TOKENS = {
    "w": Stage.W, "wake": Stage.W, "0": Stage.W,
    "1": Stage.N1, "n1": Stage.N1, "s1": Stage.N1,
    "2": Stage.N2, "n2": Stage.N2, "s2": Stage.N2,
    "3": Stage.N3, "4": Stage.N3, "n3": Stage.N3, "n4": Stage.N3, "s3": Stage.N3, "s4": Stage.N3,
    "r": Stage.REM, "rem": Stage.REM, "5": Stage.REM,
}
_EXCLUDED_TOKENS = {"?", "movement time", "movement", "m", "mt", "unknown", "unscored", "6", "9"}


def map_stage(token: str, quiet: bool = False) -> Optional[Stage]:
    """R&K / AASM token -> :class:`Stage`; ``None`` means the epoch is excluded."""
    t = " ".join(token.split()).lower()
    if t.startswith("sleep stage "):
        t = t[len("sleep stage "):]
    elif t.startswith("stage "):
        t = t[len("stage "):]
    if t in _STAGE_TOKENS:
        return _STAGE_TOKENS[t]
    if t not in _EXCLUDED_TOKENS and not quiet:
        log.warning("unrecognized stage token %r; epoch excluded", token)
    return None


def samples_per_epoch(fs: float, epoch_seconds: float) -> int:
    n = fs * epoch_seconds
    if abs(n - round(n)) > 1e-9 or round(n) <= 0:
        raise EpochConfigError(f"F_s * epoch_seconds = {n} is not a positive integer")
    return int(round(n))


def segment_epochs(recording: Recording, hypnogram: Hypnogram, epoch_seconds: float = 30) -> List[LabeledEpoch]:
    """Cut the signal into whole epochs and label each by the interval at its midpoint.

    Epochs that fall outside every interval or map to an excluded token are
    dropped, as is any partial trailing epoch.
    """
    fs = recording.meta.sampling_rate
    n_per = samples_per_epoch(fs, epoch_seconds)
    signal_span = len(recording.samples) / fs
    n_epochs = int(np.floor(min(signal_span, hypnogram.span) / epoch_seconds + 1e-9))
    out = []
    for k in range(n_epochs):
        token = hypnogram.label_at((k + 0.5) * epoch_seconds)
        stage = map_stage(token) if token is not None else None
        if stage is None:
            continue
        seg = recording.samples[k * n_per : (k + 1) * n_per]
        out.append(LabeledEpoch(np.array(seg, dtype=np.float64), stage, recording.meta.subject_id, REAL, k))
    return out


def trim_wake(epochs: Sequence[LabeledEpoch], max_minutes: float = 30.0, epoch_seconds: float = 30.0) -> List[LabeledEpoch]:
    """Keep at most ``max_minutes`` of W before the first and after the last sleep epoch."""
    sleep_idx = [e.index for e in epochs if e.stage != Stage.W]
    if not sleep_idx:
        return list(epochs)
    margin = int(round(max_minutes * 60 / epoch_seconds))
    lo, hi = min(sleep_idx) - margin, max(sleep_idx) + margin
    return [e for e in epochs if lo <= e.index <= hi]
