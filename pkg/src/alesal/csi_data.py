"""CSI records, session files, label tracks and fixed-length windows.

Session file (UTF-8 text, optionally gzip-compressed)::

    CSIS v1 P=<int> S=<int> rate=<float>
    t=<float> p=<int> <re>,<im> <re>,<im> ...      (S pairs per line)

Label track file, one interval per line::

    <start> <end> <normal|apnea|plmd>
"""

from __future__ import annotations

import gzip
import io
import math
import re
from dataclasses import dataclass, field
from typing import IO, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

CLASS_NAMES = ("normal", "apnea", "plmd")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

_HEADER_RE = re.compile(r"^CSIS v1 P=(\d+) S=(\d+) rate=(\S+)$")


class CsiParseError(ValueError):
    """A line of a session or label file could not be parsed."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


class CsiFormatError(CsiParseError):
    """A line parsed but disagrees with the header (wrong S, bad pair index)."""


@dataclass(frozen=True)
class LabelInterval:
    start: float
    end: float
    class_id: int


@dataclass
class SessionMeta:
    P: int
    S: int
    nominal_rate: float
    label_track: List[LabelInterval] = field(default_factory=list)

    def __post_init__(self):
        check_label_track(self.label_track)


@dataclass(eq=False)
class CsiRecord:
    timestamp: float
    pair: int
    values: np.ndarray  # complex, length S

    def __eq__(self, other) -> bool:
        if not isinstance(other, CsiRecord):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.pair == other.pair
            and np.array_equal(self.values, other.values)
        )


@dataclass
class UniformCsi:
    """CSI on a uniform time grid: ``values[k]`` is at ``start + k / rate``."""

    start: float
    rate: float
    values: np.ndarray  # complex [T, P, S]
    gaps: List[Tuple[int, float, float]] = field(default_factory=list)  # (pair, from, to)

    @property
    def times(self) -> np.ndarray:
        return self.start + np.arange(self.values.shape[0]) / self.rate


@dataclass
class CsiWindow:
    start: float
    samples: np.ndarray  # complex [Z*f_r, P, S]
    label: int
    window_id: int = 0


def check_label_track(track: Sequence[LabelInterval]) -> None:
    prev_end = -math.inf
    for iv in track:
        if iv.class_id not in (0, 1, 2):
            raise ValueError(f"invalid class id {iv.class_id}")
        if not iv.end > iv.start:
            raise ValueError(f"empty label interval {iv}")
        if iv.start < prev_end:
            raise ValueError("label intervals must be sorted and non-overlapping")
        prev_end = iv.end


# ---------------------------------------------------------------------------
# session files


def _open_text(source: Union[str, bytes, IO]) -> IO[str]:
    if isinstance(source, bytes):
        if source[:2] == b"\x1f\x8b":
            source = gzip.decompress(source)
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def parse_session(
    source: Union[str, bytes, IO], labels: Optional[Sequence[LabelInterval]] = None
) -> Tuple[SessionMeta, List[CsiRecord]]:
    """Parse a session file into its header metadata and records.

    Records come back sorted by ``(timestamp, pair)``, so each pair's
    stream is in time order.
    """
    stream = _open_text(source)
    header = stream.readline().strip()
    m = _HEADER_RE.match(header)
    if not m:
        raise CsiParseError(f"bad header {header!r}", 1)
    P, S = int(m.group(1)), int(m.group(2))
    try:
        rate = float(m.group(3))
    except ValueError:
        raise CsiParseError(f"bad rate {m.group(3)!r}", 1) from None
    records = []
    for lineno, line in enumerate(stream, start=2):
        line = line.strip()
        if not line:
            continue
        records.append(_parse_record(line, lineno, P, S))
    records.sort(key=lambda r: (r.timestamp, r.pair))
    return SessionMeta(P, S, rate, list(labels or [])), records


def _parse_record(line: str, lineno: int, P: int, S: int) -> CsiRecord:
    tokens = line.split()
    if len(tokens) < 2 or not tokens[0].startswith("t=") or not tokens[1].startswith("p="):
        raise CsiParseError("expected 't=<float> p=<int>' prefix", lineno)
    try:
        t = float(tokens[0][2:])
        pair = int(tokens[1][2:])
    except ValueError:
        raise CsiParseError("malformed timestamp or pair index", lineno) from None
    if not math.isfinite(t) or t < 0:
        raise CsiParseError(f"timestamp must be finite and non-negative, got {t}", lineno)
    if not 0 <= pair < P:
        raise CsiFormatError(f"pair index {pair} outside [0, {P})", lineno)
    body = tokens[2:]
    if len(body) != S:
        raise CsiFormatError(f"expected {S} complex values, found {len(body)}", lineno)
    try:
        parts = [tok.split(",") for tok in body]
        if any(len(p) != 2 for p in parts):
            raise ValueError
        flat = np.array([float(v) for p in parts for v in p])
    except ValueError:
        raise CsiParseError("malformed complex value (expected re,im)", lineno) from None
    return CsiRecord(t, pair, flat[0::2] + 1j * flat[1::2])


def serialize_session(meta: SessionMeta, records: Iterable[CsiRecord], single_precision: bool = False) -> str:
    """Canonical text form: records ordered by (timestamp, pair), floats in shortest repr.

    With ``single_precision`` the CSI values are first rounded to float32 and
    written in float32's shortest repr, which roughly halves the file.
    Parsing and re-serializing such a file reproduces it exactly.
    """
    out = [f"CSIS v1 P={meta.P} S={meta.S} rate={float(meta.nominal_rate)!r}"]
    fmt = (lambda x: repr(float(x))) if not single_precision else (lambda x: str(np.float32(x)))
    for rec in sorted(records, key=lambda r: (r.timestamp, r.pair)):
        if len(rec.values) != meta.S:
            raise CsiFormatError(f"record at t={rec.timestamp} has {len(rec.values)} values, header says {meta.S}")
        vals = " ".join(f"{fmt(v.real)},{fmt(v.imag)}" for v in rec.values)
        out.append(f"t={float(rec.timestamp)!r} p={rec.pair} {vals}")
    return "\n".join(out) + "\n"


def parse_labels(source: Union[str, bytes, IO]) -> List[LabelInterval]:
    track = []
    for lineno, line in enumerate(_open_text(source), start=1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 3 or tokens[2] not in CLASS_IDS:
            raise CsiParseError("expected '<start> <end> <normal|apnea|plmd>'", lineno)
        try:
            start, end = float(tokens[0]), float(tokens[1])
        except ValueError:
            raise CsiParseError("malformed interval bounds", lineno) from None
        track.append(LabelInterval(start, end, CLASS_IDS[tokens[2]]))
    check_label_track(track)
    return track


def serialize_labels(track: Iterable[LabelInterval]) -> str:
    return "".join(f"{float(iv.start)!r} {float(iv.end)!r} {CLASS_NAMES[iv.class_id]}\n" for iv in track)


def records_from_uniform(csi: UniformCsi) -> List[CsiRecord]:
    times = csi.times
    T, P, _ = csi.values.shape
    return [CsiRecord(float(times[k]), p, csi.values[k, p].copy()) for k in range(T) for p in range(P)]


def group_by_pair(records: Iterable[CsiRecord], P: int) -> List[List[CsiRecord]]:
    streams: List[List[CsiRecord]] = [[] for _ in range(P)]
    for rec in records:
        streams[rec.pair].append(rec)
    for s in streams:
        s.sort(key=lambda r: r.timestamp)
    return streams


# ---------------------------------------------------------------------------
# windowing


def window_label(track: Sequence[LabelInterval], start: float, end: float) -> Optional[int]:
    """Class covering the largest share of ``[start, end)``; ties go to the more severe class.

    Returns ``None`` when no interval overlaps the span.
    """
    cover = [0.0, 0.0, 0.0]
    for iv in track:
        overlap = min(end, iv.end) - max(start, iv.start)
        if overlap > 0:
            cover[iv.class_id] += overlap
    cover = [round(c, 9) for c in cover]
    best = max(cover)
    if best <= 0:
        return None
    return max(c for c in range(3) if cover[c] == best)


def windowize(
    csi: UniformCsi, meta: SessionMeta, window_sec: float, hop_sec: Optional[float] = None,
    keep_unlabeled: bool = False,
) -> List[CsiWindow]:
    """Cut a resampled session into labeled windows of ``window_sec`` seconds.

    Window starts are multiples of ``hop_sec`` (default: ``window_sec``) that
    fall on or after the first sample. Windows without any label coverage
    are dropped, or kept with label -1 when ``keep_unlabeled`` is set; a
    stream shorter than one window yields an empty list.
    """
    hop_sec = window_sec if hop_sec is None else hop_sec
    n = window_sec * csi.rate
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"window of {window_sec} s is not a whole number of samples at {csi.rate} Hz")
    n = int(round(n))
    total = csi.values.shape[0]
    windows = []
    k = math.ceil(csi.start / hop_sec - 1e-9)
    while True:
        start = k * hop_sec
        i0 = int(round((start - csi.start) * csi.rate))
        if i0 + n > total:
            break
        label = window_label(meta.label_track, start, start + window_sec)
        if label is None and keep_unlabeled:
            label = -1
        if label is not None:
            windows.append(CsiWindow(start, csi.values[i0 : i0 + n], label, window_id=k))
        k += 1
    return windows
