"""Batched model inputs and their on-disk binary form.

Blob layout (little-endian)::

    b"ALPP"                     magic
    u16  version                1
    f32  rate, window_sec, tau, stft_hop, band_min, band_max
    u16  filter order
    u32  n_windows
    u16  P
    n_windows times:
        u32  window_id
        i8   label              -1 when unknown
        f64  start              seconds
        P times (pair order):
            u32 series_len, f32[series_len]            PCA amplitude series
            u32 n_frames, u32 n_bins, f32[n_frames * n_bins]   spectrogram, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .csi_data import CsiWindow, windowize
from .preprocess import PreprocessParams, preprocess_window

MAGIC = b"ALPP"
VERSION = 1
_HEADER = "<H6fHIH"


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureSet:
    series: np.ndarray  # float32 [W, P, L]
    spectrograms: np.ndarray  # float32 [W, P, T_frames, F_bins]
    labels: np.ndarray  # int64 [W], -1 when unknown
    window_ids: np.ndarray  # int64 [W]
    starts: np.ndarray  # float64 [W]
    params: PreprocessParams

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def P(self) -> int:
        return self.series.shape[1]

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return FeatureSet(self.series[idx], self.spectrograms[idx], self.labels[idx], self.window_ids[idx],
                          self.starts[idx], self.params)

    @staticmethod
    def concat(sets: Sequence["FeatureSet"]) -> "FeatureSet":
        return FeatureSet(
            np.concatenate([s.series for s in sets]), np.concatenate([s.spectrograms for s in sets]),
            np.concatenate([s.labels for s in sets]), np.concatenate([s.window_ids for s in sets]),
            np.concatenate([s.starts for s in sets]), sets[0].params,
        )


def featurize_windows(windows: Iterable[CsiWindow], params: PreprocessParams = PreprocessParams()) -> FeatureSet:
    series, specs, labels, ids, starts = [], [], [], [], []
    for w in windows:
        pairs = preprocess_window(w, params)
        series.append(np.stack([s.values for s, _ in pairs]))
        specs.append(np.stack([sp.frames for _, sp in pairs]))
        labels.append(w.label)
        ids.append(w.window_id)
        starts.append(w.start)
    if not series:
        raise ValueError("no windows to featurize")
    return FeatureSet(np.asarray(series, dtype=np.float32), np.asarray(specs, dtype=np.float32),
                      np.asarray(labels, dtype=np.int64), np.asarray(ids, dtype=np.int64),
                      np.asarray(starts, dtype=np.float64), params)


def featurize_sessions(sessions, params: PreprocessParams = PreprocessParams(), hop: Optional[float] = None,
                       keep_unlabeled: bool = False) -> FeatureSet:
    """Window and featurize ``(meta, UniformCsi)`` pairs or generated sessions.

    Window ids are renumbered consecutively across sessions.
    """
    windows: List[CsiWindow] = []
    for item in sessions:
        meta, csi = (item.meta, item.csi) if hasattr(item, "csi") else item
        windows.extend(windowize(csi, meta, params.window_sec, hop, keep_unlabeled))
    for i, w in enumerate(windows):
        w.window_id = i
    return featurize_windows(windows, params)


def dumps(fs: FeatureSet) -> bytes:
    p = fs.params
    parts = [MAGIC, struct.pack(_HEADER, VERSION, p.rate, p.window_sec, p.tau, p.stft_hop, p.band[0], p.band[1],
                                p.order, len(fs), fs.P)]
    for i in range(len(fs)):
        parts.append(struct.pack("<Ibd", int(fs.window_ids[i]), int(fs.labels[i]), float(fs.starts[i])))
        for k in range(fs.P):
            s = np.ascontiguousarray(fs.series[i, k], dtype="<f4")
            m = np.ascontiguousarray(fs.spectrograms[i, k], dtype="<f4")
            parts.append(struct.pack("<I", s.size) + s.tobytes())
            parts.append(struct.pack("<II", *m.shape) + m.tobytes())
    return b"".join(parts)


def _f(v: float) -> float:
    # undo float32 storage for the short decimal values used as parameters
    return float(np.format_float_positional(np.float32(v)))


def loads(blob: bytes, params: Optional[PreprocessParams] = None) -> FeatureSet:
    if blob[:4] != MAGIC:
        raise FeatureFormatError("not a feature blob (bad magic)")
    version, rate, window_sec, tau, hop, b_lo, b_hi, order, n, P = struct.unpack_from(_HEADER, blob, 4)
    if version != VERSION:
        raise FeatureFormatError(f"unsupported feature blob version {version}")
    if params is None:
        params = PreprocessParams(rate=_f(rate), window_sec=_f(window_sec), tau=_f(tau), stft_hop=_f(hop),
                                  band=(_f(b_lo), _f(b_hi)), order=order)
    pos = 4 + struct.calcsize(_HEADER)
    series, specs, labels, ids, starts = [], [], [], [], []
    for _ in range(n):
        wid, label, start = struct.unpack_from("<Ibd", blob, pos)
        pos += struct.calcsize("<Ibd")
        s_row, m_row = [], []
        for _ in range(P):
            (length,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            s_row.append(np.frombuffer(blob, "<f4", length, pos))
            pos += 4 * length
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            m_row.append(np.frombuffer(blob, "<f4", rows * cols, pos).reshape(rows, cols))
            pos += 4 * rows * cols
        series.append(s_row)
        specs.append(m_row)
        labels.append(label)
        ids.append(wid)
        starts.append(start)
    if pos != len(blob):
        raise FeatureFormatError("trailing bytes in feature blob")
    if n == 0:
        raise FeatureFormatError("feature blob holds no windows")
    return FeatureSet(np.asarray(series, dtype=np.float32), np.asarray(specs, dtype=np.float32),
                      np.asarray(labels, dtype=np.int64), np.asarray(ids, dtype=np.int64),
                      np.asarray(starts, dtype=np.float64), params)
