"""Raw CSI windows to per-pair amplitude series and spectrograms.

Pipeline per window: amplitude min-max normalization across the subcarriers
of each antenna pair, zero-phase Butterworth band-pass per subcarrier, first
principal component per pair, then a Hann-window magnitude STFT of that
component.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from .csi_data import CsiRecord, CsiWindow, SessionMeta, UniformCsi, group_by_pair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterSpec:
    b_min: float = 0.1
    b_max: float = 2.0
    order: int = 4
    rate: float = 10.0

    def __post_init__(self):
        if not 0 < self.b_min < self.b_max < self.rate / 2:
            raise ValueError(f"need 0 < b_min < b_max < rate/2, got [{self.b_min}, {self.b_max}] at {self.rate} Hz")
        if self.order < 1:
            raise ValueError("filter order must be >= 1")

    def sos(self) -> np.ndarray:
        return signal.butter(self.order, [self.b_min, self.b_max], btype="bandpass", fs=self.rate, output="sos")


@dataclass(frozen=True)
class PreprocessParams:
    rate: float = 10.0
    window_sec: float = 20.0
    tau: float = 10.0
    stft_hop: float = 1.0
    band: Tuple[float, float] = (0.1, 2.0)
    order: int = 4
    norm_mode: str = "instant"  # or "window"

    @property
    def filter_spec(self) -> FilterSpec:
        return FilterSpec(self.band[0], self.band[1], self.order, self.rate)

    @property
    def series_len(self) -> int:
        return int(round(self.window_sec * self.rate))

    @property
    def n_frames(self) -> int:
        n, hop = int(round(self.tau * self.rate)), int(round(self.stft_hop * self.rate))
        return (self.series_len - n) // hop + 1

    @property
    def n_bins(self) -> int:
        return int(round(self.tau * self.rate)) // 2 + 1

    def to_dict(self) -> dict:
        return {"rate": self.rate, "window_sec": self.window_sec, "tau": self.tau, "stft_hop": self.stft_hop,
                "band": list(self.band), "order": self.order, "norm_mode": self.norm_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessParams":
        d = dict(d)
        d["band"] = tuple(d["band"])
        return cls(**d)


@dataclass
class PairSeries:
    values: np.ndarray
    pair: int
    rate: float
    explained_ratio: float = float("nan")
    eigenvalue: float = float("nan")


@dataclass
class Spectrogram:
    frames: np.ndarray  # [T_frames, F_bins]
    frame_times: np.ndarray
    bin_freqs: np.ndarray


# ---------------------------------------------------------------------------
# resampling


@dataclass
class Resampled:
    times: np.ndarray
    values: np.ndarray  # complex [T, S]
    gaps: List[Tuple[float, float]] = field(default_factory=list)


def resample(records: Sequence[CsiRecord], rate: float, start: Optional[float] = None,
             stop: Optional[float] = None) -> Resampled:
    """Linear interpolation of one pair's stream onto ``start + k / rate``.

    Real and imaginary parts are interpolated separately per subcarrier.
    Gaps between consecutive records longer than ``2 / rate`` are reported.
    """
    if not records:
        raise ValueError("cannot resample an empty stream")
    recs = sorted(records, key=lambda r: r.timestamp)
    t = np.array([r.timestamp for r in recs])
    if len(t) < 2:
        raise ValueError("need at least two records to resample")
    if np.any(np.diff(t) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    vals = np.stack([r.values for r in recs])
    start = t[0] if start is None else start
    stop = t[-1] if stop is None else stop
    n = int(math.floor((stop - start) * rate + 1e-9)) + 1
    grid = start + np.arange(n) / rate
    out = np.empty((n, vals.shape[1]), dtype=np.complex128)
    for i in range(vals.shape[1]):
        out[:, i] = np.interp(grid, t, vals[:, i].real) + 1j * np.interp(grid, t, vals[:, i].imag)
    dt = np.diff(t)
    gaps = [(float(t[k]), float(t[k + 1])) for k in np.flatnonzero(dt > 2.0 / rate + 1e-12)]
    return Resampled(grid, out, gaps)


def resample_session(meta: SessionMeta, records: Sequence[CsiRecord], rate: Optional[float] = None) -> UniformCsi:
    """Resample every pair onto one shared grid aligned to multiples of ``1 / rate``."""
    rate = meta.nominal_rate if rate is None else rate
    streams = group_by_pair(records, meta.P)
    if any(len(s) < 2 for s in streams):
        raise ValueError("every antenna pair needs at least two records")
    first = max(s[0].timestamp for s in streams)
    last = min(s[-1].timestamp for s in streams)
    start = math.ceil(first * rate - 1e-9) / rate
    stop = math.floor(last * rate + 1e-9) / rate
    if stop < start:
        raise ValueError("antenna-pair streams do not overlap in time")
    parts, gaps = [], []
    for p, stream in enumerate(streams):
        res = resample(stream, rate, start, stop)
        parts.append(res.values)
        gaps.extend((p, a, b) for a, b in res.gaps)
    if gaps:
        log.warning("resampling bridged %d gaps longer than %.2f s", len(gaps), 2.0 / rate)
    return UniformCsi(start, float(rate), np.stack(parts, axis=1), gaps)


# ---------------------------------------------------------------------------
# normalization, filtering, PCA, STFT


def normalize_pair(amplitudes: np.ndarray, mode: str = "instant") -> Tuple[np.ndarray, np.ndarray]:
    """Min-max scale ``[time, S]`` amplitudes of one pair into [0, 1].

    ``mode="instant"`` takes min and max over subcarriers separately at each
    time instant; ``mode="window"`` uses one min and max for the whole
    window. Returns ``(normalized, degenerate)`` where ``degenerate`` marks
    instants with max == min; those rows are set to zero.
    """
    a = np.asarray(amplitudes, dtype=np.float64)
    if a.size == 0:
        raise ValueError("normalize_pair needs a non-empty array")
    if mode == "instant":
        lo, hi = a.min(axis=-1, keepdims=True), a.max(axis=-1, keepdims=True)
    elif mode == "window":
        lo, hi = a.min(axis=(-2, -1), keepdims=True), a.max(axis=(-2, -1), keepdims=True)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    span = hi - lo
    flat = span <= 0
    out = np.where(flat, 0.0, (a - lo) / np.where(flat, 1.0, span))
    degenerate = np.broadcast_to(flat, a.shape[:-1] + (1,))[..., 0]
    if degenerate.any():
        log.debug("normalize_pair: %d degenerate instants", int(degenerate.sum()))
    return out, degenerate


def bandpass(series: np.ndarray, spec: FilterSpec, axis: int = 0) -> np.ndarray:
    """Zero-phase Butterworth band-pass along ``axis`` with reflect padding of ``3 * order`` samples."""
    x = np.asarray(series, dtype=np.float64)
    pad = 3 * spec.order
    if x.shape[axis] <= pad:
        raise ValueError(f"series of length {x.shape[axis]} too short for order-{spec.order} filtering")
    return signal.sosfiltfilt(spec.sos(), x, axis=axis, padtype="even", padlen=pad)


def power_iteration(C: np.ndarray, tol: float = 1e-10, max_iter: int = 1000) -> Tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric positive semi-definite matrix."""
    v = C[:, int(np.argmax(np.diag(C)))].astype(np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("degenerate window: zero covariance")
    v /= norm
    for _ in range(max_iter):
        w = C @ v
        w /= np.linalg.norm(w)
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return float(v @ C @ v), v


def pca_first_component(filtered: np.ndarray, pair: int = 0, rate: float = 10.0) -> PairSeries:
    """Project mean-centered ``[time, S]`` data on its top covariance eigenvector.

    The sign is chosen so the component correlates non-negatively with the
    subcarrier-mean series (falling back to a positive largest loading).
    """
    X = np.asarray(filtered, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("PCA needs at least two time steps")
    X = X - X.mean(axis=0)
    total = float((X * X).sum())
    if total <= 0:
        raise ValueError("degenerate window: zero total variance")
    C = (X.T @ X) / (X.shape[0] - 1)
    eigval, v = power_iteration(C)
    comp = X @ v
    corr = float(comp @ X.mean(axis=1))
    if corr < 0 or (corr == 0 and v[np.argmax(np.abs(v))] < 0):
        comp = -comp
    return PairSeries(comp, pair, rate, explained_ratio=eigval / float(np.trace(C)), eigenvalue=eigval)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window of ``n`` samples."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(series: np.ndarray, tau: float = 10.0, hop: float = 1.0, rate: float = 10.0) -> Spectrogram:
    """Magnitude STFT with a Hann window of ``tau`` seconds and frame step ``hop`` seconds."""
    x = np.asarray(series.values if isinstance(series, PairSeries) else series, dtype=np.float64)
    n = int(round(tau * rate))
    step = int(round(hop * rate))
    if n < 1 or step < 1:
        raise ValueError("tau and hop must each cover at least one sample")
    if n > len(x):
        raise ValueError(f"STFT window of {n} samples longer than series of {len(x)}")
    starts = np.arange(0, len(x) - n + 1, step)
    segments = np.lib.stride_tricks.sliding_window_view(x, n)[starts] * hann(n)
    frames = np.abs(np.fft.rfft(segments, axis=-1))
    return Spectrogram(frames, (starts + n / 2) / rate, np.fft.rfftfreq(n, 1.0 / rate))


def preprocess_window(window: CsiWindow, params: PreprocessParams = PreprocessParams()) -> List[Tuple[PairSeries, Spectrogram]]:
    samples = np.asarray(window.samples)
    if samples.ndim != 3 or samples.shape[0] != params.series_len:
        raise ValueError(f"window shape {samples.shape} does not match {params.series_len} time steps")
    amp = np.abs(samples)  # [T, P, S]
    norm, _ = normalize_pair(np.moveaxis(amp, 1, 0), params.norm_mode)  # [P, T, S]
    filtered = bandpass(norm, params.filter_spec, axis=1)
    out = []
    for p in range(samples.shape[1]):
        series = pca_first_component(filtered[p], pair=p, rate=params.rate)
        out.append((series, stft(series, params.tau, params.stft_hop, params.rate)))
    return out
