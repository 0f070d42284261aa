"""IIR filtering and single-lead R-peak detection.

Second-order Butterworth designs (bilinear transform with frequency
prewarping), causal direct-form-II-transposed application, and two QRS
detectors: a two-moving-average method and a Pan-Tompkins variant
without the search-back pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FilterDesignError

REFRACTORY_S = 0.200


@dataclass
class IirFilter:
    """Normalized biquad: b feed-forward, a feedback with a[0] = 1."""
    b: np.ndarray
    a: np.ndarray
    state: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.b.shape != (3,) or self.a.shape != (3,):
            raise ValueError("biquad needs exactly 3 b and 3 a coefficients")
        if self.a[0] != 1.0:
            if self.a[0] == 0.0:
                raise ValueError("a[0] must be nonzero")
            self.b = self.b / self.a[0]
            self.a = self.a / self.a[0]


def _prewarped(cutoff: float, fs: float) -> float:
    if not 0.0 < cutoff < fs / 2.0:
        raise FilterDesignError(
            f"cutoff {cutoff} Hz must lie strictly between 0 and fs/2 = {fs / 2.0} Hz")
    return float(np.tan(np.pi * cutoff / fs))


def _check_stable(a: np.ndarray):
    poles = np.roots(a)
    if np.any(np.abs(poles) >= 1.0):
        raise FilterDesignError("designed filter has poles on or outside the unit circle")


def design_highpass(cutoff: float, fs: float) -> IirFilter:
    """Second-order Butterworth high-pass."""
    k = _prewarped(cutoff, fs)
    norm = 1.0 + np.sqrt(2.0) * k + k * k
    b = np.array([1.0, -2.0, 1.0]) / norm
    a = np.array([1.0, 2.0 * (k * k - 1.0) / norm,
                  (1.0 - np.sqrt(2.0) * k + k * k) / norm])
    _check_stable(a)
    return IirFilter(b, a)


def design_lowpass(cutoff: float, fs: float) -> IirFilter:
    """Second-order Butterworth low-pass."""
    k = _prewarped(cutoff, fs)
    norm = 1.0 + np.sqrt(2.0) * k + k * k
    kk = k * k
    b = np.array([kk, 2.0 * kk, kk]) / norm
    a = np.array([1.0, 2.0 * (kk - 1.0) / norm,
                  (1.0 - np.sqrt(2.0) * k + kk) / norm])
    _check_stable(a)
    return IirFilter(b, a)


def filter_gain(f: IirFilter, freq: float, fs: float) -> float:
    """Magnitude of the transfer function at freq Hz."""
    z = np.exp(-2j * np.pi * freq / fs)
    zs = np.array([1.0, z, z * z])
    return float(np.abs(np.dot(f.b, zs) / np.dot(f.a, zs)))


def apply_filter(f: IirFilter, x, step_init: bool = False) -> np.ndarray:
    """Causal direct-form-II-transposed pass over one record.

    Delay registers start at zero on every call, so repeated calls on
    different records never leak state. With step_init they instead start
    at the steady state for a constant input equal to the first sample,
    which removes the onset transient a DC offset would otherwise cause.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("apply_filter expects a 1-D sample vector")
    b0, b1, b2 = f.b
    _, a1, a2 = f.a
    y = np.empty_like(x)
    z1 = 0.0
    z2 = 0.0
    if step_init and x.size:
        x0 = x[0]
        dc = (b0 + b1 + b2) / (1.0 + a1 + a2)
        z2 = (b2 - a2 * dc) * x0
        z1 = (b1 + b2 - (a1 + a2) * dc) * x0
    for n in range(x.size):
        xn = x[n]
        yn = b0 * xn + z1
        z1 = b1 * xn - a1 * yn + z2
        z2 = b2 * xn - a2 * yn
        y[n] = yn
    f.state = np.array([z1, z2])
    return y


def bandpass(x, fs: float, low: float, high: float,
             step_init: bool = False) -> np.ndarray:
    """High-pass at `low` cascaded with low-pass at `high`."""
    y = apply_filter(design_highpass(low, fs), x, step_init)
    return apply_filter(design_lowpass(high, fs), y, step_init)


@dataclass
class PeakList:
    """Strictly increasing R-peak sample indices with a refractory guarantee."""
    indices: np.ndarray
    fs: float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("peak indices must be strictly increasing")

    def __len__(self):
        return int(self.indices.size)

    def __iter__(self):
        return iter(self.indices)


@dataclass
class DetectorConfig:
    """Detector tuning constants; every field can be overridden per call."""
    qrs_window_s: float = 0.120       # two-average short window
    beat_window_s: float = 0.600      # two-average long window
    offset_frac: float = 0.08         # two-average threshold offset, fraction of mean squared
    ta_band: tuple = (8.0, 20.0)
    pt_band: tuple = (5.0, 15.0)
    integration_s: float = 0.150      # Pan-Tompkins moving-window integration
    learning_s: float = 2.0           # Pan-Tompkins threshold initialization span
    threshold_blend: float = 0.25     # Pan-Tompkins signal/noise mix
    refractory_s: float = REFRACTORY_S


def _moving_average_centered(x: np.ndarray, width: int) -> np.ndarray:
    return np.convolve(x, np.ones(width) / width, mode="same")


def _enforce_refractory(cands: list, refractory: int) -> list:
    kept = []
    for idx in cands:
        if not kept or idx - kept[-1] >= refractory:
            kept.append(idx)
    return kept


def detect_two_average(x, fs: float, cfg: DetectorConfig | None = None) -> PeakList:
    """Two-moving-average QRS detector.

    Band-pass, square, compare a QRS-scale moving average against a
    beat-scale moving average plus a signal-relative offset; runs of
    exceedance at least one QRS window long become candidate blocks and
    the largest |filtered| sample in each block is the peak.
    """
    if fs < 100:
        raise ValueError("detector needs fs >= 100 Hz")
    cfg = cfg or DetectorConfig()
    x = np.asarray(x, dtype=np.float64)
    w1 = max(1, int(round(cfg.qrs_window_s * fs)))
    w2 = max(1, int(round(cfg.beat_window_s * fs)))
    refractory = int(round(cfg.refractory_s * fs))
    if x.size < w2 or x.size == 0:
        return PeakList(np.empty(0, dtype=np.int64), fs)

    filtered = bandpass(x, fs, *cfg.ta_band, step_init=True)
    sq = filtered * filtered
    ma_qrs = _moving_average_centered(sq, w1)
    ma_beat = _moving_average_centered(sq, w2)
    offset = cfg.offset_frac * float(np.mean(sq))
    above = ma_qrs > ma_beat + offset

    peaks = []
    edges = np.flatnonzero(np.diff(above.astype(np.int8)))
    starts = list(edges[~above[edges]] + 1)
    ends = list(edges[above[edges]] + 1)
    if above.size and above[0]:
        starts.insert(0, 0)
    if above.size and above[-1]:
        ends.append(above.size)
    for s, e in zip(starts, ends):
        if e - s >= w1:
            peaks.append(s + int(np.argmax(np.abs(filtered[s:e]))))
    peaks = _enforce_refractory(sorted(peaks), refractory)
    return PeakList(np.asarray(peaks, dtype=np.int64), fs)


def detect_pan_tompkins(x, fs: float, cfg: DetectorConfig | None = None) -> PeakList:
    """Pan-Tompkins QRS detector without the search-back pass.

    Band-pass, five-point derivative, squaring, moving-window
    integration, then adaptive dual thresholds over integration-waveform
    local maxima. The first `learning_s` seconds initialize the signal
    and noise running estimates.
    """
    if fs < 100:
        raise ValueError("detector needs fs >= 100 Hz")
    cfg = cfg or DetectorConfig()
    x = np.asarray(x, dtype=np.float64)
    learn = int(round(cfg.learning_s * fs))
    if x.size < learn or x.size == 0:
        return PeakList(np.empty(0, dtype=np.int64), fs)

    band = bandpass(x, fs, *cfg.pt_band, step_init=True)
    deriv = np.convolve(band, np.array([2.0, 1.0, 0.0, -1.0, -2.0]) / 8.0)[: band.size]
    sq = deriv * deriv
    w = max(1, int(round(cfg.integration_s * fs)))
    csum = np.concatenate(([0.0], np.cumsum(sq)))
    mwi = (csum[1:] - csum[np.maximum(np.arange(sq.size) - w + 1, 0)]) / w

    spki = 0.25 * float(np.max(mwi[:learn]))
    npki = 0.5 * float(np.mean(mwi[:learn]))
    refractory = int(round(cfg.refractory_s * fs))
    blend = cfg.threshold_blend

    interior = np.flatnonzero(
        (mwi[1:-1] > mwi[:-2]) & (mwi[1:-1] >= mwi[2:])) + 1
    peaks = []
    last_cand = None
    for i in interior:
        if last_cand is not None and i - last_cand < refractory:
            continue
        threshold = npki + blend * (spki - npki)
        if mwi[i] > threshold:
            spki = 0.125 * mwi[i] + 0.875 * spki
            lo = max(0, i - w)
            r = lo + int(np.argmax(np.abs(band[lo : i + 1])))
            if not peaks or r - peaks[-1] >= refractory:
                peaks.append(r)
            last_cand = i
        else:
            npki = 0.125 * mwi[i] + 0.875 * npki
    return PeakList(np.asarray(peaks, dtype=np.int64), fs)


DETECTORS = {
    "two_average": detect_two_average,
    "pan_tompkins": detect_pan_tompkins,
}
