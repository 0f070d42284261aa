"""Render heartbeats as fixed-length tokens and sequences of tokens.

Each beat is cut from the RMS-fused signal around its R-peak: one third
of the preceding R-R interval before the peak, two thirds of the
following R-R interval after, anchored so the R sample always lands at
the same token index, zero-padded elsewhere. Sequences cap at 50 beats.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dsp import PeakList
from .errors import FormatError, NoBeatsError

TOKEN_LEN = 1000
MAX_POS = 50
R_ANCHOR = TOKEN_LEN // 3  # 333

_MAGIC = b"BFTS"
_VERSION = 1


@dataclass
class BeatToken:
    """One heartbeat as a fixed-length vector; r_index marks the R sample."""
    values: np.ndarray
    r_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise ValueError("token values must be 1-D")


@dataclass
class BeatSequence:
    """Up to MAX_POS real beats, zero-padded at the end.

    tokens: [max_pos, d_model] float32; mask[i] true for real beats, which
    always form a prefix; n_real = mask.sum().
    """
    tokens: np.ndarray
    mask: np.ndarray
    n_real: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tokens.ndim != 2 or self.mask.shape != (self.tokens.shape[0],):
            raise ValueError("tokens must be [max_pos, d_model] with a matching mask")
        if int(self.mask.sum()) != self.n_real:
            raise ValueError("n_real disagrees with the mask")
        if self.n_real and not self.mask[: self.n_real].all():
            raise ValueError("real beats must form a prefix of the sequence")
        if self.mask[self.n_real :].any():
            raise ValueError("padding must follow all real beats")

    @property
    def d_model(self) -> int:
        return self.tokens.shape[1]


def fuse_rms(rec) -> np.ndarray:
    """Collapse leads to one channel: per-sample RMS over the active leads.

    A lead is active when it is not identically zero. With no active
    leads the fused signal is all zeros.
    """
    leads = np.asarray(rec.leads, dtype=np.float64)
    active = leads[np.any(leads != 0.0, axis=1)]
    if active.shape[0] == 0:
        return np.zeros(leads.shape[1])
    return np.sqrt(np.mean(active * active, axis=0))


def _beat_window(peaks: np.ndarray, k: int, d_model: int) -> tuple:
    anchor = d_model // 3
    max_after = d_model - anchor - 1
    n = peaks.size
    if n == 1:
        return anchor, max_after
    rr_prev = peaks[k] - peaks[k - 1] if k > 0 else peaks[k + 1] - peaks[k]
    rr_next = peaks[k + 1] - peaks[k] if k + 1 < n else peaks[k] - peaks[k - 1]
    before = min(int(rr_prev) // 3, anchor)
    after = min(2 * int(rr_next) // 3, max_after)
    return before, after


def segment_beat(fused, peaks, k: int, d_model: int = TOKEN_LEN) -> BeatToken:
    """Cut beat k out of the fused signal, R-peak at the anchor index.

    The window is floor(RR_prev/3) samples before the peak and
    floor(2*RR_next/3) after, capped so it fits the token; boundary beats
    reuse their one available R-R interval, and a single-peak recording
    falls back to the full window. Samples beyond the record stay zero.
    """
    fused = np.asarray(fused, dtype=np.float64)
    idx = peaks.indices if isinstance(peaks, PeakList) else np.asarray(peaks, dtype=np.int64)
    if not 0 <= k < idx.size:
        raise ValueError(f"beat index {k} out of range for {idx.size} peaks")
    anchor = d_model // 3
    before, after = _beat_window(idx, k, d_model)
    r = int(idx[k])
    if not 0 <= r < fused.size:
        raise ValueError(f"peak {r} lies outside the {fused.size}-sample signal")
    lo = max(r - before, 0)
    hi = min(r + after, fused.size - 1)
    values = np.zeros(d_model, dtype=np.float32)
    values[anchor - (r - lo) : anchor + (hi - r) + 1] = fused[lo : hi + 1]
    return BeatToken(values, anchor)


def build_sequence(fused, peaks, max_pos: int = MAX_POS,
                   d_model: int = TOKEN_LEN) -> BeatSequence:
    """Tokenize the first min(len(peaks), max_pos) beats and pad to max_pos."""
    idx = peaks.indices if isinstance(peaks, PeakList) else np.asarray(peaks, dtype=np.int64)
    if idx.size == 0:
        raise NoBeatsError("no beats detected")
    n_real = min(int(idx.size), max_pos)
    tokens = np.zeros((max_pos, d_model), dtype=np.float32)
    for k in range(n_real):
        tokens[k] = segment_beat(fused, idx, k, d_model).values
    mask = np.zeros(max_pos, dtype=bool)
    mask[:n_real] = True
    return BeatSequence(tokens, mask, n_real)


def save_tokens(path: str, seq: BeatSequence):
    """Serialize: magic, version, n_real, d_model, then MAX_POS x d_model
    little-endian float32 values and MAX_POS mask bytes."""
    if seq.tokens.shape[0] != MAX_POS:
        raise ValueError(f"cache format holds exactly {MAX_POS} positions")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, seq.n_real, seq.d_model))
        fh.write(np.ascontiguousarray(seq.tokens, dtype="<f4").tobytes())
        fh.write(seq.mask.astype(np.uint8).tobytes())


def load_tokens(path: str) -> BeatSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: not a token-cache file")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    version, n_real, d_model = struct.unpack("<III", blob[4:16])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    need = 16 + MAX_POS * d_model * 4 + MAX_POS
    if len(blob) != need:
        raise FormatError(f"{path}: {len(blob)} bytes, expected {need}")
    tokens = np.frombuffer(blob[16 : 16 + MAX_POS * d_model * 4],
                           dtype="<f4").reshape(MAX_POS, d_model).copy()
    mask = np.frombuffer(blob[16 + MAX_POS * d_model * 4 :], dtype=np.uint8).astype(bool)
    if int(mask.sum()) != n_real or (n_real and not mask[:n_real].all()):
        raise FormatError(f"{path}: mask does not match n_real={n_real}")
    return BeatSequence(tokens, mask, int(n_real))
