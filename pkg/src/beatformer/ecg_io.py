"""Recording ingestion: CSV and 16-bit WFDB readers, gain scaling,
resampling, peak-index rescaling, and label-set filtering."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInputError,
    FormatError,
    InconsistencyError,
    InvalidMetadataError,
)


@dataclass
class EcgRecord:
    """Gain-scaled multi-lead recording in millivolts.

    leads: [num_leads, num_samples]; labels: raw diagnosis codes as found
    in the source header (not yet mapped to class indices).
    """
    leads: np.ndarray
    fs: float
    lead_names: list
    labels: set = field(default_factory=set)
    source_id: str = ""

    def __post_init__(self):
        self.leads = np.atleast_2d(np.asarray(self.leads, dtype=np.float64))
        if self.fs <= 0:
            raise InvalidMetadataError(f"sampling frequency must be positive, got {self.fs}")
        if len(self.lead_names) != self.leads.shape[0]:
            raise InconsistencyError(
                f"{len(self.lead_names)} lead names for {self.leads.shape[0]} leads")

    @property
    def num_leads(self) -> int:
        return self.leads.shape[0]

    @property
    def num_samples(self) -> int:
        return self.leads.shape[1]

    def select_leads(self, names: list) -> "EcgRecord":
        missing = [n for n in names if n not in self.lead_names]
        if missing:
            raise InconsistencyError(f"record {self.source_id} has no lead(s) {missing}")
        rows = [self.lead_names.index(n) for n in names]
        return EcgRecord(self.leads[rows], self.fs, list(names),
                         set(self.labels), self.source_id)


@dataclass
class LabelMap:
    """Scored label codes with class indices, plus equivalence aliases."""
    scored: dict
    equivalences: dict = field(default_factory=dict)

    def __post_init__(self):
        indices = sorted(self.scored.values())
        if indices != list(range(len(indices))):
            raise FormatError(
                f"class indices must be 0..{len(indices) - 1} with no gaps or repeats, "
                f"got {indices}")
        for alias, canon in self.equivalences.items():
            if alias in self.scored:
                raise FormatError(
                    f"code {alias} is both scored and aliased; equivalences must be idempotent")
            if canon not in self.scored:
                raise FormatError(f"alias {alias} maps to non-scored code {canon}")

    @property
    def num_classes(self) -> int:
        return len(self.scored)

    def canonical(self, code: str) -> str:
        return self.equivalences.get(code, code)

    def reverse(self) -> dict:
        return {idx: code for code, idx in self.scored.items()}


def load_label_map(path: str) -> LabelMap:
    """Parse `code,class_index` and `alias=>canonical` lines."""
    scored = {}
    equivalences = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=>" in line:
                alias, _, canon = line.partition("=>")
                alias, canon = alias.strip(), canon.strip()
                if not alias or not canon:
                    raise FormatError(f"{path}:{lineno}: malformed equivalence {line!r}")
                if alias in equivalences:
                    raise FormatError(f"{path}:{lineno}: duplicate alias {alias}")
                equivalences[alias] = canon
            elif "," in line:
                code, _, idx = line.partition(",")
                code = code.strip()
                if code in scored:
                    raise FormatError(f"{path}:{lineno}: duplicate code {code}")
                try:
                    scored[code] = int(idx.strip())
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: bad class index {idx!r}") from exc
            else:
                raise FormatError(f"{path}:{lineno}: unrecognized label-map line {line!r}")
    return LabelMap(scored, equivalences)


def filter_labels(rec: EcgRecord, label_map: LabelMap):
    """Class indices for the record's scored labels, or None when none remain."""
    canon = {label_map.canonical(code) for code in rec.labels}
    indices = {label_map.scored[c] for c in canon if c in label_map.scored}
    return indices if indices else None


def _parse_gain_token(token: str, where: str) -> float:
    # header gain fields may carry a baseline and units, e.g. 1000(0)/mV
    num = token.split("(")[0].split("/")[0]
    try:
        gain = float(num)
    except ValueError as exc:
        raise FormatError(f"{where}: unparsable gain {token!r}") from exc
    if gain == 0:
        raise InvalidMetadataError(f"{where}: ADC gain of 0 cannot scale samples")
    return gain


def _load_csv(path: str) -> EcgRecord:
    fs = None
    gains = None
    labels = set()
    header = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                key = key.strip().lower()
                if key == "fs":
                    try:
                        fs = float(value)
                    except ValueError as exc:
                        raise FormatError(f"{path}:{lineno}: bad fs {value!r}") from exc
                elif key == "gain":
                    gains = [_parse_gain_token(tok.strip(), f"{path}:{lineno}")
                             for tok in value.split(",")]
                elif key == "labels":
                    labels = {tok.strip() for tok in value.split(";") if tok.strip()}
                continue
            if header is None:
                header = [tok.strip() for tok in line.split(",")]
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric sample row") from exc

    if fs is None:
        raise FormatError(f"{path}: missing #fs= metadata line")
    if fs <= 0:
        raise InvalidMetadataError(f"{path}: fs must be positive, got {fs}")
    if gains is None:
        raise FormatError(f"{path}: missing #gain= metadata line")
    if header is None or not rows:
        raise FormatError(f"{path}: no lead header or no sample rows")
    width = len(header)
    for row in rows:
        if len(row) != width:
            raise InconsistencyError(
                f"{path}: sample row has {len(row)} values for {width} leads")
    if len(gains) == 1:
        gains = gains * width
    if len(gains) != width:
        raise InconsistencyError(f"{path}: {len(gains)} gains for {width} leads")

    raw = np.asarray(rows, dtype=np.float64).T
    leads = raw / np.asarray(gains, dtype=np.float64)[:, None]
    return EcgRecord(leads, fs, header, labels,
                     os.path.splitext(os.path.basename(path))[0])


def _load_wfdb(header_path: str) -> EcgRecord:
    with open(header_path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]

    record_line = None
    signal_lines = []
    labels = set()
    for line in lines:
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped[1:].strip()
            if body.lower().startswith("dx:"):
                labels |= {tok.strip() for tok in body[3:].split(",") if tok.strip()}
            continue
        if record_line is None:
            record_line = stripped
        else:
            signal_lines.append(stripped)

    if record_line is None:
        raise FormatError(f"{header_path}: empty header")
    fields_ = record_line.split()
    if len(fields_) < 4:
        raise FormatError(
            f"{header_path}: record line needs name, leads, fs, samples: {record_line!r}")
    name = fields_[0]
    try:
        num_leads = int(fields_[1])
        fs = float(fields_[2].split("/")[0])
        num_samples = int(fields_[3])
    except ValueError as exc:
        raise FormatError(f"{header_path}: bad record line {record_line!r}") from exc
    if fs <= 0:
        raise InvalidMetadataError(f"{header_path}: fs must be positive, got {fs}")
    if len(signal_lines) < num_leads:
        raise FormatError(
            f"{header_path}: {len(signal_lines)} signal lines for {num_leads} leads")

    gains = []
    lead_names = []
    dat_names = set()
    for i, line in enumerate(signal_lines[:num_leads]):
        toks = line.split()
        if len(toks) < 3:
            raise FormatError(f"{header_path}: signal line too short: {line!r}")
        dat_names.add(toks[0])
        if toks[1].split("x")[0] != "16":
            raise FormatError(
                f"{header_path}: only format 16 sample files are supported, got {toks[1]}")
        gains.append(_parse_gain_token(toks[2], f"{header_path} lead {i}"))
        last = toks[-1]
        lead_names.append(last if len(toks) > 3 and not _is_number(last) else f"ld{i}")
    if len(dat_names) != 1:
        raise FormatError(f"{header_path}: all leads must share one sample file")

    dat_path = os.path.join(os.path.dirname(header_path), dat_names.pop())
    try:
        raw = np.fromfile(dat_path, dtype="<i2")
    except OSError as exc:
        raise FormatError(f"cannot read sample file {dat_path}: {exc}") from exc
    if raw.size != num_leads * num_samples:
        raise InconsistencyError(
            f"{dat_path}: {raw.size} samples on disk, header promises "
            f"{num_leads} x {num_samples}")
    interleaved = raw.reshape(num_samples, num_leads).T.astype(np.float64)
    leads = interleaved / np.asarray(gains, dtype=np.float64)[:, None]
    return EcgRecord(leads, fs, lead_names, labels, name)


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def load_record(path: str, format: str | None = None) -> EcgRecord:
    """Load a recording; format inferred from the extension when not given."""
    if format is None:
        ext = os.path.splitext(path)[1].lower()
        if ext == ".csv":
            format = "csv"
        elif ext in (".hea", ".dat"):
            format = "wfdb"
        else:
            raise FormatError(f"cannot infer format of {path}; pass format=")
    if format == "csv":
        return _load_csv(path)
    if format == "wfdb":
        if path.lower().endswith(".dat"):
            path = os.path.splitext(path)[0] + ".hea"
        return _load_wfdb(path)
    raise FormatError(f"unknown format {format!r}")


def resample_record(rec: EcgRecord, target_fs: float) -> EcgRecord:
    """Linear interpolation onto a uniform grid at target_fs.

    Output length is floor(num_samples * target_fs / fs). Grid points past
    the last source sample continue the final segment's slope.
    """
    if target_fs <= 0:
        raise ValueError("target_fs must be positive")
    if rec.num_samples == 0:
        raise EmptyInputError(f"record {rec.source_id} has no samples")
    if rec.fs == target_fs:
        return EcgRecord(rec.leads.copy(), rec.fs, list(rec.lead_names),
                         set(rec.labels), rec.source_id)

    n = rec.num_samples
    out_len = int(np.floor(n * target_fs / rec.fs))
    if out_len == 0:
        raise EmptyInputError(
            f"record {rec.source_id}: resampling to {target_fs} Hz leaves no samples")
    pos = np.arange(out_len, dtype=np.float64) * (rec.fs / target_fs)
    src = np.arange(n, dtype=np.float64)
    out = np.empty((rec.num_leads, out_len), dtype=np.float64)
    tail = pos > n - 1
    for i in range(rec.num_leads):
        lead = rec.leads[i]
        out[i] = np.interp(pos, src, lead)
        if np.any(tail):
            slope = (lead[-1] - lead[-2]) if n >= 2 else 0.0
            out[i, tail] = lead[-1] + (pos[tail] - (n - 1)) * slope
    return EcgRecord(out, float(target_fs), list(rec.lead_names),
                     set(rec.labels), rec.source_id)


def rescale_peaks(peaks, src_fs: float, dst_fs: float) -> np.ndarray:
    """Map peak indices between sampling rates, round half up, dedup, sort."""
    arr = np.asarray(peaks, dtype=np.float64)
    if arr.size == 0:
        return np.empty(0, dtype=np.int64)
    scaled = np.floor(arr * (dst_fs / src_fs) + 0.5).astype(np.int64)
    return np.unique(scaled)
