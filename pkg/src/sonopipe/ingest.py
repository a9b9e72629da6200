"""Soundscape ingest: PCM WAV decoding and annotation tables.

Only the recorder format used in the field is supported: little-endian
RIFF/WAVE, PCM (format code 1), 16-bit, mono.  Anything else is rejected
rather than converted so the decoder stays small and bit-exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

TAXA = ("bird", "invertebrate", "mammal", "amphibian",
        "unknown", "anthropophony", "geophony")

_ANNOTATION_COLUMNS = ("begin_s", "end_s", "low_hz", "high_hz", "sonotype_id", "taxon")

PCM_SCALE = 32768  # int16 full scale; amplitude = sample / 32768


class IngestError(ValueError):
    pass


class MalformedHeader(IngestError):
    """RIFF structure is broken; the message names the offending field."""


class UnsupportedFormat(IngestError):
    """Valid RIFF but not PCM/16-bit/mono; the message names the field."""


class AnnotationError(IngestError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class MissingColumn(AnnotationError):
    pass


class NonNumericField(AnnotationError):
    pass


class InvalidTaxon(AnnotationError):
    pass


class NonPositiveDuration(AnnotationError):
    pass


class InvalidFrequencyBand(AnnotationError):
    pass


class UnsortedInput(IngestError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio, amplitudes in [-1, 1)."""
    samples: np.ndarray     # shape (n,), float32, values in [-1, 1)
    sample_rate_hz: int

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("AudioBuffer needs at least one sample")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class AnnotatedClip:
    """One labeled vocalization: a time/frequency box plus identity."""
    begin_s: float
    end_s: float
    low_hz: float
    high_hz: float
    sonotype_id: int
    taxon: str = "unknown"

    def __post_init__(self):
        if not self.begin_s < self.end_s:
            raise NonPositiveDuration(
                f"begin_s {self.begin_s} must precede end_s {self.end_s}")
        if not (0 <= self.low_hz < self.high_hz):
            raise InvalidFrequencyBand(
                f"need 0 <= low_hz < high_hz, got [{self.low_hz}, {self.high_hz}]")
        if self.taxon not in TAXA:
            raise InvalidTaxon(f"unknown taxon {self.taxon!r}")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.begin_s


def parse_wav(data: bytes) -> AudioBuffer:
    """Decode a 16-bit mono PCM RIFF/WAVE byte stream.

    Sample words map to amplitudes as value / 32768, so the range is
    exactly [-1, 1) and int16 round-trips losslessly.
    """
    if len(data) < 12:
        raise MalformedHeader("stream shorter than the 12-byte RIFF header")
    if data[0:4] != b"RIFF":
        raise MalformedHeader(f"RIFF magic mismatch: {bytes(data[0:4])!r}")
    if data[8:12] != b"WAVE":
        raise MalformedHeader(f"WAVE form type mismatch: {bytes(data[8:12])!r}")

    fmt = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_len,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if chunk_id == b"fmt ":
            if chunk_len < 16 or body_start + 16 > len(data):
                raise MalformedHeader("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", data, body_start)
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedHeader("data chunk precedes fmt chunk")
            audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
            if audio_format != 1:
                raise UnsupportedFormat(f"audio format code {audio_format}, only PCM (1)")
            if channels != 1:
                raise UnsupportedFormat(f"channel count {channels}, only mono")
            if bits != 16:
                raise UnsupportedFormat(f"bits per sample {bits}, only 16")
            if rate <= 0:
                raise MalformedHeader(f"sample rate {rate} not positive")
            if body_start + chunk_len > len(data):
                raise MalformedHeader(
                    f"data chunk declares {chunk_len} bytes, "
                    f"{len(data) - body_start} available")
            if chunk_len % 2 != 0:
                raise MalformedHeader(f"data chunk length {chunk_len} is odd")
            raw = np.frombuffer(data, dtype="<i2", count=chunk_len // 2, offset=body_start)
            samples = raw.astype(np.float32) / PCM_SCALE
            return AudioBuffer(samples=samples, sample_rate_hz=rate)
        # skip unknown chunks (word-aligned per RIFF)
        pos = body_start + chunk_len + (chunk_len % 2)
    raise MalformedHeader("no data chunk found")


def serialize_wav(buffer: AudioBuffer) -> bytes:
    """Inverse of parse_wav: canonical 44-byte header + int16 payload."""
    # f32 holds +-32768 exactly; in-place ops avoid large temporaries
    scaled = np.asarray(buffer.samples, dtype=np.float32) * np.float32(PCM_SCALE)
    np.around(scaled, out=scaled)
    np.minimum(scaled, PCM_SCALE - 1, out=scaled)
    np.maximum(scaled, -PCM_SCALE, out=scaled)
    words = scaled.astype("<i2")
    payload = words.tobytes()
    rate = buffer.sample_rate_hz
    header = b"".join([
        b"RIFF", struct.pack("<I", 36 + len(payload)), b"WAVE",
        b"fmt ", struct.pack("<I", 16),
        struct.pack("<HHIIHH", 1, 1, rate, rate * 2, 2, 16),
        b"data", struct.pack("<I", len(payload)),
    ])
    return header + payload


def parse_annotations(text: str) -> list[AnnotatedClip]:
    """Parse the annotation CSV (UTF-8, LF or CRLF).

    Header must list begin_s,end_s,low_hz,high_hz,sonotype_id,taxon.
    Rows that violate clip invariants are rejected with their row number
    (1 = first data row).
    """
    lines = [ln for ln in text.replace("\r\n", "\n").split("\n") if ln.strip()]
    if not lines:
        raise MissingColumn("empty input, header row required")
    header = [h.strip() for h in lines[0].split(",")]
    for col in _ANNOTATION_COLUMNS:
        if col not in header:
            raise MissingColumn(f"header lacks column {col!r}")
    idx = {col: header.index(col) for col in _ANNOTATION_COLUMNS}

    clips = []
    for row_no, line in enumerate(lines[1:], start=1):
        fields = [f.strip() for f in line.split(",")]
        if len(fields) < len(header):
            raise MissingColumn(f"{len(fields)} fields, header has {len(header)}", row=row_no)
        values = {}
        for col in ("begin_s", "end_s", "low_hz", "high_hz"):
            try:
                values[col] = float(fields[idx[col]])
            except ValueError:
                raise NonNumericField(
                    f"column {col!r} value {fields[idx[col]]!r}", row=row_no) from None
        try:
            sonotype_id = int(fields[idx["sonotype_id"]])
        except ValueError:
            raise NonNumericField(
                f"column 'sonotype_id' value {fields[idx['sonotype_id']]!r}",
                row=row_no) from None
        taxon = fields[idx["taxon"]]
        if taxon not in TAXA:
            raise InvalidTaxon(f"taxon {taxon!r}", row=row_no)
        try:
            clip = AnnotatedClip(begin_s=values["begin_s"], end_s=values["end_s"],
                                 low_hz=values["low_hz"], high_hz=values["high_hz"],
                                 sonotype_id=sonotype_id, taxon=taxon)
        except NonPositiveDuration as exc:
            raise NonPositiveDuration(str(exc), row=row_no) from None
        except InvalidFrequencyBand as exc:
            raise InvalidFrequencyBand(str(exc), row=row_no) from None
        clips.append(clip)
    return clips


def merge_adjacent(clips: list[AnnotatedClip], gap_s: float = 2.0) -> list[AnnotatedClip]:
    """Fuse same-sonotype clips separated by strictly less than gap_s.

    Input must be sorted by begin_s.  Adjacency is evaluated within each
    sonotype's own time sequence, so an interleaved call of another
    sonotype does not break a chain.  Merged clips take the union of the
    time spans and of the frequency bounds.  A gap of exactly gap_s keeps
    the clips separate.
    """
    for a, b in zip(clips, clips[1:]):
        if b.begin_s < a.begin_s:
            raise UnsortedInput(
                f"clips not sorted by begin_s ({b.begin_s} after {a.begin_s})")

    open_at: dict[int, int] = {}    # sonotype -> index of its last clip in `merged`
    merged: list[AnnotatedClip] = []
    for clip in clips:
        pos = open_at.get(clip.sonotype_id)
        prev = merged[pos] if pos is not None else None
        if prev is not None and clip.begin_s - prev.end_s < gap_s:
            merged[pos] = AnnotatedClip(
                begin_s=min(prev.begin_s, clip.begin_s),
                end_s=max(prev.end_s, clip.end_s),
                low_hz=min(prev.low_hz, clip.low_hz),
                high_hz=max(prev.high_hz, clip.high_hz),
                sonotype_id=clip.sonotype_id,
                taxon=prev.taxon,
            )
        else:
            open_at[clip.sonotype_id] = len(merged)
            merged.append(clip)
    return sorted(merged, key=lambda c: c.begin_s)
