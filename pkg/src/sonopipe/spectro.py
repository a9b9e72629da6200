"""Spectrogram extraction and ROI encoding.

The analysis chain is fixed: frames of 256 samples overlapping by 32,
each tapered by a Tukey(0.25) window, one-sided power spectrum (129
bins).  Trailing samples that do not fill a whole frame are dropped,
which is what the floor in frame_count expresses.

Encoded samples are square three-channel images; row 0 is the highest
frequency of the ROI (display orientation), all channels are identical,
and the auxiliary vector carries the ROI bounds normalized to [0, 1]
(times by recording duration, frequencies by Nyquist).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import AnnotatedClip, AudioBuffer

WINDOW_SIZE = 256
OVERLAP = 32
TUKEY_ALPHA = 0.25
IMAGE_SIZE = 224

_FFT_CHUNK = 32768  # frames per FFT batch, bounds peak memory on long files


class SpectroError(ValueError):
    pass


class InvalidFraming(SpectroError):
    pass


class AudioTooShort(SpectroError):
    pass


class OutOfBounds(SpectroError):
    """Clip box does not lie inside the spectrogram axes."""


@dataclass(frozen=True)
class Spectrogram:
    """Time x frequency power grid with axis calibration."""
    grid: np.ndarray          # (n_bins, n_frames) float32, power, >= 0
    freq_axis_hz: np.ndarray  # (n_bins,) bin centers, 0 .. Nyquist
    time_axis_s: np.ndarray   # (n_frames,) frame centers
    sample_rate_hz: int
    duration_s: float
    window_size: int = WINDOW_SIZE
    overlap: int = OVERLAP

    @property
    def nyquist_hz(self) -> float:
        return self.sample_rate_hz / 2


@dataclass
class EncodedSample:
    """Network-ready sample: image + auxiliary ROI vector + label.

    sample_id / parent_id are provenance tags used by dataset assembly;
    parent_id is -1 for original (non-augmented) samples.
    """
    image: np.ndarray               # (size, size, 3) uint8, channels identical
    aux: np.ndarray                 # (4,) float32 in [0, 1]
    label: int
    sample_id: int = -1
    parent_id: int = -1

    def copy(self) -> "EncodedSample":
        return EncodedSample(image=self.image.copy(), aux=self.aux.copy(),
                             label=self.label, sample_id=self.sample_id,
                             parent_id=self.parent_id)


def frame_count(num_samples: int, window: int = WINDOW_SIZE, overlap: int = OVERLAP) -> int:
    """Number of complete analysis frames: floor((n - overlap)/(window - overlap))."""
    if not (num_samples >= window > overlap >= 0):
        raise InvalidFraming(
            f"need num_samples >= window > overlap >= 0, "
            f"got ({num_samples}, {window}, {overlap})")
    return (num_samples - overlap) // (window - overlap)


def tukey_window(n: int, alpha: float = TUKEY_ALPHA) -> np.ndarray:
    """Tapered-cosine window: ramps of alpha*n/2 points each side, flat middle.

    Endpoints are 0 for alpha > 0; alpha = 0 degenerates to all ones.
    The ramp is parameterized so its midpoint sits on a sample and equals
    exactly 0.5 when alpha*n is a multiple of 4.
    """
    if n < 2:
        raise InvalidFraming(f"window length {n} below 2")
    if not 0 <= alpha <= 1:
        raise InvalidFraming(f"alpha {alpha} outside [0, 1]")
    w = np.ones(n, dtype=np.float64)
    ramp = alpha * n / 2
    if ramp > 0:
        left = np.arange(0, int(np.ceil(ramp)))
        w[left] = 0.5 * (1 + np.cos(np.pi * (left / ramp - 1)))
        w[n - 1 - left] = w[left]
    return w


def spectrogram(audio: AudioBuffer, window: int = WINDOW_SIZE, overlap: int = OVERLAP,
                alpha: float = TUKEY_ALPHA) -> Spectrogram:
    """One-sided power spectrogram over complete frames.

    Per frame: taper by Tukey(alpha), real FFT, |X|^2.  No density
    scaling: downstream byte-range normalization cancels any global
    factor.
    """
    samples = np.asarray(audio.samples)
    if len(samples) < window:
        raise AudioTooShort(f"{len(samples)} samples, window needs {window}")
    n_frames = frame_count(len(samples), window, overlap)
    hop = window - overlap
    taper = tukey_window(window, alpha)
    n_bins = window // 2 + 1

    # chunked framing keeps peak memory bounded on 30-minute files
    grid = np.empty((n_bins, n_frames), dtype=np.float32)
    for start in range(0, n_frames, _FFT_CHUNK):
        stop = min(start + _FFT_CHUNK, n_frames)
        idx = np.arange(start, stop)[:, None] * hop + np.arange(window)[None, :]
        frames = samples[idx].astype(np.float64) * taper
        spec = np.fft.rfft(frames, axis=1)
        grid[:, start:stop] = (spec.real**2 + spec.imag**2).T.astype(np.float32)

    rate = audio.sample_rate_hz
    freq_axis = np.arange(n_bins) * (rate / window)
    time_axis = (np.arange(n_frames) * hop + window / 2) / rate
    return Spectrogram(grid=grid, freq_axis_hz=freq_axis, time_axis_s=time_axis,
                       sample_rate_hz=rate, duration_s=len(samples) / rate,
                       window_size=window, overlap=overlap)


def normalize(roi: np.ndarray) -> np.ndarray:
    """Linear map of an ROI onto [0, 255]: (V - min)/(max - min) * 255.

    A constant ROI (max == min) maps to all zeros.
    """
    roi = np.asarray(roi, dtype=np.float64)
    if roi.size == 0:
        raise SpectroError("empty ROI")
    lo = roi.min()
    hi = roi.max()
    if hi == lo:
        return np.zeros_like(roi)
    return (roi - lo) / (hi - lo) * 255.0


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of a 2-D array.

    Input corners map exactly onto output corners, so corner values are
    preserved bit-for-bit.
    """
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape
    ys = np.linspace(0, in_h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, in_w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _axis_slice(axis: np.ndarray, lo: float, hi: float) -> tuple[int, int]:
    """Inclusive index range of axis points falling inside [lo, hi].

    Falls back to the nearest single point when the interval straddles no
    axis point (sub-bin ROI).
    """
    i0 = int(np.searchsorted(axis, lo, side="left"))
    i1 = int(np.searchsorted(axis, hi, side="right")) - 1
    if i1 < i0:
        mid = (lo + hi) / 2
        i0 = i1 = int(np.argmin(np.abs(axis - mid)))
    return i0, i1


def encode_sample(spec: Spectrogram, clip: AnnotatedClip,
                  size: int = IMAGE_SIZE) -> EncodedSample:
    """Crop the clip's box, normalize, resize to size x size, replicate to 3 channels.

    Raises OutOfBounds when the clip box is not contained in the
    spectrogram axes.
    """
    if clip.begin_s < 0 or clip.end_s > spec.duration_s:
        raise OutOfBounds(
            f"time bounds [{clip.begin_s}, {clip.end_s}] outside "
            f"[0, {spec.duration_s:.6f}]")
    if clip.low_hz < 0 or clip.high_hz > spec.nyquist_hz:
        raise OutOfBounds(
            f"frequency bounds [{clip.low_hz}, {clip.high_hz}] outside "
            f"[0, {spec.nyquist_hz}]")

    f0, f1 = _axis_slice(spec.freq_axis_hz, clip.low_hz, clip.high_hz)
    t0, t1 = _axis_slice(spec.time_axis_s, clip.begin_s, clip.end_s)
    crop = spec.grid[f0:f1 + 1, t0:t1 + 1]
    scaled = normalize(crop)
    resized = bilinear_resize(scaled, size, size)
    image = np.rint(resized[::-1]).astype(np.uint8)    # row 0 = highest frequency
    aux = np.clip(np.array([
        clip.begin_s / spec.duration_s,
        clip.end_s / spec.duration_s,
        clip.low_hz / spec.nyquist_hz,
        clip.high_hz / spec.nyquist_hz,
    ], dtype=np.float32), 0.0, 1.0)
    return EncodedSample(image=np.repeat(image[:, :, None], 3, axis=2),
                         aux=aux, label=clip.sonotype_id)
