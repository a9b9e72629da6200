"""Synthetic labeled soundscapes.

Four acoustic families stand in for the taxa encountered in field
recordings: tonal chirps (bird-like), harmonic stacks (mammal-like),
pulse trains (amphibian-like), and band-limited noise bursts
(insect-like).  The mapping is a labeling convenience, not a biological
claim.  Rendered calls are embedded in pink background noise at a
configurable SNR, so benchmark difficulty is a knob.

ROI bounds are measured from the rendered spectrogram (smallest
time/frequency box keeping 99.5% of the energy), which guarantees the
tight-bounds property by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import SonotypeCatalog
from .ingest import AnnotatedClip, AudioBuffer
from .spectro import IMAGE_SIZE, Spectrogram, encode_sample, normalize, bilinear_resize, spectrogram

FAMILIES = ("chirp", "harmonic", "pulse_train", "noise_band")
FAMILY_TAXON = {"chirp": "bird", "harmonic": "mammal",
                "pulse_train": "amphibian", "noise_band": "invertebrate"}

_ENERGY_KEEP = 0.995    # fraction of spectrogram energy the ROI must contain
_RAMP_S = 0.012         # attack/release ramp, keeps spectral splatter low


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SonotypeTemplate:
    family: str
    f_start: float          # Hz
    f_end: float            # Hz
    duration_s: float
    amplitude: float = 0.5
    freq_jitter: float = 0.05       # +- fraction of frequency
    duration_jitter: float = 0.10   # +- fraction of duration
    amp_jitter_db: float = 3.0      # +- dB
    pulse_rate_hz: float = 12.0     # pulse_train rhythm (jittered per render)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SynthError(f"unknown family {self.family!r}")
        if self.duration_s <= 0:
            raise SynthError(f"duration_s {self.duration_s} not positive")
        if self.f_start <= 0 or self.f_end <= 0:
            raise SynthError("frequencies must be positive")


def _envelope(n: int, rate: int, ramp_s: float = _RAMP_S) -> np.ndarray:
    env = np.ones(n)
    r = min(int(ramp_s * rate), n // 2)
    if r > 0:
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(r) / r))
        env[:r] = ramp
        env[-r:] = ramp[::-1]
    return env


def _band_noise(n: int, rate: int, lo: float, hi: float,
                rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """1/f-shaped noise, unit RMS."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.arange(len(spec), dtype=np.float64)
    freqs[0] = 1.0
    spec /= np.sqrt(freqs)
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x * x))


def _render_waveform(template: SonotypeTemplate, rng: np.random.Generator,
                     rate: int) -> np.ndarray:
    fj, dj = template.freq_jitter, template.duration_jitter
    f0 = template.f_start * (1 + rng.uniform(-fj, fj))
    f1 = template.f_end * (1 + rng.uniform(-fj, fj))
    dur = template.duration_s * (1 + rng.uniform(-dj, dj))
    amp = template.amplitude * 10 ** (rng.uniform(-template.amp_jitter_db,
                                                  template.amp_jitter_db) / 20)
    n = max(int(round(dur * rate)), rate // 50)
    t = np.arange(n) / rate

    if template.family == "chirp":
        phase = 2 * np.pi * (f0 * t + (f1 - f0) / (2 * dur) * t * t)
        x = np.sin(phase)
    elif template.family == "harmonic":
        fund = min(f0, f1)
        top = max(f0, f1)
        n_part = int(np.clip(round(top / fund), 2, 6))
        while n_part * fund >= 0.95 * rate / 2 and n_part > 1:
            n_part -= 1
        x = np.zeros(n)
        for h in range(1, n_part + 1):
            x += np.sin(2 * np.pi * h * fund * t + rng.uniform(0, 2 * np.pi)) / h
    elif template.family == "pulse_train":
        fc = 0.5 * (f0 + f1)
        pulse_hz = template.pulse_rate_hz * (1 + rng.uniform(-dj, dj))
        # raised-cosine bursts with 40% duty cycle
        phase = (t * pulse_hz) % 1.0
        duty = 0.4
        train = np.where(phase < duty, 0.5 * (1 - np.cos(2 * np.pi * phase / duty)), 0.0)
        x = train * np.sin(2 * np.pi * fc * t)
    else:  # noise_band
        x = _band_noise(n, rate, min(f0, f1), max(f0, f1), rng)

    x = x * _envelope(n, rate)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (min(amp, 0.95) / peak)
    return x


def _roi_from_spectrogram(spec: Spectrogram, keep: float = _ENERGY_KEEP,
                          ) -> tuple[int, int, int, int]:
    """Smallest (f0, f1, t0, t1) bin box keeping `keep` of total energy,
    trimming at most (1-keep)/2 from each side of each axis."""
    def trim(profile: np.ndarray) -> tuple[int, int]:
        total = profile.sum()
        budget = (1.0 - keep) / 2.0 * total
        lo = 0
        acc = 0.0
        while lo < len(profile) - 1 and acc + profile[lo] <= budget:
            acc += profile[lo]
            lo += 1
        hi = len(profile) - 1
        acc = 0.0
        while hi > lo and acc + profile[hi] <= budget:
            acc += profile[hi]
            hi -= 1
        return lo, hi

    f_lo, f_hi = trim(spec.grid.sum(axis=1))
    t_lo, t_hi = trim(spec.grid.sum(axis=0))
    if f_hi == f_lo:
        f_hi = min(f_lo + 1, spec.grid.shape[0] - 1)
    if t_hi == t_lo:
        t_hi = min(t_lo + 1, spec.grid.shape[1] - 1)
    return f_lo, f_hi, t_lo, t_hi


def render(template: SonotypeTemplate, rng_seed: int, sample_rate: int = 44100,
           pad_s: float = 0.15, sonotype_id: int = 0,
           ) -> tuple[AudioBuffer, AnnotatedClip | None]:
    """Realize a template with jittered parameters.

    The returned clip bounds are measured from the rendered energy; a
    zero-amplitude template yields a silent buffer and no clip.
    """
    if template.f_start >= sample_rate / 2 or template.f_end >= sample_rate / 2:
        raise SynthError("template frequencies at or above Nyquist")
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    pad = int(pad_s * sample_rate)
    if template.amplitude == 0.0:
        n = max(int(round(template.duration_s * sample_rate)), sample_rate // 50)
        samples = np.zeros(n + 2 * pad, dtype=np.float32)
        return AudioBuffer(samples=samples, sample_rate_hz=sample_rate), None

    x = _render_waveform(template, rng, sample_rate)
    samples = np.concatenate([np.zeros(pad), x, np.zeros(pad)]).astype(np.float32)
    samples = np.clip(samples, -1.0, 32767 / 32768)
    buffer = AudioBuffer(samples=samples, sample_rate_hz=sample_rate)

    spec = spectrogram(buffer)
    f_lo, f_hi, t_lo, t_hi = _roi_from_spectrogram(spec)
    clip = AnnotatedClip(
        begin_s=float(spec.time_axis_s[t_lo]),
        end_s=float(spec.time_axis_s[t_hi]),
        low_hz=float(spec.freq_axis_hz[f_lo]),
        high_hz=float(spec.freq_axis_hz[f_hi]),
        sonotype_id=sonotype_id,
        taxon=FAMILY_TAXON[template.family],
    )
    return buffer, clip


def embed_in_background(buffer: AudioBuffer, snr_db: float,
                        rng: np.random.Generator,
                        band: tuple[float, float] | None = None) -> AudioBuffer:
    """Add background noise scaled to the requested signal-to-noise ratio.

    Without a band the background is full-spectrum pink noise, most of
    whose power lies outside a typical call's frequency range.  With a
    band the noise is confined there, so the nominal SNR is the masking
    actually experienced by the call.
    """
    sig = np.asarray(buffer.samples, dtype=np.float64)
    active = sig[np.abs(sig) > 0]
    if len(active) == 0:
        return buffer
    p_sig = float(np.mean(active * active))
    if band is None:
        noise = pink_noise(len(sig), rng)
    else:
        noise = _band_noise(len(sig), buffer.sample_rate_hz, band[0], band[1], rng)
        noise = noise / np.sqrt(np.mean(noise * noise))
    p_noise = p_sig / 10 ** (snr_db / 10)
    mixed = sig + noise * np.sqrt(p_noise)
    mixed = np.clip(mixed, -1.0, 32767 / 32768).astype(np.float32)
    return AudioBuffer(samples=mixed, sample_rate_hz=buffer.sample_rate_hz)


def _longtail_counts(num: int, head: int) -> list[int]:
    # descending sizes: a few common sonotypes, a long tail of rare ones
    return [max(1, int(round(head * 0.55 ** i))) for i in range(num)]


def random_template(family: str, rng: np.random.Generator,
                    freq_lo: float = 500.0, freq_hi: float = 8000.0,
                    duration_range: tuple[float, float] = (0.35, 1.0),
                    freq_jitter: float = 0.05, duration_jitter: float = 0.10,
                    amp_jitter_db: float = 3.0) -> SonotypeTemplate:
    """Draw one template with family-appropriate frequency extents."""
    center = np.exp(rng.uniform(np.log(freq_lo * 1.5), np.log(freq_hi / 1.8)))
    if family == "chirp":
        span = center * rng.uniform(0.3, 0.8)
        f_start, f_end = center - span / 2, center + span / 2
        if rng.random() < 0.5:
            f_start, f_end = f_end, f_start
    elif family == "harmonic":
        f_start = center / 2
        f_end = f_start * rng.uniform(2.5, 4.5)
    elif family == "pulse_train":
        f_start = center * 0.9
        f_end = center * 1.1
    else:  # noise_band
        f_start = center * 0.7
        f_end = center * rng.uniform(1.3, 1.9)
    return SonotypeTemplate(
        family=family, f_start=float(max(f_start, 60.0)),
        f_end=float(min(f_end, freq_hi * 1.3)),
        duration_s=float(rng.uniform(*duration_range)),
        amplitude=float(rng.uniform(0.35, 0.7)),
        freq_jitter=freq_jitter, duration_jitter=duration_jitter,
        amp_jitter_db=amp_jitter_db)


def confusable_templates(num: int, rng: np.random.Generator,
                         band: tuple[float, float] = (1500.0, 3500.0),
                         duration_range: tuple[float, float] = (0.45, 0.85),
                         freq_jitter: float = 0.05, duration_jitter: float = 0.10,
                         amp_jitter_db: float = 3.0) -> list[SonotypeTemplate]:
    """Templates that all live in one frequency band.

    The ROI box is nearly identical across classes, so the auxiliary
    vector carries little class signal and discrimination must come from
    the time-frequency pattern (sweep direction, rhythm, harmonic
    spacing).  This is the hard regime of a crowded soundscape.
    """
    lo, hi = band
    mid = (lo + hi) / 2
    templates = []
    for i in range(num):
        family = FAMILIES[i % len(FAMILIES)]
        variant = i // len(FAMILIES)
        dur = float(rng.uniform(*duration_range))
        kwargs = dict(duration_s=dur, amplitude=float(rng.uniform(0.4, 0.6)),
                      freq_jitter=freq_jitter, duration_jitter=duration_jitter,
                      amp_jitter_db=amp_jitter_db)
        if family == "chirp":
            a, b = lo * 1.08, hi * 0.92
            f_start, f_end = (a, b) if variant % 2 == 0 else (b, a)
            templates.append(SonotypeTemplate(family=family, f_start=f_start,
                                              f_end=f_end, **kwargs))
        elif family == "harmonic":
            f0 = lo * (0.52 + 0.13 * variant)
            templates.append(SonotypeTemplate(family=family, f_start=f0,
                                              f_end=hi * 0.95, **kwargs))
        elif family == "pulse_train":
            templates.append(SonotypeTemplate(family=family, f_start=mid * 0.92,
                                              f_end=mid * 1.08,
                                              pulse_rate_hz=8.0 + 7.0 * variant,
                                              **kwargs))
        else:
            templates.append(SonotypeTemplate(family=family, f_start=lo * 1.02,
                                              f_end=hi * 0.98, **kwargs))
    return templates


def make_benchmark(num_sonotypes: int, samples_per, rng_seed: int,
                   image_size: int = IMAGE_SIZE, snr_db: float = 20.0,
                   sample_rate: int = 44100, freq_lo: float = 500.0,
                   freq_hi: float = 8000.0, freq_jitter: float = 0.05,
                   duration_jitter: float = 0.10, amp_jitter_db: float = 3.0,
                   template_pool: str = "spread", banded_noise: bool = False,
                   distractor_prob: float = 0.0, box_slop: float = 0.0,
                   ) -> SonotypeCatalog:
    """Render an encoded benchmark catalog.

    samples_per: an int (balanced), an explicit per-sonotype sequence, or
    "longtail" for a descending size distribution.  template_pool
    "spread" draws each class in its own frequency region; "confusable"
    stacks every class into one shared band.  distractor_prob overlays
    calls of other sonotypes on that fraction of samples.  box_slop
    loosens each ROI bound outward by up to that fraction of the box
    dimension, imitating hand-drawn annotation boxes.
    """
    if num_sonotypes < 2:
        raise SynthError("need at least 2 sonotypes")
    ss = np.random.SeedSequence(rng_seed)
    template_rng = np.random.default_rng(ss.spawn(1)[0])
    if samples_per == "longtail":
        counts = _longtail_counts(num_sonotypes, 60)
    elif isinstance(samples_per, int):
        counts = [samples_per] * num_sonotypes
    else:
        counts = list(samples_per)
        if len(counts) != num_sonotypes:
            raise SynthError("samples_per sequence length != num_sonotypes")

    if template_pool == "confusable":
        pool = confusable_templates(
            num_sonotypes, template_rng, band=(freq_lo, freq_hi),
            freq_jitter=freq_jitter, duration_jitter=duration_jitter,
            amp_jitter_db=amp_jitter_db)
    elif template_pool == "spread":
        pool = [random_template(FAMILIES[sid % len(FAMILIES)], template_rng,
                                freq_lo=freq_lo, freq_hi=freq_hi,
                                freq_jitter=freq_jitter,
                                duration_jitter=duration_jitter,
                                amp_jitter_db=amp_jitter_db)
                for sid in range(num_sonotypes)]
    else:
        raise SynthError(f"unknown template_pool {template_pool!r}")

    catalog = SonotypeCatalog()
    render_seeds = np.random.default_rng(ss.spawn(1)[0]).integers(
        0, 2**63, size=sum(counts))
    noise_rng = np.random.default_rng(ss.spawn(1)[0])
    mix_rng = np.random.default_rng(ss.spawn(1)[0])
    noise_band = (freq_lo * 0.8, freq_hi * 1.2) if banded_noise else None
    pos = 0
    for sid in range(num_sonotypes):
        template = pool[sid]
        for _ in range(counts[sid]):
            buffer, clip = render(template, int(render_seeds[pos]),
                                  sample_rate=sample_rate, sonotype_id=sid)
            pos += 1
            if clip is None:
                continue
            if distractor_prob > 0 and mix_rng.random() < distractor_prob:
                buffer = _mix_distractors(buffer, pool, sid, mix_rng, sample_rate)
            noisy = embed_in_background(buffer, snr_db, noise_rng, band=noise_band)
            spec = spectrogram(noisy)
            if box_slop > 0:
                clip = _slop_box(clip, spec, box_slop, mix_rng)
            sample = encode_sample(spec, clip, size=image_size)
            catalog.add(sid, clip.taxon, sample,
                        duration_s=clip.duration_s, low_hz=clip.low_hz,
                        high_hz=clip.high_hz)
    return catalog


def _slop_box(clip: AnnotatedClip, spec: Spectrogram, slop: float,
              rng: np.random.Generator) -> AnnotatedClip:
    """Loosen each bound outward by U(0, slop) of the box dimension, the way
    a human annotator over-draws; the call always stays inside."""
    dur = clip.end_s - clip.begin_s
    bw = clip.high_hz - clip.low_hz
    return AnnotatedClip(
        begin_s=max(0.0, clip.begin_s - float(rng.uniform(0, slop)) * dur),
        end_s=min(spec.duration_s, clip.end_s + float(rng.uniform(0, slop)) * dur),
        low_hz=max(0.0, clip.low_hz - float(rng.uniform(0, slop)) * bw),
        high_hz=min(spec.nyquist_hz, clip.high_hz + float(rng.uniform(0, slop)) * bw),
        sonotype_id=clip.sonotype_id, taxon=clip.taxon)


def _mix_distractors(buffer: AudioBuffer, pool, target_sid: int,
                     rng: np.random.Generator, sample_rate: int) -> AudioBuffer:
    """Overlay 1-2 calls of other sonotypes at random offsets and levels,
    the overlapping-vocalization regime of a crowded soundscape."""
    sig = np.asarray(buffer.samples, dtype=np.float64).copy()
    others = [i for i in range(len(pool)) if i != target_sid]
    for _ in range(int(rng.integers(1, 3))):
        other = others[int(rng.integers(len(others)))]
        dbuf, dclip = render(pool[other], int(rng.integers(0, 2**63)),
                             sample_rate=sample_rate)
        if dclip is None:
            continue
        level = float(rng.uniform(0.3, 0.9))
        d = np.asarray(dbuf.samples, dtype=np.float64) * level
        if len(d) >= len(sig):
            start = int(rng.integers(0, len(d) - len(sig) + 1))
            sig += d[start:start + len(sig)]
        else:
            start = int(rng.integers(0, len(sig) - len(d) + 1))
            sig[start:start + len(d)] += d
    sig = np.clip(sig, -1.0, 32767 / 32768).astype(np.float32)
    return AudioBuffer(samples=sig, sample_rate_hz=sample_rate)


def make_noise_bank(image_size: int, rng_seed: int,
                    sample_rate: int = 44100):
    """Procedural stand-ins for the anthropophony/geophony noise images."""
    from .augment import NoiseBank

    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    duration = 1.0
    n = int(duration * sample_rate)

    def to_image(x: np.ndarray) -> np.ndarray:
        buf = AudioBuffer(samples=np.clip(x, -1, 32767 / 32768).astype(np.float32),
                          sample_rate_hz=sample_rate)
        grid = spectrogram(buf).grid
        img = bilinear_resize(normalize(grid), image_size, image_size)
        return np.rint(img[::-1]).astype(np.uint8)

    t = np.arange(n) / sample_rate
    images = {}
    for name, level in (("rain_light", 0.15), ("rain_medium", 0.4), ("rain_heavy", 0.8)):
        images[name] = to_image(_band_noise(n, sample_rate, 800, 16000, rng) * level)
    rumble = _band_noise(n, sample_rate, 40, 300, rng)
    images["thunder"] = to_image(rumble * (0.4 + 0.6 * _envelope(n, sample_rate, 0.4)))
    drone = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) / (i + 1)
                for i, f in enumerate((90.0, 180.0, 270.0, 360.0)))
    images["aircraft"] = to_image(0.5 * drone / np.max(np.abs(drone))
                                  + 0.1 * _band_noise(n, sample_rate, 60, 1200, rng))
    buzz = sum(np.sin(2 * np.pi * 110.0 * h * t) / h for h in range(1, 12))
    images["chainsaw"] = to_image(0.5 * buzz / np.max(np.abs(buzz))
                                  + 0.2 * _band_noise(n, sample_rate, 200, 6000, rng))
    images["vehicle"] = to_image(_band_noise(n, sample_rate, 50, 600, rng) * 0.6)
    return NoiseBank(images)


_TEMPLATE_FIELDS = ("family", "f_start", "f_end", "duration_s", "amplitude",
                    "freq_jitter", "duration_jitter", "amp_jitter_db",
                    "pulse_rate_hz")


def template_to_text(template: SonotypeTemplate) -> str:
    """Plain key = value description, one field per line."""
    return "".join(f"{name} = {getattr(template, name)}\n"
                   for name in _TEMPLATE_FIELDS)


def template_from_text(text: str) -> SonotypeTemplate:
    values: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SynthError(f"line {line_no}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _TEMPLATE_FIELDS:
            raise SynthError(f"line {line_no}: unknown field {key!r}")
        values[key] = raw if key == "family" else float(raw)
    return SonotypeTemplate(**values)


def make_pretext_corpus(num_classes: int, per_class: int, rng_seed: int,
                        image_size: int = IMAGE_SIZE, snr_db: float = 12.0,
                        freq_lo: float = 700.0, freq_hi: float = 10000.0,
                        template_pool: str = "spread", banded_noise: bool = False,
                        distractor_prob: float = 0.0, box_slop: float = 0.0,
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Images and labels for a pretext task disjoint from the benchmark.

    Uses its own seed stream and its own template draw so pretext classes
    never coincide with benchmark sonotypes; noise statistics are
    configurable so the backbone can be pre-trained at the deployment
    difficulty.
    """
    catalog = make_benchmark(num_classes, per_class, rng_seed,
                             image_size=image_size, snr_db=snr_db,
                             freq_lo=freq_lo, freq_hi=freq_hi,
                             freq_jitter=0.08, duration_jitter=0.15,
                             template_pool=template_pool, banded_noise=banded_noise,
                             distractor_prob=distractor_prob, box_slop=box_slop)
    images, labels = [], []
    for sid in catalog.sonotype_ids():
        for s in catalog.info(sid).samples:
            images.append(s.image)
            labels.append(sid)
    return np.stack(images), np.array(labels, dtype=np.int64)
