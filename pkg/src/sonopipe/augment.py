"""Label-preserving augmentation of encoded samples.

Eight transform kinds: cropping along time, frequency, or both; mixing a
noise image at 1/3 weight; translating in frequency; widening in time or
frequency; and sharpening (squeezing both axes).  Magnitudes are a
fraction of the relevant dimension, drawn from [0.05, 0.10].  Flips and
rotations are deliberately absent: they produce images that no sound can
generate.

Every transform keeps the image shape and the [0, 255] range and updates
the auxiliary ROI vector consistently (cropping narrows the interval,
widening expands it, translation shifts the frequency pair, sharpening
contracts both, noise leaves it untouched).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import EmptySplit
from .spectro import EncodedSample, bilinear_resize, normalize

KINDS = ("crop_time", "crop_freq", "crop_both", "add_noise",
         "translate_freq", "widen_time", "widen_freq", "sharpen")

MAGNITUDE_RANGE = (0.05, 0.10)

NOISE_NAMES = ("rain_light", "rain_medium", "rain_heavy", "thunder",
               "aircraft", "chainsaw", "vehicle")

# direction vocabularies per kind; None = direction not applicable
_DIRECTIONS = {
    "crop_time": ("start", "end"),
    "crop_freq": ("up", "down"),
    "crop_both": ("start", "end", "up", "down"),
    "translate_freq": ("up", "down"),
}


class AugmentError(ValueError):
    pass


class UnknownNoiseId(AugmentError):
    pass


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    magnitude: float
    direction: str | None = None
    noise_id: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AugmentError(f"unknown augmentation kind {self.kind!r}")
        lo, hi = MAGNITUDE_RANGE
        if not lo <= self.magnitude <= hi:
            raise AugmentError(f"magnitude {self.magnitude} outside [{lo}, {hi}]")
        if (self.noise_id is not None) != (self.kind == "add_noise"):
            raise AugmentError("noise_id must be given exactly when kind is add_noise")
        allowed = _DIRECTIONS.get(self.kind)
        if allowed is not None and self.direction not in allowed:
            raise AugmentError(
                f"kind {self.kind!r} needs direction in {allowed}, got {self.direction!r}")


class NoiseBank:
    """Named noise images, already normalized to [0, 255] (uint8, 2-D)."""

    def __init__(self, images: dict[str, np.ndarray]):
        for name, img in images.items():
            img = np.asarray(img)
            if img.ndim != 2 or img.dtype != np.uint8:
                raise AugmentError(f"noise image {name!r} must be 2-D uint8")
        self.images = dict(images)

    def names(self) -> tuple[str, ...]:
        return tuple(self.images)

    def get(self, noise_id: str) -> np.ndarray:
        try:
            return self.images[noise_id]
        except KeyError:
            raise UnknownNoiseId(
                f"{noise_id!r} not in bank {sorted(self.images)}") from None


def save_noise_bank(bank: NoiseBank, directory) -> None:
    """One container file per noise class, named <class>.sntp."""
    from pathlib import Path

    from . import container

    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    for name in bank.names():
        (path / f"{name}.sntp").write_bytes(
            container.write_tensors({"image": bank.get(name)}))


def load_noise_bank(directory) -> NoiseBank:
    from pathlib import Path

    from . import container

    images = {}
    for entry in sorted(Path(directory).glob("*.sntp")):
        images[entry.stem] = container.read_tensors(entry.read_bytes())["image"]
    if not images:
        raise AugmentError(f"no noise tensors found in {directory}")
    return NoiseBank(images)


def _resize_channel(chan: np.ndarray, h: int, w: int) -> np.ndarray:
    return bilinear_resize(chan, h, w)


def _clip01(v: float) -> float:
    return min(1.0, max(0.0, float(v)))


def _corner_edges(direction: str) -> tuple[str, str]:
    # crop_both removes a corner: map the single direction onto (time edge, freq edge)
    return {
        "start": ("start", "down"),
        "end": ("end", "up"),
        "up": ("start", "up"),
        "down": ("end", "down"),
    }[direction]


def apply(sample: EncodedSample, spec: AugmentSpec,
          bank: NoiseBank | None = None) -> EncodedSample:
    """Apply one augmentation; returns a new sample tagged with the parent id."""
    size = sample.image.shape[0]
    chan = sample.image[:, :, 0].astype(np.float64)
    b, e, lo, hi = (float(v) for v in sample.aux)
    m = spec.magnitude
    k = max(1, round(m * size))     # pixels touched by geometric transforms

    def cropped(time_edge: str | None, freq_edge: str | None) -> np.ndarray:
        nonlocal b, e, lo, hi
        img = chan
        if freq_edge == "up":           # row 0 is the highest frequency
            img = img[k:, :]
            hi = hi - m * (hi - lo)
        elif freq_edge == "down":
            img = img[:-k, :]
            lo = lo + m * (hi - lo)
        if time_edge == "start":
            img = img[:, k:]
            b = b + m * (e - b)
        elif time_edge == "end":
            img = img[:, :-k]
            e = e - m * (e - b)
        return _resize_channel(img, size, size)

    if spec.kind == "crop_time":
        out = cropped(spec.direction, None)
    elif spec.kind == "crop_freq":
        out = cropped(None, spec.direction)
    elif spec.kind == "crop_both":
        t_edge, f_edge = _corner_edges(spec.direction)
        out = cropped(t_edge, f_edge)
    elif spec.kind == "translate_freq":
        out = np.zeros_like(chan)
        if spec.direction == "up":      # toward higher frequency = smaller row index
            out[:size - k, :] = chan[k:, :]
        else:
            out[k:, :] = chan[:size - k, :]
        delta = m * (hi - lo) * (1 if spec.direction == "up" else -1)
        lo = _clip01(lo + delta)
        hi = _clip01(hi + delta)
    elif spec.kind == "widen_time":
        wide = _resize_channel(chan, size, size + k)
        off = k // 2
        out = wide[:, off:off + size]
        half = m * (e - b) / 2
        b = _clip01(b - half)
        e = _clip01(e + half)
    elif spec.kind == "widen_freq":
        tall = _resize_channel(chan, size + k, size)
        off = k // 2
        out = tall[off:off + size, :]
        half = m * (hi - lo) / 2
        lo = _clip01(lo - half)
        hi = _clip01(hi + half)
    elif spec.kind == "sharpen":
        small = _resize_channel(chan, size - k, size - k)
        out = np.zeros_like(chan)
        off = k // 2
        out[off:off + size - k, off:off + size - k] = small
        t_half = m * (e - b) / 2
        f_half = m * (hi - lo) / 2
        b, e = b + t_half, e - t_half
        lo, hi = lo + f_half, hi - f_half
    elif spec.kind == "add_noise":
        if bank is None:
            raise UnknownNoiseId("add_noise requested but no noise bank supplied")
        noise = bank.get(spec.noise_id).astype(np.float64)
        if noise.shape != chan.shape:
            noise = _resize_channel(noise, size, size)
        out = normalize(chan + noise / 3.0)
    else:  # pragma: no cover - guarded by AugmentSpec
        raise AugmentError(spec.kind)

    image = np.rint(np.clip(out, 0, 255)).astype(np.uint8)
    aux = np.array([_clip01(b), _clip01(e), _clip01(lo), _clip01(hi)], dtype=np.float32)
    return EncodedSample(image=np.repeat(image[:, :, None], 3, axis=2), aux=aux,
                         label=sample.label, sample_id=-1, parent_id=sample.sample_id)


def draw_spec(rng: np.random.Generator, bank: NoiseBank | None = None) -> AugmentSpec:
    """Draw a uniform random AugmentSpec (kinds equiprobable, magnitude in range).

    Without a noise bank the add_noise kind is excluded from the draw.
    """
    kinds = KINDS if bank is not None and bank.names() else \
        tuple(k for k in KINDS if k != "add_noise")
    kind = kinds[int(rng.integers(len(kinds)))]
    lo, hi = MAGNITUDE_RANGE
    magnitude = float(rng.uniform(lo, hi))
    direction = None
    if kind in _DIRECTIONS:
        options = _DIRECTIONS[kind]
        direction = options[int(rng.integers(len(options)))]
    noise_id = None
    if kind == "add_noise":
        names = bank.names()
        noise_id = names[int(rng.integers(len(names)))]
    return AugmentSpec(kind=kind, magnitude=magnitude, direction=direction,
                       noise_id=noise_id)


def fan_out(sample: EncodedSample, count: int, rng_seed: int,
            bank: NoiseBank | None = None) -> list[EncodedSample]:
    """Expand one sample into `count` samples: the original plus count-1 variants.

    Each variant draws its spec from an independent child stream of the
    seed, so results are reproducible and order-independent.
    """
    if count < 1:
        raise AugmentError(f"count {count} below 1")
    out = [sample]
    children = np.random.SeedSequence(rng_seed).spawn(count - 1)
    for child in children:
        rng = np.random.default_rng(child)
        out.append(apply(sample, draw_spec(rng, bank), bank))
    return out


def augment_to_quota(splits: dict[str, list[EncodedSample]],
                     quota_per_split: tuple[int, int, int], rng_seed: int,
                     bank: NoiseBank | None = None) -> dict[str, list[EncodedSample]]:
    """Grow each split of one sonotype to its quota with augmented variants.

    Variants always descend from parents inside the same split, so no
    augmented sample ever crosses a split boundary.  Splits already at or
    above quota pass through unchanged.
    """
    quotas = dict(zip(("train", "val", "test"), quota_per_split))
    ss = np.random.SeedSequence(rng_seed)
    child_seq = {name: s for name, s in zip(("train", "val", "test"), ss.spawn(3))}
    out: dict[str, list[EncodedSample]] = {}
    for name in ("train", "val", "test"):
        originals = list(splits.get(name, []))
        if not originals:
            raise EmptySplit(f"split {name!r} has no samples to augment from")
        rng = np.random.default_rng(child_seq[name])
        grown = list(originals)
        while len(grown) < quotas[name]:
            parent = originals[int(rng.integers(len(originals)))]
            grown.append(apply(parent, draw_spec(rng, bank), bank))
        out[name] = grown
    return out
