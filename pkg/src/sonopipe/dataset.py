"""Sonotype catalog, splits, experiment draws, and container persistence.

Split rule: validation and test each get max(1, round(n/10)) samples
(round half away from zero, computed in integers as (n+5)//10), training
gets the rest.  Every retained sonotype therefore keeps at least one
independent sample per purpose, which is why sonotypes with fewer than
3 samples are dropped up front.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .ingest import TAXA
from .spectro import EncodedSample

SPLIT_NAMES = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2, "none": 3}
_SPLIT_NAME = {v: k for k, v in _SPLIT_CODE.items()}
SCHEMA_VERSION = 1


class DatasetError(ValueError):
    pass


class TooFewSamples(DatasetError):
    pass


class EmptySplit(DatasetError):
    pass


class InsufficientEligibleSonotypes(DatasetError):
    def __init__(self, needed: int, available: int, requirement: str):
        self.available = available
        super().__init__(f"need {needed} sonotypes {requirement}, only {available} exist")


@dataclass
class SonotypeInfo:
    taxon: str
    samples: list[EncodedSample] = field(default_factory=list)
    # per-sample ROI facts used for summary stats
    durations_s: list[float] = field(default_factory=list)
    low_bounds_hz: list[float] = field(default_factory=list)
    high_bounds_hz: list[float] = field(default_factory=list)

    @property
    def stats(self) -> dict[str, float]:
        """min/max frequency, frequency range, and mean duration of members."""
        if not self.samples:
            return {"min_hz": 0.0, "max_hz": 0.0, "range_hz": 0.0, "mean_duration_s": 0.0}
        min_hz = min(self.low_bounds_hz)
        max_hz = max(self.high_bounds_hz)
        return {"min_hz": min_hz, "max_hz": max_hz, "range_hz": max_hz - min_hz,
                "mean_duration_s": float(np.mean(self.durations_s))}


class SonotypeCatalog:
    """Immutable-after-build map from sonotype id to its samples and stats."""

    def __init__(self):
        self._info: dict[int, SonotypeInfo] = {}
        self._next_id = 0

    def add(self, sonotype_id: int, taxon: str, sample: EncodedSample,
            duration_s: float, low_hz: float, high_hz: float) -> None:
        if taxon not in TAXA:
            raise DatasetError(f"unknown taxon {taxon!r}")
        info = self._info.setdefault(sonotype_id, SonotypeInfo(taxon=taxon))
        if sample.sample_id < 0:
            sample.sample_id = self._next_id
        elif any(s.sample_id == sample.sample_id for s in info.samples):
            raise DatasetError(f"duplicate sample reference {sample.sample_id}")
        self._next_id = max(self._next_id, sample.sample_id) + 1
        info.samples.append(sample)
        info.durations_s.append(duration_s)
        info.low_bounds_hz.append(low_hz)
        info.high_bounds_hz.append(high_hz)

    def sonotype_ids(self) -> list[int]:
        return sorted(self._info)

    def info(self, sonotype_id: int) -> SonotypeInfo:
        return self._info[sonotype_id]

    def counts(self) -> dict[int, int]:
        return {sid: len(info.samples) for sid, info in sorted(self._info.items())}

    def __len__(self) -> int:
        return len(self._info)

    def __contains__(self, sonotype_id: int) -> bool:
        return sonotype_id in self._info


def filter_min_samples(catalog: SonotypeCatalog, min_n: int = 3) -> SonotypeCatalog:
    """Keep only sonotypes with at least min_n samples."""
    out = SonotypeCatalog()
    out._next_id = catalog._next_id
    for sid in catalog.sonotype_ids():
        info = catalog.info(sid)
        if len(info.samples) >= min_n:
            out._info[sid] = info
    return out


def split(n: int, rng_seed: int | None = None) -> tuple[int, int, int]:
    """(train, val, test) counts for n samples: 80/10/10 with one-sample floors."""
    if n < 3:
        raise TooFewSamples(f"{n} samples cannot cover train/val/test")
    val = max(1, (n + 5) // 10)
    test = max(1, (n + 5) // 10)
    return n - val - test, val, test


def assign_split_tags(n: int, rng_seed: int) -> list[str]:
    """Random per-sample split tags realizing split(n); uniform under the seed."""
    n_train, n_val, n_test = split(n)
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(n)
    tags = [""] * n
    for pos in order[:n_train]:
        tags[pos] = "train"
    for pos in order[n_train:n_train + n_val]:
        tags[pos] = "val"
    for pos in order[n_train + n_val:]:
        tags[pos] = "test"
    return tags


@dataclass
class SplitAssignment:
    """Per-sample split tags for a set of sonotypes, with coverage checking."""
    tags_by_sid: dict[int, list[str]]

    def __post_init__(self):
        for sid, tags in self.tags_by_sid.items():
            for name in SPLIT_NAMES:
                if name not in tags:
                    raise DatasetError(f"sonotype {sid} has no {name!r} sample")

    def counts(self) -> dict[int, tuple[int, int, int]]:
        return {sid: tuple(tags.count(name) for name in SPLIT_NAMES)
                for sid, tags in self.tags_by_sid.items()}


def assign_splits(draw: dict[int, list[EncodedSample]], rng_seed: int) -> SplitAssignment:
    """One seeded SplitAssignment covering every sonotype of a draw."""
    children = np.random.SeedSequence(rng_seed).spawn(len(draw))
    tags = {}
    for child, sid in zip(children, sorted(draw)):
        tags[sid] = assign_split_tags(
            len(draw[sid]), int(np.random.default_rng(child).integers(0, 2**63)))
    return SplitAssignment(tags_by_sid=tags)


def select_balanced(catalog: SonotypeCatalog, k: int, s: int,
                    rng_seed: int) -> dict[int, list[EncodedSample]]:
    """Draw k sonotypes uniformly among those with >= s samples, s samples each."""
    eligible = [sid for sid in catalog.sonotype_ids()
                if len(catalog.info(sid).samples) >= s]
    if len(eligible) < k:
        raise InsufficientEligibleSonotypes(k, len(eligible), f"with >= {s} samples")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(eligible), size=k, replace=False)
    draw = {}
    for idx in sorted(int(i) for i in chosen):
        sid = eligible[idx]
        members = catalog.info(sid).samples
        picks = rng.choice(len(members), size=s, replace=False)
        draw[sid] = [members[int(i)] for i in picks]
    return draw


def select_imbalanced(catalog: SonotypeCatalog, k: int = 6, rng_seed: int = 0,
                      ) -> tuple[dict[int, list[EncodedSample]], float, int]:
    """Draw k sonotypes with all their samples; also return (mean, min) sizes."""
    ids = catalog.sonotype_ids()
    if len(ids) < k:
        raise InsufficientEligibleSonotypes(k, len(ids), "in the catalog")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(ids), size=k, replace=False)
    draw = {ids[int(i)]: list(catalog.info(ids[int(i)]).samples)
            for i in sorted(int(i) for i in chosen)}
    sizes = [len(v) for v in draw.values()]
    return draw, float(np.mean(sizes)), int(min(sizes))


@dataclass
class SonotypeDataset:
    """Flat list of encoded samples with split tags and sonotype metadata."""
    samples: list[EncodedSample]
    split_tags: list[str]                       # "train"/"val"/"test"/"none" per sample
    sonotype_meta: dict[int, dict] = field(default_factory=dict)
    # sonotype_meta[sid] = {"taxon": str, "min_hz": f, "max_hz": f,
    #                       "range_hz": f, "mean_duration_s": f}

    def __post_init__(self):
        if len(self.samples) != len(self.split_tags):
            raise DatasetError("samples and split_tags length mismatch")

    def subset(self, tag: str) -> list[EncodedSample]:
        return [s for s, t in zip(self.samples, self.split_tags) if t == tag]

    def assign_ids(self) -> None:
        """Give fresh ids to samples that lack one (augmented variants)."""
        used = {s.sample_id for s in self.samples if s.sample_id >= 0}
        nxt = max(used, default=-1) + 1
        for s in self.samples:
            if s.sample_id < 0:
                s.sample_id = nxt
                nxt += 1


def dataset_from_splits(splits_by_sid: dict[int, dict[str, list[EncodedSample]]],
                        catalog: SonotypeCatalog | None = None) -> SonotypeDataset:
    """Flatten per-sonotype split dicts into one dataset, assigning fresh ids."""
    samples: list[EncodedSample] = []
    tags: list[str] = []
    meta = {}
    for sid in sorted(splits_by_sid):
        for tag in SPLIT_NAMES:
            for s in splits_by_sid[sid].get(tag, []):
                samples.append(s)
                tags.append(tag)
        if catalog is not None and sid in catalog:
            info = catalog.info(sid)
            meta[sid] = {"taxon": info.taxon, **info.stats}
    ds = SonotypeDataset(samples=samples, split_tags=tags, sonotype_meta=meta)
    ds.assign_ids()
    return ds


def group_by_split(members: list[EncodedSample], tags: list[str],
                   ) -> dict[str, list[EncodedSample]]:
    out: dict[str, list[EncodedSample]] = {name: [] for name in SPLIT_NAMES}
    for sample, tag in zip(members, tags):
        out[tag].append(sample)
    return out


def write_container(dataset: SonotypeDataset) -> bytes:
    """Serialize a dataset losslessly (images 8-bit, aux float32)."""
    n = len(dataset.samples)
    if n:
        shape = dataset.samples[0].image.shape
        for s in dataset.samples:
            if s.image.shape != shape:
                raise DatasetError("all images in a container must share one shape")
        images = np.stack([s.image for s in dataset.samples]).astype(np.uint8)
        aux = np.stack([s.aux for s in dataset.samples]).astype(np.float32)
    else:
        images = np.zeros((0, 0, 0, 3), dtype=np.uint8)
        aux = np.zeros((0, 4), dtype=np.float32)
    labels = np.array([s.label for s in dataset.samples], dtype=np.int64)
    sample_ids = np.array([s.sample_id for s in dataset.samples], dtype=np.int64)
    parent_ids = np.array([s.parent_id for s in dataset.samples], dtype=np.int64)
    split_codes = np.array([_SPLIT_CODE[t] for t in dataset.split_tags], dtype=np.uint8)

    sids = sorted(dataset.sonotype_meta)
    taxon_codes = np.array([TAXA.index(dataset.sonotype_meta[sid]["taxon"])
                            for sid in sids], dtype=np.uint8)
    stats = np.array([[dataset.sonotype_meta[sid][key] for key in
                       ("min_hz", "max_hz", "range_hz", "mean_duration_s")]
                      for sid in sids], dtype=np.float64).reshape(len(sids), 4)

    return container.write_tensors({
        "schema_version": np.array([SCHEMA_VERSION], dtype=np.uint16),
        "images": images,
        "aux": aux,
        "labels": labels,
        "sample_id": sample_ids,
        "parent_id": parent_ids,
        "split": split_codes,
        "sonotype_ids": np.array(sids, dtype=np.int64),
        "sonotype_taxon": taxon_codes,
        "sonotype_stats": stats,
    })


def read_container(data: bytes) -> SonotypeDataset:
    entries = container.read_tensors(data)
    images = entries["images"]
    aux = entries["aux"]
    labels = entries["labels"]
    sample_ids = entries["sample_id"]
    parent_ids = entries["parent_id"]
    split_codes = entries["split"]
    samples = [EncodedSample(image=images[i], aux=aux[i], label=int(labels[i]),
                             sample_id=int(sample_ids[i]), parent_id=int(parent_ids[i]))
               for i in range(len(labels))]
    tags = [_SPLIT_NAME[int(c)] for c in split_codes]
    meta = {}
    stats = entries["sonotype_stats"].reshape(-1, 4)
    for j, sid in enumerate(entries["sonotype_ids"]):
        meta[int(sid)] = {
            "taxon": TAXA[int(entries["sonotype_taxon"][j])],
            "min_hz": float(stats[j, 0]), "max_hz": float(stats[j, 1]),
            "range_hz": float(stats[j, 2]), "mean_duration_s": float(stats[j, 3]),
        }
    return SonotypeDataset(samples=samples, split_tags=tags, sonotype_meta=meta)


def audit_no_leakage(dataset: SonotypeDataset) -> None:
    """Verify every augmented sample sits in the same split as its parent.

    Raises DatasetError naming the first offending sample.
    """
    split_of = {s.sample_id: tag for s, tag in zip(dataset.samples, dataset.split_tags)}
    for s, tag in zip(dataset.samples, dataset.split_tags):
        if s.parent_id < 0:
            continue
        parent_tag = split_of.get(s.parent_id)
        if parent_tag is not None and parent_tag != tag:
            raise DatasetError(
                f"sample {s.sample_id} in {tag!r} descends from "
                f"{s.parent_id} in {parent_tag!r}")
