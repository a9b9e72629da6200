"""Experiment harness: the three replicated designs plus the factor ANOVA.

Experiment 1 fixes the per-sonotype sample size and sweeps the number of
classes K over four arms (with/without augmentation x with/without
transfer).  Experiment 2 fixes K, sweeps the balanced sample size s, and
fits accuracy ~ s per arm.  Experiment 3 draws imbalanced class sizes
and regresses accuracy on the mean and minimum size.  The factor
analysis runs one-way ANOVAs of per-sonotype accuracy against taxon and
binned call properties.

Every row carries the integer seed that reproduces it: rerunning
run_cell with the recorded seed on the same catalog yields the row
bit-for-bit.  Arms within a cell share the draw and the split, so
cross-arm comparisons are paired.
"""
from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, fields, replace

import numpy as np

from . import augment as aug
from . import dataset as ds
from . import evalstat, synth
from .nnet import Model, NetworkConfig, TrainConfig, init_params, pretext_pretrain
from .nnet import evaluate_probs, train

ARMS = ("none", "aug", "transfer", "aug+transfer")

METRIC_NAMES = evalstat.MetricsReport.SCALARS


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "exp1"
    # design
    k_values: tuple[int, ...] = (2, 3, 4, 5, 6)
    s: int = 12                       # per-sonotype size for exp1 / factors
    s_values: tuple[int, ...] = (3, 6, 12, 24, 48)
    replicates: int = 3
    trials: int = 12                  # exp3 / factors
    arms: tuple[str, ...] = ARMS
    seed: int = 0
    # synthetic benchmark
    num_sonotypes: int = 8
    samples_per: int = 60
    image_size: int = 64
    snr_db: float = 6.0
    freq_lo: float = 500.0
    freq_hi: float = 8000.0
    freq_jitter: float = 0.06
    duration_jitter: float = 0.12
    amp_jitter_db: float = 4.0
    template_pool: str = "spread"
    banded_noise: bool = False
    distractor_prob: float = 0.0
    box_slop: float = 0.0
    # augmentation
    fan_out_count: int = 16
    quota: tuple[int, int, int] = (200, 25, 25)
    aug_mode: str = "fanout"          # "fanout" (exp1 style) or "quota" (exp2/3 style)
    # network / training
    conv_filters: tuple[int, ...] = (8, 16, 32)
    dense_sizes: tuple[int, int] = (256, 128)
    dropout_rate: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 15
    # pretext backbone for the transfer arms
    pretext_classes: int = 4
    pretext_per_class: int = 24
    pretext_epochs: int = 8
    jobs: int = 1

    def __post_init__(self):
        if self.replicates < 1 or self.trials < 1:
            raise ExperimentError("replicates and trials must be >= 1")
        for arm in self.arms:
            if arm not in ARMS:
                raise ExperimentError(f"unknown arm {arm!r}, valid: {ARMS}")
        if self.aug_mode not in ("fanout", "quota"):
            raise ExperimentError(f"aug_mode {self.aug_mode!r} not fanout/quota")


def arm_flags(arm: str) -> tuple[bool, bool]:
    """(augmentation_on, transfer_on) for an arm name."""
    return "aug" in arm, "transfer" in arm


def build_catalog(config: ExperimentConfig, seed: int | None = None) -> ds.SonotypeCatalog:
    return synth.make_benchmark(
        config.num_sonotypes, config.samples_per,
        config.seed if seed is None else seed,
        image_size=config.image_size, snr_db=config.snr_db,
        freq_lo=config.freq_lo, freq_hi=config.freq_hi,
        freq_jitter=config.freq_jitter, duration_jitter=config.duration_jitter,
        amp_jitter_db=config.amp_jitter_db, template_pool=config.template_pool,
        banded_noise=config.banded_noise, distractor_prob=config.distractor_prob,
        box_slop=config.box_slop)


def build_noise_bank(config: ExperimentConfig) -> aug.NoiseBank:
    return synth.make_noise_bank(config.image_size, rng_seed=config.seed + 1)


def build_pretext_backbone(config: ExperimentConfig) -> dict[str, np.ndarray]:
    # pretext classes live in a band 1.4x the benchmark's, at the same
    # noise level, so the backbone sees deployment-like statistics
    images, labels = synth.make_pretext_corpus(
        config.pretext_classes, config.pretext_per_class,
        rng_seed=config.seed + 2, image_size=config.image_size,
        snr_db=config.snr_db, freq_lo=config.freq_lo * 0.7,
        freq_hi=config.freq_hi * 1.4, template_pool=config.template_pool,
        banded_noise=config.banded_noise, distractor_prob=config.distractor_prob,
        box_slop=config.box_slop)
    probe = NetworkConfig(num_classes=2, input_hw=config.image_size,
                          conv_filters=config.conv_filters,
                          dense_sizes=config.dense_sizes)
    return pretext_pretrain(probe, images, labels, seed=config.seed + 2,
                            epochs=config.pretext_epochs,
                            learning_rate=config.learning_rate,
                            batch_size=config.batch_size)


def _augment_splits(splits, mode: str, config: ExperimentConfig,
                    seed_int: int, bank: aug.NoiseBank):
    if mode == "quota":
        return aug.augment_to_quota(splits, config.quota, seed_int, bank)
    rng = np.random.default_rng(np.random.SeedSequence(seed_int))
    grown = {}
    for tag, members in splits.items():
        out = []
        for sample in members:
            out.extend(aug.fan_out(sample, config.fan_out_count,
                                   int(rng.integers(0, 2**63)), bank))
        grown[tag] = out
    return grown


def run_cell(catalog: ds.SonotypeCatalog, bank: aug.NoiseBank,
             backbone: dict[str, np.ndarray] | None, config: ExperimentConfig,
             k: int, s: int | None, cell_seed: int, arms: tuple[str, ...],
             ) -> list[dict]:
    """Train and evaluate every arm on one drawn dataset.

    s = None draws imbalanced (all samples of k random sonotypes).
    Returns one row per arm; all arms share the draw and split.
    """
    ss = np.random.SeedSequence(cell_seed)
    draw_seq, split_seq, aug_seq, init_seq, train_seq = ss.spawn(5)
    draw_rng = np.random.default_rng(draw_seq)
    draw_seed = int(draw_rng.integers(0, 2**63))

    mean_size = min_size = None
    if s is None:
        draw, mean_size, min_size = ds.select_imbalanced(catalog, k, draw_seed)
    else:
        draw = ds.select_balanced(catalog, k, s, draw_seed)

    split_seed = int(np.random.default_rng(split_seq).integers(0, 2**63))
    assignment = ds.assign_splits(draw, split_seed)
    base_splits = {sid: ds.group_by_split(draw[sid], assignment.tags_by_sid[sid])
                   for sid in sorted(draw)}

    aug_rng = np.random.default_rng(aug_seq)
    aug_seeds = {sid: int(aug_rng.integers(0, 2**63)) for sid in sorted(draw)}
    init_seed = int(np.random.default_rng(init_seq).integers(0, 2**63))
    train_seed = int(np.random.default_rng(train_seq).integers(0, 2**63))

    rows = []
    for arm in arms:
        augment_on, transfer_on = arm_flags(arm)
        splits_by_sid = base_splits
        if augment_on:
            splits_by_sid = {
                sid: _augment_splits(base_splits[sid], config.aug_mode, config,
                                     aug_seeds[sid], bank)
                for sid in sorted(base_splits)}
        dataset = ds.dataset_from_splits(splits_by_sid, catalog)

        net_cfg = NetworkConfig(
            num_classes=k, input_hw=config.image_size,
            conv_filters=config.conv_filters, dense_sizes=config.dense_sizes,
            dropout_rate=config.dropout_rate, freeze_backbone=transfer_on)
        params = init_params(net_cfg, init_seed)
        if transfer_on:
            if backbone is None:
                raise ExperimentError("transfer arm requested without a backbone")
            for name in net_cfg.backbone_names():
                params[name] = backbone[name].astype(net_cfg.dtype).copy()
        model = Model(config=net_cfg, params=params)
        train_cfg = TrainConfig(learning_rate=config.learning_rate,
                                batch_size=config.batch_size,
                                max_epochs=config.max_epochs,
                                patience=config.patience, seed=train_seed)
        checkpoint, _history = train(model, dataset, train_cfg)

        test_samples = dataset.subset("test")
        probs = evaluate_probs(model, test_samples)
        y_true = np.searchsorted(model.classes,
                                 np.array([t.label for t in test_samples]))
        preds = evalstat.ScoredPredictions(y_true=y_true, scores=probs)
        report = evalstat.compute_report(preds)

        row = {"experiment": config.experiment, "k": k,
               "s": s if s is not None else "", "arm": arm, "seed": cell_seed,
               "epochs": checkpoint.epoch,
               "n_train": len(dataset.subset("train")),
               "n_val": len(dataset.subset("val")),
               "n_test": len(test_samples), **report.as_dict()}
        if mean_size is not None:
            row["mean_size"] = mean_size
            row["min_size"] = min_size
        # stash per-class recall for the factor analysis
        row["_per_class_recall"] = {
            int(sid): report.per_class[i]["recall"]
            for i, sid in enumerate(model.classes)}
        rows.append(row)
    return rows


def _cell_seeds(config: ExperimentConfig, count: int) -> list[int]:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    return [int(v) for v in rng.integers(0, 2**63, size=count)]


_POOL_STATE: dict = {}


def _pool_init(catalog, bank, backbone, config):
    _POOL_STATE.update(catalog=catalog, bank=bank, backbone=backbone, config=config)


def _pool_cell(args):
    k, s, cell_seed, arms = args
    return run_cell(_POOL_STATE["catalog"], _POOL_STATE["bank"],
                    _POOL_STATE["backbone"], _POOL_STATE["config"],
                    k, s, cell_seed, arms)


def _run_cells(catalog, bank, backbone, config, cells):
    """cells: list of (k, s, cell_seed, arms); returns rows in cell order."""
    if config.jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(config.jobs, initializer=_pool_init,
                      initargs=(catalog, bank, backbone, config)) as pool:
            nested = pool.map(_pool_cell, cells)
    else:
        nested = [run_cell(catalog, bank, backbone, config, k, s, seed, arms)
                  for (k, s, seed, arms) in cells]
    return [row for rows in nested for row in rows]


def _needs_backbone(arms) -> bool:
    return any(arm_flags(a)[1] for a in arms)


def run_experiment1(config: ExperimentConfig,
                    catalog: ds.SonotypeCatalog | None = None) -> list[dict]:
    """Sweep K over the four arms at fixed per-sonotype size config.s."""
    catalog = catalog if catalog is not None else build_catalog(config)
    catalog = ds.filter_min_samples(catalog, 3)
    bank = build_noise_bank(config)
    backbone = build_pretext_backbone(config) if _needs_backbone(config.arms) else None
    seeds = _cell_seeds(config, len(config.k_values) * config.replicates)
    cells = []
    i = 0
    for k in config.k_values:
        for _rep in range(config.replicates):
            cells.append((k, config.s, seeds[i], tuple(config.arms)))
            i += 1
    rows = _run_cells(catalog, bank, backbone, config, cells)
    rows.sort(key=lambda r: (r["k"], r["seed"], r["arm"]))
    return rows


def run_experiment2(config: ExperimentConfig,
                    catalog: ds.SonotypeCatalog | None = None,
                    ) -> tuple[list[dict], dict[str, evalstat.OlsFit]]:
    """Sweep balanced sample size s at K = 6; fit accuracy ~ s per arm."""
    cfg = replace(config, aug_mode="quota") if config.aug_mode != "quota" else config
    catalog = catalog if catalog is not None else build_catalog(cfg)
    catalog = ds.filter_min_samples(catalog, 3)
    bank = build_noise_bank(cfg)
    arms = tuple(cfg.arms)
    backbone = build_pretext_backbone(cfg) if _needs_backbone(arms) else None
    k = max(cfg.k_values)
    seeds = _cell_seeds(cfg, len(cfg.s_values) * cfg.replicates)
    cells = []
    i = 0
    for s in cfg.s_values:
        for _rep in range(cfg.replicates):
            cells.append((k, s, seeds[i], arms))
            i += 1
    rows = _run_cells(catalog, bank, backbone, cfg, cells)
    rows.sort(key=lambda r: (r["s"], r["seed"], r["arm"]))
    fits = {}
    for arm in arms:
        xs = [r["s"] for r in rows if r["arm"] == arm]
        ys = [r["accuracy"] for r in rows if r["arm"] == arm]
        if len(set(xs)) >= 2 and len(xs) >= 3:
            fits[arm] = evalstat.ols_ci(xs, ys)
    return rows, fits


def run_experiment3(config: ExperimentConfig,
                    catalog: ds.SonotypeCatalog | None = None,
                    ) -> tuple[list[dict], dict[str, dict[str, evalstat.OlsFit]]]:
    """Imbalanced draws; regress accuracy on mean and min sample size."""
    cfg = replace(config, aug_mode="quota") if config.aug_mode != "quota" else config
    catalog = catalog if catalog is not None else build_catalog(cfg)
    catalog = ds.filter_min_samples(catalog, 3)
    bank = build_noise_bank(cfg)
    arms = tuple(cfg.arms)
    backbone = build_pretext_backbone(cfg) if _needs_backbone(arms) else None
    k = max(cfg.k_values)
    seeds = _cell_seeds(cfg, cfg.trials)
    cells = [(k, None, seeds[t], arms) for t in range(cfg.trials)]
    rows = _run_cells(catalog, bank, backbone, cfg, cells)
    rows.sort(key=lambda r: (r["seed"], r["arm"]))
    fits: dict[str, dict[str, evalstat.OlsFit]] = {}
    for arm in arms:
        arm_rows = [r for r in rows if r["arm"] == arm]
        fits[arm] = {}
        for key in ("mean_size", "min_size"):
            xs = [r[key] for r in arm_rows]
            ys = [r["accuracy"] for r in arm_rows]
            if len(set(xs)) >= 2 and len(xs) >= 3:
                fits[arm][key] = evalstat.ols_ci(xs, ys)
    return rows, fits


def _bin_terciles(values: dict[int, float]) -> dict[int, str]:
    arr = np.array(list(values.values()))
    lo, hi = np.quantile(arr, [1 / 3, 2 / 3])
    out = {}
    for sid, v in values.items():
        out[sid] = "low" if v <= lo else ("high" if v > hi else "mid")
    return out


def run_factors(config: ExperimentConfig,
                catalog: ds.SonotypeCatalog | None = None,
                ) -> tuple[list[dict], list[dict]]:
    """One-way ANOVA of per-sonotype accuracy against taxon and call properties.

    Returns (anova_rows, trial_rows); anova_rows columns are
    (arm, factor, F, df1, df2, p).
    """
    cfg = config
    catalog = catalog if catalog is not None else build_catalog(cfg)
    catalog = ds.filter_min_samples(catalog, 3)
    bank = build_noise_bank(cfg)
    arms = tuple(cfg.arms)
    backbone = build_pretext_backbone(cfg) if _needs_backbone(arms) else None
    k = min(max(cfg.k_values), len(catalog))
    seeds = _cell_seeds(cfg, cfg.trials)
    cells = [(k, cfg.s, seeds[t], arms) for t in range(cfg.trials)]
    rows = _run_cells(catalog, bank, backbone, cfg, cells)
    rows.sort(key=lambda r: (r["seed"], r["arm"]))

    meta = {sid: {"taxon": catalog.info(sid).taxon, **catalog.info(sid).stats}
            for sid in catalog.sonotype_ids()}
    bins = {prop: _bin_terciles({sid: meta[sid][prop] for sid in meta})
            for prop in ("min_hz", "max_hz", "range_hz", "mean_duration_s")}

    anova_rows = []
    for arm in arms:
        observations = [(sid, rec) for r in rows if r["arm"] == arm
                        for sid, rec in r["_per_class_recall"].items()]
        factors = {"taxon": {sid: meta[sid]["taxon"] for sid in meta}}
        factors.update(bins)
        for factor_name, level_of in factors.items():
            groups: dict[str, list[float]] = {}
            for sid, acc in observations:
                groups.setdefault(level_of[sid], []).append(acc)
            usable = [g for g in groups.values() if len(g) >= 2]
            if len(usable) < 2:
                continue
            res = evalstat.anova_oneway(usable)
            anova_rows.append({"arm": arm, "factor": factor_name,
                               "F": res.f_stat, "df1": res.df_between,
                               "df2": res.df_within, "p": res.p_value})
    return anova_rows, rows


def strip_private(rows: list[dict]) -> list[dict]:
    """Drop bookkeeping fields (leading underscore) before writing CSV."""
    return [{k: v for k, v in row.items() if not k.startswith("_")} for row in rows]


def rows_to_csv(rows: list[dict]) -> str:
    rows = strip_private(rows)
    if not rows:
        return ""
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c, "")) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def manifest_text(config: ExperimentConfig, extra: dict | None = None) -> str:
    lines = ["# run manifest"]
    for f in fields(config):
        lines.append(f"{f.name} = {getattr(config, f.name)}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
