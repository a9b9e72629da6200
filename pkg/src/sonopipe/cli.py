"""Command-line driver.

Subcommands cover the pipeline stages (synth, ingest, spectro, dataset,
augment, train, eval) and the experiment harness (exp1, exp2, exp3,
factors).  Experiment outputs are plain CSV tables plus a run-manifest
text file; plotting is left to external tools.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import augment as aug
from . import container, dataset as ds, evalstat, experiments, ingest, spectro, synth
from .nnet import (Model, NetworkConfig, TrainConfig, init_params, load_checkpoint,
                   save_checkpoint, train, evaluate_probs)

CONFIG_ERROR = 2
DATA_ERROR = 3

_DATA_ERRORS = (ingest.IngestError, spectro.SpectroError, ds.DatasetError,
                aug.AugmentError, evalstat.MetricError, evalstat.StatsError,
                container.ContainerError, synth.SynthError, ValueError,
                FileNotFoundError)


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool or isinstance(kind, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(kind, tuple):
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = type(kind[0]) if kind else int
        return tuple(elem(p) for p in parts)
    if isinstance(kind, str):
        return raw
    if isinstance(kind, int):
        return int(raw)
    if isinstance(kind, float):
        return float(raw)
    return raw


def load_experiment_config(path: str | None, overrides: dict) -> experiments.ExperimentConfig:
    """Build an ExperimentConfig from a key = value file plus CLI overrides."""
    config = experiments.ExperimentConfig()
    defaults = {f.name: getattr(config, f.name) for f in fields(config)}
    updates = {}
    if path:
        for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise KeyError(f"{path}:{line_no}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in defaults:
                raise KeyError(f"{path}:{line_no}: unknown key {key!r}")
            updates[key] = _parse_value(raw, defaults[key])
    for key, value in overrides.items():
        if value is not None:
            updates[key] = value
    return replace(config, **updates)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _cmd_synth(args) -> int:
    samples_per = args.samples if args.distribution == "balanced" else args.distribution
    catalog = synth.make_benchmark(args.classes, samples_per, args.seed,
                                   image_size=args.image_size, snr_db=args.snr_db)
    splits_by_sid = {sid: {"train": catalog.info(sid).samples, "val": [], "test": []}
                     for sid in catalog.sonotype_ids()}
    dataset = ds.dataset_from_splits(splits_by_sid, catalog)
    dataset.split_tags = ["none"] * len(dataset.samples)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(ds.write_container(dataset))
    print(f"wrote {len(dataset.samples)} samples, "
          f"{len(catalog)} sonotypes -> {args.out}")
    return 0


def _cmd_ingest(args) -> int:
    buffer = ingest.parse_wav(Path(args.wav).read_bytes())
    clips = ingest.parse_annotations(Path(args.annotations).read_text())
    clips.sort(key=lambda c: c.begin_s)
    merged = ingest.merge_adjacent(clips, gap_s=args.merge_gap)
    lines = ["begin_s,end_s,low_hz,high_hz,sonotype_id,taxon"]
    for c in merged:
        lines.append(f"{c.begin_s},{c.end_s},{c.low_hz},{c.high_hz},"
                     f"{c.sonotype_id},{c.taxon}")
    _write(Path(args.out), "\n".join(lines) + "\n")
    print(f"{len(buffer.samples)} samples at {buffer.sample_rate_hz} Hz, "
          f"{len(clips)} clips -> {len(merged)} after merge")
    return 0


def _cmd_spectro(args) -> int:
    buffer = ingest.parse_wav(Path(args.wav).read_bytes())
    spec = spectro.spectrogram(buffer)
    blob = container.write_tensors({
        "grid": spec.grid,
        "freq_axis_hz": spec.freq_axis_hz,
        "time_axis_s": spec.time_axis_s,
        "sample_rate_hz": np.array([spec.sample_rate_hz], dtype=np.int64),
    })
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(blob)
    print(f"grid {spec.grid.shape[0]} x {spec.grid.shape[1]} -> {args.out}")
    return 0


def _cmd_dataset(args) -> int:
    dataset = ds.read_container(Path(args.input).read_bytes())
    by_sid: dict[int, list] = {}
    for sample in dataset.samples:
        by_sid.setdefault(sample.label, []).append(sample)
    kept = {sid: members for sid, members in by_sid.items()
            if len(members) >= args.min_samples}
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    splits_by_sid = {}
    for sid in sorted(kept):
        tags = ds.assign_split_tags(len(kept[sid]), int(rng.integers(0, 2**63)))
        splits_by_sid[sid] = ds.group_by_split(kept[sid], tags)
    out = ds.dataset_from_splits(splits_by_sid)
    out.sonotype_meta = {sid: m for sid, m in dataset.sonotype_meta.items()
                         if sid in kept}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(ds.write_container(out))
    print(f"kept {len(kept)}/{len(by_sid)} sonotypes, "
          f"{len(out.samples)} samples -> {args.out}")
    return 0


def _cmd_augment(args) -> int:
    dataset = ds.read_container(Path(args.input).read_bytes())
    bank = synth.make_noise_bank(dataset.samples[0].image.shape[0], args.seed + 1) \
        if dataset.samples else None
    by_sid: dict[int, dict[str, list]] = {}
    for sample, tag in zip(dataset.samples, dataset.split_tags):
        by_sid.setdefault(sample.label, {"train": [], "val": [], "test": []})
        by_sid[sample.label].setdefault(tag, []).append(sample)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    grown = {}
    for sid in sorted(by_sid):
        seed_int = int(rng.integers(0, 2**63))
        if args.quota:
            quota = tuple(int(q) for q in args.quota.split(","))
            if len(quota) != 3:
                raise KeyError("--quota needs train,val,test")
            grown[sid] = aug.augment_to_quota(by_sid[sid], quota, seed_int, bank)
        else:
            grown[sid] = {
                tag: [v for sample in members
                      for v in aug.fan_out(sample, args.fan_out,
                                           int(rng.integers(0, 2**63)), bank)]
                for tag, members in by_sid[sid].items() if tag in ds.SPLIT_NAMES}
    out = ds.dataset_from_splits(grown)
    out.sonotype_meta = dataset.sonotype_meta
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(ds.write_container(out))
    print(f"{len(dataset.samples)} -> {len(out.samples)} samples -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    dataset = ds.read_container(Path(args.input).read_bytes())
    labels = sorted({s.label for s in dataset.samples})
    size = dataset.samples[0].image.shape[0]
    net_cfg = NetworkConfig(num_classes=len(labels), input_hw=size,
                            conv_filters=tuple(int(f) for f in args.filters.split(",")),
                            freeze_backbone=False)
    model = Model(config=net_cfg, params=init_params(net_cfg, args.seed))
    cfg = TrainConfig(learning_rate=args.learning_rate, batch_size=args.batch_size,
                      max_epochs=args.max_epochs, patience=args.patience,
                      seed=args.seed)
    checkpoint, history = train(model, dataset, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(save_checkpoint(checkpoint, net_cfg))
    if args.history:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{h['epoch']},{h['train_loss']:.6f},{h['val_loss']:.6f}"
                  for h in history]
        _write(Path(args.history), "\n".join(lines) + "\n")
    print(f"best epoch {checkpoint.epoch}, "
          f"val loss {checkpoint.best_val_loss:.6f} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, _ckpt = load_checkpoint(Path(args.checkpoint).read_bytes())
    dataset = ds.read_container(Path(args.input).read_bytes())
    samples = dataset.subset(args.split)
    if not samples:
        raise ds.EmptySplit(f"no samples tagged {args.split!r}")
    probs = evaluate_probs(model, samples)
    y_true = np.searchsorted(model.classes, np.array([s.label for s in samples]))
    report = evalstat.compute_report(
        evalstat.ScoredPredictions(y_true=y_true, scores=probs))
    _write(Path(args.out), report.render_flat())
    if args.per_class:
        _write(Path(args.per_class), report.render_per_class_csv())
    print(report.render_flat(), end="")
    return 0


def _run_experiment(args, name: str) -> int:
    overrides = {"experiment": name, "seed": args.seed, "jobs": args.jobs,
                 "replicates": args.replicates}
    if args.arms:
        overrides["arms"] = tuple(args.arms.split(","))
    config = load_experiment_config(args.config, overrides)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    extra: dict = {}
    if name == "exp1":
        rows = experiments.run_experiment1(config)
    elif name == "exp2":
        rows, fits = experiments.run_experiment2(config)
        extra = {f"fit_{arm}": f"slope={fit.slope:.6f} "
                               f"ci=[{fit.ci_low:.6f},{fit.ci_high:.6f}]"
                 for arm, fit in fits.items()}
    elif name == "exp3":
        rows, fits = experiments.run_experiment3(config)
        extra = {f"fit_{arm}_{key}": f"slope={fit.slope:.6f} "
                                     f"ci=[{fit.ci_low:.6f},{fit.ci_high:.6f}]"
                 for arm, by_key in fits.items() for key, fit in by_key.items()}
    else:
        anova_rows, rows = experiments.run_factors(config)
        _write(out_dir / "anova.csv", experiments.rows_to_csv(anova_rows))

    _write(out_dir / "results.csv", experiments.rows_to_csv(rows))
    _write(out_dir / "manifest.txt", experiments.manifest_text(config, extra))
    print(f"{len(rows)} rows -> {out_dir / 'results.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sonopipe")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark container")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--samples", type=int, default=30)
    p.add_argument("--distribution", default="balanced",
                   choices=("balanced", "longtail"))
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--snr-db", type=float, default=12.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="parse WAV + annotations, merge adjacent clips")
    p.add_argument("--wav", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--merge-gap", type=float, default=2.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("spectro", help="dump a spectrogram container for debugging")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dataset", help="filter rare sonotypes and assign splits")
    p.add_argument("--input", required=True)
    p.add_argument("--min-samples", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("augment", help="fan out or grow splits to a quota")
    p.add_argument("--input", required=True)
    p.add_argument("--fan-out", type=int, default=16)
    p.add_argument("--quota", default=None, help="train,val,test counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a classifier on a dataset container")
    p.add_argument("--input", required=True)
    p.add_argument("--filters", default="8,16,32")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=60)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", default=None)

    for name, help_text in (("exp1", "sweep K over the four arms"),
                            ("exp2", "sweep balanced sample size s"),
                            ("exp3", "imbalanced draws + size regressions"),
                            ("factors", "ANOVA of accuracy vs call properties")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--arms", default=None)
        p.add_argument("--replicates", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)

    return parser


_COMMANDS = {
    "synth": _cmd_synth, "ingest": _cmd_ingest, "spectro": _cmd_spectro,
    "dataset": _cmd_dataset, "augment": _cmd_augment, "train": _cmd_train,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CONFIG_ERROR if exc.code not in (0, None) else 0
    try:
        if args.command in _COMMANDS:
            return _COMMANDS[args.command](args)
        return _run_experiment(args, args.command)
    except (KeyError, experiments.ExperimentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
