"""Command-line entry point: ``aerial-icl <synth|prepare|train|eval|report|config> ...``.

Exit codes: 0 success, 2 usage/configuration error, 3 data error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import rastertile as R
from .config import DATA_ROOT_ENV, RunConfig, load_config, set_path
from .errors import AerialICLError, ConfigError, DataError, IntegrityError, TrainingDivergedError
from .metrics import build_report, emit_report, load_history
from .segnet import load_checkpoint
from .trainer import METHODS, evaluate, run_sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("aerial_icl")


class UsageError(AerialICLError):
    pass


def _data_path(p: str | None) -> Path | None:
    if p is None:
        return None
    path = Path(p).expanduser()
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _run_dir(out: str | None, kind: str, seed: int) -> Path:
    if out:
        return _data_path(out) if kind in ("synth", "prepare") else Path(out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(os.environ.get(DATA_ROOT_ENV, ".")) if kind in ("synth", "prepare") else Path("runs")
    return base / f"{kind}-{stamp}-s{seed}"


def _claim_output(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _resolve_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        set_path(cfg, key, value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "method", None):
        cfg.losses.method = args.method
    if getattr(args, "sequence", None):
        cfg.sequence.name = args.sequence
    if getattr(args, "deterministic", None) is not None:
        cfg.deterministic = args.deterministic
    cfg.validate()
    return cfg


def _snapshot(cfg: RunConfig, out: Path) -> None:
    (out / "config.yaml").write_text(cfg.dump())


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    s = cfg.data.synthetic
    out = _run_dir(args.out, "synth", cfg.seed)
    _claim_output(out, args.force)
    labels = R.synthetic_labels(s.num_classes)
    tiles = R.generate_synthetic_dataset(cfg.seed, s.num_tiles, s.size, labels, s.channels, s.presence)
    n_train = s.num_tiles - s.test_tiles
    for t in tiles[n_train:]:
        t.record.split = "test"
    R.write_dataset(out, R.Dataset(labels, tiles, {"source": "synthetic", "seed": cfg.seed}))
    _snapshot(cfg, out)
    print(f"wrote {len(tiles)} tiles ({n_train} train, {s.test_tiles} test) to {out}")
    return EXIT_OK


def _partition(tiles: list[R.Tile], labels: R.LabelSpace, cfg: RunConfig, meta: dict) -> R.Dataset:
    rng = np.random.default_rng(cfg.seed)
    train = [t for t in tiles if t.record.split != "test"]
    for t in train:
        t.record.split = "train"
    parts = R.partition_disjoint(train, labels, rng)
    R.split_validation(parts, cfg.data.val_fraction, rng)
    kept = [t for t in tiles if t.record.split == "test" or t.record.partition is not None]
    return R.Dataset(labels, kept, meta)


def cmd_prepare(args) -> int:
    cfg = _resolve_config(args)
    src = _data_path(args.source or cfg.data.source)
    if src is None:
        raise UsageError("prepare needs --source (or data.source in the config)")
    out = _run_dir(args.out, "prepare", cfg.seed)
    if src.resolve() == out.resolve():
        raise UsageError("--out must differ from --source")
    if (src / "dataset.json").is_file():
        ds = R.read_dataset(src)
        prepared = _partition(ds.tiles, ds.labels, cfg, {**ds.meta, "prepared_from": str(src)})
    else:
        rasters = R.load_potsdam_layout(src, cfg.data.modality)
        ids = sorted(r.id for r in rasters)
        test_ids = set(cfg.data.test_rasters)
        unknown = test_ids - set(ids)
        if unknown:
            raise DataError(f"test rasters not found in {src}: {sorted(unknown)}")
        if not test_ids and cfg.data.test_fraction > 0:
            n = max(1, int(round(cfg.data.test_fraction * len(ids)))) if len(ids) > 1 else 0
            test_ids = set(np.random.default_rng(cfg.seed).permutation(ids)[:n].tolist())
        tiles = R.tile_rasters(rasters, cfg.data.patch, cfg.data.overlap)
        for t in tiles:
            t.record.split = "test" if t.record.raster_id in test_ids else "train"
        meta = {"source": "potsdam", "modality": cfg.data.modality, "test_rasters": sorted(test_ids)}
        prepared = _partition(tiles, R.POTSDAM_LABELS, cfg, meta)
    _claim_output(out, args.force)
    R.write_dataset(out, prepared)
    _snapshot(cfg, out)
    counts = {prepared.labels.name(c): len(v) for c, v in prepared.partitions("train").items()}
    vals = {prepared.labels.name(c): len(v) for c, v in prepared.partitions("val").items()}
    print(f"prepared dataset in {out}")
    for name in counts:
        print(f"  partition {name:>20}: {counts[name]:5d} train {vals[name]:5d} val")
    print(f"  test tiles: {len(prepared.split('test'))}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    data_dir = _data_path(args.dataset or cfg.data.dataset)
    if data_dir is None:
        raise UsageError("train needs --dataset (or data.dataset in the config)")
    ds = R.read_dataset(data_dir)
    if not any(ds.partitions("train").values()):
        raise DataError(f"{data_dir} has no partitioned training tiles; run `aerial-icl prepare` first")
    if not ds.split("test"):
        raise DataError(f"{data_dir} has no test tiles")
    seq = R.make_task_sequence(cfg.sequence.name, ds.labels)
    out = _run_dir(args.out, "train", cfg.seed)
    _claim_output(out, args.force)
    _snapshot(cfg, out)
    tcfg = cfg.train_config()
    with open(out / "train_log.jsonl", "w") as fh:
        sink = lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n")
        _, reports = run_sequence(
            seq, ds, tcfg, cfg.model_config(), out_dir=out, offline=cfg.losses.method == "offline", log_sink=sink
        )
    emit_report(reports, out / "reports", cfg.losses.method)
    print((out / "reports" / "summary.txt").read_text(), end="")
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    net, meta = load_checkpoint(ckpt)
    ds = R.read_dataset(_data_path(args.dataset))
    ck_labels = R.LabelSpace.from_json(meta["labels"]) if "labels" in meta else None
    if ck_labels is not None and ck_labels != ds.labels:
        raise DataError(f"class space of {ckpt} {list(ck_labels.names)} != dataset {list(ds.labels.names)}")
    if max(net.class_ids) >= ds.labels.num_classes:
        raise DataError(f"checkpoint classes {net.class_ids} exceed the dataset label space")
    tiles = ds.split(args.split)
    if not tiles:
        raise DataError(f"dataset has no {args.split!r} tiles")
    step = len(meta.get("steps", [])) - 1 if meta.get("steps") else 0
    cm = evaluate(net, tiles, net.class_ids)
    rep = build_report(cm, net.class_ids, ds.labels.names, step)
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{ckpt.stem}"
    emit_report([rep], out, args.method or "")
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.history)
    if src.is_dir():
        src = src / "reports" / "history.json" if (src / "reports").is_dir() else src / "history.json"
    if not src.is_file():
        raise DataError(f"no history.json at {src}")
    method, hist = load_history(src)
    out = Path(args.out) if args.out else src.parent
    emit_report(hist, out, method)
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = _resolve_config(args)
    print(cfg.dump(), end="")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aerial-icl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.epochs=5")
        if seed:
            sp.add_argument("--seed", type=int)
            sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("prepare", help="tile and partition a dataset")
    common(sp)
    sp.add_argument("--source", help="Potsdam-format directory or synthetic dataset directory")
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="run an incremental sequence")
    common(sp)
    sp.add_argument("--dataset", help="prepared dataset directory")
    sp.add_argument("--method", choices=sorted(METHODS))
    sp.add_argument("--sequence", help="3-2-1, 5S, 2-2, ...")
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    sp.add_argument("checkpoint")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--method", help="label for the report rows")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="re-emit report tables from a saved history")
    sp.add_argument("history", help="history.json or a run directory")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("config", help="configuration helpers")
    csub = sp.add_subparsers(dest="action", required=True)
    show = csub.add_parser("show", help="print the resolved configuration (defaults when no file)")
    common(show)
    show.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IntegrityError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
