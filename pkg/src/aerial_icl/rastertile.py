"""Raster tiling, disjoint class partitions, label remapping and datasets.

On-disk dataset layout (one directory)::

    dataset.json      label space and provenance
    manifest.jsonl    one JSON record per tile:
                      id, raster_id, row, col, patch, channels,
                      split ("train" | "val" | "test"), partition, histogram
    tiles/<id>.bin    channel-planar little-endian float32 pixels
                      (channels * patch * patch values), immediately
                      followed by patch * patch uint8 class ids

Potsdam-format source directories hold ``<name>_RGB.tif`` (or
``<name>_RGBIR.tif``) next to ``<name>_label.tif``; labels are the
benchmark's colour-coded RGB rasters.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

BACKGROUND = 0


@dataclass(frozen=True)
class LabelSpace:
    names: tuple[str, ...]  # index == class id; names[0] is the background

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("a label space needs the background and at least one class")
        keys = [_norm(n) for n in self.names]
        if len(set(keys)) != len(keys):
            raise ValueError(f"class names are not unique: {self.names}")

    @property
    def background_id(self) -> int:
        return BACKGROUND

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def foreground(self) -> tuple[int, ...]:
        return tuple(range(1, len(self.names)))

    def name(self, class_id: int) -> str:
        return self.names[class_id]

    def id_of(self, name: str | int) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= int(name) < len(self.names):
                raise ValueError(f"class id {name} outside label space of {len(self.names)}")
            return int(name)
        key = _norm(name)
        for i, n in enumerate(self.names):
            if _norm(n) == key:
                return i
        raise ValueError(f"unknown class {name!r}; known: {list(self.names)}")

    def to_json(self) -> dict:
        return {"classes": [[i, n] for i, n in enumerate(self.names)], "background_id": BACKGROUND}

    @classmethod
    def from_json(cls, data: Mapping) -> "LabelSpace":
        classes = sorted(data["classes"], key=lambda p: p[0])
        if [c[0] for c in classes] != list(range(len(classes))):
            raise DataError("label space ids must be dense from 0")
        return cls(tuple(c[1] for c in classes))


def _norm(name: str) -> str:
    return re.sub(r"[\s_\-]+", " ", str(name).strip().lower())


POTSDAM_LABELS = LabelSpace(
    ("background", "impervious surfaces", "building", "low vegetation", "tree", "car", "clutter")
)

# ISPRS colour legend (RGB) -> POTSDAM_LABELS id
POTSDAM_COLORS: dict[tuple[int, int, int], int] = {
    (255, 255, 255): 1,
    (0, 0, 255): 2,
    (0, 255, 255): 3,
    (0, 255, 0): 4,
    (255, 255, 0): 5,
    (255, 0, 0): 6,
}


def synthetic_labels(num_classes: int) -> LabelSpace:
    if num_classes < 2:
        raise ValueError("need at least 2 foreground classes")
    return LabelSpace(("background",) + tuple(f"class{i}" for i in range(1, num_classes + 1)))


@dataclass(frozen=True)
class StepSpec:
    index: int
    new_classes: tuple[int, ...]
    cumulative_classes: tuple[int, ...]  # always starts with the background


@dataclass(frozen=True)
class TaskSequence:
    name: str
    steps: tuple[StepSpec, ...]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return self.steps[-1].cumulative_classes

    def to_json(self) -> dict:
        return {"name": self.name, "steps": [list(s.new_classes) for s in self.steps]}


@dataclass
class Raster:
    id: str
    pixels: np.ndarray  # (C, H, W) float32
    labels: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.labels.ndim != 2:
            raise DataError(f"raster {self.id}: expected (C,H,W) pixels and (H,W) labels")
        if self.pixels.shape[1:] != self.labels.shape:
            raise DataError(
                f"raster {self.id}: pixel grid {self.pixels.shape[1:]} != label grid {self.labels.shape}"
            )


@dataclass
class TileRecord:
    id: str
    raster_id: str
    row: int
    col: int
    patch: int
    channels: int
    histogram: dict[int, int]
    split: str = "train"
    partition: int | None = None

    @property
    def present(self) -> tuple[int, ...]:
        return tuple(sorted(c for c, n in self.histogram.items() if n > 0 and c != BACKGROUND))

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "raster_id": self.raster_id,
            "row": self.row,
            "col": self.col,
            "patch": self.patch,
            "channels": self.channels,
            "split": self.split,
            "partition": self.partition,
            "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "TileRecord":
        return cls(
            id=d["id"],
            raster_id=d["raster_id"],
            row=int(d["row"]),
            col=int(d["col"]),
            patch=int(d["patch"]),
            channels=int(d["channels"]),
            histogram={int(k): int(v) for k, v in d["histogram"].items()},
            split=d.get("split", "train"),
            partition=d.get("partition"),
        )


@dataclass
class Tile:
    record: TileRecord
    pixels: np.ndarray  # (C, P, P) float32
    labels: np.ndarray  # (P, P) uint8


def label_histogram(labels: np.ndarray) -> dict[int, int]:
    counts = np.bincount(labels.ravel().astype(np.int64))
    return {int(c): int(n) for c, n in enumerate(counts) if n > 0}


# --------------------------------------------------------------------------
# tiling


def tile_positions(extent: int, patch: int, overlap: int) -> list[int]:
    """Start offsets along one axis.

    Stride is ``patch - overlap``; the last offset is clamped to
    ``extent - patch`` so no tile runs past the raster edge while the
    whole extent stays covered.
    """
    if not 0 <= overlap < patch:
        raise ValueError(f"need 0 <= overlap < patch, got overlap={overlap}, patch={patch}")
    if patch > extent:
        raise ValueError(f"patch {patch} larger than raster extent {extent}")
    stride = patch - overlap
    offsets = list(range(0, extent - patch + 1, stride))
    if offsets[-1] + patch < extent:
        offsets.append(extent - patch)
    return offsets


def tile_raster(raster: Raster, patch: int, overlap: int) -> list[Tile]:
    _, h, w = raster.pixels.shape
    rows = tile_positions(h, patch, overlap)
    cols = tile_positions(w, patch, overlap)
    tiles = []
    for r in rows:
        for c in cols:
            px = np.ascontiguousarray(raster.pixels[:, r : r + patch, c : c + patch], dtype=np.float32)
            lb = np.ascontiguousarray(raster.labels[r : r + patch, c : c + patch], dtype=np.uint8)
            rec = TileRecord(
                id=f"{raster.id}_{r}_{c}",
                raster_id=raster.id,
                row=r,
                col=c,
                patch=patch,
                channels=px.shape[0],
                histogram=label_histogram(lb),
            )
            tiles.append(Tile(rec, px, lb))
    return tiles


def tile_rasters(rasters: Iterable[Raster], patch: int, overlap: int) -> list[Tile]:
    tiles = [t for r in rasters for t in tile_raster(r, patch, overlap)]
    tiles.sort(key=lambda t: (t.record.raster_id, t.record.row, t.record.col))
    return tiles


# --------------------------------------------------------------------------
# disjoint partitions


def partition_disjoint(
    tiles: Sequence[Tile | TileRecord], labels: LabelSpace, rng: np.random.Generator
) -> dict[int, list]:
    """Greedy split into one partition per foreground class.

    Tiles are visited in a seeded random order; each goes to the currently
    smallest partition among the classes it contains (ties: lowest class
    id). Background-only tiles are dropped. Partition membership is written
    back to each record.
    """
    if not tiles:
        raise ValueError("no tiles to partition")
    parts: dict[int, list] = {c: [] for c in labels.foreground}
    for i in rng.permutation(len(tiles)):
        tile = tiles[int(i)]
        rec = tile.record if isinstance(tile, Tile) else tile
        candidates = [c for c in rec.present if c in parts]
        if not candidates:
            rec.partition = None
            continue
        best = min(candidates, key=lambda c: (len(parts[c]), c))
        parts[best].append(tile)
        rec.partition = best
    return parts


def split_validation(
    parts: Mapping[int, list], fraction: float, rng: np.random.Generator
) -> tuple[dict[int, list], dict[int, list]]:
    """Hold out ``fraction`` of every partition as validation."""
    train, val = {}, {}
    for c in sorted(parts):
        items = list(parts[c])
        n_val = int(round(fraction * len(items)))
        order = rng.permutation(len(items))
        val_idx = set(order[:n_val].tolist())
        train[c] = [t for i, t in enumerate(items) if i not in val_idx]
        val[c] = [t for i, t in enumerate(items) if i in val_idx]
        for t in val[c]:
            (t.record if isinstance(t, Tile) else t).split = "val"
    return train, val


# --------------------------------------------------------------------------
# label handling


def keep_classes(mask: np.ndarray, keep: Iterable[int]) -> np.ndarray:
    """Keep the listed class ids, send everything else to the background."""
    keep = np.asarray(sorted(set(int(k) for k in keep)), dtype=mask.dtype)
    return np.where(np.isin(mask, keep), mask, np.zeros((), dtype=mask.dtype))


def remap_labels(mask: np.ndarray, step: StepSpec) -> np.ndarray:
    return keep_classes(mask, step.new_classes)


_NAMED_SEQUENCES = {
    "3-2-1": [["building", "tree", "clutter"], ["impervious surfaces", "low vegetation"], ["car"]],
    "5s": [["building"], ["tree"], ["impervious surfaces"], ["low vegetation"], ["car"]],
}


def make_task_sequence(spec: str | Sequence[Sequence[int | str]], labels: LabelSpace) -> TaskSequence:
    """Build a sequence of learning steps.

    ``spec`` is ``"3-2-1"`` or ``"5S"`` (Potsdam class order), a generic
    ``"a-b-..."`` split or ``"NS"`` (one class per step) over the
    foreground ids in order, ``"offline"`` (everything in one step), or an
    explicit list of class-id/name groups.
    """
    if isinstance(spec, str):
        name = spec
        key = spec.strip().lower()
        groups: list[list] | None = None
        if key in _NAMED_SEQUENCES:
            try:
                groups = [[labels.id_of(n) for n in g] for g in _NAMED_SEQUENCES[key]]
            except ValueError:
                groups = None
        if groups is None:
            fg = list(labels.foreground)
            if key == "offline":
                groups = [fg]
            elif m := re.fullmatch(r"(\d+)s", key):
                n = int(m.group(1))
                if n > len(fg):
                    raise ValueError(f"sequence {spec!r} needs {n} classes, label space has {len(fg)}")
                groups = [[c] for c in fg[:n]]
            elif re.fullmatch(r"\d+(-\d+)*", key):
                sizes = [int(s) for s in key.split("-")]
                if sum(sizes) > len(fg) or min(sizes) < 1:
                    raise ValueError(f"sequence {spec!r} does not fit {len(fg)} foreground classes")
                groups, start = [], 0
                for s in sizes:
                    groups.append(fg[start : start + s])
                    start += s
            else:
                raise ValueError(f"unknown sequence {spec!r}")
    else:
        name = "custom"
        groups = [[labels.id_of(c) for c in g] for g in spec]

    seen: set[int] = set()
    steps = []
    cumulative = [BACKGROUND]
    for t, g in enumerate(groups):
        if not g:
            raise ValueError(f"step {t} has no classes")
        for c in g:
            if c == BACKGROUND:
                raise ValueError("the background cannot be a step class")
            if c in seen:
                raise ValueError(f"class {labels.name(c)!r} appears in more than one step")
            seen.add(c)
        cumulative = cumulative + list(g)
        steps.append(StepSpec(t, tuple(g), tuple(cumulative)))
    return TaskSequence(name, tuple(steps))


# --------------------------------------------------------------------------
# synthetic data

_PALETTE = np.array(
    [
        [0.50, 0.50, 0.50, 0.50],
        [0.85, 0.20, 0.20, 0.30],
        [0.20, 0.85, 0.20, 0.80],
        [0.20, 0.20, 0.85, 0.30],
        [0.85, 0.85, 0.20, 0.70],
        [0.20, 0.85, 0.85, 0.20],
        [0.85, 0.20, 0.85, 0.80],
        [0.10, 0.10, 0.10, 0.10],
    ],
    dtype=np.float64,
)
PIXEL_NOISE = 0.05
REGION_JITTER = 0.03


def class_colors(num_classes: int, channels: int) -> np.ndarray:
    """Mean colour per class id (row 0 is the background)."""
    if channels not in (3, 4):
        raise ValueError("channels must be 3 (RGB) or 4 (RGBIR)")
    if num_classes + 1 <= len(_PALETTE):
        return _PALETTE[: num_classes + 1, :channels].copy()
    # fixed-seed rejection sampling keeps extra colours well separated
    rng = np.random.default_rng(1234)
    colors = [c for c in _PALETTE[:, :channels]]
    while len(colors) < num_classes + 1:
        cand = rng.uniform(0.05, 0.95, size=channels)
        if min(np.linalg.norm(cand - c) for c in colors) > 0.35:
            colors.append(cand)
    return np.array(colors)


def generate_synthetic_dataset(
    seed: int,
    num_tiles: int,
    size: int,
    labels: LabelSpace,
    channels: int = 3,
    presence: float = 0.5,
) -> list[Tile]:
    """Random rectangles and discs over a flat background.

    Each foreground class is drawn into a tile with probability
    ``presence``; its regions are filled with the class colour plus a
    per-region offset and per-pixel Gaussian noise. Shape sizes, aspect
    ratios and positions are sampled symmetrically, so the data has no
    preferred orientation.
    """
    if size < 16:
        raise ValueError(f"tile size must be >= 16, got {size}")
    k = labels.num_classes - 1
    if k < 2:
        raise ValueError("need at least 2 foreground classes")
    if num_tiles < 1:
        raise ValueError("num_tiles must be positive")
    rng = np.random.default_rng(seed)
    colors = class_colors(k, channels)
    yy, xx = np.mgrid[0:size, 0:size]
    tiles = []
    for n in range(num_tiles):
        mask = np.zeros((size, size), dtype=np.uint8)
        present = [c for c in labels.foreground if rng.random() < presence]
        shapes = [c for c in present for _ in range(int(rng.integers(1, 3)))]
        rng.shuffle(shapes)
        for c in shapes:
            cy, cx = rng.uniform(0, size, size=2)
            if rng.random() < 0.5:
                hh, hw = rng.uniform(size / 16, size / 5, size=2)
                region = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
            else:
                rad = rng.uniform(size / 12, size / 5)
                region = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
            mask[region] = c
        pixels = np.empty((channels, size, size), dtype=np.float64)
        for c in np.unique(mask):
            sel = mask == c
            mean = colors[c] + rng.normal(0.0, REGION_JITTER, size=channels)
            pixels[:, sel] = mean[:, None]
        pixels += rng.normal(0.0, PIXEL_NOISE, size=pixels.shape)
        pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
        rec = TileRecord(
            id=f"synth_{n:05d}",
            raster_id="synth",
            row=0,
            col=n * size,
            patch=size,
            channels=channels,
            histogram=label_histogram(mask),
        )
        tiles.append(Tile(rec, pixels, mask))
    return tiles


# --------------------------------------------------------------------------
# Potsdam-format loading


def decode_color_labels(rgb: np.ndarray, colors: Mapping[tuple[int, int, int], int], name: str = "") -> np.ndarray:
    """Map an (H, W, 3) colour-coded label raster to class ids."""
    if rgb.ndim != 3 or rgb.shape[-1] < 3:
        raise DataError(f"{name}: label raster must be (H, W, 3), got {rgb.shape}")
    rgb = rgb[..., :3].astype(np.int64)
    packed = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    out = np.zeros(packed.shape, dtype=np.uint8)
    known = np.zeros(packed.shape, dtype=bool)
    for (r, g, b), cid in colors.items():
        sel = packed == ((r << 16) | (g << 8) | b)
        out[sel] = cid
        known |= sel
    if not known.all():
        bad = np.unique(packed[~known])[:5]
        shown = [((int(v) >> 16) & 255, (int(v) >> 8) & 255, int(v) & 255) for v in bad]
        raise DataError(f"{name}: unknown label colour(s) {shown}")
    return out


_MODALITY_CHANNELS = {"RGB": 3, "RGBIR": 4}


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        return np.asarray(tifffile.imread(path))
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im)


def load_potsdam_layout(root: str | os.PathLike, modality: str = "RGB") -> list[Raster]:
    """Read ``<name>_<modality>.tif`` + ``<name>_label.tif`` pairs from ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    modality = modality.upper()
    if modality not in _MODALITY_CHANNELS:
        raise DataError(f"unsupported modality {modality!r}")
    suffix = f"_{modality}"
    images = sorted(p for p in root.iterdir() if p.stem.upper().endswith(suffix) and p.is_file())
    if not images:
        raise DataError(f"{root}: no *{suffix}.tif rasters found")
    rasters = []
    for img_path in images:
        base = img_path.stem[: -len(suffix)]
        label_path = next(
            (p for p in root.iterdir() if p.is_file() and p.stem == f"{base}_label"), None
        )
        if label_path is None:
            raise DataError(f"raster {base}: missing label file {base}_label.tif")
        img = _read_image(img_path)
        if img.ndim == 2:
            img = img[..., None]
        if img.shape[-1] not in (3, 4) and img.shape[0] in (3, 4):
            img = np.moveaxis(img, 0, -1)
        if img.shape[-1] != _MODALITY_CHANNELS[modality]:
            raise DataError(f"raster {base}: expected {modality} channels, got shape {img.shape}")
        scale = float(np.iinfo(img.dtype).max) if img.dtype.kind == "u" else 1.0
        pixels = np.ascontiguousarray(np.moveaxis(img, -1, 0), dtype=np.float32) / np.float32(scale)
        lbl = decode_color_labels(_read_image(label_path), POTSDAM_COLORS, base)
        if lbl.shape != pixels.shape[1:]:
            raise DataError(f"raster {base}: image {pixels.shape[1:]} and labels {lbl.shape} differ in shape")
        rasters.append(Raster(base, pixels, lbl))
    return rasters


# --------------------------------------------------------------------------
# on-disk dataset


@dataclass
class Dataset:
    labels: LabelSpace
    tiles: list[Tile]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Tile]:
        return [t for t in self.tiles if t.record.split == name]

    def partitions(self, split: str = "train") -> dict[int, list[Tile]]:
        parts: dict[int, list[Tile]] = {c: [] for c in self.labels.foreground}
        for t in self.split(split):
            if t.record.partition is not None:
                parts[t.record.partition].append(t)
        return parts


def write_tile_blob(path: Path, pixels: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(pixels, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_tile_blob(path: Path, channels: int, patch: int) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    n_px = channels * patch * patch
    expected = 4 * n_px + patch * patch
    if len(raw) != expected:
        raise DataError(f"{path}: {len(raw)} bytes, expected {expected}")
    pixels = np.frombuffer(raw, dtype="<f4", count=n_px).reshape(channels, patch, patch).astype(np.float32)
    labels = np.frombuffer(raw, dtype=np.uint8, offset=4 * n_px).reshape(patch, patch).copy()
    return pixels, labels


def write_dataset(root: str | os.PathLike, dataset: Dataset) -> None:
    root = Path(root)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    meta = dict(dataset.meta)
    meta["labels"] = dataset.labels.to_json()
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(root / "manifest.jsonl", "w") as fh:
        for t in dataset.tiles:
            fh.write(json.dumps(t.record.to_json(), sort_keys=True) + "\n")
            write_tile_blob(root / "tiles" / f"{t.record.id}.bin", t.pixels, t.labels)


def read_manifest(root: str | os.PathLike) -> list[TileRecord]:
    path = Path(root) / "manifest.jsonl"
    if not path.is_file():
        raise DataError(f"{root}: missing manifest.jsonl")
    with open(path) as fh:
        return [TileRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def read_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.is_file():
        raise DataError(f"{root}: missing dataset.json")
    meta = json.loads(meta_path.read_text())
    labels = LabelSpace.from_json(meta.pop("labels"))
    tiles = []
    for rec in read_manifest(root):
        px, lb = read_tile_blob(root / "tiles" / f"{rec.id}.bin", rec.channels, rec.patch)
        if int(lb.max(initial=0)) >= labels.num_classes:
            raise DataError(f"tile {rec.id}: label {int(lb.max())} outside label space")
        tiles.append(Tile(rec, px, lb))
    return Dataset(labels, tiles, meta)
