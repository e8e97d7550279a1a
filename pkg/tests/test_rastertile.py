import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerial_icl import rastertile as R
from aerial_icl.errors import DataError
from oracles import coverage


# -- tile_positions ---------------------------------------------------------


def test_single_exact_tile():
    assert R.tile_positions(4, 4, 0) == [0]


def test_small_clamped():
    offs = R.tile_positions(5, 4, 2)
    assert offs == [0, 1]
    assert coverage(offs, 4, 5).all()


def test_potsdam_scale():
    offs = R.tile_positions(6000, 512, 12)
    assert offs == [0, 500, 1000, 1500, 2000, 2500, 3000, 3500, 4000, 4500, 5000, 5488]
    assert coverage(offs, 512, 6000).all()


def test_tile_positions_errors():
    with pytest.raises(ValueError):
        R.tile_positions(100, 128, 0)
    with pytest.raises(ValueError):
        R.tile_positions(100, 32, 32)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 400), st.integers(1, 64), st.data())
def test_tile_positions_properties(extent, patch, data):
    if patch > extent:
        return
    overlap = data.draw(st.integers(0, patch - 1))
    offs = R.tile_positions(extent, patch, overlap)
    assert offs[0] == 0
    assert all(0 <= o <= extent - patch for o in offs)
    assert coverage(offs, patch, extent).all()
    assert all(b - a <= patch - overlap for a, b in zip(offs, offs[1:]))  # consecutive overlap >= o
    assert offs == sorted(set(offs))


# -- tile_raster --------------------------------------------------------------


def _raster(h, w, c=3, seed=0, rid="r"):
    r = np.random.default_rng(seed)
    return R.Raster(rid, r.random((c, h, w), dtype=np.float32), r.integers(0, 3, (h, w)).astype(np.uint8))


def test_full_scale_tile_count():
    # labels only; pixels are a broadcast view to keep memory small
    lbl = np.zeros((6000, 6000), dtype=np.uint8)
    px = np.broadcast_to(np.zeros((1, 1, 1), dtype=np.float32), (3, 6000, 6000))
    tiles = R.tile_raster(R.Raster("big", px, lbl), 512, 12)
    assert len(tiles) == 144
    assert tiles[0].record.histogram == {0: 512 * 512}


def test_single_tile_identical():
    r = _raster(512, 512)
    (t,) = R.tile_raster(r, 512, 12)
    np.testing.assert_array_equal(t.pixels, r.pixels)
    np.testing.assert_array_equal(t.labels, r.labels)
    assert sum(t.record.histogram.values()) == 512 * 512


def test_tiles_cover_every_pixel_and_are_deterministic():
    r = _raster(37, 29)
    tiles = R.tile_raster(r, 16, 4)
    seen = np.zeros((37, 29), dtype=bool)
    for t in tiles:
        rec = t.record
        np.testing.assert_array_equal(t.labels, r.labels[rec.row : rec.row + 16, rec.col : rec.col + 16])
        seen[rec.row : rec.row + 16, rec.col : rec.col + 16] = True
        assert sum(rec.histogram.values()) == 256
    assert seen.all()
    again = R.tile_raster(r, 16, 4)
    assert [t.record.to_json() for t in tiles] == [t.record.to_json() for t in again]


def test_raster_shape_mismatch():
    with pytest.raises(DataError):
        R.Raster("x", np.zeros((3, 4, 4), np.float32), np.zeros((4, 5), np.uint8))


# -- partitions ---------------------------------------------------------------

LABELS4 = R.synthetic_labels(4)


def _rec(i, present):
    hist = {0: 10}
    hist.update({c: 5 for c in present})
    return R.TileRecord(f"t{i}", "r", 0, i, 4, 3, hist)


def test_only_candidate():
    parts = R.partition_disjoint([_rec(0, [3])], LABELS4, np.random.default_rng(0))
    assert [r.id for r in parts[3]] == ["t0"]


def test_two_tiles_balance():
    # greedy smallest-set simulation: first visited -> class 1 (tie, lowest id), second -> class 2
    recs = [_rec(0, [1, 2]), _rec(1, [1, 2])]
    parts = R.partition_disjoint(recs, LABELS4, np.random.default_rng(0))
    assert len(parts[1]) == 1 and len(parts[2]) == 1


def test_background_only_discarded():
    recs = [_rec(0, []), _rec(1, [2])]
    parts = R.partition_disjoint(recs, LABELS4, np.random.default_rng(0))
    assert sum(len(v) for v in parts.values()) == 1
    assert recs[0].partition is None


def test_partition_empty_input():
    with pytest.raises(ValueError):
        R.partition_disjoint([], LABELS4, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sets(st.integers(0, 4), max_size=4), min_size=1, max_size=60), st.integers(0, 1000))
def test_partition_properties(presents, seed):
    recs = [_rec(i, sorted(p - {0})) for i, p in enumerate(presents)]
    parts = R.partition_disjoint(recs, LABELS4, np.random.default_rng(seed))
    ids = [r.id for v in parts.values() for r in v]
    assert len(ids) == len(set(ids))  # disjoint
    fg = {r.id for r in recs if r.present}
    assert set(ids) == fg  # union + discarded = all
    for c, members in parts.items():
        assert all(c in r.present for r in members)
    again = R.partition_disjoint(
        [_rec(i, sorted(p - {0})) for i, p in enumerate(presents)], LABELS4, np.random.default_rng(seed)
    )
    assert {c: [r.id for r in v] for c, v in parts.items()} == {c: [r.id for r in v] for c, v in again.items()}


def test_split_validation_fraction():
    recs = [_rec(i, [1]) for i in range(20)]
    parts = R.partition_disjoint(recs, LABELS4, np.random.default_rng(0))
    train, val = R.split_validation(parts, 0.15, np.random.default_rng(0))
    assert len(val[1]) == 3 and len(train[1]) == 17
    assert all(r.split == "val" for r in val[1])
    assert not {r.id for r in val[1]} & {r.id for r in train[1]}


# -- remap / sequences --------------------------------------------------------


def _step(new):
    return R.StepSpec(1, tuple(new), (0,) + tuple(new))


def test_remap_examples():
    s = _step([4, 5])
    assert R.remap_labels(np.array([[4]]), s)[0, 0] == 4
    assert R.remap_labels(np.array([[2]]), s)[0, 0] == 0
    np.testing.assert_array_equal(R.remap_labels(np.array([[1, 4], [5, 0]]), s), [[0, 4], [5, 0]])


def test_remap_idempotent(rng):
    m = rng.integers(0, 7, (8, 8)).astype(np.uint8)
    s = _step([2, 6])
    once = R.remap_labels(m, s)
    np.testing.assert_array_equal(R.remap_labels(once, s), once)
    assert once.dtype == m.dtype


def test_sequence_321():
    seq = R.make_task_sequence("3-2-1", R.POTSDAM_LABELS)
    L = R.POTSDAM_LABELS
    assert [len(s.new_classes) for s in seq.steps] == [3, 2, 1]
    assert [L.name(c) for c in seq.steps[0].new_classes] == ["building", "tree", "clutter"]
    assert [L.name(c) for c in seq.steps[1].new_classes] == ["impervious surfaces", "low vegetation"]
    assert [L.name(c) for c in seq.steps[2].new_classes] == ["car"]
    assert seq.steps[2].cumulative_classes == (0,) + tuple(c for s in seq.steps for c in s.new_classes)


def test_sequence_5s():
    seq = R.make_task_sequence("5S", R.POTSDAM_LABELS)
    names = [R.POTSDAM_LABELS.name(s.new_classes[0]) for s in seq.steps]
    assert names == ["building", "tree", "impervious surfaces", "low vegetation", "car"]
    assert all(len(s.new_classes) == 1 for s in seq.steps)
    assert R.POTSDAM_LABELS.id_of("clutter") not in seq.all_classes


def test_sequence_custom_and_generic():
    seq = R.make_task_sequence([[1, 2], [3]], LABELS4)
    assert len(seq) == 2 and seq.steps[1].cumulative_classes == (0, 1, 2, 3)
    seq = R.make_task_sequence("2-2", LABELS4)
    assert [s.new_classes for s in seq.steps] == [(1, 2), (3, 4)]
    assert len(R.make_task_sequence("4S", LABELS4)) == 4
    assert R.make_task_sequence("offline", LABELS4).steps[0].new_classes == (1, 2, 3, 4)


@pytest.mark.parametrize("bad", [[[1, 2], [2]], [[1], [9]], [[0, 1]], "7-1", "xyz"])
def test_sequence_errors(bad):
    with pytest.raises(ValueError):
        R.make_task_sequence(bad, LABELS4)


def test_label_space_invariants():
    with pytest.raises(ValueError):
        R.LabelSpace(("background", "a", "A"))
    assert R.LabelSpace.from_json(R.POTSDAM_LABELS.to_json()) == R.POTSDAM_LABELS


# -- synthetic data -----------------------------------------------------------


def test_synthetic_deterministic():
    a = R.generate_synthetic_dataset(5, 20, 32, LABELS4)
    b = R.generate_synthetic_dataset(5, 20, 32, LABELS4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.pixels, y.pixels)
        np.testing.assert_array_equal(x.labels, y.labels)


def test_synthetic_class_separation_and_presence():
    tiles = R.generate_synthetic_dataset(0, 200, 64, LABELS4)
    px = np.concatenate([t.pixels.reshape(3, -1) for t in tiles], axis=1)
    lb = np.concatenate([t.labels.ravel() for t in tiles])
    means, stds = [], []
    for c in range(5):
        sel = px[:, lb == c]
        means.append(sel.mean(axis=1))
        stds.append(sel.std(axis=1).max())
    sigma = max(stds)
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.linalg.norm(means[i] - means[j]) >= 3 * sigma
    for c in LABELS4.foreground:
        frac = np.mean([c in t.record.present for t in tiles])
        assert frac >= 0.10


def test_synthetic_channels_and_errors():
    (t,) = R.generate_synthetic_dataset(0, 1, 16, LABELS4, channels=4)
    assert t.pixels.shape == (4, 16, 16)
    with pytest.raises(ValueError):
        R.generate_synthetic_dataset(0, 1, 8, LABELS4)
    with pytest.raises(ValueError):
        R.generate_synthetic_dataset(0, 1, 32, R.LabelSpace(("background", "a")))


# -- dataset files ------------------------------------------------------------


def test_dataset_roundtrip_and_blob_layout(tmp_path):
    tiles = R.generate_synthetic_dataset(1, 5, 16, LABELS4)
    tiles[0].record.partition = 2
    R.write_dataset(tmp_path, R.Dataset(LABELS4, tiles, {"source": "test"}))
    raw = (tmp_path / "tiles" / f"{tiles[0].record.id}.bin").read_bytes()
    assert len(raw) == 3 * 16 * 16 * 4 + 16 * 16
    np.testing.assert_array_equal(np.frombuffer(raw[: 3 * 256 * 4], "<f4").reshape(3, 16, 16), tiles[0].pixels)
    np.testing.assert_array_equal(np.frombuffer(raw[3 * 256 * 4 :], np.uint8).reshape(16, 16), tiles[0].labels)
    line = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert {"id", "raster_id", "row", "col", "patch", "partition", "histogram"} <= set(line)
    ds = R.read_dataset(tmp_path)
    assert ds.labels == LABELS4 and ds.meta["source"] == "test"
    assert ds.tiles[0].record.partition == 2
    for a, b in zip(tiles, ds.tiles):
        np.testing.assert_array_equal(a.pixels, b.pixels)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_truncated_blob(tmp_path):
    tiles = R.generate_synthetic_dataset(1, 1, 16, LABELS4)
    R.write_dataset(tmp_path, R.Dataset(LABELS4, tiles))
    blob = tmp_path / "tiles" / f"{tiles[0].record.id}.bin"
    blob.write_bytes(blob.read_bytes()[:-3])
    with pytest.raises(DataError):
        R.read_dataset(tmp_path)


# -- Potsdam layout -----------------------------------------------------------

tifffile = pytest.importorskip("tifffile")


def _write_potsdam(root, name, modality="RGB", size=24, label_colors=None):
    r = np.random.default_rng(0)
    ch = 3 if modality == "RGB" else 4
    tifffile.imwrite(root / f"{name}_{modality}.tif", r.integers(0, 256, (size, size, ch), dtype=np.uint8))
    colors = label_colors or list(R.POTSDAM_COLORS)
    lbl = np.zeros((size, size, 3), dtype=np.uint8)
    for i in range(size):
        lbl[i, :] = colors[i % len(colors)]
    tifffile.imwrite(root / f"{name}_label.tif", lbl)
    return lbl


def test_potsdam_decode(tmp_path):
    _write_potsdam(tmp_path, "top_potsdam_2_10")
    (r,) = R.load_potsdam_layout(tmp_path)
    assert r.pixels.shape == (3, 24, 24) and r.pixels.dtype == np.float32
    assert r.pixels.max() <= 1.0
    colors = list(R.POTSDAM_COLORS)
    assert r.labels[0, 0] == R.POTSDAM_COLORS[colors[0]]
    assert R.POTSDAM_COLORS[(255, 255, 255)] == R.POTSDAM_LABELS.id_of("impervious surfaces")


def test_potsdam_rgbir(tmp_path):
    _write_potsdam(tmp_path, "a", modality="RGBIR")
    (r,) = R.load_potsdam_layout(tmp_path, "RGBIR")
    assert r.pixels.shape[0] == 4


def test_potsdam_missing_label(tmp_path):
    _write_potsdam(tmp_path, "a")
    (tmp_path / "a_label.tif").unlink()
    with pytest.raises(DataError, match="a"):
        R.load_potsdam_layout(tmp_path)


def test_potsdam_unknown_color(tmp_path):
    _write_potsdam(tmp_path, "a", label_colors=[(1, 2, 3)])
    with pytest.raises(DataError, match="unknown label colour"):
        R.load_potsdam_layout(tmp_path)


def test_potsdam_shape_mismatch(tmp_path):
    _write_potsdam(tmp_path, "a")
    tifffile.imwrite(tmp_path / "a_label.tif", np.full((20, 24, 3), 255, dtype=np.uint8))
    with pytest.raises(DataError, match="shape"):
        R.load_potsdam_layout(tmp_path)
