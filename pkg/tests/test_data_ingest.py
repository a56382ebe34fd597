import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from geossl import data_ingest as di
from geossl.errors import (
    DecodeError,
    EmptyClassError,
    FormatError,
    InvalidArgument,
    InvalidFraction,
    NotFoundError,
    StratificationError,
    VersionError,
)


def fake_manifest(per_class, dataset_id="fake"):
    """Manifest over non-existent paths; split logic never touches the files."""
    classes = tuple(f"c{k}" for k in range(len(per_class)))
    root = Path("/nonexistent") / dataset_id
    samples = tuple(
        (root / classes[k] / f"{j}.png", k) for k, n in enumerate(per_class) for j in range(n)
    )
    return di.DatasetManifest(dataset_id, root, classes, samples, (64, 64))


def write_png(path, size=(40, 40), mode="RGB", value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new(mode, size, value if mode == "L" else (value, 0, 255 - value)).save(path)


# ---------------------------------------------------------------------------
# scanning


def test_scan_counts_and_sorted_classes(tmp_path):
    for name in ("b_river", "a_farm", "c_port"):
        for j in range(3):
            write_png(tmp_path / name / f"{j}.png")
    (tmp_path / "notes.txt").write_text("ignored")
    (tmp_path / "a_farm" / "readme.md").write_text("ignored")
    m = di.scan_dataset(tmp_path, "toy")
    assert m.classes == ("a_farm", "b_river", "c_port")
    assert len(m) == 9
    assert m.class_counts() == {"a_farm": 3, "b_river": 3, "c_port": 3}
    assert m.image_size_hint == (40, 40)
    assert all(p.exists() for p, _ in m.samples)


def test_scan_missing_root(tmp_path):
    with pytest.raises(NotFoundError):
        di.scan_dataset(tmp_path / "nope", "x")


def test_scan_empty_root(tmp_path):
    with pytest.raises(NotFoundError):
        di.scan_dataset(tmp_path, "x")


def test_scan_empty_class(tmp_path):
    write_png(tmp_path / "a" / "0.png")
    (tmp_path / "b").mkdir()
    with pytest.raises(EmptyClassError) as exc:
        di.scan_dataset(tmp_path, "x")
    assert exc.value.class_name == "b"


def test_scan_skips_undecodable(tmp_path):
    write_png(tmp_path / "a" / "0.png")
    write_png(tmp_path / "a" / "1.png")
    (tmp_path / "a" / "2.png").write_bytes(b"not an image")
    m = di.scan_dataset(tmp_path, "x", workers=2)
    assert len(m) == 2
    assert len(m.skipped) == 1 and m.skipped[0][0].endswith("2.png")


def test_scan_fails_when_class_becomes_empty(tmp_path):
    write_png(tmp_path / "a" / "0.png")
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "0.jpg").write_bytes(b"\xff\xd8garbage")
    with pytest.raises(EmptyClassError):
        di.scan_dataset(tmp_path, "x")


def test_scan_uses_data_root_env(tmp_path, monkeypatch):
    write_png(tmp_path / "ds" / "a" / "0.png")
    write_png(tmp_path / "ds" / "b" / "0.png")
    monkeypatch.setenv("GEOSSL_DATA_ROOT", str(tmp_path))
    monkeypatch.chdir(tmp_path.parent)
    m = di.scan_dataset("ds", "ds")
    assert m.root == tmp_path / "ds"


def test_manifest_csv_round_trip(tmp_path):
    m = di.synth_dataset(3, 6, 32, 0, tmp_path / "syn")
    path = tmp_path / "syn" / "manifest.csv"
    m.save(path)
    text = path.read_bytes()
    assert b"\r" not in text
    assert text.splitlines()[1] == b"path,class_name,class_index"
    assert di.DatasetManifest.load(path) == m


def test_manifest_version_checked(tmp_path):
    m = di.synth_dataset(2, 6, 32, 0, tmp_path / "syn")
    path = tmp_path / "m.csv"
    path.write_text(m.to_csv().replace('"version": 1', '"version": 2'))
    with pytest.raises(VersionError):
        di.DatasetManifest.load(path, root=m.root)
    path.write_text("path,class_name,class_index\n")
    with pytest.raises(FormatError):
        di.DatasetManifest.load(path, root=m.root)


def test_manifest_invariants():
    with pytest.raises(InvalidArgument):
        di.DatasetManifest("x", Path("/"), ("b", "a"), ((Path("/a.png"), 0),), (32, 32))
    with pytest.raises(EmptyClassError):
        di.DatasetManifest("x", Path("/"), ("a", "b"), ((Path("/a.png"), 0),), (32, 32))
    with pytest.raises(InvalidArgument):
        di.DatasetManifest("x", Path("/"), ("a",), (), (32, 32))


# ---------------------------------------------------------------------------
# images


def test_load_png_shape(tmp_path):
    write_png(tmp_path / "a.png", size=(256, 256))
    s = di.load_image(tmp_path / "a.png")
    assert s.pixels.shape == (256, 256, 3) and s.pixels.dtype == np.uint8


def test_load_grayscale_replicated(tmp_path):
    arr = np.arange(48 * 40, dtype=np.uint8).reshape(48, 40)
    Image.fromarray(arr, mode="L").save(tmp_path / "g.png")
    s = di.load_image(tmp_path / "g.png")
    assert s.pixels.shape == (48, 40, 3)
    assert np.array_equal(s.pixels[..., 0], arr) and np.array_equal(s.pixels[..., 2], arr)


def test_load_truncated(tmp_path):
    write_png(tmp_path / "a.png", size=(64, 64))
    data = (tmp_path / "a.png").read_bytes()
    (tmp_path / "t.png").write_bytes(data[: len(data) // 2])
    with pytest.raises(DecodeError):
        di.load_image(tmp_path / "t.png")


def test_load_too_small(tmp_path):
    write_png(tmp_path / "s.png", size=(16, 16))
    with pytest.raises(DecodeError):
        di.load_image(tmp_path / "s.png")


def test_record_reads(tmp_path):
    write_png(tmp_path / "a.png")
    with di.record_reads() as reads:
        di.load_image(tmp_path / "a.png")
    di.load_image(tmp_path / "a.png")
    assert reads == [tmp_path / "a.png"]


# ---------------------------------------------------------------------------
# splits


@pytest.mark.parametrize("n, expected", [(200, (140, 40, 20)), (100, (70, 20, 10)), (6, (4, 1, 1)), (7, (5, 1, 1))])
def test_split_arithmetic(n, expected):
    assert di.split_counts(n, (0.7, 0.2, 0.1)) == expected
    split = di.make_splits(fake_manifest([n]), (0.7, 0.2, 0.1), seed=0)
    assert (len(split.train), len(split.test), len(split.val)) == expected


def test_split_determinism_and_seed_sensitivity():
    m = fake_manifest([30, 25, 40])
    a = di.make_splits(m, seed=3)
    b = di.make_splits(m, seed=3)
    c = di.make_splits(m, seed=4)
    assert a == b and a.to_csv(m) == b.to_csv(m)
    assert a.assignment != c.assignment
    assert a.label_fraction == 1.0 and a.retained_train == tuple(a.train)


@pytest.mark.parametrize("ratios", [(0.7, 0.2), (0.7, 0.2, 0.2), (0.8, 0.3, -0.1), (1.0, 0.0, 0.0)])
def test_split_bad_ratios(ratios):
    with pytest.raises(InvalidArgument):
        di.make_splits(fake_manifest([10]), ratios)


@pytest.mark.parametrize("n", [0, 1, 2])
def test_split_too_small_class(n):
    with pytest.raises((StratificationError, EmptyClassError)):
        di.make_splits(fake_manifest([10, n]))


def test_split_rounding_may_leave_val_empty():
    # 8 -> floor(6.1) = 6 train, floor(2.1) = 2 test, 0 val
    split = di.make_splits(fake_manifest([8]))
    assert (len(split.train), len(split.test), len(split.val)) == (6, 2, 0)


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(6, 60), min_size=1, max_size=5), seed=st.integers(0, 10**6))
def test_split_partition_and_stratification(counts, seed):
    m = fake_manifest(counts)
    split = di.make_splits(m, (0.7, 0.2, 0.1), seed)
    parts = [set(split.indices(s).tolist()) for s in di.SPLITS]
    assert set().union(*parts) == set(range(len(m)))
    assert sum(len(p) for p in parts) == len(m)
    labels = m.labels
    for c, n in enumerate(counts):
        for part, r in zip(parts, (0.7, 0.2, 0.1)):
            k = sum(1 for i in part if labels[i] == c)
            assert abs(k - r * n) < 1


def test_split_file_round_trip(tmp_path):
    m = di.synth_dataset(3, 10, 32, 1, tmp_path / "syn")
    split = di.subsample_labels(di.make_splits(m, seed=5), 0.5, 9, m)
    path = tmp_path / "split.csv"
    split.save(path, m)
    assert di.SplitSpec.load(path, m) == split
    lines = path.read_text().splitlines()
    assert lines[1] == "path,split,retained"
    assert {line.split(",")[1] for line in lines[2:]} == {"train", "test", "val"}


# ---------------------------------------------------------------------------
# label fractions


def test_fraction_identity():
    m = fake_manifest([50, 30])
    split = di.make_splits(m, seed=1)
    sub = di.subsample_labels(split, 1.0, 7, m)
    assert sub.retained_train == tuple(sorted(split.train.tolist()))
    assert sub.assignment == split.assignment


@pytest.mark.parametrize("n_class, fraction, kept", [(200, 0.1, 14), (10, 0.1, 1), (200, 0.5, 70)])
def test_fraction_arithmetic(n_class, fraction, kept):
    m = fake_manifest([n_class])
    split = di.make_splits(m, seed=0)
    sub = di.subsample_labels(split, fraction, 0, m)
    assert len(sub.retained_train) == kept


def test_fraction_floor_guard():
    # 10 per class -> 7 train; 0.1 * 7 rounds to 1; 0.01 * 7 rounds to 0 -> guarded to 1
    m = fake_manifest([10, 10])
    split = di.make_splits(m, seed=0)
    assert len(di.subsample_labels(split, 0.1, 0, m).retained_train) == 2
    assert len(di.subsample_labels(split, 0.01, 0, m).retained_train) == 2


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_fraction_invalid(fraction):
    m = fake_manifest([10])
    with pytest.raises(InvalidFraction):
        di.subsample_labels(di.make_splits(m), fraction, 0, m)


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(6, 80), min_size=1, max_size=4), seed=st.integers(0, 10**6),
       a=st.floats(0.01, 1.0), b=st.floats(0.01, 1.0))
def test_fraction_nesting(counts, seed, a, b):
    a, b = sorted((a, b))
    m = fake_manifest(counts)
    split = di.make_splits(m, seed=seed)
    ra = set(di.subsample_labels(split, a, seed, m).retained_train)
    rb = set(di.subsample_labels(split, b, seed, m).retained_train)
    assert ra <= rb <= set(split.train.tolist())
    sub = di.subsample_labels(split, a, seed, m)
    assert sub.test.tolist() == split.test.tolist() and sub.val.tolist() == split.val.tolist()


# ---------------------------------------------------------------------------
# synthetic data


def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*.png")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_counts(tmp_path):
    m = di.synth_dataset(4, 30, 64, 0, tmp_path / "syn")
    assert len(m) == 120 and m.num_classes == 4
    assert set(m.class_counts().values()) == {30}
    assert m.image_size_hint == (64, 64)


def test_synth_deterministic(tmp_path):
    di.synth_dataset(3, 6, 32, 11, tmp_path / "a")
    di.synth_dataset(3, 6, 32, 11, tmp_path / "b")
    di.synth_dataset(3, 6, 32, 12, tmp_path / "c")
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")
    assert _tree_hash(tmp_path / "a") != _tree_hash(tmp_path / "c")


@pytest.mark.parametrize("kwargs", [dict(num_classes=1), dict(per_class=5), dict(image_size=16), dict(layout="x")])
def test_synth_preconditions(tmp_path, kwargs):
    args = dict(num_classes=3, per_class=6, image_size=32, seed=0, out_root=tmp_path / "s")
    args.update(kwargs)
    with pytest.raises(InvalidArgument):
        di.synth_dataset(**args)


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        di.synth_dataset(2, 6, 32, 0, blocker / "sub")


def test_synth_classes_differ_in_hue(tmp_path):
    m = di.synth_dataset(4, 6, 32, 0, tmp_path / "s")
    means = []
    for c in range(4):
        px = np.stack([di.load_image(m.samples[i][0]).pixels for i in m.indices_of_class(c)])
        means.append(px.reshape(-1, 3).mean(axis=0))
    means = np.array(means)
    dists = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert dists[~np.eye(4, dtype=bool)].min() > 10


def test_synth_quadrant_layout(tmp_path):
    m = di.synth_dataset(3, 8, 64, 2, tmp_path / "q", layout="quadrant")
    quads = di.synth_quadrants(m.root)
    assert len(quads) == len(m)
    for i in range(len(m)):
        rel = m.relpath(i)
        q = quads[rel]
        assert rel.endswith(f"_q{q}.png")
        px = di.load_image(m.samples[i][0]).pixels.astype(float)
        sat = px.max(axis=2) - px.min(axis=2)  # colourfulness; background is grey
        halves = [sat[r:r + 32, c:c + 32].mean() for r in (0, 32) for c in (0, 32)]
        assert int(np.argmax(halves)) == q
