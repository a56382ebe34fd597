"""Folder-per-class datasets: scanning, manifests, splits and synthetic data.

Layout on disk is ``<root>/<class_name>/<image>.{png,jpg,jpeg,tif,tiff}``.
Class names are sorted lexicographically and their position is the label.

Shuffling uses numpy's PCG64 generator seeded through SHA-256 of a label
tuple such as ``(seed, dataset_id, class_name, "split")`` (see
:func:`geossl._util.derive_seed`), so assignments are identical across
platforms and do not depend on Python's hash randomisation.
"""

from __future__ import annotations

import colorsys
import contextlib
import csv
import io
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._util import atomic_write_text, digest, make_rng, scaled_count
from .errors import (
    DecodeError,
    EmptyClassError,
    InvalidArgument,
    InvalidFraction,
    NotFoundError,
    StratificationError,
)

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff")
DATA_ROOT_ENV = "GEOSSL_DATA_ROOT"
MIN_IMAGE_SIDE = 32
SPLITS = ("train", "test", "val")
DEFAULT_RATIOS = (0.7, 0.2, 0.1)

MANIFEST_VERSION = 1
SPLIT_VERSION = 1


def default_data_root() -> Path | None:
    value = os.environ.get(DATA_ROOT_ENV)
    return Path(value) if value else None


def resolve_root(root) -> Path:
    """Relative roots are looked up under ``$GEOSSL_DATA_ROOT`` when set."""
    root = Path(root)
    base = default_data_root()
    if not root.is_absolute() and not root.exists() and base is not None:
        return base / root
    return root


# ---------------------------------------------------------------------------
# images


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # H x W x 3, uint8
    label: int
    source_path: Path


_read_log_lock = threading.Lock()
_read_logs: list[list] = []


@contextlib.contextmanager
def record_reads():
    """Collect every path passed to :func:`load_image` inside the block."""
    paths: list = []
    with _read_log_lock:
        _read_logs.append(paths)
    try:
        yield paths
    finally:
        with _read_log_lock:
            _read_logs.remove(paths)


def load_image(path, label: int = -1) -> ImageSample:
    path = Path(path)
    with _read_log_lock:
        for sink in _read_logs:
            sink.append(path)
    try:
        with Image.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except (OSError, UnidentifiedImageError, ValueError, SyntaxError) as exc:
        raise DecodeError(path, str(exc)) from exc
    pixels = np.asarray(rgb, dtype=np.uint8)
    h, w = pixels.shape[:2]
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise DecodeError(path, f"image is {h}x{w}, smaller than {MIN_IMAGE_SIDE} px")
    return ImageSample(pixels=pixels, label=label, source_path=path)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    root: Path
    classes: tuple[str, ...]
    samples: tuple[tuple[Path, int], ...]
    image_size_hint: tuple[int, int]
    skipped: tuple[tuple[str, str], ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not self.samples:
            raise InvalidArgument("manifest has no samples")
        if list(self.classes) != sorted(set(self.classes)):
            raise InvalidArgument("class names must be unique and sorted")
        counts = np.bincount(self.labels, minlength=len(self.classes))
        if len(counts) > len(self.classes):
            raise InvalidArgument("class index out of range")
        for name, n in zip(self.classes, counts):
            if n == 0:
                raise EmptyClassError(name)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def labels(self) -> np.ndarray:
        return np.fromiter((c for _, c in self.samples), dtype=np.int64, count=len(self.samples))

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {name: int(n) for name, n in zip(self.classes, counts)}

    def indices_of_class(self, class_index: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_index)

    def relpath(self, i: int) -> str:
        return Path(self.samples[i][0]).relative_to(self.root).as_posix()

    def digest(self) -> str:
        return digest([self.dataset_id, list(self.classes), [(self.relpath(i), c) for i, (_, c) in enumerate(self.samples)]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        meta = {"format": "geossl-manifest", "version": MANIFEST_VERSION, "dataset_id": self.dataset_id,
                "image_size_hint": list(self.image_size_hint)}
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "class_name", "class_index"])
        for i, (_, c) in enumerate(self.samples):
            writer.writerow([self.relpath(i), self.classes[c], c])
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def load(cls, path, root=None) -> "DatasetManifest":
        """Read a manifest CSV; ``root`` defaults to the file's directory."""
        path = Path(path)
        with open(path, encoding="utf-8", newline="") as fh:
            meta = _read_header(fh, "geossl-manifest", MANIFEST_VERSION)
            rows = list(csv.DictReader(fh))
        root = Path(root) if root is not None else path.parent
        classes = sorted({r["class_name"] for r in rows})
        samples = []
        for r in rows:
            c = int(r["class_index"])
            if classes[c] != r["class_name"]:
                raise InvalidArgument(f"class index {c} does not match {r['class_name']!r}")
            samples.append((root / r["path"], c))
        return cls(meta["dataset_id"], root, tuple(classes), tuple(samples), tuple(meta["image_size_hint"]))


def _read_header(fh, fmt: str, version: int) -> dict:
    from .errors import FormatError, VersionError

    first = fh.readline()
    if not first.startswith("# "):
        raise FormatError(f"missing {fmt} header line")
    try:
        meta = json.loads(first[2:])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad {fmt} header: {exc}") from exc
    if meta.get("format") != fmt:
        raise FormatError(f"expected format {fmt!r}, got {meta.get('format')!r}")
    if meta.get("version") != version:
        raise VersionError(f"unsupported {fmt} version {meta.get('version')!r} (expected {version})")
    return meta


def _probe(path: Path):
    try:
        sample = load_image(path)
    except DecodeError as exc:
        return None, str(exc)
    return sample.pixels.shape[:2], None


def scan_dataset(root, dataset_id: str, workers: int = 1) -> DatasetManifest:
    """Enumerate ``<root>/<class>/<image>`` files and decode each once.

    Undecodable files are skipped and listed in ``manifest.skipped``.
    """
    root = resolve_root(root)
    if not root.is_dir():
        raise NotFoundError(f"dataset root {str(root)!r} does not exist")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")), key=lambda p: p.name)
    if not class_dirs:
        raise NotFoundError(f"dataset root {str(root)!r} has no class directories")

    candidates: list[tuple[Path, int]] = []
    for c, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise EmptyClassError(d.name)
        candidates.extend((f, c) for f in files)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            probes = list(pool.map(lambda fc: _probe(fc[0]), candidates))
    else:
        probes = [_probe(f) for f, _ in candidates]

    samples, skipped, sizes = [], [], []
    for (f, c), (size, err) in zip(candidates, probes):
        if err is not None:
            log.warning("skipping %s", err)
            skipped.append((str(f), err))
            continue
        samples.append((f, c))
        sizes.append(size)
    present = {c for _, c in samples}
    for c, d in enumerate(class_dirs):
        if c not in present:
            raise EmptyClassError(d.name)
    hint = max(set(sizes), key=sizes.count)
    return DatasetManifest(dataset_id, root, tuple(d.name for d in class_dirs), tuple(samples),
                           tuple(hint), tuple(skipped))


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    manifest_ref: str
    seed: int
    ratios: tuple[float, float, float]
    assignment: tuple[str, ...]  # per sample index: "train" | "test" | "val"
    label_fraction: float = 1.0
    retained_train: tuple[int, ...] = ()
    subsample_seed: int | None = None

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.assignment) if s == split], dtype=np.int64)

    @property
    def train(self) -> np.ndarray:
        return self.indices("train")

    @property
    def test(self) -> np.ndarray:
        return self.indices("test")

    @property
    def val(self) -> np.ndarray:
        return self.indices("val")

    def to_csv(self, manifest: DatasetManifest) -> str:
        if len(manifest) != len(self.assignment):
            raise InvalidArgument("manifest does not match split")
        meta = {
            "format": "geossl-split", "version": SPLIT_VERSION, "dataset_id": self.manifest_ref,
            "seed": self.seed, "ratios": list(self.ratios), "label_fraction": self.label_fraction,
            "subsample_seed": self.subsample_seed,
        }
        retained = set(self.retained_train)
        buf = io.StringIO()
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "split", "retained"])
        for i, s in enumerate(self.assignment):
            writer.writerow([manifest.relpath(i), s, int(i in retained)])
        return buf.getvalue()

    def save(self, path, manifest: DatasetManifest) -> None:
        atomic_write_text(path, self.to_csv(manifest))

    @classmethod
    def load(cls, path, manifest: DatasetManifest) -> "SplitSpec":
        with open(path, encoding="utf-8", newline="") as fh:
            meta = _read_header(fh, "geossl-split", SPLIT_VERSION)
            rows = list(csv.DictReader(fh))
        index = {manifest.relpath(i): i for i in range(len(manifest))}
        if meta["dataset_id"] != manifest.dataset_id or len(rows) != len(manifest):
            raise InvalidArgument("split file does not belong to this manifest")
        assignment = [""] * len(manifest)
        retained = []
        for r in rows:
            i = index[r["path"]]
            assignment[i] = r["split"]
            if r["retained"] == "1":
                retained.append(i)
        return cls(meta["dataset_id"], meta["seed"], tuple(meta["ratios"]), tuple(assignment),
                   meta["label_fraction"], tuple(sorted(retained)), meta["subsample_seed"])


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    """Per-class sizes: train = floor(r_train*n + 1/2), test likewise, val gets the rest."""
    n_train = scaled_count(ratios[0], n)
    n_test = scaled_count(ratios[1], n)
    return n_train, n_test, n - n_train - n_test


def make_splits(manifest: DatasetManifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitSpec:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidArgument(f"ratios must be three positive fractions summing to 1, got {ratios}")
    assignment = [""] * len(manifest)
    for c, name in enumerate(manifest.classes):
        idx = manifest.indices_of_class(c)
        n = len(idx)
        if n < 3:
            raise StratificationError(f"class {name!r} has {n} samples; need at least 3")
        counts = split_counts(n, ratios)
        if min(counts) < 1:
            log.warning("class %r with %d samples leaves a split empty: %s", name, n, counts)
        order = idx[make_rng(seed, manifest.dataset_id, name, "split").permutation(n)]
        bounds = np.cumsum(counts)
        for k, i in enumerate(order):
            assignment[i] = SPLITS[int(np.searchsorted(bounds, k, side="right"))]
    spec = SplitSpec(manifest.dataset_id, seed, ratios, tuple(assignment))
    return replace(spec, retained_train=tuple(int(i) for i in spec.train))


def subsample_labels(split: SplitSpec, fraction: float, seed: int, manifest: DatasetManifest) -> SplitSpec:
    """Keep ``max(1, floor(fraction*m + 1/2))`` train samples per class.

    Each class's train list is ranked once per seed and a prefix is taken, so
    smaller fractions are always subsets of larger ones.
    """
    if not (0 < fraction <= 1):
        raise InvalidFraction(f"fraction must lie in (0, 1], got {fraction}")
    if manifest.dataset_id != split.manifest_ref or len(manifest) != len(split.assignment):
        raise InvalidArgument("manifest does not match split")
    train = set(split.train.tolist())
    labels = manifest.labels
    retained: list[int] = []
    for c, name in enumerate(manifest.classes):
        members = np.array(sorted(i for i in train if labels[i] == c), dtype=np.int64)
        if members.size == 0:
            raise StratificationError(f"class {name!r} has no training samples")
        ranked = members[make_rng(seed, manifest.dataset_id, name, "subsample").permutation(members.size)]
        keep = max(1, scaled_count(fraction, members.size))
        retained.extend(int(i) for i in ranked[:keep])
    return replace(split, label_fraction=float(fraction), retained_train=tuple(sorted(retained)),
                   subsample_seed=seed)


# ---------------------------------------------------------------------------
# synthetic data

QUADRANT_META = "synth_meta.json"


def _class_signature(num_classes: int, k: int, seed: int):
    """Hue, stripe angle and stripe frequency for class ``k`` of a synthetic dataset."""
    offset = make_rng(seed, "synth", "hue-offset").random()
    hue = (offset + k / num_classes) % 1.0
    angle = np.pi * k / num_classes
    freq = 3.0 + 2.0 * (k % 3)
    return hue, angle, freq


def _render(rng, size, hue, angle, freq, layout, quadrant):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    jitter_angle = angle + rng.normal(0, 0.08)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(jitter_angle) + yy * np.sin(jitter_angle)) + phase)
    texture = 0.5 + 0.5 * np.sign(wave) * np.abs(wave) ** 0.5
    h = (hue + rng.normal(0, 0.02)) % 1.0
    base = np.array(colorsys.hsv_to_rgb(h, 0.75, 0.9))
    dark = base * 0.35
    pattern = dark[None, None, :] + (base - dark)[None, None, :] * texture[..., None]

    if layout == "full":
        img = pattern
    else:
        # neutral grey clutter everywhere, class pattern in one quadrant only
        img = 0.45 + 0.08 * rng.normal(size=(size, size, 1)).repeat(3, axis=2)
        half = size // 2
        r0, c0 = (quadrant // 2) * half, (quadrant % 2) * half
        img[r0:r0 + half, c0:c0 + half] = pattern[r0:r0 + half, c0:c0 + half]
    img = img * rng.uniform(0.85, 1.15) + rng.normal(0, 0.03, size=img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def synth_dataset(num_classes: int, per_class: int, image_size: int, seed: int, out_root,
                  dataset_id: str | None = None, layout: str = "full") -> DatasetManifest:
    """Write a learnable folder-per-class PNG dataset and return its manifest.

    Each class gets its own dominant hue and stripe orientation/frequency;
    every image jitters phase, hue, orientation, brightness and noise. With
    ``layout="quadrant"`` the class pattern fills one randomly chosen quadrant
    on a class-neutral background; the quadrant of every file is recorded in
    ``synth_meta.json`` and in the file name (``_q<k>``).
    """
    if num_classes < 2:
        raise InvalidArgument("num_classes must be >= 2")
    if per_class < 6:
        raise InvalidArgument("per_class must be >= 6")
    if image_size < MIN_IMAGE_SIDE:
        raise InvalidArgument(f"image_size must be >= {MIN_IMAGE_SIDE}")
    if layout not in ("full", "quadrant"):
        raise InvalidArgument(f"unknown layout {layout!r}")
    out_root = Path(out_root)
    dataset_id = dataset_id or out_root.name
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        quadrants = {}
        for k in range(num_classes):
            name = f"class_{k:02d}"
            (out_root / name).mkdir(exist_ok=True)
            hue, angle, freq = _class_signature(num_classes, k, seed)
            rng = make_rng(seed, "synth", k)
            for j in range(per_class):
                q = int(rng.integers(4)) if layout == "quadrant" else -1
                pixels = _render(rng, image_size, hue, angle, freq, layout, q)
                fname = f"img_{j:04d}" + (f"_q{q}" if q >= 0 else "") + ".png"
                Image.fromarray(pixels).save(out_root / name / fname, format="PNG", optimize=False)
                if q >= 0:
                    quadrants[f"{name}/{fname}"] = q
        meta = {"num_classes": num_classes, "per_class": per_class, "image_size": image_size,
                "seed": seed, "layout": layout, "quadrants": quadrants}
        atomic_write_text(out_root / QUADRANT_META, json.dumps(meta, sort_keys=True, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write synthetic dataset to {str(out_root)!r}: {exc}") from exc
    return scan_dataset(out_root, dataset_id)


def synth_quadrants(root) -> dict[str, int]:
    """Quadrant index (0=top-left, 1=top-right, 2=bottom-left, 3=bottom-right) per relative path."""
    meta = json.loads((Path(root) / QUADRANT_META).read_text())
    return {k: int(v) for k, v in meta["quadrants"].items()}


# ---------------------------------------------------------------------------
# in-memory cache used by the training loops


class ImageStore:
    """Lazily decoded images of one manifest, kept in memory once read."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[int, ImageSample] = {}
        self._lock = threading.Lock()

    def __getitem__(self, i: int) -> ImageSample:
        i = int(i)
        with self._lock:
            hit = self._cache.get(i)
        if hit is not None:
            return hit
        path, label = self.manifest.samples[i]
        sample = load_image(path, label)
        with self._lock:
            self._cache[i] = sample
        return sample
