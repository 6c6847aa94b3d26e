"""Class-indexed image corpora: loading, rotation augmentation and splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm"}
ROTATION_TAG = "@rot"


class DataError(Exception):
    """A dataset, split or feature file is missing, unreadable or inconsistent."""


@dataclass
class ClassIndexedDataset:
    """Images grouped by class.

    ``classes`` maps a class id to a float32 array ``[n_items, channels,
    size, size]`` with values in [0, 1].  ``provenance`` records the rotation
    (0, 90, 180 or 270 degrees) that produced each class and ``base_class``
    the original class it was derived from.
    """

    classes: dict
    image_size: int
    channels: int
    provenance: dict = field(default_factory=dict)
    base_class: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = (self.channels, self.image_size, self.image_size)
        for cid, items in self.classes.items():
            if len(items) == 0:
                raise DataError(f"class {cid!r} has no items")
            if items.shape[1:] != expected:
                raise DataError(f"class {cid!r} items have shape {items.shape[1:]}, expected {expected}")
            self.provenance.setdefault(cid, 0)
            self.base_class.setdefault(cid, cid)

    @property
    def class_ids(self) -> list:
        return sorted(self.classes)

    def __len__(self) -> int:
        return len(self.classes)

    def num_items(self) -> int:
        return sum(len(v) for v in self.classes.values())

    def subset(self, class_ids) -> "ClassIndexedDataset":
        ids = list(class_ids)
        return ClassIndexedDataset(
            {c: self.classes[c] for c in ids},
            self.image_size,
            self.channels,
            {c: self.provenance[c] for c in ids},
            {c: self.base_class[c] for c in ids},
            {c: self.sources[c] for c in ids if c in self.sources},
        )

    def originals(self) -> "ClassIndexedDataset":
        return self.subset(c for c in self.class_ids if self.provenance[c] == 0)


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Resize ``[C, H, W]`` to ``[C, size, size]`` with corner-aligned bilinear sampling.

    Output pixel ``i`` samples source coordinate ``i * (H - 1) / (size - 1)``
    (0 when either extent is 1).  With ``x0 = floor(src)``,
    ``x1 = min(x0 + 1, H - 1)`` and ``t = src - x0`` the value is
    ``(1 - t) * p[x0] + t * p[x1]``, applied along rows then columns.
    A same-size resize is the identity.
    """
    c, h, w = image.shape
    if (h, w) == (size, size):
        return image.copy()

    def axis_weights(n_in: int):
        if size == 1 or n_in == 1:
            src = np.zeros(size)
        else:
            src = np.arange(size) * ((n_in - 1) / (size - 1))
        lo = np.minimum(np.floor(src).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo)

    r0, r1, tr = axis_weights(h)
    c0, c1, tc = axis_weights(w)
    img = image.astype(np.float64)
    rows = img[:, r0, :] * (1.0 - tr)[None, :, None] + img[:, r1, :] * tr[None, :, None]
    out = rows[:, :, c0] * (1.0 - tc)[None, None, :] + rows[:, :, c1] * tc[None, None, :]
    return out.astype(np.float32)


def _read_image(path: Path, channels: int, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a variety of types for bad files
        raise DataError(f"cannot read image {path}: {exc}") from exc
    arr = arr[None] if channels == 1 else arr.transpose(2, 0, 1)
    return resize_bilinear(arr, size)


def _class_dirs(root: Path) -> list[tuple[str, list[Path]]]:
    found = []
    for path in sorted(p for p in root.rglob("*") if p.is_dir()):
        files = sorted(f for f in path.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        subdirs = [d for d in path.iterdir() if d.is_dir()]
        if files:
            found.append((path.relative_to(root).as_posix(), files))
        elif not subdirs:
            raise DataError(f"class directory {path} contains no images")
    return found


def load_image_dataset(root, size: int = 28, channels: int = 1) -> ClassIndexedDataset:
    """Load ``root/<class>/<item>.png|.pgm`` (or nested ``alphabet/character``) images.

    Nested layouts are flattened: the class id is the directory path relative
    to ``root``.  Images are converted to the requested channel count,
    resized and scaled to [0, 1].
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    classes, sources = {}, {}
    for cid, files in _class_dirs(root):
        classes[cid] = np.stack([_read_image(f, channels, size) for f in files])
        sources[cid] = [str(f) for f in files]
    if not classes:
        raise DataError(f"no image classes found under {root}")
    return ClassIndexedDataset(classes, size, channels, sources=sources)


def write_image_corpus(ds: ClassIndexedDataset, root, fmt: str = "pgm") -> None:
    """Write a dataset as ``root/<class>/<index>.<fmt>`` 8-bit images."""
    root = Path(root)
    for cid, items in ds.classes.items():
        d = root / cid
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(items):
            pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
            pil = Image.fromarray(pix[0]) if ds.channels == 1 else Image.fromarray(pix.transpose(1, 2, 0))
            pil.save(d / f"{i:04d}.{fmt}")


def augment_rotations(ds: ClassIndexedDataset) -> ClassIndexedDataset:
    """Add 90/180/270-degree rotated copies of every class as new classes."""
    if any(angle != 0 for angle in ds.provenance.values()):
        raise DataError("dataset already contains rotated classes")
    classes, prov, base, sources = {}, {}, {}, {}
    for cid in ds.class_ids:
        items = ds.classes[cid]
        if items.shape[-1] != items.shape[-2]:
            raise DataError(f"class {cid!r} images are not square")
        for k in range(4):
            new_id = cid if k == 0 else f"{cid}{ROTATION_TAG}{90 * k}"
            classes[new_id] = np.ascontiguousarray(np.rot90(items, k, axes=(2, 3)))
            prov[new_id] = 90 * k
            base[new_id] = ds.base_class[cid]
            if cid in ds.sources:
                sources[new_id] = ds.sources[cid]
    return ClassIndexedDataset(classes, ds.image_size, ds.channels, prov, base, sources)


def load_split_file(path) -> dict:
    """Read ``class_id<TAB>train|val|test`` lines into ``{class_id: split}``."""
    mapping = {}
    path = Path(path)
    if not path.is_file():
        raise DataError(f"split file {path} not found")
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or parts[1] not in ("train", "val", "test"):
            raise DataError(f"{path}:{lineno}: expected 'class_id<TAB>train|val|test'")
        if parts[0] in mapping:
            raise DataError(f"{path}:{lineno}: duplicate class {parts[0]!r}")
        mapping[parts[0]] = parts[1]
    return mapping


def split_classes(ds: ClassIndexedDataset, train_count: int | None = None, test_count: int | None = None,
                  seed: int = 0, split_file=None) -> dict:
    """Partition classes by their original (pre-rotation) class.

    Rotated copies follow their source class.  Either draw ``train_count``
    and ``test_count`` original classes with a seeded permutation or read a
    canonical split file.
    """
    bases = sorted(set(ds.base_class.values()))
    if split_file is not None:
        mapping = load_split_file(split_file)
        unknown = sorted(set(mapping) - set(bases))
        if unknown:
            raise DataError(f"split file names classes not in the dataset: {', '.join(unknown[:5])}")
        groups: dict = {}
        for b, part in mapping.items():
            groups.setdefault(part, set()).add(b)
    else:
        if train_count is None or test_count is None:
            raise ValueError("give train_count and test_count, or a split file")
        if train_count + test_count > len(bases):
            raise DataError(f"requested {train_count}+{test_count} classes but only {len(bases)} are available")
        perm = np.random.default_rng(seed).permutation(len(bases))
        groups = {
            "train": {bases[i] for i in perm[:train_count]},
            "test": {bases[i] for i in perm[train_count:train_count + test_count]},
        }
    return {part: ds.subset(c for c in ds.class_ids if ds.base_class[c] in members)
            for part, members in sorted(groups.items())}


def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(denom, 1e-12), 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def make_glyph_dataset(n_classes: int, n_items: int = 20, size: int = 28, seed: int = 0,
                       strokes: tuple = (2, 4), jitter: float = 0.04) -> ClassIndexedDataset:
    """Procedural handwritten-glyph stand-in: each class is a random stroke figure.

    Items of a class are rendered from the class's stroke endpoints after a
    small random rotation, scaling, shift and per-endpoint jitter, so classes
    are distinguishable but no two items are identical.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    px, py = (xx + 0.5) / size, (yy + 0.5) / size
    classes = {}
    width = 1.2 / size
    for c in range(n_classes):
        n_strokes = int(rng.integers(strokes[0], strokes[1] + 1))
        proto = rng.uniform(0.2, 0.8, size=(n_strokes, 4))
        items = np.zeros((n_items, 1, size, size), dtype=np.float32)
        for i in range(n_items):
            angle = rng.uniform(-0.15, 0.15)
            scale = rng.uniform(0.9, 1.1)
            shift = rng.uniform(-0.05, 0.05, size=2)
            rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]]) * scale
            dist = np.full((size, size), np.inf)
            for seg in proto:
                ends = seg.reshape(2, 2) - 0.5
                ends = ends @ rot.T + 0.5 + shift + rng.normal(0, jitter, size=(2, 2))
                dist = np.minimum(dist, _segment_distance(px, py, *ends[0], *ends[1]))
            items[i, 0] = np.clip(1.0 - (dist - width) * size, 0.0, 1.0)
        classes[f"glyph{c:04d}"] = items
    return ClassIndexedDataset(classes, size, 1)
