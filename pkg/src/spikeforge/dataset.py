"""Gesture image ingestion, preprocessing and train/test splitting.

Directory layout: ``root/subject_XX/class_YY/*.{pgm,png}`` where XX and YY
are integer ids. A JSON manifest ``{"class_dirs": [...], "subject_dirs":
[...]}`` overrides the naming rule: the position of a directory name in
the list is its id. This is how the public leap-motion gesture release
(``00/01_palm/...``) is loaded.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spikeforge import npz

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".png")
_SUBJECT_RE = re.compile(r"^subject_(\d+)$")
_CLASS_RE = re.compile(r"^class_(\d+)$")


class DatasetError(ValueError):
    pass


@dataclass
class GestureDataset:
    images: list
    labels: np.ndarray
    subject_ids: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.subject_ids)):
            raise DatasetError(
                f"length mismatch: {len(self.images)} images, {len(self.labels)} labels, "
                f"{len(self.subject_ids)} subject ids")
        if not self.class_names:
            n = int(self.labels.max()) + 1 if len(self.labels) else 0
            self.class_names = [f"class_{i:02d}" for i in range(n)]

    def __len__(self):
        return len(self.images)

    @property
    def n_classes(self):
        return len(self.class_names)

    def array(self):
        """Images stacked as ``[N, 1, H, W]``; requires a common size."""
        if not self.images:
            return np.zeros((0, 1, 1, 1))
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise DatasetError(f"images have differing shapes {sorted(shapes)}; run preprocess first")
        return np.stack(self.images)

    def subset(self, indices):
        indices = list(indices)
        return GestureDataset([self.images[i] for i in indices], self.labels[indices],
                              self.subject_ids[indices], list(self.class_names))


@dataclass
class SplitDataset:
    train: GestureDataset
    test: GestureDataset
    split_seed: int
    split_fraction: float
    train_indices: np.ndarray = None
    test_indices: np.ndarray = None

    def save(self, path):
        records = {
            "x_train": self.train.array(), "y_train": self.train.labels.astype(np.float64),
            "subject_train": self.train.subject_ids.astype(np.float64),
            "x_test": self.test.array(), "y_test": self.test.labels.astype(np.float64),
            "subject_test": self.test.subject_ids.astype(np.float64),
        }
        meta = {"class_names": self.train.class_names, "split_seed": self.split_seed,
                "split_fraction": self.split_fraction}
        npz.write_npz(records, path, text_records={"dataset.json": json.dumps(meta, sort_keys=True)})

    @classmethod
    def load(cls, path):
        arrays, texts = npz.read_npz_archive(path)
        meta = json.loads(texts.get("dataset.json", "{}"))
        names = meta.get("class_names", [])

        def part(tag):
            x = arrays[f"x_{tag}"]
            return GestureDataset(list(x), arrays[f"y_{tag}"].astype(np.int64),
                                  arrays[f"subject_{tag}"].astype(np.int64), list(names))

        return cls(part("train"), part("test"), meta.get("split_seed", 0), meta.get("split_fraction", 0.0))


# -- image readers -----------------------------------------------------------------


def _pgm_tokens(data, count):
    """Split the first ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DatasetError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_pgm(path):
    """Read a binary (P5) PGM. Returns ``(pixels uint16 [H, W], maxval)``."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DatasetError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    raster = data[offset : offset + need]
    if len(raster) != need:
        raise DatasetError(f"{path}: truncated PGM raster ({len(raster)} of {need} bytes)")
    return np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(np.uint16), maxval


def write_pgm(path, pixels, maxval=255):
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    body = pixels.astype("u1" if maxval < 256 else ">u2").tobytes()
    Path(path).write_bytes(header + body)


def read_png(path):
    """Read an 8-bit grayscale PNG. Returns ``(pixels [H, W], 255)``."""
    from PIL import Image

    with Image.open(path) as im:
        if im.format != "PNG":
            raise DatasetError(f"{path}: not a PNG file")
        if im.mode != "L":
            raise DatasetError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint16), 255


def read_image(path):
    """Load one image as ``[1, H, W]`` float64 scaled to [0, 1] by its maxval."""
    path = Path(path)
    reader = read_pgm if path.suffix.lower() == ".pgm" else read_png
    try:
        pixels, maxval = reader(path)
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"{path}: unreadable image ({exc})") from None
    return (pixels.astype(np.float64) / maxval)[None]


# -- loading -----------------------------------------------------------------------


def _resolve_ids(names, pattern, override, what, root):
    ids = {}
    for name in names:
        if override is not None:
            if name not in override:
                raise DatasetError(f"{root}: unknown {what} directory {name!r} (not in manifest)")
            ids[name] = override.index(name)
        else:
            m = pattern.match(name)
            if not m:
                raise DatasetError(f"{root}: unknown {what} directory {name!r} (expected {what}_<id>)")
            ids[name] = int(m.group(1))
    return ids


def load_image_dir(root, manifest=None):
    """Load every image under ``root`` into a :class:`GestureDataset`.

    ``manifest`` is a path to a JSON file or an already-parsed dict.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    if isinstance(manifest, (str, Path)):
        manifest = json.loads(Path(manifest).read_text(encoding="utf-8"))
    manifest = manifest or {}
    class_override = manifest.get("class_dirs")
    subject_override = manifest.get("subject_dirs")

    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    subject_ids = _resolve_ids([p.name for p in subject_dirs], _SUBJECT_RE, subject_override, "subject", root)

    images, labels, subjects, files = [], [], [], []
    seen_classes = {}
    for sdir in subject_dirs:
        class_dirs = sorted(p for p in sdir.iterdir() if p.is_dir())
        class_ids = _resolve_ids([p.name for p in class_dirs], _CLASS_RE, class_override, "class", sdir)
        for cdir in class_dirs:
            seen_classes[class_ids[cdir.name]] = cdir.name
            for f in sorted(cdir.iterdir()):
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    images.append(read_image(f))
                    labels.append(class_ids[cdir.name])
                    subjects.append(subject_ids[sdir.name])
                    files.append(str(f))
    if not images:
        raise DatasetError(f"{root}: no samples found")
    if class_override is not None:
        names = list(class_override)
    else:
        n = max(seen_classes) + 1
        names = [seen_classes.get(i, f"class_{i:02d}") for i in range(n)]
    log.info("loaded %d images from %s", len(images), root)
    return GestureDataset(images, labels, subjects, names)


# -- preprocessing -------------------------------------------------------------------


def _area_matrix(src, dst):
    """[dst, src] matrix whose rows average the source cells each target cell covers."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / scale
    return m


def resize_area(image, target_h, target_w):
    """Box-filter resize of a ``[C, H, W]`` image."""
    c, h, w = image.shape
    if (h, w) == (target_h, target_w):
        return image
    rows, cols = _area_matrix(h, target_h), _area_matrix(w, target_w)
    out = np.einsum("ih,chw,jw->cij", rows, image, cols)
    return np.clip(out, 0.0, 1.0)


def preprocess(ds, target_h=32, target_w=32):
    """Resize every image to ``target_h x target_w`` by area averaging."""
    if target_h < 8 or target_w < 8:
        raise DatasetError(f"target size must be at least 8x8, got {target_h}x{target_w}")
    images = [resize_area(img, target_h, target_w) for img in ds.images]
    return GestureDataset(images, ds.labels.copy(), ds.subject_ids.copy(), list(ds.class_names))


# -- splitting ------------------------------------------------------------------------


def stratified_split(ds, test_fraction=0.2, seed=0, by_subject=False):
    """Shuffle once with ``seed``, then take ``round(n_c * test_fraction)`` of
    each class (in shuffled order) for the test set.

    With ``by_subject`` whole subjects are held out instead; per-class
    stratification then holds only as far as subjects cover every class.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    if by_subject:
        subjects = np.unique(ds.subject_ids)
        if len(subjects) < 2:
            raise DatasetError("by-subject split needs at least 2 subjects")
        n_test = min(len(subjects) - 1, max(1, round(len(subjects) * test_fraction)))
        held = set(rng.permutation(subjects)[:n_test].tolist())
        test_idx = [i for i in order if ds.subject_ids[i] in held]
        train_idx = [i for i in order if ds.subject_ids[i] not in held]
    else:
        test_idx, train_idx = [], []
        for cls in np.unique(ds.labels):
            members = [i for i in order if ds.labels[i] == cls]
            if len(members) < 2:
                raise DatasetError(f"class {cls} has {len(members)} sample(s); at least 2 needed to split")
            n_test = min(len(members) - 1, max(1, round(len(members) * test_fraction)))
            test_idx.extend(members[:n_test])
            train_idx.extend(members[n_test:])
        # restore the shuffled order across classes
        pos = np.empty(len(ds), dtype=np.int64)
        pos[order] = np.arange(len(ds))
        test_idx.sort(key=lambda i: pos[i])
        train_idx.sort(key=lambda i: pos[i])
    return SplitDataset(ds.subset(train_idx), ds.subset(test_idx), seed, test_fraction,
                        np.asarray(train_idx, dtype=np.int64), np.asarray(test_idx, dtype=np.int64))


def stratified_subset(ds, n, seed=0):
    """A class-balanced random subset of ``n`` samples (all of them if n >= len)."""
    if n >= len(ds):
        return ds
    frac = n / len(ds)
    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == cls)
        keep.extend(rng.permutation(members)[: round(len(members) * frac)].tolist())
    return ds.subset(sorted(keep))
