"""Synthetic image sets for tests, demos and the toy conversion benchmarks."""
from pathlib import Path

import numpy as np

from spikeforge.dataset import GestureDataset, write_pgm


def make_bar_dataset(n, size=8, seed=0, noise=0.1):
    """Two classes: a horizontal bar (class 0) or a vertical bar (class 1).

    Bars are two pixels thick at a random offset; background pixels get
    uniform noise in [0, noise]. Classes alternate so every prefix is balanced.
    """
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n):
        label = i % 2
        img = rng.uniform(0.0, noise, size=(size, size))
        pos = rng.integers(0, size - 1)
        intensity = rng.uniform(0.7, 1.0)
        if label == 0:
            img[pos : pos + 2, :] = intensity
        else:
            img[:, pos : pos + 2] = intensity
        images.append(img[None])
        labels.append(label)
    return GestureDataset(images, labels, np.zeros(n, dtype=np.int64), ["horizontal", "vertical"])


def make_gesture_like(n_per_class, n_classes=10, n_subjects=4, size=16, seed=0):
    """Ten blob-and-stroke prototypes with per-sample shift, gain and noise.

    Stands in for the gesture imagery when the real dataset is absent; each
    subject gets a fixed brightness gain so subject-wise splits are not trivial.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    prototypes = []
    for _ in range(n_classes):
        proto = np.zeros((size, size))
        for _ in range(3):
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            sy, sx = rng.uniform(0.05, 0.25, size=2)
            proto += np.exp(-((yy - cy) ** 2) / (2 * sy**2) - ((xx - cx) ** 2) / (2 * sx**2))
        prototypes.append(proto / proto.max())
    gains = rng.uniform(0.7, 1.0, size=n_subjects)
    images, labels, subjects = [], [], []
    for cls in range(n_classes):
        for k in range(n_per_class):
            subj = k % n_subjects
            dy, dx = rng.integers(-1, 2, size=2)
            img = np.roll(prototypes[cls], (dy, dx), axis=(0, 1)) * gains[subj]
            img = np.clip(img + rng.normal(0.0, 0.05, size=img.shape), 0.0, 1.0)
            images.append(img[None])
            labels.append(cls)
            subjects.append(subj)
    return GestureDataset(images, labels, subjects)


def write_image_tree(ds, root, maxval=255):
    """Write ``ds`` as ``root/subject_XX/class_YY/img_NNNNN.pgm``."""
    root = Path(root)
    for i, (img, label, subj) in enumerate(zip(ds.images, ds.labels, ds.subject_ids)):
        d = root / f"subject_{subj:02d}" / f"class_{label:02d}"
        d.mkdir(parents=True, exist_ok=True)
        write_pgm(d / f"img_{i:05d}.pgm", np.rint(img[0] * maxval), maxval)
    return root
