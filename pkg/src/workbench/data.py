"""Datasets, label-noise injection and epoch/mini-batch iteration."""

import contextlib
import csv
import gzip
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803  # 2051
LABEL_MAGIC = 0x00000801  # 2049

# Default "similar class" map for 10-class digit data.
DEFAULT_ASYM_MAP_10 = {2: 7, 3: 8, 5: 6, 7: 1}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    given_labels: np.ndarray
    true_labels: np.ndarray
    n_classes: int
    # clamp range used by augmentation; None means unbounded
    bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        f = self.features
        if f.ndim != 2 or f.shape[0] != len(self.given_labels) or len(self.given_labels) != len(self.true_labels):
            raise ValueError("features / label lengths disagree")
        if np.isnan(f).any():
            raise ValueError("features contain NaN")
        for name, lab in (("given_labels", self.given_labels), ("true_labels", self.true_labels)):
            if len(lab) and (lab.min() < 0 or lab.max() >= self.n_classes):
                raise ValueError(f"{name} outside [0, {self.n_classes})")
        self.true_labels.setflags(write=False)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, indices):
        idx = np.asarray(indices)
        return Dataset(self.features[idx], self.given_labels[idx].copy(), self.true_labels[idx].copy(),
                       self.n_classes, self.bounds)

    def without_truth(self, sentinel=0):
        """Copy with ``true_labels`` replaced by a constant sentinel."""
        return Dataset(self.features, self.given_labels.copy(),
                       np.full(self.n, sentinel, dtype=np.int64), self.n_classes, self.bounds)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "symmetric"  # "symmetric" | "asymmetric" | "none"
    ratio: float = 0.0
    class_map: dict = None
    seed: int = 0
    include_self: bool = False  # symmetric only: allow a "flip" back to the original class

    def validate(self, n_classes=None):
        if self.kind not in ("symmetric", "asymmetric", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"noise ratio must lie in [0, 1], got {self.ratio}")
        if self.kind == "asymmetric":
            cmap = self.resolved_map(n_classes)
            if not cmap:
                raise ValueError("asymmetric noise needs a class_map")
            for src, dst in cmap.items():
                if src == dst:
                    raise ValueError(f"class_map sends class {src} to itself")
                if n_classes is not None and not (0 <= src < n_classes and 0 <= dst < n_classes):
                    raise ValueError(f"class_map edge {src}->{dst} outside [0, {n_classes})")

    def resolved_map(self, n_classes):
        if self.class_map:
            return dict(self.class_map)
        if n_classes == 10:
            return dict(DEFAULT_ASYM_MAP_10)
        return None


@dataclass
class MiniBatch:
    indices: np.ndarray
    features: np.ndarray
    given_labels: np.ndarray

    def __len__(self):
        return len(self.indices)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path):
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(buf, expected_magic, what):
    if len(buf) < 4:
        raise IdxFormatError(f"{what}: truncated header at offset 0 ({len(buf)} bytes)")
    magic = int.from_bytes(buf[0:4], "big")
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{what}: truncated dimension header at offset {len(buf)}, need {header} bytes")
    dims = [int.from_bytes(buf[4 + 4 * k: 8 + 4 * k], "big") for k in range(ndim)]
    size = int(np.prod(dims)) if dims else 0
    if len(buf) < header + size:
        raise IdxFormatError(
            f"{what}: truncated payload at offset {len(buf)}, expected {header + size} bytes for dims {dims}")
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path, n_classes=None):
    """Read an IDX image/label file pair (optionally gzipped).

    Pixels are scaled to [0, 1] and each image is flattened row-major.
    """
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, f"images file {images_path}")
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, f"labels file {labels_path}")
    if images.ndim != 3:
        raise IdxFormatError(f"images file {images_path}: expected 3 dimensions at offset 3, got {images.ndim}")
    if labels.ndim != 1:
        raise IdxFormatError(f"labels file {labels_path}: expected 1 dimension at offset 3, got {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch at offset 4: {images.shape[0]} images vs {labels.shape[0]} labels")
    n = images.shape[0]
    x = images.reshape(n, -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if n else 1
    return Dataset(x, y.copy(), y.copy(), n_classes, (0.0, 1.0))


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images ``[n, rows, cols]`` and labels ``[n]`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(IMAGE_MAGIC.to_bytes(4, "big"))
        for d in (n, rows, cols):
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(LABEL_MAGIC.to_bytes(4, "big"))
        fh.write(int(len(labels)).to_bytes(4, "big"))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def gen_two_moons(n, jitter_std=0.1, seed=0):
    """Two interleaved half circles, ``n // 2`` points each, class 0 = upper moon."""
    if n % 2:
        raise ValueError(f"two-moons needs an even sample count, got {n}")
    if jitter_std < 0:
        raise ValueError("jitter_std must be nonnegative")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.repeat(np.arange(2, dtype=np.int64), half)
    if jitter_std > 0:
        x = x + np.random.default_rng(seed).normal(0.0, jitter_std, size=x.shape)
    return Dataset(x, y.copy(), y.copy(), 2, None)


@contextlib.contextmanager
def atomic_writer(path):
    """Text handle on a temp file in ``path``'s directory, renamed over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv_atomic(path, header, rows):
    with atomic_writer(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def export_csv(dataset, path):
    header = [f"x{j}" for j in range(dataset.dim)] + ["given", "true"]
    rows = ([f"{v:.6f}" for v in row] + [int(g), int(t)]
            for row, g, t in zip(dataset.features, dataset.given_labels, dataset.true_labels))
    write_csv_atomic(path, header, rows)


# ---------------------------------------------------------------------------
# label noise
# ---------------------------------------------------------------------------

def inject_noise(dataset, spec):
    """Return a copy of ``dataset`` whose ``given_labels`` are corrupted per ``spec``.

    Every sample draws its flip decision independently with probability
    ``spec.ratio``.  Symmetric noise moves a flipped label to one of the
    other ``C - 1`` classes uniformly (all ``C`` when ``include_self``).
    Asymmetric noise moves it along ``class_map``; classes absent from the
    map are never changed.
    """
    spec.validate(dataset.n_classes)
    if spec.kind == "none" or spec.ratio == 0.0:
        return replace(dataset, given_labels=dataset.given_labels.copy())
    rng = np.random.default_rng(spec.seed)
    y = dataset.given_labels
    c = dataset.n_classes
    flip = rng.random(dataset.n) < spec.ratio
    if spec.kind == "symmetric":
        if spec.include_self:
            new = rng.integers(0, c, size=dataset.n)
        else:
            new = (y + rng.integers(1, c, size=dataset.n)) % c
    else:
        cmap = spec.resolved_map(c)
        lut = np.arange(c)
        for src, dst in cmap.items():
            lut[src] = dst
        new = lut[y]
    noisy = np.where(flip, new, y).astype(np.int64)
    return replace(dataset, given_labels=noisy)


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------

def epoch_batches(dataset, batch_size, epoch_seed):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng(epoch_seed).permutation(dataset.n)
    out = []
    for start in range(0, dataset.n, batch_size):
        idx = perm[start:start + batch_size]
        out.append(MiniBatch(idx, dataset.features[idx], dataset.given_labels[idx]))
    return out
