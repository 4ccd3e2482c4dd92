"""Locating MNIST IDX files, and building them from offline-installable sources.

Two bundled sources are supported when the official files are not at hand:

* the ``mnist`` npm package (10,000 grayscale digits stored as JSON, pixel
  values ``i/255`` rounded to 3 decimals, so the original bytes round-trip);
* mlxtend's 5,000-digit slice (a strict subset of the npm digits).
"""

import io
import json
import os
import tarfile
from pathlib import Path

import numpy as np

from .data import load_idx, write_idx

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
CACHE_ROOT = Path.home() / ".cache" / "workbench"
DEFAULT_CACHE = CACHE_ROOT / "mnist"


def _find(directory, name):
    for cand in (name, name + ".gz"):
        p = Path(directory) / cand
        if p.exists():
            return p
    return None


def find_idx_pair(directory, files):
    imgs, labs = (_find(directory, f) for f in files)
    if imgs is None or labs is None:
        return None
    return imgs, labs


def _read_npm_digits(source):
    """(images uint8 [n,28,28], labels) from an npm ``mnist`` tarball or unpacked directory."""
    source = Path(source)
    blobs = {}
    if source.is_file():
        with tarfile.open(source) as tar:
            for m in tar.getmembers():
                name = Path(m.name)
                if name.parent.name == "digits" and name.suffix == ".json":
                    blobs[int(name.stem)] = tar.extractfile(m).read()
    else:
        for d in range(10):
            hits = list(source.rglob(f"digits/{d}.json"))
            if hits:
                blobs[d] = hits[0].read_bytes()
    if sorted(blobs) != list(range(10)):
        raise FileNotFoundError(f"{source}: expected digits/0.json .. digits/9.json of the npm mnist package")
    images, labels = [], []
    for d in range(10):
        flat = np.asarray(json.load(io.BytesIO(blobs[d]))["data"], dtype=np.float64)
        if flat.size % 784:
            raise ValueError(f"digit {d}: {flat.size} values is not a multiple of 784")
        images.append(np.rint(flat.reshape(-1, 28, 28) * 255.0).astype(np.uint8))
        labels.append(np.full(len(images[-1]), d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def _read_mlxtend_digits():
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise RuntimeError("no MNIST IDX files found; set WORKBENCH_DATA_DIR, run "
                           "`workbench prepare-mnist --npm PATH`, or pip install mlxtend") from exc
    x, y = mnist_data()
    return np.rint(x).astype(np.uint8).reshape(-1, 28, 28), y.astype(np.uint8)


def write_split(images, labels, out_dir, test_fraction=0.2, seed=0):
    """Stratified train/test split written as the standard IDX file pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    test = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        test.append(rng.choice(idx, int(round(test_fraction * len(idx))), replace=False))
    mask = np.zeros(len(labels), dtype=bool)
    mask[np.concatenate(test)] = True
    tr, te = np.flatnonzero(~mask), np.flatnonzero(mask)
    write_idx(images[tr], labels[tr], out_dir / TRAIN_FILES[0], out_dir / TRAIN_FILES[1])
    write_idx(images[te], labels[te], out_dir / TEST_FILES[0], out_dir / TEST_FILES[1])
    return out_dir


def prepare_mnist(out_dir=DEFAULT_CACHE, npm_source=None, test_fraction=0.2, seed=0):
    """Build IDX files from the npm package (preferred) or the mlxtend slice."""
    if npm_source is not None:
        images, labels = _read_npm_digits(npm_source)
    else:
        images, labels = _read_mlxtend_digits()
    return write_split(images, labels, out_dir, test_fraction, seed)


def data_dir():
    env = os.environ.get("WORKBENCH_DATA_DIR")
    return Path(env) if env else None


def locate():
    """Directory holding both IDX pairs: ``$WORKBENCH_DATA_DIR`` first, then the cache."""
    for d in (data_dir(), DEFAULT_CACHE):
        if d is not None and find_idx_pair(d, TRAIN_FILES) and find_idx_pair(d, TEST_FILES):
            return d
    return None


def load_mnist(n_train=10000, n_test=None, directory=None, seed=0):
    """Train/test MNIST datasets.

    Looks in ``directory`` (default: ``$WORKBENCH_DATA_DIR``, then the cache)
    for the standard IDX files.  If none exist, the cache is built from the
    mlxtend slice.  ``n_train``/``n_test`` cap the sizes with a seeded random
    subset.  Returns ``(train, test, source_dir)``.
    """
    directory = Path(directory) if directory is not None else locate()
    if directory is None:
        directory = prepare_mnist(DEFAULT_CACHE)
    pair_tr, pair_te = find_idx_pair(directory, TRAIN_FILES), find_idx_pair(directory, TEST_FILES)
    if pair_tr is None or pair_te is None:
        raise FileNotFoundError(f"{directory}: missing {TRAIN_FILES[0]} / {TEST_FILES[0]} IDX files")
    train = load_idx(*pair_tr, n_classes=10)
    test = load_idx(*pair_te, n_classes=10)
    rng = np.random.default_rng(seed)
    if n_train is not None and train.n > n_train:
        train = train.subset(np.sort(rng.choice(train.n, n_train, replace=False)))
    if n_test is not None and test.n > n_test:
        test = test.subset(np.sort(rng.choice(test.n, n_test, replace=False)))
    return train, test, str(directory)
