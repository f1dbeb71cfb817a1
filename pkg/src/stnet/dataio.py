"""Image ingestion, colour histograms, patch pairs and the duplicate-safe split."""
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
from PIL import Image, UnidentifiedImageError
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_images, check_random_state
from .exceptions import SplitError

logger = logging.getLogger(__name__)

DOMAINS = ("upper", "lower")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
HIST_EPS = 1e-4


@dataclass
class ImageRecord:
    id: str
    domain: str
    pixels: np.ndarray
    path: str = ""

    def __post_init__(self):
        self.pixels = check_images(self.pixels, name=f"record {self.id}")[0]


@dataclass
class LoadReport:
    root: str = ""
    loaded: int = 0
    skipped: list = field(default_factory=list)

    def to_dict(self):
        return {"root": self.root, "loaded": self.loaded, "skipped": self.skipped}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class PatchPair:
    anchor: np.ndarray
    positive: np.ndarray
    parent_id: str
    anchor_offset: tuple
    positive_offset: tuple


@dataclass
class SplitManifest:
    train_ids: list
    test_ids: list
    ratio: float
    threshold: float = 0.02
    domain: str = ""
    root: str = ""
    seed: int = 0

    @property
    def realized_ratio(self):
        n = len(self.train_ids) + len(self.test_ids)
        return len(self.train_ids) / n if n else float("nan")

    def to_dict(self):
        return {
            "domain": self.domain,
            "root": self.root,
            "ratio": self.ratio,
            "realized_ratio": self.realized_ratio,
            "threshold": self.threshold,
            "seed": self.seed,
            "n_train": len(self.train_ids),
            "n_test": len(self.test_ids),
            "train_ids": sorted(self.train_ids),
            "test_ids": sorted(self.test_ids),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(
            train_ids=list(d["train_ids"]),
            test_ids=list(d["test_ids"]),
            ratio=float(d["ratio"]),
            threshold=float(d["threshold"]),
            domain=d.get("domain", ""),
            root=d.get("root", ""),
            seed=int(d.get("seed", 0)),
        )


def load_image(path, resolution):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im)
    # integer rasters of any bit depth arrive as uint8 after convert("RGB")
    return arr.astype(np.float32) / 255.0


def save_image(path, pixels):
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_dataset(root, domain, resolution=32, report=None):
    """Load every decodable raster image under ``root`` as an ImageRecord.

    Records are sorted by id (the file stem). Files that fail to decode are
    skipped with a warning and noted in ``report`` when one is given.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory does not exist: {root}")
    if report is None:
        report = LoadReport()
    report.root = str(root)
    records = []
    for path in sorted(p for p in root.iterdir() if p.is_file()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            pixels = load_image(path, resolution)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            msg = f"skipping undecodable image {path.name}: {exc}"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            report.skipped.append({"path": str(path), "reason": str(exc)})
            continue
        records.append(ImageRecord(id=path.stem, domain=domain, pixels=pixels, path=str(path)))
    records.sort(key=lambda r: r.id)
    report.loaded = len(records)
    return records


def stack_pixels(records):
    if not records:
        return np.zeros((0, 0, 0, 3), dtype=np.float32)
    return np.stack([r.pixels for r in records])


def _bin_index(values, n_bins):
    # half-open bins [k/L, (k+1)/L); 1.0 falls in the last bin.
    # float32 * small int is exact in float64, so bin edges are never misrounded
    return np.minimum((values.astype(np.float64) * n_bins).astype(np.int64), n_bins - 1)


def color_histograms(X, n_bins=10):
    """Per-channel normalized histograms for a batch; returns ``(n, 3, n_bins)``."""
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    X = check_images(X)
    n = X.shape[0]
    idx = _bin_index(X.reshape(n, -1, 3), n_bins)
    out = np.zeros((n, 3, n_bins), dtype=np.float64)
    for c in range(3):
        flat = idx[:, :, c] + n_bins * np.arange(n)[:, None]
        out[:, c] = np.bincount(flat.ravel(), minlength=n * n_bins).reshape(n, n_bins)
    out /= idx.shape[1]
    return out


def compute_color_histogram(img, L=10):
    """Colour histogram (3 x L) of one image or ImageRecord."""
    pixels = img.pixels if isinstance(img, ImageRecord) else img
    return color_histograms(pixels, L)[0]


def smooth_histogram(h, eps=HIST_EPS):
    """Additive smoothing so every bin is strictly positive; rows still sum to 1."""
    h = np.asarray(h)
    return (h + eps) / (1.0 + h.shape[-1] * eps)


class ColorHistogramTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping images to flattened RGB histograms."""

    def __init__(self, n_bins=10, smoothing=0.0):
        self.n_bins = n_bins
        self.smoothing = smoothing

    def fit(self, X, y=None):
        check_images(X)
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        h = color_histograms(X, self.n_bins)
        if self.smoothing:
            h = smooth_histogram(h, self.smoothing)
        return h.reshape(len(h), -1)


def crop_patch_pair(img, P, rng):
    """Two independent uniform crops of side ``P`` from the same image."""
    pixels = img.pixels if isinstance(img, ImageRecord) else np.asarray(img)
    parent_id = img.id if isinstance(img, ImageRecord) else ""
    H, W = pixels.shape[:2]
    if P > H or P > W or P < 1:
        raise ValueError(f"patch side {P} does not fit a {H}x{W} image")
    rng = check_random_state(rng)
    offsets = rng.integers(0, [H - P + 1, W - P + 1], size=(2, 2))
    crops = [pixels[r:r + P, c:c + P].copy() for r, c in offsets]
    return PatchPair(
        anchor=crops[0],
        positive=crops[1],
        parent_id=parent_id,
        anchor_offset=tuple(int(v) for v in offsets[0]),
        positive_offset=tuple(int(v) for v in offsets[1]),
    )


def random_patch_pairs(X, P, rng):
    """Vectorized crop_patch_pair over a batch; returns ``(2n, P, P, 3)``.

    Row ``2i`` and ``2i + 1`` are the two crops of image ``i``.
    """
    n, H, W, _ = X.shape
    if P > H:
        raise ValueError(f"patch side {P} does not fit a {H}x{W} image")
    offsets = rng.integers(0, H - P + 1, size=(n, 2, 2))
    out = np.empty((2 * n, P, P, 3), dtype=X.dtype)
    for i in range(n):
        for k in range(2):
            r, c = offsets[i, k]
            out[2 * i + k] = X[i, r:r + P, c:c + P]
    return out


def downsampled_mad(records_or_pixels, size=16):
    """All-pairs mean absolute pixel difference after box-downsampling to ``size``."""
    X = (stack_pixels(records_or_pixels) if isinstance(records_or_pixels, list)
         else np.asarray(records_or_pixels, dtype=np.float32))
    n, H = X.shape[0], X.shape[1]
    if H % size == 0:
        k = H // size
        small = X.reshape(n, size, k, size, k, 3).mean(axis=(2, 4))
    else:
        small = np.stack([
            np.asarray(Image.fromarray(np.uint8(np.rint(x * 255))).resize((size, size), Image.BOX),
                       dtype=np.float32) / 255.0
            for x in X
        ])
    flat = small.reshape(n, -1).astype(np.float64)
    D = np.zeros((n, n))
    for i in range(n):
        D[i] = np.abs(flat - flat[i]).mean(axis=1)
    return D


def mean_abs_distance(a, b, size=16):
    """Default perceptual distance between two images or records."""
    pa = a.pixels if isinstance(a, ImageRecord) else a
    pb = b.pixels if isinstance(b, ImageRecord) else b
    return float(downsampled_mad(np.stack([pa, pb]), size)[0, 1])


def build_similarity_graph(records, dist=None, threshold=0.02):
    """Undirected graph over record ids with an edge iff ``dist < threshold``.

    ``dist=None`` uses the downsampled mean-absolute-difference metric and is
    vectorized; any other callable is evaluated on every unordered pair.
    """
    G = nx.Graph()
    ids = [r.id for r in records]
    G.add_nodes_from(ids)
    n = len(records)
    if n < 2:
        return G
    if dist is None:
        D = downsampled_mad(records)
        ii, jj = np.nonzero(np.triu(D < threshold, k=1))
        G.add_edges_from((ids[i], ids[j]) for i, j in zip(ii, jj))
        return G
    for i in range(n):
        for j in range(i + 1, n):
            if dist(records[i], records[j]) < threshold:
                G.add_edge(ids[i], ids[j])
    return G


def split_dataset(graph, ratio=0.8, rng=0):
    """Assign whole connected components to train/test, largest first.

    Each component goes to whichever side is further below its target size;
    ties between equal-sized components are broken by the seeded shuffle.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    rng = check_random_state(rng)
    components = [sorted(c) for c in nx.connected_components(graph)]
    n = graph.number_of_nodes()
    if n == 0:
        raise SplitError("cannot split: empty corpus")
    if len(components) == 1:
        raise SplitError("cannot split: corpus is one duplicate cluster")
    components.sort()
    order = rng.permutation(len(components))
    components = [components[i] for i in order]
    components.sort(key=len, reverse=True)  # stable: shuffled order breaks ties

    target_train = ratio * n
    target_test = n - target_train
    train, test = [], []
    for comp in components:
        need_train = target_train - len(train)
        need_test = target_test - len(test)
        if need_train >= need_test:
            train.extend(comp)
        else:
            test.extend(comp)
    if not test:
        # smallest component moves over so both sides are non-empty
        smallest = min(components, key=len)
        train = [i for i in train if i not in set(smallest)]
        test = list(smallest)
    manifest = SplitManifest(train_ids=sorted(train), test_ids=sorted(test), ratio=ratio)
    if abs(manifest.realized_ratio - ratio) > 0.05:
        warnings.warn(
            f"realized train fraction {manifest.realized_ratio:.3f} is more than 0.05 "
            f"from target {ratio}; components are too coarse",
            RuntimeWarning,
            stacklevel=2,
        )
    return manifest


class DuplicateSafeSplitter(BaseEstimator):
    """Leakage-free train/test splitter over a list of ImageRecords.

    Near-duplicates (distance below ``threshold``) always land on the same side.
    """

    def __init__(self, ratio=0.8, threshold=0.02, distance=None, random_state=0):
        self.ratio = ratio
        self.threshold = threshold
        self.distance = distance
        self.random_state = random_state

    def fit(self, records, y=None):
        self.graph_ = build_similarity_graph(records, self.distance, self.threshold)
        self.manifest_ = split_dataset(self.graph_, self.ratio, self.random_state)
        self.manifest_.threshold = self.threshold
        self.manifest_.seed = self.random_state if isinstance(self.random_state, int) else 0
        if records:
            self.manifest_.domain = records[0].domain
        return self

    def split(self, records):
        train_ids = set(self.manifest_.train_ids)
        train = [r for r in records if r.id in train_ids]
        test = [r for r in records if r.id not in train_ids]
        return train, test


def tile_images(images, n_cols):
    """Arrange ``(n, R, R, 3)`` images into a grid with ``n_cols`` columns."""
    images = np.asarray(images)
    n, R = images.shape[0], images.shape[1]
    n_rows = -(-n // n_cols)
    grid = np.ones((n_rows * R, n_cols * R, 3), dtype=np.float32)
    for k, img in enumerate(images):
        r, c = divmod(k, n_cols)
        grid[r * R:(r + 1) * R, c * R:(c + 1) * R] = img
    return grid


def tile_pairs(inputs, outputs):
    """Input|output side-by-side rows, one pair per row."""
    rows = np.stack([np.asarray(inputs), np.asarray(outputs)], axis=1).reshape(-1, *np.asarray(inputs).shape[1:])
    return tile_images(rows, 2)
