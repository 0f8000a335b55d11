"""Synthetic stylized data, non-IID partitioning, Sobel filtering,
augmentations, and IDX-file ingestion.

Content classes are procedural glyphs rendered identically across styles;
each style id maps to a fixed pixel-level transform family (polarity,
background noise level, channel gains, stroke dilation), so style is
statistically identifiable from raw pixels. Everything here is a pure
function of its inputs and seeds.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNELS = 3

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    content_label: int
    style_id: int


@dataclass
class StyleDataset:
    """All images of one style domain, with a train/test split."""
    pixels: np.ndarray      # (N, H, W, C)
    labels: np.ndarray      # (N,)
    style_id: int
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(self.pixels[i], int(self.labels[i]), self.style_id)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class DatasetShard:
    """One client's slice of a style dataset."""
    client_id: int
    style_id: int
    pixels: np.ndarray
    labels: np.ndarray
    source_idx: np.ndarray  # indices into the origin StyleDataset
    train_idx: np.ndarray
    test_idx: np.ndarray
    sobel_pixels: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(self.pixels[i], int(self.labels[i]), self.style_id)

    def sobel(self) -> np.ndarray:
        """Cached Sobel version of every image (deterministic)."""
        if self.sobel_pixels is None:
            self.sobel_pixels = np.stack([sobel_filter(p) for p in self.pixels])
        return self.sobel_pixels


@dataclass
class PartitionSpec:
    clients_per_style: int
    samples_per_client: int
    beta: float | None = None  # None -> IID
    seed: int = 0

    def validate(self) -> None:
        if self.clients_per_style < 1:
            raise ValueError("PartitionSpec: clients_per_style must be >= 1")
        if self.samples_per_client < 1:
            raise ValueError("PartitionSpec: samples_per_client must be >= 1")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("PartitionSpec: beta must be positive in non-IID mode")


def rng_from(*keys: int) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of non-negative ints."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0x7FFFFFFF for k in keys]))


# ---------------------------------------------------------------------------
# glyph rendering

_N_GLYPHS = 10


def _glyph_mask(class_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary content mask for a class, with per-instance position/size jitter."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size
    xx = (xx + 0.5) / size
    cy = 0.5 + rng.uniform(-0.08, 0.08)
    cx = 0.5 + rng.uniform(-0.08, 0.08)
    r = 0.28 * (1.0 + rng.uniform(-0.15, 0.15))
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    kind = class_id % _N_GLYPHS

    if kind == 0:    # disk
        m = d < r
    elif kind == 1:  # ring
        m = (d < r) & (d > 0.55 * r)
    elif kind == 2:  # plus
        w = 0.10 * (1.0 + rng.uniform(-0.2, 0.2))
        m = ((np.abs(xx - cx) < w) | (np.abs(yy - cy) < w)) & (d < 1.5 * r)
    elif kind == 3:  # horizontal stripes
        period = max(2, int(size * 0.11))
        m = ((np.arange(size)[:, None] // period) % 2 == 0) & np.ones(size, bool)[None, :]
        m = m & (d < 1.4 * r)
    elif kind == 4:  # square outline
        half = r
        inside = (np.abs(xx - cx) < half) & (np.abs(yy - cy) < half)
        core = (np.abs(xx - cx) < 0.55 * half) & (np.abs(yy - cy) < 0.55 * half)
        m = inside & ~core
    elif kind == 5:  # lower-left triangle
        m = (xx - cx + yy - cy < 0.3 * r) & (d < 1.5 * r) & (yy > cy - r)
    elif kind == 6:  # checkerboard patch
        cell = max(2, int(size * 0.14))
        board = ((np.arange(size)[:, None] // cell) + (np.arange(size)[None, :] // cell)) % 2 == 0
        m = board & (d < 1.3 * r)
    elif kind == 7:  # diagonal cross
        w = 0.09 * (1.0 + rng.uniform(-0.2, 0.2))
        m = ((np.abs((xx - cx) - (yy - cy)) < w) | (np.abs((xx - cx) + (yy - cy)) < w)) & (d < 1.5 * r)
    elif kind == 8:  # two dots
        off = 0.55 * r
        d1 = np.sqrt((yy - cy) ** 2 + (xx - (cx - off)) ** 2)
        d2 = np.sqrt((yy - cy) ** 2 + (xx - (cx + off)) ** 2)
        m = (d1 < 0.5 * r) | (d2 < 0.5 * r)
    else:            # vertical bar
        m = (np.abs(xx - cx) < 0.35 * r) & (np.abs(yy - cy) < 1.4 * r)
    return m.astype(np.float64)


# style transform table: (invert polarity, background noise level,
# per-channel gains, dilation steps)
_STYLE_TABLE = [
    (False, 0.02, (1.00, 1.00, 1.00), 0),
    (True,  0.02, (1.00, 1.00, 1.00), 0),
    (False, 0.08, (1.00, 0.45, 0.45), 0),
    (False, 0.15, (0.45, 1.00, 0.45), 0),
    (False, 0.05, (0.50, 0.60, 1.00), 1),
    (True,  0.10, (1.00, 1.00, 0.40), 0),
]


def _style_params(style_id: int):
    if style_id < len(_STYLE_TABLE):
        return _STYLE_TABLE[style_id]
    srng = rng_from(0x5717E, style_id)
    return (
        bool(srng.integers(0, 2)),
        float(srng.uniform(0.02, 0.2)),
        tuple(srng.uniform(0.35, 1.0, size=3)),
        int(srng.integers(0, 2)),
    )


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask
    for _ in range(steps):
        p = np.pad(out, 1, mode="edge")
        out = np.maximum.reduce([
            p[0:-2, 1:-1], p[2:, 1:-1], p[1:-1, 0:-2], p[1:-1, 2:], p[1:-1, 1:-1],
        ])
    return out


def render_sample(class_id: int, instance_seed: int, style_id: int,
                  size: int) -> tuple[np.ndarray, np.ndarray]:
    """One stylized image plus its style-independent content mask.

    The mask depends only on (class_id, instance_seed, size); the style
    transform touches polarity, gains, stroke width and background noise.
    """
    mask = _glyph_mask(class_id, size, rng_from(0xC07E77, class_id, instance_seed))
    invert, noise, gains, dilation = _style_params(style_id)
    drawn = _dilate(mask, dilation) if dilation else mask
    base = 1.0 - drawn if invert else drawn
    nrng = rng_from(0x70153, class_id, instance_seed, style_id)
    img = np.empty((size, size, CHANNELS))
    for c in range(CHANNELS):
        img[:, :, c] = base * gains[c]
    img += noise * nrng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), mask


def _stratified_split(labels: np.ndarray, train_frac: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(train_frac * len(idx)))
        train.extend(idx[:cut])
        test.extend(idx[cut:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def generate_styled_dataset(num_classes: int, num_styles: int, per_class: int,
                            image_size: int, seed: int,
                            train_frac: float = 0.7) -> list[StyleDataset]:
    """Per-style datasets of procedural glyphs, deterministic in the seed."""
    if image_size < 8:
        raise ValueError("generate_styled_dataset: image_size must be >= 8")
    if num_classes < 2 or num_styles < 2:
        raise ValueError("generate_styled_dataset: need at least 2 classes and 2 styles")
    if per_class < 1:
        raise ValueError("generate_styled_dataset: per_class must be >= 1")

    out = []
    for s in range(num_styles):
        n = num_classes * per_class
        pixels = np.empty((n, image_size, image_size, CHANNELS))
        labels = np.empty(n, dtype=np.int64)
        i = 0
        for c in range(num_classes):
            for k in range(per_class):
                instance_seed = int(rng_from(seed, c, k).integers(0, 2**31 - 1))
                pixels[i], _ = render_sample(c, instance_seed, s, image_size)
                labels[i] = c
                i += 1
        split_rng = rng_from(seed, 0x5B117, s)
        train_idx, test_idx = _stratified_split(labels, train_frac, split_rng)
        out.append(StyleDataset(pixels, labels, s, train_idx, test_idx))
    return out


# ---------------------------------------------------------------------------
# partitioning


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that track the proportions."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _draw_class_counts(spec: PartitionSpec, num_classes: int,
                       rng: np.random.Generator) -> np.ndarray:
    if spec.beta is None:
        base = spec.samples_per_client // num_classes
        counts = np.full(num_classes, base, dtype=np.int64)
        counts[: spec.samples_per_client - base * num_classes] += 1
        return counts
    proportions = rng.dirichlet(np.full(num_classes, spec.beta))
    return _largest_remainder_counts(proportions, spec.samples_per_client)


def dirichlet_partition(dataset: StyleDataset, spec: PartitionSpec,
                        first_client_id: int = 0) -> list[DatasetShard]:
    """Split one style dataset's train pool across its clients.

    Per client, class counts come from Dirichlet(beta) proportions rounded by
    largest remainder to exactly samples_per_client (IID mode: equal counts).
    Class pools draw without replacement until exhausted, then duplicate.
    """
    spec.validate()
    num_classes = dataset.num_classes
    pool_rng = rng_from(spec.seed, 0xD1A1, dataset.style_id)
    pools = {}
    for c in range(num_classes):
        idx = dataset.train_idx[dataset.labels[dataset.train_idx] == c]
        if len(idx) == 0:
            raise ValueError(f"dirichlet_partition: class {c} missing from style {dataset.style_id}")
        pools[c] = list(idx[pool_rng.permutation(len(idx))])

    shards = []
    for j in range(spec.clients_per_style):
        cid = first_client_id + j
        crng = rng_from(spec.seed, 0xC11E, dataset.style_id, j)
        counts = _draw_class_counts(spec, num_classes, crng)
        chosen: list[int] = []
        for c in range(num_classes):
            take = int(counts[c])
            fresh = pools[c][:take]
            pools[c] = pools[c][take:]
            missing = take - len(fresh)
            if missing > 0:  # duplicate sampling once the pool runs dry
                all_c = dataset.train_idx[dataset.labels[dataset.train_idx] == c]
                fresh = fresh + list(crng.choice(all_c, size=missing, replace=True))
            chosen.extend(int(i) for i in fresh)
        source = np.array(chosen, dtype=np.int64)
        order = crng.permutation(len(source))
        source = source[order]
        labels = dataset.labels[source]
        split_rng = rng_from(spec.seed, 0x5B117C, cid)
        perm = split_rng.permutation(len(source))
        cut = int(round(0.7 * len(source)))
        shards.append(DatasetShard(
            client_id=cid,
            style_id=dataset.style_id,
            pixels=dataset.pixels[source].copy(),
            labels=labels.copy(),
            source_idx=source,
            train_idx=np.sort(perm[:cut]),
            test_idx=np.sort(perm[cut:]),
        ))
    return shards


def partition_styled(datasets: list[StyleDataset], spec: PartitionSpec) -> list[DatasetShard]:
    """Partition every style dataset; client ids are style-major."""
    shards = []
    for s, ds in enumerate(datasets):
        shards.extend(dirichlet_partition(ds, spec, first_client_id=s * spec.clients_per_style))
    return shards


# ---------------------------------------------------------------------------
# Sobel + augmentations

_SOBEL_GX = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_GY = _SOBEL_GX.T


def sobel_filter(image: np.ndarray) -> np.ndarray:
    """Gradient-magnitude edge image, rescaled to [0, 1] by its max.

    Grayscale conversion is the channel mean; padding replicates edges; a
    constant image maps to all zeros; output channels are replicated so the
    result has the same shape as the input.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] < 3 or image.shape[1] < 3:
        raise ValueError(f"sobel_filter: need an (H>=3, W>=3, C) image, got {image.shape}")
    gray = image.mean(axis=2)
    p = np.pad(gray, 1, mode="edge")
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    for dy in range(3):
        for dx in range(3):
            win = p[dy:dy + gray.shape[0], dx:dx + gray.shape[1]]
            gx += _SOBEL_GX[dy, dx] * win
            gy += _SOBEL_GY[dy, dx] * win
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 1e-12:  # below: accumulation residue on a constant image
        mag = mag / peak
    else:
        mag = np.zeros_like(mag)
    return np.repeat(mag[:, :, None], image.shape[2], axis=2)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """SimCLR-style view: random resized crop (area 0.6-1.0), horizontal
    flip (p=0.5), per-channel gain jitter (+-0.3), grayscale (p=0.2)."""
    h, w, _ = image.shape
    scale = float(np.sqrt(rng.uniform(0.6, 1.0)))
    ch = max(1, int(round(h * scale)))
    cw = max(1, int(round(w * scale)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    crop = image[y0:y0 + ch, x0:x0 + cw]
    if ch == h and cw == w:
        out = crop.copy()
    else:  # nearest-neighbour resize back to (h, w)
        yi = (np.arange(h) * ch) // h
        xi = (np.arange(w) * cw) // w
        out = crop[yi][:, xi].copy()
    if rng.random() < 0.5:
        out = out[:, ::-1].copy()
    gains = 1.0 + rng.uniform(-0.3, 0.3, size=3)
    out = np.clip(out * gains[None, None, :], 0.0, 1.0)
    if rng.random() < 0.2:
        out = np.repeat(out.mean(axis=2, keepdims=True), out.shape[2], axis=2)
    return out


def augment_batch(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, rng) for img in pixels])


# ---------------------------------------------------------------------------
# IDX ingestion


def _read_exact(buf: bytes, offset: int, count: int, path: str) -> bytes:
    if offset + count > len(buf):
        raise ValueError(f"{path}: truncated at byte {len(buf)}, needed {offset + count}")
    return buf[offset:offset + count]


def load_idx_images(path: str | Path) -> np.ndarray:
    """(N, H, W, 3) float64 pixels in [0, 1] from a big-endian IDX file."""
    buf = Path(path).read_bytes()
    magic = struct.unpack(">I", _read_exact(buf, 0, 4, str(path)))[0]
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic:08x} at byte 0 (expected 0x{IDX_IMAGES_MAGIC:08x})")
    n, h, w = struct.unpack(">III", _read_exact(buf, 4, 12, str(path)))
    raw = _read_exact(buf, 16, n * h * w, str(path))
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w).astype(np.float64) / 255.0
    return np.repeat(arr[:, :, :, None], CHANNELS, axis=3)


def load_idx_labels(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic = struct.unpack(">I", _read_exact(buf, 0, 4, str(path)))[0]
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic:08x} at byte 0 (expected 0x{IDX_LABELS_MAGIC:08x})")
    n = struct.unpack(">I", _read_exact(buf, 4, 4, str(path)))[0]
    raw = _read_exact(buf, 8, n, str(path))
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(images_path: str | Path, labels_path: str | Path,
                     style_id: int, seed: int = 0,
                     train_frac: float = 0.7) -> StyleDataset:
    pixels = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(labels) != pixels.shape[0]:
        raise ValueError(
            f"{labels_path}: {len(labels)} labels for {pixels.shape[0]} images")
    train_idx, test_idx = _stratified_split(labels, train_frac, rng_from(seed, 0x1D8, style_id))
    return StyleDataset(pixels, labels, style_id, train_idx, test_idx)


# ---------------------------------------------------------------------------
# raw export (little-endian f64 blobs + JSON manifest)


def save_datasets(datasets: list[StyleDataset], out_dir: str | Path, seed: int | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "fedstyle-dataset", "version": 1, "seed": seed, "styles": []}
    for ds in datasets:
        blob = f"style_{ds.style_id}.f64"
        (out / blob).write_bytes(ds.pixels.astype("<f8").tobytes())
        manifest["styles"].append({
            "style_id": ds.style_id,
            "blob": blob,
            "shape": list(ds.pixels.shape),
            "labels": ds.labels.tolist(),
            "train_idx": ds.train_idx.tolist(),
            "test_idx": ds.test_idx.tolist(),
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_datasets(in_dir: str | Path) -> list[StyleDataset]:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for entry in manifest["styles"]:
        shape = tuple(entry["shape"])
        pixels = np.frombuffer((root / entry["blob"]).read_bytes(), dtype="<f8").reshape(shape)
        out.append(StyleDataset(
            pixels=pixels.astype(np.float64),
            labels=np.array(entry["labels"], dtype=np.int64),
            style_id=int(entry["style_id"]),
            train_idx=np.array(entry["train_idx"], dtype=np.int64),
            test_idx=np.array(entry["test_idx"], dtype=np.int64),
        ))
    return out
