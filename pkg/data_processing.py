import os
import hashlib
import logging
import warnings
import concurrent.futures
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from errors import ArgumentError, DataLoadError, FormatError, StratificationWarning
from tensor_core import DTYPE, Tensor, load_tensor, make_rng, save_tensor

logger = logging.getLogger(__name__)

LABELS_FILE = "labels.csv"
LABEL_COLUMNS = ["id", "filename", "label"]

# Synthetic image parameters
SYNTH_BACKGROUND_MEAN = 0.3
SYNTH_BACKGROUND_STD = 0.1
SYNTH_DISK_INTENSITY = 0.9
SYNTH_RADIUS_RANGE = (4.0, 10.0)


# ==========================
# DATASET TYPES
# ==========================
@dataclass
class LabeledDataset:
    """Images [N,1,H,W] in [0,1], labels (1 = cancer) and unique ids"""
    images: Tensor
    labels: np.ndarray
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.size:
            raise ArgumentError(f"images {self.images.shape} do not match {self.labels.size} labels")
        if len(self.ids) != self.labels.size:
            raise ArgumentError(f"{len(self.ids)} ids for {self.labels.size} samples")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ArgumentError("labels must be 0 or 1")
        if len(set(self.ids)) != len(self.ids):
            raise ArgumentError("sample ids must be unique")

    def __len__(self):
        return int(self.labels.size)

    @property
    def n_cancer(self) -> int:
        return int(self.labels.sum())

    @property
    def n_cancer_free(self) -> int:
        return len(self) - self.n_cancer

    @property
    def image_hw(self) -> Tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            ids=[self.ids[i] for i in indices],
        )


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.50
    val_frac: float = 0.25
    test_frac: float = 0.25
    seed: int = 0

    def validate(self) -> "SplitSpec":
        fractions = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fractions):
            raise ArgumentError(f"split fractions must be positive, got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ArgumentError(f"split fractions must sum to 1, got {sum(fractions)}")
        return self


def get_data_path(dir_path):
    """Create the directory if needed and return it"""
    if not dir_path:
        raise ArgumentError("a data directory is required")
    os.makedirs(dir_path, exist_ok=True)
    return dir_path


# ==========================
# IMAGES
# ==========================
def load_image(path) -> Tensor:
    """Read a grayscale 8- or 16-bit PNG as a [1,H,W] tensor in [0,1]"""
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            pixels = np.array(img)
    except FileNotFoundError as e:
        raise DataLoadError(f"image file not found: {path}") from e
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DataLoadError(f"cannot decode image {path}: {e}") from e

    if mode == "L":
        peak = 255.0
    elif mode == "1":
        peak = 1.0
    elif mode.startswith("I;16") or mode == "I":
        peak = 65535.0
    else:
        raise DataLoadError(f"{path}: expected a grayscale PNG, got mode {mode}")
    image = (pixels.astype(np.float64) / peak).astype(DTYPE)
    return image.reshape(1, *image.shape[-2:])


def save_image(image: Tensor, path):
    """Write a [1,H,W] tensor in [0,1] as a 16-bit grayscale PNG"""
    levels = np.round(np.clip(image[0].astype(np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(levels).save(path, format="PNG")


def _sample_positions(in_extent: int, out_extent: int) -> np.ndarray:
    if out_extent == 1:
        return np.array([(in_extent - 1) / 2.0])
    return np.arange(out_extent, dtype=np.float64) * ((in_extent - 1) / (out_extent - 1))


def rescale(image: Tensor, target: Tuple[int, int] = (120, 120)) -> Tensor:
    """Bilinear resample with corner-aligned sampling.

    Output pixel (i, j) samples source position
    (i * (H-1)/(H'-1), j * (W-1)/(W'-1)) and blends the four neighbours
    v00 (1-fy)(1-fx) + v01 (1-fy) fx + v10 fy (1-fx) + v11 fy fx.
    A single output row/column samples the source centre.
    """
    channels, height, width = image.shape
    out_h, out_w = target
    if (height, width) == (out_h, out_w):
        return image.copy()

    ys = _sample_positions(height, out_h)
    xs = _sample_positions(width, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    src = image.astype(np.float64)
    out = np.empty((channels, out_h, out_w), dtype=np.float64)
    for c in range(channels):
        plane = src[c]
        top = plane[y0][:, x0] * (1 - fx) + plane[y0][:, x1] * fx
        bottom = plane[y1][:, x0] * (1 - fx) + plane[y1][:, x1] * fx
        out[c] = top * (1 - fy) + bottom * fy
    out = np.clip(out, src.min(), src.max())
    return out.astype(image.dtype)


# ==========================
# LOADING
# ==========================
def _read_labels(dir_path) -> pd.DataFrame:
    labels_path = os.path.join(dir_path, LABELS_FILE)
    if not os.path.exists(labels_path):
        raise DataLoadError(f"labels file not found: {labels_path}")
    try:
        frame = pd.read_csv(labels_path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataLoadError(f"cannot parse {labels_path}: {e}") from e
    if list(frame.columns) != LABEL_COLUMNS:
        raise DataLoadError(f"{labels_path}: header must be {','.join(LABEL_COLUMNS)}, got {','.join(frame.columns)}")

    seen = set()
    for row_number, row in enumerate(frame.itertuples(index=False), start=1):
        where = f"{labels_path} row {row_number} (id={row.id!r})"
        if not row.id.strip() or not row.filename.strip():
            raise DataLoadError(f"{where}: id and filename must be non-empty")
        if row.label.strip() not in ("0", "1"):
            raise DataLoadError(f"{where}: label {row.label!r} is not 0 or 1")
        if row.id in seen:
            raise DataLoadError(f"{where}: duplicate id")
        seen.add(row.id)
    return frame


def _dataset_digest(dir_path, filenames) -> str:
    """SHA-256 over labels.csv and every listed image, in CSV order"""
    digest = hashlib.sha256()
    for name in [LABELS_FILE, *filenames]:
        with open(os.path.join(dir_path, name), "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()


def load_dataset(dir_path, target_hw: Optional[Tuple[int, int]] = None,
                 cache_dir=None) -> LabeledDataset:
    """Load labels.csv and its PNG images; sample order is CSV order"""
    frame = _read_labels(dir_path)
    if frame.empty:
        raise DataLoadError(f"{os.path.join(dir_path, LABELS_FILE)} lists no images")

    cache_path = None
    if cache_dir and target_hw:
        try:
            digest = _dataset_digest(dir_path, frame["filename"])[:16]
        except FileNotFoundError as e:
            raise DataLoadError(f"image file not found: {e.filename}") from e
        cache_path = os.path.join(cache_dir, f"{digest}_{target_hw[0]}x{target_hw[1]}")
        if os.path.exists(cache_path + ".tnsr"):
            logger.info(f"📦 Using dataset cache {cache_path}.tnsr")
            return load_dataset_cache(cache_path)

    paths = [os.path.join(dir_path, name) for name in frame["filename"]]
    logger.info(f"📄 Found {len(paths)} image(s) to load from {dir_path}")

    def load_single_image(path):
        image = load_image(path)
        return rescale(image, target_hw) if target_hw else image

    # Use thread pool for parallel loading; map keeps CSV order
    with concurrent.futures.ThreadPoolExecutor(max_workers=min(4, len(paths))) as executor:
        images = list(executor.map(load_single_image, paths))

    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise DataLoadError(f"images in {dir_path} differ in size {sorted(shapes)}; pass a target size")

    dataset = LabeledDataset(
        images=np.stack(images).astype(DTYPE),
        labels=frame["label"].str.strip().astype(int).to_numpy(),
        ids=list(frame["id"]),
    )
    logger.info(f"✅ Loaded {len(dataset)} images ({dataset.n_cancer} cancer, {dataset.n_cancer_free} cancer-free)")
    if cache_path:
        os.makedirs(cache_dir, exist_ok=True)
        save_dataset_cache(dataset, cache_path)
    return dataset


def write_dataset(dataset: LabeledDataset, dir_path):
    """Write PNG files plus labels.csv in the layout load_dataset reads"""
    get_data_path(dir_path)
    filenames = [f"{sample_id}.png" for sample_id in dataset.ids]
    for image, filename in zip(dataset.images, filenames):
        save_image(image, os.path.join(dir_path, filename))
    frame = pd.DataFrame({"id": dataset.ids, "filename": filenames, "label": dataset.labels})
    frame.to_csv(os.path.join(dir_path, LABELS_FILE), index=False, lineterminator="\n", encoding="utf-8")
    logger.info(f"✅ Wrote {len(dataset)} images to {dir_path}")


def save_dataset_cache(dataset: LabeledDataset, base_path):
    """Images go to <base>.tnsr, ids and labels to <base>.csv"""
    save_tensor(base_path + ".tnsr", dataset.images)
    pd.DataFrame({"id": dataset.ids, "label": dataset.labels}).to_csv(
        base_path + ".csv", index=False, lineterminator="\n")


def load_dataset_cache(base_path) -> LabeledDataset:
    images = load_tensor(base_path + ".tnsr")
    frame = pd.read_csv(base_path + ".csv", dtype={"id": str, "label": int}, keep_default_na=False)
    if images.ndim != 4 or images.shape[0] != len(frame):
        raise FormatError(f"dataset cache {base_path} is inconsistent", field="images")
    return LabeledDataset(images=images, labels=frame["label"].to_numpy(), ids=list(frame["id"]))


# ==========================
# SPLITTING
# ==========================
def _split_sizes(n: int, spec: SplitSpec) -> List[int]:
    first_cut = int(np.floor(spec.train_frac * n))
    second_cut = int(np.floor((spec.train_frac + spec.val_frac) * n))
    return [first_cut, second_cut - first_cut, n - second_cut]


def _allocate(class_count: int, sizes: List[int], total: int) -> List[int]:
    """Largest-remainder share of one class across the splits"""
    ideal = [size * class_count / total for size in sizes]
    shares = [int(np.floor(v)) for v in ideal]
    remainders = sorted(range(len(sizes)), key=lambda k: (-(ideal[k] - shares[k]), k))
    for k in remainders[:class_count - sum(shares)]:
        shares[k] += 1
    return shares


def split(dataset: LabeledDataset, spec: SplitSpec = SplitSpec()):
    """Stratified, seeded train/validation/test partition.

    Split sizes are floor(train_frac N), then up to floor((train+val) N),
    then the rest. Each class is shuffled and dealt across the splits in
    proportion to the split sizes, so every split's class ratio is within
    one sample of the global ratio. Returns (train, val, test).
    """
    spec.validate()
    n = len(dataset)
    if n < 4:
        raise ArgumentError(f"need at least 4 samples to split, got {n}")
    rng = make_rng(spec.seed)
    sizes = _split_sizes(n, spec)

    parts = [[] for _ in sizes]
    for label in (1, 0):
        members = np.flatnonzero(dataset.labels == label)
        members = members[rng.permutation(members.size)]
        shares = _allocate(members.size, sizes, n) if label == 1 else [
            size - len(part) for size, part in zip(sizes, parts)]
        offset = 0
        for part, share in zip(parts, shares):
            part.extend(members[offset:offset + share].tolist())
            offset += share

    names = ("train", "validation", "test")
    result = []
    for name, part in zip(names, parts):
        order = np.asarray(part, dtype=np.int64)[rng.permutation(len(part))]
        subset = dataset.subset(order)
        if len(subset) and (subset.n_cancer == 0 or subset.n_cancer_free == 0):
            warnings.warn(f"{name} split has {subset.n_cancer} cancer and "
                          f"{subset.n_cancer_free} cancer-free samples", StratificationWarning)
        result.append(subset)
    return tuple(result)


# ==========================
# SYNTHETIC DATA
# ==========================
def generate_synthetic(n: int, image_size: Tuple[int, int] = (120, 120), seed: int = 0) -> LabeledDataset:
    """Class-balanced blob task: noise only vs. noise plus one bright disk"""
    if n < 2 or n % 2:
        raise ArgumentError(f"synthetic dataset size must be even and >= 2, got {n}")
    height, width = image_size
    if min(height, width) < 3:
        raise ArgumentError(f"synthetic images must be at least 3x3, got {image_size}")
    rng = make_rng(seed)
    labels = rng.permutation(np.repeat([1, 0], n // 2))

    max_radius = min(SYNTH_RADIUS_RANGE[1], (min(height, width) - 1) / 2.0)
    min_radius = min(SYNTH_RADIUS_RANGE[0], max_radius)
    yy, xx = np.mgrid[0:height, 0:width]
    images = np.empty((n, 1, height, width), dtype=DTYPE)
    for index, label in enumerate(labels):
        image = rng.normal(SYNTH_BACKGROUND_MEAN, SYNTH_BACKGROUND_STD, size=(height, width))
        if label == 1:
            radius = rng.uniform(min_radius, max_radius)
            cy = rng.uniform(radius, height - 1 - radius)
            cx = rng.uniform(radius, width - 1 - radius)
            image[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = SYNTH_DISK_INTENSITY
        images[index, 0] = np.clip(image, 0.0, 1.0)

    ids = [f"synth_{index:05d}" for index in range(n)]
    return LabeledDataset(images=images, labels=labels, ids=ids)
