"""Dataset ingestion, augmentation and the synthetic RGB-D generator.

The on-disk layout matches the common RGB-D nutrition corpus shape:
``root/metadata.csv`` (dish_id,calories,mass,fat,carb,protein),
``root/images/{dish_id}_rgb.png`` (8-bit, 3 channel),
``root/images/{dish_id}_depth.png`` (16-bit, 1 channel, linear in [0,1]),
``root/splits/{train,test}.txt`` (one dish_id per line).

The generator renders plates of colored superellipse blobs whose labels
are an analytic function of the rendered height fields, so depth carries
real label signal: RGB shading uses only the normalized blob profile,
while mass scales with absolute blob height, visible solely in depth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .decoder import NUTRIENTS, NutritionVector
from .errors import DataError, ShapeError

RGB_MEAN = np.array([0.485, 0.456, 0.406])
RGB_STD = np.array([0.229, 0.224, 0.225])
# single-channel depth reuses the first RGB pair; the usual per-channel
# constants are undefined for one channel
DEPTH_MEAN = RGB_MEAN[0]
DEPTH_STD = RGB_STD[0]

RESIZE_RATIO = 238.0 / 224.0

PLATE_DEPTH = 0.85
DENSITY = 300.0

# per color class: RGB color and (kcal/g, fat g/g, carb g/g, protein g/g);
# chosen so no two nutrient columns are proportional across classes
COLOR_CLASSES = (
    ((0.85, 0.20, 0.15), (0.90, 0.030, 0.120, 0.050)),
    ((0.20, 0.65, 0.25), (0.35, 0.010, 0.050, 0.030)),
    ((0.90, 0.75, 0.30), (2.50, 0.060, 0.500, 0.080)),
    ((0.55, 0.33, 0.20), (2.00, 0.120, 0.030, 0.220)),
)


@dataclass
class InputPair:
    """One capture: rgb (H, W, 3) and depth (H, W, 1), both float in [0, 1]."""

    rgb: np.ndarray
    depth: np.ndarray


@dataclass
class Sample:
    dish_id: str
    input: InputPair
    label: NutritionVector


@dataclass
class AugmentPolicy:
    """Toggles and probabilities for the preprocessing pipeline."""

    target_size: int = 64
    flip_prob: float = 0.5
    sharpness_prob: float = 0.005
    sharpness_factor: float = 2.0
    autocontrast_prob: float = 0.10
    normalize: bool = True

    @staticmethod
    def train(target_size: int = 64) -> "AugmentPolicy":
        return AugmentPolicy(target_size=target_size)

    @staticmethod
    def eval(target_size: int = 64) -> "AugmentPolicy":
        """Deterministic resize + center crop + normalize only."""
        return AugmentPolicy(target_size=target_size, flip_prob=0.0,
                             sharpness_prob=0.0, autocontrast_prob=0.0)


# ----------------------------------------------------------------------
# image primitives (plain numpy; the data path carries no gradients)
# ----------------------------------------------------------------------
def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centers."""
    h, w = img.shape[:2]

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    rlo, rhi, rf = axis_coords(h, out_h)
    clo, chi, cf = axis_coords(w, out_w)
    top = img[rlo][:, clo] * (1 - cf)[None, :, None] + img[rlo][:, chi] * cf[None, :, None]
    bot = img[rhi][:, clo] * (1 - cf)[None, :, None] + img[rhi][:, chi] * cf[None, :, None]
    return top * (1 - rf)[:, None, None] + bot * rf[:, None, None]


def center_crop(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = img.shape[:2]
    if th > h or tw > w:
        raise ShapeError(f"crop {th}x{tw} larger than source {h}x{w}")
    oy, ox = (h - th) // 2, (w - tw) // 2
    return img[oy:oy + th, ox:ox + tw]


def flip(img: np.ndarray, axis: str) -> np.ndarray:
    if axis == "horizontal":
        return img[:, ::-1].copy()
    if axis == "vertical":
        return img[::-1, :].copy()
    raise ShapeError(f"unknown flip axis {axis!r}")


def adjust_sharpness(img: np.ndarray, factor: float) -> np.ndarray:
    """Unsharp masking with the classic 3x3 smoothing kernel; border untouched."""
    kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    smooth = np.zeros_like(img)
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    for i in range(3):
        for j in range(3):
            smooth += kernel[i, j] * pad[i:i + h, j:j + w]
    out = img.copy()
    out[1:-1, 1:-1] = smooth[1:-1, 1:-1] + factor * (img - smooth)[1:-1, 1:-1]
    return np.clip(out, 0.0, 1.0)


def auto_contrast(img: np.ndarray) -> np.ndarray:
    """Per-channel linear stretch to the full [0, 1] range."""
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, (img - lo) / span, img)


def normalize_pair(rgb: np.ndarray, depth: np.ndarray) -> tuple:
    return ((rgb - RGB_MEAN) / RGB_STD,
            (depth - DEPTH_MEAN) / DEPTH_STD)


def augment(sample: Sample, rng: np.random.Generator,
            policy: AugmentPolicy) -> Sample:
    """Resize, crop, flip, RGB-only photometrics, then normalization.

    Geometric steps hit RGB and depth identically; sharpness and
    auto-contrast apply to RGB only. Randomness comes solely from ``rng``.
    """
    t = policy.target_size
    rh = rw = int(round(t * RESIZE_RATIO))
    rgb = resize_bilinear(sample.input.rgb, rh, rw)
    depth = resize_bilinear(sample.input.depth, rh, rw)
    rgb = center_crop(rgb, t, t)
    depth = center_crop(depth, t, t)
    if rng.random() < policy.flip_prob:
        axis = "horizontal" if rng.random() < 0.5 else "vertical"
        rgb, depth = flip(rgb, axis), flip(depth, axis)
    if rng.random() < policy.sharpness_prob:
        rgb = adjust_sharpness(rgb, policy.sharpness_factor)
    if rng.random() < policy.autocontrast_prob:
        rgb = auto_contrast(rgb)
    if policy.normalize:
        rgb, depth = normalize_pair(rgb, depth)
    return replace(sample, input=InputPair(rgb=rgb, depth=depth))


# ----------------------------------------------------------------------
# dataset ingestion
# ----------------------------------------------------------------------
def _read_split_ids(path: Path) -> list:
    if not path.exists():
        raise DataError(f"missing split file {path}")
    ids = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    dupes = {d for d in ids if ids.count(d) > 1}
    if dupes:
        raise DataError(f"{path}: duplicate dish ids {sorted(dupes)}")
    return ids


def _read_metadata(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"missing metadata file {path}")
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["dish_id"] + [
                "calories" if n == "calorie" else n for n in NUTRIENTS]:
            raise DataError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric label: {exc}") from exc
            if row[0] in labels:
                raise DataError(f"{path}:{lineno}: duplicate dish_id {row[0]!r}")
            labels[row[0]] = NutritionVector.from_array(values)
    return labels


def _load_image_pair(images_dir: Path, dish_id: str) -> InputPair:
    rgb_path = images_dir / f"{dish_id}_rgb.png"
    depth_path = images_dir / f"{dish_id}_depth.png"
    if not rgb_path.exists() or not depth_path.exists():
        raise DataError(f"missing image(s) for dish {dish_id!r} under {images_dir}")
    rgb = np.asarray(Image.open(rgb_path))
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DataError(f"{rgb_path}: expected 8-bit 3-channel png")
    depth = np.asarray(Image.open(depth_path))
    if depth.ndim != 2:
        raise DataError(f"{depth_path}: expected 1-channel png")
    return InputPair(
        rgb=rgb.astype(np.float64) / 255.0,
        depth=(depth.astype(np.float64) / 65535.0)[:, :, None],
    )


def load_dataset(root_dir, split: str) -> list:
    """Load one split; validates split disjointness and label sanity."""
    root = Path(root_dir)
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}")
    labels = _read_metadata(root / "metadata.csv")
    train_ids = _read_split_ids(root / "splits" / "train.txt")
    test_ids = _read_split_ids(root / "splits" / "test.txt")
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise DataError(f"dish ids present in both splits: {sorted(overlap)[:5]}")
    samples = []
    for dish_id in (train_ids if split == "train" else test_ids):
        if dish_id not in labels:
            raise DataError(f"dish {dish_id!r} listed in split but absent from metadata")
        label = labels[dish_id]
        if np.any(label.as_array() < 0):
            raise DataError(f"dish {dish_id!r}: negative ground-truth label")
        samples.append(Sample(dish_id=dish_id,
                              input=_load_image_pair(root / "images", dish_id),
                              label=label))
    return samples


# ----------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------
@dataclass
class Blob:
    cx: float  # center, pixels
    cy: float
    ax: float  # semi-axes, pixels
    ay: float
    power: float  # superellipse exponent
    height: float  # peak height, depth units
    color_class: int


def blob_profile(blob: Blob, size: int) -> np.ndarray:
    """Normalized height profile in [0, 1]: relu(1 - |dx/ax|^p - |dy/ay|^p)."""
    ys, xs = np.mgrid[0:size, 0:size]
    s = (np.abs((xs - blob.cx) / blob.ax) ** blob.power
         + np.abs((ys - blob.cy) / blob.ay) ** blob.power)
    return np.maximum(0.0, 1.0 - s)


def blob_mass(blob: Blob, size: int) -> float:
    """Analytic mass: density times the discrete height-field volume."""
    return DENSITY * blob.height * blob_profile(blob, size).sum() / (size * size)


def scene_label(blobs, size: int) -> NutritionVector:
    totals = np.zeros(5)
    for b in blobs:
        m = blob_mass(b, size)
        cal, fat, carb, protein = COLOR_CLASSES[b.color_class][1]
        totals += m * np.array([cal, 1.0, fat, carb, protein])
    return NutritionVector.from_array(totals)


def _sample_blobs(rng: np.random.Generator, size: int) -> list:
    blobs = []
    count = int(rng.integers(1, 4))
    # narrow area spread, wide height spread: most mass variance lives in
    # the height field, so depth carries label signal RGB cannot
    for _ in range(count):
        for _attempt in range(60):
            ax = rng.uniform(0.10, 0.16) * size
            ay = rng.uniform(0.10, 0.16) * size
            cx = rng.uniform(0.22, 0.78) * size
            cy = rng.uniform(0.22, 0.78) * size
            power = rng.uniform(1.5, 3.0)
            height = rng.uniform(0.04, 0.40)
            color_class = int(rng.integers(0, len(COLOR_CLASSES)))
            candidate = Blob(cx, cy, ax, ay, power, height, color_class)
            radius = max(ax, ay)
            if all(np.hypot(b.cx - cx, b.cy - cy) > radius + max(b.ax, b.ay) + 2
                   for b in blobs):
                blobs.append(candidate)
                break
    return blobs


def render_scene(rng: np.random.Generator, size: int) -> tuple:
    """Render one scene; returns (rgb, depth, label, blobs) pre-quantization."""
    blobs = _sample_blobs(rng, size)
    ys, xs = np.mgrid[0:size, 0:size]
    r2 = (((xs / size) - 0.5) ** 2 + ((ys / size) - 0.5) ** 2) * 4.0
    rgb = np.tile(np.array([0.82, 0.80, 0.76]), (size, size, 1)) * (1.0 - 0.12 * r2)[:, :, None]
    height = np.zeros((size, size))
    for b in blobs:
        prof = blob_profile(b, size)
        inside = prof > 0.0
        color = np.array(COLOR_CLASSES[b.color_class][0])
        # shading uses the normalized profile only, so absolute height
        # (the mass signal) is invisible in RGB and lives in depth alone
        shade = (0.5 + 0.5 * prof[inside])[:, None] * color[None, :]
        rgb[inside] = shade
        height[inside] = b.height * prof[inside]
    depth = (PLATE_DEPTH - height)[:, :, None]
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb, depth, scene_label(blobs, size), blobs


def _label_str(v: float) -> str:
    """Shortest positional decimal that parses back to the same float,
    padded to the two decimals the metadata format promises."""
    s = np.format_float_positional(float(v), unique=True, trim="0")
    whole, _, frac = s.partition(".")
    return f"{whole}.{frac.ljust(2, '0')}"


def synth_generate(n: int, seed: int, out_dir, image_size: int = 64) -> dict:
    """Write an n-sample synthetic dataset with an 80/20 split; returns a summary."""
    if n < 1:
        raise DataError(f"need at least one sample, got n={n}")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        dish_id = f"dish_{seed:05d}_{i:05d}"
        rgb, depth, label, _ = render_scene(rng, image_size)
        rgb8 = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
        depth16 = np.clip(np.round(depth[:, :, 0] * 65535.0), 0, 65535).astype("<u2")
        Image.fromarray(rgb8).save(root / "images" / f"{dish_id}_rgb.png")
        Image.fromarray(depth16).save(root / "images" / f"{dish_id}_depth.png")
        rows.append((dish_id, label))

    order = rng.permutation(n)
    n_train = max(1, int(round(n * 0.8))) if n > 1 else 1
    train_ids = [rows[i][0] for i in sorted(order[:n_train])]
    test_ids = [rows[i][0] for i in sorted(order[n_train:])]
    with open(root / "metadata.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dish_id", "calories", "mass", "fat", "carb", "protein"])
        for dish_id, label in rows:
            writer.writerow([dish_id] + [_label_str(v) for v in label.as_array()])
    (root / "splits" / "train.txt").write_text("".join(f"{d}\n" for d in train_ids))
    (root / "splits" / "test.txt").write_text("".join(f"{d}\n" for d in test_ids))

    labels = np.stack([label.as_array() for _, label in rows])
    return {
        "n": n,
        "n_train": len(train_ids),
        "n_test": len(test_ids),
        "label_min": {name: float(v) for name, v in zip(NUTRIENTS, labels.min(axis=0))},
        "label_max": {name: float(v) for name, v in zip(NUTRIENTS, labels.max(axis=0))},
    }
