"""Per-expression motion masks from aligned expressive/neutral pairs.

A class mask is the histogram-equalized mean absolute difference between
aligned expressive faces and their neutral counterparts. Masks live on the
8-bit grid, so the PNG bank format round-trips exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import DatasetManifest, LandmarkSet, align_face, read_image, reference_landmarks
from .exceptions import CoverageError, MappingError, ShapeError, ValidationError

LEVELS = 256


def _as_gray(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D gray image, got shape {arr.shape}")
    return arr


def mean_abs_diff(pairs: Sequence) -> np.ndarray:
    """Per-pixel mean of ``|expressive - neutral|`` over ``pairs``.

    Values at each pixel are sorted before being summed sequentially, so the
    result is bit-identical under any reordering of ``pairs``.
    """
    if len(pairs) == 0:
        raise ValidationError("mean_abs_diff needs at least one pair")
    shape = None
    diffs = []
    for expressive, neutral in pairs:
        e, n = _as_gray(expressive), _as_gray(neutral)
        if e.shape != n.shape or (shape is not None and e.shape != shape):
            raise ShapeError("all images must share one shape")
        shape = e.shape
        diffs.append(np.abs(e - n))
    stacked = np.sort(np.stack(diffs), axis=0)
    acc = np.zeros(shape, dtype=np.float64)
    for layer in stacked:
        acc += layer
    return acc / len(diffs)


def quantize(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] to integer levels 0..255, rounding half up."""
    return np.floor(np.asarray(image, dtype=np.float64) * (LEVELS - 1) + 0.5).astype(np.int64)


def equalize_histogram(image) -> np.ndarray:
    """Histogram-equalize a [0, 1] image on a 256-level grid.

    Each level ``v`` maps to ``(cdf(v) - cdf_min) / (N - cdf_min)``, rounded to the
    nearest level. A constant image maps to all zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        return img.copy()
    if not np.all(np.isfinite(img)) or img.min() < -1e-12 or img.max() > 1 + 1e-12:
        raise ValidationError("equalize_histogram expects values in [0, 1]")
    levels = np.clip(quantize(np.clip(img, 0.0, 1.0)), 0, LEVELS - 1)
    cdf = np.cumsum(np.bincount(levels.ravel(), minlength=LEVELS))
    cdf_min = int(cdf[levels.min()])
    span = img.size - cdf_min
    if span == 0:
        return np.zeros_like(img)
    # exact round-half-up of 255 * (cdf - cdf_min) / span in integers
    num = 2 * (LEVELS - 1) * (cdf[levels] - cdf_min) + span
    out = num // (2 * span)
    return out.astype(np.float64) / (LEVELS - 1)


@dataclass
class MotionMask:
    values: np.ndarray
    class_index: int
    source_count: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError("mask values must be 2-D")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValidationError("mask values must be finite and within [0, 1]")
        if self.source_count < 1:
            raise ValidationError("a mask needs at least one contributing pair")
        self.values = v


def compute_class_mask(pairs: Sequence, class_index: int) -> MotionMask:
    return MotionMask(equalize_histogram(mean_abs_diff(pairs)), class_index, len(pairs))


def mask_order_invariance_check(pairs: Sequence, shuffles: int = 1,
                                rng: Optional[np.random.Generator] = None) -> bool:
    """True when shuffling ``pairs`` leaves the class mask bit-identical."""
    rng = rng or np.random.default_rng(0)
    ref = compute_class_mask(pairs, 0).values
    for _ in range(shuffles):
        order = rng.permutation(len(pairs))
        if not np.array_equal(ref, compute_class_mask([pairs[i] for i in order], 0).values):
            return False
    return True


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array to ``size`` x ``size``."""
    h, w = image.shape
    if (h, w) == (size, size):
        return image
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(image, [yy, xx], order=1, mode="nearest")


@dataclass
class MaskBank:
    masks: list[MotionMask]
    class_names: list[str]
    provenance: str = ""

    def __post_init__(self):
        if len(self.masks) != len(self.class_names):
            raise ValidationError(f"bank has {len(self.masks)} masks for {len(self.class_names)} classes")
        if [m.class_index for m in self.masks] != list(range(len(self.masks))):
            raise ValidationError("masks must be ordered by class index, one per class")
        if len({m.values.shape for m in self.masks}) > 1:
            raise ShapeError("all masks must share one shape")

    def __len__(self):
        return len(self.masks)

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks[0].values.shape

    def stack(self, size: Optional[int] = None) -> np.ndarray:
        """K x S x S array, resized bilinearly when ``size`` differs."""
        vals = [m.values if size is None else resize_bilinear(m.values, size) for m in self.masks]
        return np.stack(vals)

    def remap(self, target_classes: Sequence[str], class_map: Optional[dict] = None) -> "MaskBank":
        """Reorder masks for ``target_classes`` via an explicit name table.

        ``class_map`` maps target class names to source class names; classes
        absent from it must exist verbatim in the bank.
        """
        class_map = dict(class_map or {})
        index = {name: i for i, name in enumerate(self.class_names)}
        masks = []
        for k, name in enumerate(target_classes):
            source = class_map.get(name, name)
            if source not in index:
                raise MappingError(name)
            src = self.masks[index[source]]
            masks.append(MotionMask(src.values, k, src.source_count))
        return MaskBank(masks, list(target_classes), self.provenance)


def generate_mask_bank(manifest: DatasetManifest, reference: Optional[LandmarkSet] = None,
                       provenance: str = "") -> MaskBank:
    """Align every expressive/neutral pair and build one mask per class."""
    size = manifest.image_size
    reference = reference or reference_landmarks(size)
    per_class: list[list] = [[] for _ in manifest.class_names]
    neutral_cache: dict = {}
    for sample in sorted(manifest.samples, key=lambda s: s.image_path):
        if sample.neutral_path is None:
            continue
        key = (sample.neutral_path, manifest.neutral_landmarks_for(sample))
        if key not in neutral_cache:
            neutral_cache[key] = align_face(
                read_image(manifest.resolve(sample.neutral_path)), key[1], reference, size
            ).gray
        expressive = align_face(read_image(manifest.resolve(sample.image_path)),
                                sample.landmarks, reference, size).gray
        per_class[sample.label].append((expressive, neutral_cache[key]))
    for k, pairs in enumerate(per_class):
        if not pairs:
            raise CoverageError(manifest.class_names[k])
    masks = [compute_class_mask(pairs, k) for k, pairs in enumerate(per_class)]
    return MaskBank(masks, list(manifest.class_names), provenance)


def save_bank(bank: MaskBank, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, mask in zip(bank.class_names, bank.masks):
        levels = np.clip(quantize(mask.values), 0, LEVELS - 1).astype(np.uint8)
        Image.fromarray(levels, mode="L").save(out / f"{name}.png")
    h, w = bank.shape
    meta = {
        "class_names": list(bank.class_names),
        "provenance": bank.provenance,
        "height": h,
        "width": w,
        "source_count": {n: m.source_count for n, m in zip(bank.class_names, bank.masks)},
    }
    (out / "bank.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return out


def load_bank(bank_dir) -> MaskBank:
    bank_dir = Path(bank_dir)
    meta_path = bank_dir / "bank.json"
    if not meta_path.exists():
        raise ValidationError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    masks = []
    for k, name in enumerate(meta["class_names"]):
        png = bank_dir / f"{name}.png"
        if not png.exists():
            raise CoverageError(name, f"mask file for class {name!r} is missing")
        with Image.open(png) as im:
            values = np.asarray(im.convert("L"), dtype=np.float64) / (LEVELS - 1)
        if values.shape != (meta["height"], meta["width"]):
            raise ShapeError(f"{png} has shape {values.shape}")
        masks.append(MotionMask(values, k, int(meta["source_count"][name])))
    return MaskBank(masks, list(meta["class_names"]), meta.get("provenance", ""))
