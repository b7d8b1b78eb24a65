"""Manifest IO, five-point face alignment, augmentation and subject folds."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import (
    ConfigError,
    ManifestParseError,
    PlanningError,
    ShapeError,
    SingularConfigurationError,
    ValidationError,
)

N_LANDMARKS = 5
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# left eye, right eye, nose tip, left mouth corner, right mouth corner
# as fractions of (width, height)
REFERENCE_TEMPLATE = np.array(
    [
        [0.30, 0.40],
        [0.70, 0.40],
        [0.50, 0.58],
        [0.34, 0.76],
        [0.66, 0.76],
    ]
)

CROP_POSITIONS = ("center", "top_left", "top_right", "bottom_left", "bottom_right")

MANIFEST_HEADER = (
    ["path", "label", "subject_id"]
    + [f"lm_{axis}{i}" for i in range(1, N_LANDMARKS + 1) for axis in "xy"]
    + ["neutral_path"]
)


@dataclass(frozen=True)
class LandmarkSet:
    """Five ordered (x, y) pixel coordinates."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValidationError(f"expected {N_LANDMARKS}x2 landmarks, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "LandmarkSet":
        return cls(np.asarray(values, dtype=np.float64).reshape(N_LANDMARKS, 2))

    def flat(self) -> list[float]:
        return [float(v) for v in self.points.ravel()]

    def __eq__(self, other):
        return isinstance(other, LandmarkSet) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


def reference_landmarks(size: int, template: np.ndarray = REFERENCE_TEMPLATE) -> LandmarkSet:
    """Canonical template scaled to a ``size`` x ``size`` canvas."""
    return LandmarkSet(np.asarray(template, dtype=np.float64) * float(size))


@dataclass(frozen=True)
class FaceSample:
    image_path: str
    label: int
    subject_id: str
    landmarks: LandmarkSet
    neutral_path: Optional[str] = None


@dataclass
class DatasetManifest:
    samples: list[FaceSample]
    class_names: list[str]
    image_size: int = 224
    root: Path = field(default_factory=Path)
    # landmarks of neutral images keyed by neutral_path; rows without an
    # entry reuse the expressive row's landmarks
    neutral_landmarks: dict[str, LandmarkSet] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValidationError("a manifest needs at least two classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("class_names must be distinct")
        for s in self.samples:
            if not 0 <= s.label < len(self.class_names):
                raise ValidationError(f"label {s.label} out of range for {len(self.class_names)} classes")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})

    def neutral_landmarks_for(self, sample: FaceSample) -> LandmarkSet:
        return self.neutral_landmarks.get(sample.neutral_path, sample.landmarks)


def sidecar_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".json")


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest CSV and its JSON sidecar (same stem, ``.json``).

    Rows are numbered as file lines, so the first data row is row 2.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise ValidationError(f"missing manifest sidecar {side}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    try:
        class_names = [str(c) for c in meta["class_names"]]
        image_size = int(meta["image_size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"sidecar {side} lacks class_names/image_size") from exc
    index = {name: i for i, name in enumerate(class_names)}
    root = path.parent

    samples = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestParseError(1, f"header must be {','.join(MANIFEST_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestParseError(row_no, f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            img, label, subject = row[0].strip(), row[1].strip(), row[2].strip()
            if not img or not subject:
                raise ManifestParseError(row_no, "path and subject_id are required")
            try:
                landmarks = LandmarkSet.from_flat([float(v) for v in row[3:13]])
            except ValueError as exc:
                raise ManifestParseError(row_no, f"bad landmarks: {exc}") from exc
            if label not in index:
                raise ValidationError(f"row {row_no}: unknown class {label!r}")
            neutral = row[13].strip() or None
            if neutral is not None and not (root / neutral).exists():
                raise ValidationError(f"row {row_no}: neutral_path {neutral!r} does not exist")
            samples.append(FaceSample(img, index[label], subject, landmarks, neutral))

    owner = {s.image_path: s.subject_id for s in samples}
    for row_no, s in enumerate(samples, start=2):
        if s.neutral_path in owner and owner[s.neutral_path] != s.subject_id:
            raise ValidationError(f"row {row_no}: neutral_path belongs to another subject")

    neutral_lms = {
        k: LandmarkSet.from_flat(v) for k, v in (meta.get("neutral_landmarks") or {}).items()
    }
    return DatasetManifest(samples, class_names, image_size, root, neutral_lms)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in manifest.samples:
            lm = [repr(v) for v in s.landmarks.flat()]
            writer.writerow([s.image_path, manifest.class_names[s.label], s.subject_id, *lm, s.neutral_path or ""])
    meta = {"class_names": list(manifest.class_names), "image_size": manifest.image_size}
    if manifest.neutral_landmarks:
        meta["neutral_landmarks"] = {k: v.flat() for k, v in sorted(manifest.neutral_landmarks.items())}
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(rotation) @ p + translation`` on (x, y) points."""

    scale: float
    rotation: float
    translation: tuple[float, float]

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("similarity scale must be positive")

    @property
    def linear(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    @property
    def matrix(self) -> np.ndarray:
        """2x3 forward matrix."""
        return np.hstack([self.linear, np.asarray(self.translation, dtype=np.float64)[:, None]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + np.asarray(self.translation)

    def inverse(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.translation)) @ np.linalg.inv(self.linear).T


def estimate_similarity(src: LandmarkSet, dst: LandmarkSet) -> SimilarityTransform:
    """Least-squares similarity mapping ``src`` onto ``dst``.

    Points are treated as complex numbers ``z = x + iy``; a similarity is then
    ``z -> a z + t`` and the centred normal equations have a closed form.
    """
    z = src.points[:, 0] + 1j * src.points[:, 1]
    w = dst.points[:, 0] + 1j * dst.points[:, 1]
    zc = z - z.mean()
    wc = w - w.mean()
    denom = float(np.sum(np.abs(zc) ** 2))
    if denom <= 1e-12 * max(1.0, float(np.max(np.abs(z))) ** 2):
        raise SingularConfigurationError("source landmarks are all identical")
    a = np.sum(np.conj(zc) * wc) / denom
    if abs(a) == 0.0:
        raise SingularConfigurationError("destination landmarks are all identical")
    t = w.mean() - a * z.mean()
    return SimilarityTransform(float(abs(a)), float(np.angle(a)), (float(t.real), float(t.imag)))


def to_grayscale(rgb) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim < 3 or rgb.shape[-1] != 3:
        raise ShapeError(f"expected trailing RGB axis, got shape {rgb.shape}")
    gray = rgb[..., 0] * LUMA_WEIGHTS[0] + rgb[..., 1] * LUMA_WEIGHTS[1] + rgb[..., 2] * LUMA_WEIGHTS[2]
    return np.clip(gray, 0.0, 1.0).astype(rgb.dtype if rgb.dtype.kind == "f" else np.float64)


def read_image(path) -> np.ndarray:
    """Decode an 8-bit image to an HxWx3 float64 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def write_image(path, array) -> None:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


@dataclass
class AlignedFace:
    gray: np.ndarray
    rgb: np.ndarray
    label: int = -1
    subject_id: str = ""
    landmarks: Optional[LandmarkSet] = None

    @classmethod
    def from_rgb(cls, rgb, label=-1, subject_id="", landmarks=None) -> "AlignedFace":
        rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
        return cls(to_grayscale(rgb), rgb, label, subject_id, landmarks)

    @property
    def size(self) -> int:
        return self.gray.shape[0]


def warp_image(image: np.ndarray, transform: SimilarityTransform, out_size: int) -> np.ndarray:
    """Bilinearly resample ``image`` so that ``transform`` maps input to output pixels."""
    ys, xs = np.mgrid[0:out_size, 0:out_size].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = transform.inverse(grid)
    coords = np.stack([src[:, 1], src[:, 0]])
    planes = image[..., None] if image.ndim == 2 else image
    out = np.empty((out_size, out_size, planes.shape[-1]), dtype=np.float64)
    for c in range(planes.shape[-1]):
        out[..., c] = ndimage.map_coordinates(
            planes[..., c], coords, order=1, mode="grid-constant", cval=0.0
        ).reshape(out_size, out_size)
    return out if image.ndim == 3 else out[..., 0]


def align_face(image, landmarks: LandmarkSet, reference: LandmarkSet, out_size: int,
               label: int = -1, subject_id: str = "") -> AlignedFace:
    """Warp ``image`` so ``landmarks`` land on ``reference`` in an ``out_size`` canvas."""
    if out_size < 32:
        raise ConfigError("out_size must be at least 32")
    if isinstance(image, (str, os.PathLike)):
        image = read_image(image)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    tf = estimate_similarity(landmarks, reference)
    rgb = warp_image(image, tf, out_size)
    return AlignedFace.from_rgb(rgb, label, subject_id, LandmarkSet(tf.apply(landmarks.points)))


class LandmarkProvider(Protocol):
    """Anything that can locate the five landmarks in an RGB image."""

    def __call__(self, image: np.ndarray) -> LandmarkSet: ...


@dataclass(frozen=True)
class AugmentPolicy:
    crop_size: int
    flip_prob: float = 0.5
    positions: tuple[str, ...] = CROP_POSITIONS

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        unknown = set(self.positions) - set(CROP_POSITIONS)
        if unknown or not self.positions:
            raise ConfigError(f"bad crop positions {self.positions}")


def crop_offsets(size: int, crop: int, position: str) -> tuple[int, int]:
    if crop > size:
        raise ConfigError(f"crop size {crop} exceeds image size {size}")
    slack = size - crop
    return {
        "center": (slack // 2, slack // 2),
        "top_left": (0, 0),
        "top_right": (0, slack),
        "bottom_left": (slack, 0),
        "bottom_right": (slack, slack),
    }[position]


def crop_flip(array: np.ndarray, crop: int, position: str, flip: bool) -> np.ndarray:
    """Crop (rows, cols) leading axes and optionally mirror the columns."""
    top, left = crop_offsets(array.shape[0], crop, position)
    out = array[top:top + crop, left:left + crop]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def sample_augmentation(rng: np.random.Generator, policy: AugmentPolicy) -> tuple[str, bool]:
    position = policy.positions[int(rng.integers(len(policy.positions)))]
    flip = bool(rng.random() < policy.flip_prob)
    return position, flip


def augment(face: AlignedFace, rng: np.random.Generator, policy: AugmentPolicy) -> AlignedFace:
    position, flip = sample_augmentation(rng, policy)
    return replace(
        face,
        gray=crop_flip(face.gray, policy.crop_size, position, flip),
        rgb=crop_flip(face.rgb, policy.crop_size, position, flip),
        landmarks=None,
    )


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[frozenset, ...]
    assignment: np.ndarray

    def fold_of(self, subject_id: str) -> int:
        for i, fold in enumerate(self.folds):
            if subject_id in fold:
                return i
        raise KeyError(subject_id)

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, test) sample indices for a held-out fold."""
        test = np.flatnonzero(self.assignment == fold)
        train = np.flatnonzero(self.assignment != fold)
        return train, test


def plan_folds(manifest, k: int) -> FoldPlan:
    """Partition subjects (sorted ascending) into ``k`` contiguous groups.

    ``manifest`` may be a :class:`DatasetManifest` or a per-sample sequence of
    subject ids. Earlier folds receive the extra subject when sizes differ.
    """
    if isinstance(manifest, DatasetManifest):
        sample_subjects = [s.subject_id for s in manifest.samples]
    else:
        sample_subjects = [str(s) for s in manifest]
    if k < 2:
        raise PlanningError("need at least two folds")
    subjects = sorted(set(sample_subjects))
    if len(subjects) < k:
        raise PlanningError(f"{len(subjects)} subjects cannot fill {k} folds")
    base, extra = divmod(len(subjects), k)
    folds, start = [], 0
    for i in range(k):
        n = base + (1 if i < extra else 0)
        folds.append(frozenset(subjects[start:start + n]))
        start += n
    fold_of = {s: i for i, fold in enumerate(folds) for s in fold}
    assignment = np.array([fold_of[s] for s in sample_subjects], dtype=np.int64)
    return FoldPlan(k, tuple(folds), assignment)


@dataclass
class AlignedSet:
    """Aligned faces of a manifest stacked into arrays."""

    rgb: np.ndarray  # N x S x S x 3, float32
    labels: np.ndarray
    subjects: np.ndarray
    class_names: list[str]
    paths: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def gray(self) -> np.ndarray:
        return to_grayscale(self.rgb)

    def subset(self, idx) -> "AlignedSet":
        idx = np.asarray(idx)
        return AlignedSet(self.rgb[idx], self.labels[idx], self.subjects[idx], self.class_names,
                          [self.paths[i] for i in idx] if self.paths else [])


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("FMPN_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def load_aligned(manifest: DatasetManifest, reference: Optional[LandmarkSet] = None,
                 provider: Optional[Callable[[np.ndarray], LandmarkSet]] = None) -> AlignedSet:
    """Align every sample of ``manifest`` to ``reference`` at ``manifest.image_size``."""
    size = manifest.image_size
    reference = reference or reference_landmarks(size)

    def one(sample: FaceSample) -> np.ndarray:
        image = read_image(manifest.resolve(sample.image_path))
        lms = provider(image) if provider is not None else sample.landmarks
        return align_face(image, lms, reference, size).rgb

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        faces = list(pool.map(one, manifest.samples))
    rgb = np.stack(faces).astype(np.float32) if faces else np.zeros((0, size, size, 3), np.float32)
    return AlignedSet(
        rgb,
        np.array([s.label for s in manifest.samples], dtype=np.int64),
        np.array([s.subject_id for s in manifest.samples], dtype=object),
        list(manifest.class_names),
        [s.image_path for s in manifest.samples],
    )
