"""Procedural face-like corpus with class-specific motion regions.

Faces are rendered analytically: every output pixel is mapped back through the
subject's pose into a canonical frame where the face template, texture and
expression deformations are evaluated. The canonical frame coincides with
the aligned frame, so deformation rectangles are directly comparable with
aligned masks.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .dataset import (
    REFERENCE_TEMPLATE,
    DatasetManifest,
    FaceSample,
    LandmarkSet,
    align_face,
    load_manifest,
    num_workers,
    read_image,
    reference_landmarks,
    write_image,
    write_manifest,
)
from .exceptions import ValidationError

EXPRESSIONS = ("anger", "contempt", "disgust", "fear", "happiness", "sadness", "surprise")

# (x0, y0, x1, y1, sign) in canonical fractions; loosely follows where each
# basic expression moves the face
DEFAULT_LAYOUT = {
    "anger": [(0.22, 0.20, 0.78, 0.38, -1), (0.28, 0.68, 0.72, 0.86, -1)],
    "contempt": [(0.52, 0.62, 0.84, 0.88, 1), (0.58, 0.44, 0.88, 0.62, 1)],
    "disgust": [(0.34, 0.42, 0.66, 0.66, -1), (0.24, 0.64, 0.76, 0.76, 1)],
    "fear": [(0.14, 0.06, 0.86, 0.24, -1), (0.20, 0.30, 0.80, 0.46, 1)],
    "happiness": [(0.20, 0.66, 0.80, 0.88, 1), (0.10, 0.48, 0.34, 0.66, 1), (0.66, 0.48, 0.90, 0.66, 1)],
    "sadness": [(0.28, 0.18, 0.72, 0.34, -1), (0.14, 0.72, 0.42, 0.92, -1), (0.58, 0.72, 0.86, 0.92, -1)],
    "surprise": [(0.12, 0.10, 0.88, 0.30, 1), (0.32, 0.74, 0.68, 0.98, -1)],
}

# pixels of local translation per unit of amplitude
WARP_PER_AMPLITUDE = 4.0
EDGE_PX = 1.5


def default_layout(n_classes: int) -> list[list[tuple]]:
    if n_classes <= len(EXPRESSIONS):
        return [list(DEFAULT_LAYOUT[name]) for name in EXPRESSIONS[:n_classes]]
    rng = np.random.default_rng(1234)
    layout = [list(DEFAULT_LAYOUT[name]) for name in EXPRESSIONS]
    for _ in range(n_classes - len(EXPRESSIONS)):
        rects = []
        for _ in range(2):
            x0, y0 = rng.uniform(0.05, 0.6, size=2)
            rects.append((x0, y0, x0 + 0.3, y0 + 0.2, int(rng.choice([-1, 1]))))
        layout.append(rects)
    return layout


@dataclass
class SynthSpec:
    n_classes: int = 7
    subjects: int = 20
    samples_per_subject_per_class: int = 3
    image_size: int = 64
    region_layout: Optional[list] = None
    noise_sigma: float = 0.02
    amplitude: float = 0.35
    seed: int = 0
    subject_prefix: str = "S"
    class_names: Optional[list] = None
    pose_jitter: bool = True

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("a corpus needs at least two classes")
        if self.region_layout is None:
            self.region_layout = default_layout(self.n_classes)
        if self.class_names is None:
            self.class_names = (list(EXPRESSIONS[:self.n_classes]) if self.n_classes <= len(EXPRESSIONS)
                                else [f"class_{k}" for k in range(self.n_classes)])
        self.region_layout = [[tuple(r) for r in rects] for rects in self.region_layout]
        if len(self.region_layout) != self.n_classes or len(self.class_names) != self.n_classes:
            raise ValidationError("need one layout and one name per class")
        for rects in self.region_layout:
            for x0, y0, x1, y1, _ in rects:
                if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                    raise ValidationError(f"rectangle {(x0, y0, x1, y1)} leaves the image")
        keys = [tuple(sorted(r)) for r in self.region_layout]
        if len(set(keys)) != len(keys):
            raise ValidationError("classes must have distinct region layouts")
        if self.noise_sigma < 0 or self.amplitude < 0:
            raise ValidationError("noise_sigma and amplitude must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region_layout"] = [[list(r) for r in rects] for rects in self.region_layout]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)

    def region_mask(self, k: int, size: Optional[int] = None) -> np.ndarray:
        """Pixels (by centre) of the aligned frame covered by class ``k``'s rectangles."""
        size = size or self.image_size
        c = np.arange(size) + 0.5
        xs, ys = np.meshgrid(c, c)
        out = np.zeros((size, size), dtype=bool)
        for x0, y0, x1, y1, _ in self.region_layout[k]:
            out |= (xs >= x0 * size) & (xs < x1 * size) & (ys >= y0 * size) & (ys < y1 * size)
        return out


@dataclass
class _Subject:
    skin: np.ndarray
    background: float
    texture: np.ndarray  # low-res field, evaluated with bilinear lookup
    scale: float
    rotation: float
    shift: np.ndarray
    feature_gain: float


def _draw_subject(spec: SynthSpec, rng: np.random.Generator) -> _Subject:
    jitter = spec.pose_jitter
    return _Subject(
        skin=rng.uniform([0.55, 0.40, 0.30], [0.90, 0.72, 0.62]),
        background=float(rng.uniform(0.05, 0.30)),
        texture=rng.normal(0.0, 1.0, size=(3, 8, 8)),
        scale=float(1.0 + rng.uniform(-0.06, 0.06)) if jitter else 1.0,
        rotation=float(np.deg2rad(rng.uniform(-6.0, 6.0))) if jitter else 0.0,
        shift=rng.uniform(-3.0, 3.0, size=2) if jitter else np.zeros(2),
        feature_gain=float(rng.uniform(0.8, 1.2)),
    )


def _pose_matrix(subj: _Subject, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Canonical -> image map ``p -> A p + b`` about the image centre."""
    c, s = np.cos(subj.rotation), np.sin(subj.rotation)
    a = subj.scale * np.array([[c, -s], [s, c]])
    centre = np.array([size / 2.0, size / 2.0])
    return a, centre - a @ centre + subj.shift


def _soft_box(x, y, rect, size):
    x0, y0, x1, y1 = (v * size for v in rect[:4])
    wx = np.clip((x - x0) / EDGE_PX, 0, 1) * np.clip((x1 - x) / EDGE_PX, 0, 1)
    wy = np.clip((y - y0) / EDGE_PX, 0, 1) * np.clip((y1 - y) / EDGE_PX, 0, 1)
    return wx * wy


def _ellipse(x, y, cx, cy, rx, ry, size):
    d = ((x - cx * size) / (rx * size)) ** 2 + ((y - cy * size) / (ry * size)) ** 2
    return np.clip((1.0 - d) * 4.0, 0.0, 1.0)


def _render(subj: _Subject, spec: SynthSpec, rects=(), strength=0.0, offsets=()) -> np.ndarray:
    """Evaluate the face at the subject's pose; ``rects`` carry the expression."""
    size = spec.image_size
    a, b = _pose_matrix(subj, size)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    canon = (pts - b) @ np.linalg.inv(a).T
    x, y = canon[:, 0].reshape(size, size), canon[:, 1].reshape(size, size)

    bump = np.zeros_like(x)
    for rect, (dx, dy) in zip(rects, offsets):
        w = _soft_box(x, y, rect, size)
        x = x - dx * w
        y = y - dy * w
        bump = bump + rect[4] * strength * w

    face = _ellipse(x, y, 0.50, 0.54, 0.40, 0.50, size)
    tex = np.stack([
        ndimage.map_coordinates(subj.texture[ch], [y / size * 7.0, x / size * 7.0], order=1, mode="nearest")
        for ch in range(3)
    ], axis=-1)
    skin = subj.skin[None, None, :] * (1.0 + 0.08 * tex)
    dark = np.zeros_like(x)
    lm = REFERENCE_TEMPLATE
    for ex, ey in lm[:2]:
        dark = np.maximum(dark, _ellipse(x, y, ex, ey, 0.07, 0.035, size))
        dark = np.maximum(dark, 0.7 * _ellipse(x, y, ex, ey - 0.08, 0.09, 0.018, size))
    dark = np.maximum(dark, 0.5 * _ellipse(x, y, lm[2, 0], lm[2, 1], 0.025, 0.06, size))
    mouth_cx = (lm[3, 0] + lm[4, 0]) / 2
    dark = np.maximum(dark, 0.8 * _ellipse(x, y, mouth_cx, lm[3, 1], 0.17, 0.028, size))
    dark *= subj.feature_gain

    shade = skin * (1.0 - 0.75 * np.clip(dark, 0, 1))[..., None]
    rgb = face[..., None] * shade + (1.0 - face[..., None]) * subj.background
    rgb = rgb + bump[..., None]
    return np.clip(rgb, 0.0, 1.0)


def _subject_landmarks(subj: _Subject, size: int) -> LandmarkSet:
    a, b = _pose_matrix(subj, size)
    # pixel (i, j) has centre (j + 0.5, i + 0.5) in render coordinates
    canon = reference_landmarks(size).points + 0.5
    return LandmarkSet(canon @ a.T + b - 0.5)


def _generate_subject(spec: SynthSpec, index: int, out_dir: Path) -> tuple[str, LandmarkSet, list[tuple]]:
    rng = np.random.default_rng([spec.seed, index])
    subj = _draw_subject(spec, rng)
    sid = f"{spec.subject_prefix}{index + 1:03d}"
    lms = _subject_landmarks(subj, spec.image_size)
    neutral_rel = f"images/{sid}/neutral.png"
    neutral = _render(subj, spec)
    if spec.noise_sigma > 0:
        neutral = neutral + rng.normal(0.0, spec.noise_sigma, neutral.shape)
    write_image(out_dir / neutral_rel, neutral)
    rows = []
    for k, rects in enumerate(spec.region_layout):
        for j in range(spec.samples_per_subject_per_class):
            strength = spec.amplitude * float(rng.uniform(0.75, 1.0))
            warp = WARP_PER_AMPLITUDE * spec.amplitude
            offsets = [tuple(rng.uniform(-warp, warp, size=2)) for _ in rects]
            img = _render(subj, spec, rects, strength, offsets) if spec.amplitude > 0 else _render(subj, spec)
            if spec.noise_sigma > 0:
                img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
            rel = f"images/{sid}/{spec.class_names[k]}_{j}.png"
            write_image(out_dir / rel, img)
            rows.append((rel, k, sid, lms, neutral_rel))
    return neutral_rel, lms, rows


def generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write images, ``manifest.csv``/``manifest.json`` and ``synth_spec.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        per_subject = list(pool.map(lambda i: _generate_subject(spec, i, out), range(spec.subjects)))
    samples, neutral_lms = [], {}
    for neutral_rel, lms, rows in per_subject:
        neutral_lms[neutral_rel] = lms
        samples.extend(FaceSample(rel, k, sid, row_lms, nrel) for rel, k, sid, row_lms, nrel in rows)
    manifest = DatasetManifest(samples, list(spec.class_names), spec.image_size, out, neutral_lms)
    write_manifest(manifest, out / "manifest.csv")
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    return load_manifest(out / "manifest.csv")


def verify_separability(manifest: DatasetManifest, threshold: float = 0.99) -> bool:
    """Nearest class-template rule on aligned expressive-minus-neutral differences.

    Each subject is scored against templates averaged over the other subjects,
    so a corpus without class signal cannot pass by memorising its own noise.
    """
    if manifest.n_classes < 2 or len({s.label for s in manifest.samples}) < 2:
        return True
    size = manifest.image_size
    ref = reference_landmarks(size)
    cache: dict = {}
    diffs, labels, subjects = [], [], []
    for s in manifest.samples:
        if s.neutral_path is None:
            continue
        if s.neutral_path not in cache:
            cache[s.neutral_path] = align_face(read_image(manifest.resolve(s.neutral_path)),
                                               manifest.neutral_landmarks_for(s), ref, size).gray
        e = align_face(read_image(manifest.resolve(s.image_path)), s.landmarks, ref, size).gray
        diffs.append((e - cache[s.neutral_path]).ravel())
        labels.append(s.label)
        subjects.append(s.subject_id)
    if not diffs:
        return False
    d, y, subj = np.stack(diffs), np.array(labels), np.array(subjects)
    classes = np.unique(y)
    correct = 0
    for sid in np.unique(subj):
        held, rest = subj == sid, subj != sid
        present = [k for k in classes if np.any(rest & (y == k))]
        if not present:
            continue
        templates = np.stack([d[rest & (y == k)].mean(axis=0) for k in present])
        dist = ((d[held][:, None, :] - templates[None]) ** 2).sum(axis=2)
        correct += int(np.sum(np.asarray(present)[np.argmin(dist, axis=1)] == y[held]))
    return correct / len(y) >= threshold
