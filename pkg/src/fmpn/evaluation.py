"""Subject-independent cross-validation, ablations and mask transfer."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from sklearn.base import clone

from .dataset import AlignedFace, AlignedSet, DatasetManifest, crop_flip, load_aligned
from .estimator import FMPNClassifier, SubjectKFold
from .exceptions import ShapeError, ValidationError
from .maskgen import MaskBank
from .networks import VARIANTS, ArchConfig
from .training import TrainConfig

log = logging.getLogger(__name__)


def argmax_lowest(logits) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    return int(np.argmax(np.asarray(logits)))


def predict(model, face: AlignedFace) -> int:
    """Class index for one aligned face.

    ``model`` is a fitted :class:`FMPNClassifier` or a bare :class:`FMPN`
    module (the face is centre-cropped to the classifier's input size).
    """
    if isinstance(model, FMPNClassifier):
        return int(model.predict(face.rgb[None].astype(np.float32))[0])
    crop = model.cn.descriptor.input_size
    rgb = crop_flip(np.asarray(face.rgb, dtype=np.float32), crop, "center", False)
    x = torch.from_numpy(rgb).permute(2, 0, 1)[None].contiguous()
    was_training = model.training
    model.eval()
    with torch.no_grad():
        _, logits = model(x.to(next(model.parameters()).dtype))
    model.train(was_training)
    return argmax_lowest(logits[0].numpy())


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Cell ``(i, j)`` counts samples of true class ``i`` predicted as ``j``."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ShapeError("preds and labels lengths differ")
    for arr in (preds, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValidationError(f"class indices must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def normalize_confusion(cm: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Row-normalised matrix plus the indices of rows with no samples."""
    rows = cm.sum(axis=1)
    out = np.zeros(cm.shape, dtype=np.float64)
    nz = rows > 0
    out[nz] = cm[nz] / rows[nz, None]
    return out, [int(i) for i in np.flatnonzero(~nz)]


@dataclass
class EvalReport:
    per_fold_accuracy: list[float]
    per_fold_count: list[int]
    mean_accuracy: float
    uniform_mean_accuracy: float
    confusion: np.ndarray
    normalized_confusion: np.ndarray
    empty_rows: list[int]
    config_digest: str
    class_names: list[str] = field(default_factory=list)
    variant: str = "full"

    @classmethod
    def from_folds(cls, fold_preds, fold_labels, n_classes, digest, class_names=(), variant="full"):
        accs, counts = [], []
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        for p, y in zip(fold_preds, fold_labels):
            fold_cm = confusion_matrix(p, y, n_classes)
            cm += fold_cm
            counts.append(int(len(y)))
            accs.append(float(np.trace(fold_cm)) / len(y) if len(y) else 0.0)
        total = int(cm.sum())
        mean = float(Fraction(int(np.trace(cm)), total)) if total else 0.0
        norm, empty = normalize_confusion(cm)
        return cls(accs, counts, mean, float(np.mean(accs)) if accs else 0.0, cm, norm, empty,
                   digest, list(class_names), variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        d["normalized_confusion"] = self.normalized_confusion.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["confusion"] = np.asarray(d["confusion"], dtype=np.int64)
        d["normalized_confusion"] = np.asarray(d["normalized_confusion"], dtype=np.float64)
        return cls(**d)

    def save(self, out_dir) -> Path:
        """Write ``report.json``, ``confusion.csv`` and ``confusion.png``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        names = self.class_names or [str(i) for i in range(len(self.confusion))]
        with (out / "confusion.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["true\\pred", *names])
            for name, row in zip(names, self.normalized_confusion):
                writer.writerow([name, *(repr(float(v)) for v in row)])
        render_confusion(self.normalized_confusion, names, out / "confusion.png")
        return out


def render_confusion(matrix: np.ndarray, names, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1 + 0.7 * len(names), 1 + 0.6 * len(names)))
    ax.imshow(matrix, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i, j] > 0.5 else "black", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def config_digest(**parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _as_aligned(data) -> AlignedSet:
    return load_aligned(data) if isinstance(data, DatasetManifest) else data


def cross_validate(data, bank: Optional[MaskBank], cfg: TrainConfig, k: int = 10, variant: str = "full",
                   arch: Optional[ArchConfig] = None, crop_size: Optional[int] = None,
                   pretrain_fmg: bool = True, estimator=None) -> EvalReport:
    """Train on ``k - 1`` subject folds, test on the held-out one, for every fold.

    ``data`` is a manifest or pre-aligned :class:`AlignedSet`. ``estimator``
    overrides the default :class:`FMPNClassifier` with any sklearn classifier
    accepting ``N x S x S x 3`` inputs; it is cloned per fold.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}")
    data = _as_aligned(data)
    n_classes = len(data.class_names)
    if estimator is None:
        estimator = FMPNClassifier(mask_bank=bank, variant=variant, train_config=cfg, arch=arch,
                                   crop_size=crop_size, pretrain_fmg=pretrain_fmg, n_classes=n_classes)
    fold_preds, fold_labels = [], []
    for fold, (train, test) in enumerate(SubjectKFold(k).split(data.rgb, data.labels, data.subjects)):
        if set(data.subjects[train]) & set(data.subjects[test]):
            raise AssertionError(f"fold {fold} shares subjects between train and test")
        est = clone(estimator).fit(data.rgb[train], data.labels[train])
        fold_preds.append(est.predict(data.rgb[test]))
        fold_labels.append(data.labels[test])
        log.info("fold %d/%d: accuracy %.4f on %d faces", fold + 1, k,
                 float(np.mean(fold_preds[-1] == fold_labels[-1])), len(test))
    digest = config_digest(
        cfg=cfg.to_dict(), arch=(arch or ArchConfig()).to_dict(), variant=variant, k=k, crop=crop_size,
        pretrain=pretrain_fmg, bank=bank.provenance if bank is not None else None, n=len(data),
        estimator=type(estimator).__name__,
    )
    return EvalReport.from_folds(fold_preds, fold_labels, n_classes, digest, data.class_names, variant)


def run_ablation(data, bank: Optional[MaskBank], cfg: TrainConfig, variant: str, k: int = 10,
                 **kwargs) -> EvalReport:
    """Cross-validate one of the ``full`` / ``no_lG`` / ``baseline_cnn`` variants."""
    return cross_validate(data, bank, cfg, k=k, variant=variant, **kwargs)


def transfer_masks(source_bank: MaskBank, target, cfg: TrainConfig, k: int = 10,
                   class_map: Optional[dict] = None, **kwargs) -> EvalReport:
    """Train on ``target`` with masks borrowed from another dataset.

    The bank is re-indexed to the target's classes through ``class_map``
    (target name -> source name) and mask-only pretraining is skipped.
    """
    target = _as_aligned(target)
    bank = source_bank.remap(target.class_names, class_map)
    return cross_validate(target, bank, cfg, k=k, variant="full", pretrain_fmg=False, **kwargs)

