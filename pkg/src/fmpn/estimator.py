"""scikit-learn compatible wrappers around the FMPN pipeline."""
from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import BaseCrossValidator
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import (
    REFERENCE_TEMPLATE,
    AlignedSet,
    AugmentPolicy,
    align_face,
    crop_flip,
    plan_folds,
    reference_landmarks,
)
from .exceptions import ShapeError, ValidationError
from .maskgen import MaskBank
from .networks import FMPN, VARIANTS, ArchConfig
from .training import TrainConfig, train_joint, train_stage1


def check_faces(X) -> np.ndarray:
    """Validate an ``N x S x S x 3`` batch of aligned faces in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise ShapeError(f"expected N x S x S x 3 faces, got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValidationError("face intensities must lie in [0, 1]")
    return X


class FaceAligner(TransformerMixin, BaseEstimator):
    """Warp ``(image, LandmarkSet)`` pairs onto a five-point reference template.

    Stateless: ``fit`` only validates parameters. ``transform`` returns an
    ``N x out_size x out_size x 3`` float32 array.
    """

    def __init__(self, out_size=224, template=None):
        self.out_size = out_size
        self.template = template

    def fit(self, X=None, y=None):
        if self.out_size < 32:
            raise ValidationError("out_size must be at least 32")
        return self

    def transform(self, X):
        template = REFERENCE_TEMPLATE if self.template is None else np.asarray(self.template)
        ref = reference_landmarks(self.out_size, template)
        faces = [align_face(img, lms, ref, self.out_size).rgb for img, lms in X]
        return np.stack(faces).astype(np.float32)


class SubjectKFold(BaseCrossValidator):
    """K-fold over subjects sorted ascending; ``groups`` holds subject ids."""

    def __init__(self, n_splits=10):
        self.n_splits = n_splits

    def get_n_splits(self, X=None, y=None, groups=None):
        return self.n_splits

    def split(self, X, y=None, groups=None):
        if groups is None:
            raise ValidationError("SubjectKFold needs subject ids passed as groups")
        groups = np.asarray(groups)
        plan = plan_folds([str(g) for g in groups], self.n_splits)
        for fold in range(plan.k):
            train, test = plan.split(fold)
            if set(groups[train].tolist()) & set(groups[test].tolist()):
                raise AssertionError(f"subject leakage in fold {fold}")
            yield train, test


class FMPNClassifier(ClassifierMixin, BaseEstimator):
    """Expression classifier guided by per-class motion masks.

    Parameters
    ----------
    mask_bank : MaskBank, optional
        Ground-truth masks used as mask-generator targets. Required for
        ``variant="full"``; with ``no_lG`` it only feeds the logged l_G.
    variant : {"full", "no_lG", "baseline_cnn"}
        ``no_lG`` keeps the architecture but drops the mask loss and the
        mask-only pretraining stage; ``baseline_cnn`` feeds colour faces
        straight to the classifier.
    train_config : TrainConfig, optional
        Defaults to :meth:`TrainConfig.desk`.
    arch : ArchConfig, optional
        ``n_classes`` and ``input_size`` are filled in at fit time.
    crop_size : int, optional
        Side of the random training crops and of the centre crop used for
        prediction. Defaults to the face size.
    flip_prob : float
    pretrain_fmg : bool
        Run the mask-only stage before joint training (``full`` only). A
        mask generator that skips it trains at ``lr_fmg_stage1`` in the joint
        stage instead of the fine-tuning rate ``lr_fmg_stage2``.
    n_classes : int, optional
        Defaults to the bank size, else ``max(y) + 1``.
    """

    def __init__(self, mask_bank: Optional[MaskBank] = None, variant="full", train_config=None,
                 arch=None, crop_size=None, flip_prob=0.5, pretrain_fmg=True, n_classes=None):
        self.mask_bank = mask_bank
        self.variant = variant
        self.train_config = train_config
        self.arch = arch
        self.crop_size = crop_size
        self.flip_prob = flip_prob
        self.pretrain_fmg = pretrain_fmg
        self.n_classes = n_classes

    def _config(self) -> TrainConfig:
        cfg = self.train_config or TrainConfig.desk()
        if self.variant == "no_lG":
            cfg = replace(cfg, lambda1=0.0, stage1_epochs=0, decay_start_stage1=0)
        if not (self.variant == "full" and self.pretrain_fmg and cfg.stage1_epochs > 0):
            # an FMG entering joint training from scratch keeps its from-scratch rate;
            # the lower stage-2 rate is a fine-tuning rate for a pretrained FMG
            cfg = replace(cfg, lr_fmg_stage2=cfg.lr_fmg_stage1)
        return cfg

    def fit(self, X, y):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}")
        X = check_faces(X)
        check_classification_targets(y)
        y = np.asarray(y, dtype=np.int64)
        if len(y) != len(X):
            raise ShapeError("X and y lengths differ")
        if self.variant == "full" and self.mask_bank is None:
            raise ValidationError(f"variant {self.variant!r} needs a mask bank")
        if self.n_classes is not None:
            k = self.n_classes
        elif self.mask_bank is not None:
            k = len(self.mask_bank)
        else:
            k = int(y.max()) + 1
        if y.min() < 0 or y.max() >= k:
            raise ValidationError(f"labels must lie in [0, {k})")

        size = X.shape[1]
        crop = self.crop_size or size
        policy = AugmentPolicy(crop, self.flip_prob)
        arch = replace(self.arch or ArchConfig(), n_classes=k, input_size=crop)
        cfg = self._config()
        data = AlignedSet(X, y, np.zeros(len(y), dtype=object), [str(i) for i in range(k)])

        model = FMPN.build(arch, cfg.seed, self.variant)
        history = []
        if self.variant == "full" and self.pretrain_fmg:
            history += train_stage1(model, data, self.mask_bank, cfg, policy)
        history += train_joint(model, data, self.mask_bank, cfg, policy, epoch_offset=len(history))

        self.model_ = model.eval()
        self.arch_ = arch
        self.config_ = cfg
        self.history_ = history
        self.classes_ = np.arange(k)
        return self

    def _center(self, X) -> torch.Tensor:
        crop = self.arch_.input_size
        x = np.stack([crop_flip(face, crop, "center", False) for face in X])
        return torch.from_numpy(x).permute(0, 3, 1, 2).contiguous()

    @torch.no_grad()
    def decision_function(self, X, batch_size=64) -> np.ndarray:
        """Raw logits, ``N x K``."""
        check_is_fitted(self)
        X = check_faces(X)
        self.model_.eval()
        out = [self.model_(self._center(X[i:i + batch_size]))[1] for i in range(0, len(X), batch_size)]
        return torch.cat(out).double().numpy()

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lowest class index on ties
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    @torch.no_grad()
    def predict_masks(self, X) -> np.ndarray:
        """Generated motion masks for centre crops, ``N x S x S``."""
        check_is_fitted(self)
        if self.variant == "baseline_cnn":
            raise ValidationError("baseline_cnn has no mask generator")
        mask, _ = self.model_(self._center(check_faces(X)))
        return mask[:, 0].double().numpy()
