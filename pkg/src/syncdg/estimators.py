"""Estimator facade: fit on a domain-indexed source stream, predict forward.

Both classes follow the fit/predict convention with constructor-only
hyperparameters, so they compose with clone, get_params, and pipeline
tooling. The domain index vector is an explicit argument because rows
belong to ordered domains, not an i.i.d. pool.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._common import ValidationError
from .domain_stream import Domain, DomainSequence
from .predictor import predict_sequence
from .trainer import TrainConfig, train, train_erm_baseline

__all__ = ["SyncClassifier", "ErmClassifier"]


def _domain_blocks(X, y, domains, num_classes: int, name: str, start_at: int | None = None):
    """Group rows into consecutive Domain blocks, preserving in-domain order."""
    domains = np.asarray(domains)
    if domains.ndim != 1 or domains.shape[0] != X.shape[0]:
        raise ValidationError("domains must be a 1-D vector aligned with X rows")
    if not np.issubdtype(domains.dtype, np.integer):
        raise ValidationError("domain indices must be integers")
    ids = np.unique(domains)
    if start_at is not None and ids[0] != start_at:
        raise ValidationError(f"expected domains to start at {start_at}, got {ids[0]}")
    if not np.array_equal(ids, np.arange(ids[0], ids[0] + len(ids))):
        raise ValidationError(f"domain indices must be consecutive, got {ids.tolist()}")
    blocks = []
    for t in ids.tolist():
        rows = np.flatnonzero(domains == t)
        features = torch.as_tensor(X[rows], dtype=torch.float64)
        labels = (
            torch.as_tensor(y[rows], dtype=torch.int64)
            if y is not None
            else torch.zeros(len(rows), dtype=torch.int64)
        )
        blocks.append(Domain(t=int(t), features=features, labels=labels))
    return DomainSequence(
        name=name,
        feature_dim=int(X.shape[1]),
        num_classes=num_classes,
        domains=blocks,
    )


class SyncClassifier(BaseEstimator):
    """Sequential drifting-domain classifier with a hidden-state bank.

    fit consumes rows tagged with consecutive domain indices; the trailing
    validation_domains are held out for model selection. predict walks
    future domains in order, starting right after either the fitted source
    block or the validation block.
    """

    def __init__(
        self,
        epochs: int = 30,
        batch_size: int = 64,
        learning_rate: float = 2e-3,
        alpha1: float = 1.0,
        alpha2: float = 0.02,
        mask_ratio: float = 0.6,
        latent_dim: int = 20,
        hidden_dim: int = 64,
        tau_gumbel: float = 0.5,
        tau_contrastive: float = 0.1,
        grad_clip: float = 10.0,
        validation_domains: int = 1,
        seed: int = 0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.mask_ratio = mask_ratio
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.tau_gumbel = tau_gumbel
        self.tau_contrastive = tau_contrastive
        self.grad_clip = grad_clip
        self.validation_domains = validation_domains
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            dataset="estimator",
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            alpha1=self.alpha1,
            alpha2=self.alpha2,
            mask_ratio=self.mask_ratio,
            latent_dim=self.latent_dim,
            hidden_dim=self.hidden_dim,
            tau_gumbel=self.tau_gumbel,
            tau_contrastive=self.tau_contrastive,
            grad_clip=self.grad_clip,
            seed=self.seed,
        )

    def fit(self, X, y, domains):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValidationError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]
        sequence = _domain_blocks(X, y_idx, domains, len(self.classes_), "estimator")
        k = int(self.validation_domains)
        if k < 1 or k >= sequence.num_domains - 1:
            raise ValidationError(
                f"validation_domains must leave >= 2 source domains, "
                f"got {k} of {sequence.num_domains}"
            )
        source = sequence.subsequence(sequence.domains[:-k])
        holdout = sequence.subsequence(sequence.domains[-k:])
        result = train(self._config(), source, holdout)
        self.model_ = result.model
        self.bank_ = result.bank
        self.manifest_ = result.manifest
        self.source_end_ = source.domains[-1].t
        self.holdout_end_ = holdout.domains[-1].t
        deployed = result.bank.clone()
        predict_sequence(self.model_, deployed, holdout, seed=self.seed)
        self._deploy_bank = deployed
        return self

    def predict(self, X, domains):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        sequence = _domain_blocks(X, None, domains, len(self.classes_), "predict")
        start = sequence.domains[0].t
        if start == self.source_end_ + 1:
            bank = self.bank_.clone()
        elif start == self.holdout_end_ + 1:
            bank = self._deploy_bank.clone()
        else:
            raise ValidationError(
                f"prediction domains must start at {self.source_end_ + 1} or "
                f"{self.holdout_end_ + 1}, got {start}"
            )
        records = predict_sequence(self.model_, bank, sequence, seed=self.seed)
        domains = np.asarray(domains)
        out = np.empty(X.shape[0], dtype=self.classes_.dtype)
        for record in records:
            rows = np.flatnonzero(domains == record.domain_index)
            out[rows] = self.classes_[record.predictions.numpy()]
        return out

    def score(self, X, y, domains) -> float:
        predictions = self.predict(X, domains)
        return float(np.mean(predictions == np.asarray(y)))


class ErmClassifier(BaseEstimator):
    """Pooled-training baseline with the same interface and budget rules."""

    def __init__(
        self,
        epochs: int = 30,
        batch_size: int = 64,
        learning_rate: float = 2e-3,
        latent_dim: int = 20,
        hidden_dim: int = 64,
        grad_clip: float = 10.0,
        validation_domains: int = 1,
        seed: int = 0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.grad_clip = grad_clip
        self.validation_domains = validation_domains
        self.seed = seed

    def fit(self, X, y, domains):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValidationError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]
        sequence = _domain_blocks(X, y_idx, domains, len(self.classes_), "estimator")
        k = int(self.validation_domains)
        if k < 1 or k >= sequence.num_domains - 1:
            raise ValidationError(
                f"validation_domains must leave >= 2 source domains, "
                f"got {k} of {sequence.num_domains}"
            )
        config = TrainConfig(
            dataset="estimator",
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            latent_dim=self.latent_dim,
            hidden_dim=self.hidden_dim,
            grad_clip=self.grad_clip,
            seed=self.seed,
        )
        result = train_erm_baseline(
            config,
            sequence.subsequence(sequence.domains[:-k]),
            sequence.subsequence(sequence.domains[-k:]),
        )
        self.model_ = result.model
        self.manifest_ = result.manifest
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        with torch.no_grad():
            logits = self.model_(torch.as_tensor(X, dtype=torch.float64))
        return self.classes_[logits.argmax(dim=-1).numpy()]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))
