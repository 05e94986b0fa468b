"""Sequential inference over future domains with hidden-state propagation.

Prediction walks target domains strictly in order. For every domain each
sample borrows a hidden state drawn from the bank, the dynamic encoder
advances it on the new inputs, and the advanced states replace the bank
wholesale before the next domain. The drift recurrence rolls forward one
step per domain on its own argmax samples, so no labels are consumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ._common import SequencingError, ValidationError, derive_seed
from .domain_stream import DomainSequence
from .latent_model import HiddenStateBank, RecurrentState, SyncModel
from .stochastic import gumbel_categorical

__all__ = ["PredictionRecord", "predict_sequence", "predict_erm"]


@dataclass
class PredictionRecord:
    """Per-domain inference output."""

    domain_index: int
    predictions: torch.Tensor
    logits: torch.Tensor
    labels: torch.Tensor | None = None
    accuracy: float | None = None

    def __post_init__(self) -> None:
        if self.predictions.ndim != 1 or self.logits.ndim != 2:
            raise ValidationError("predictions must be [n], logits [n, classes]")
        if self.predictions.shape[0] != self.logits.shape[0]:
            raise ValidationError("predictions and logits disagree on sample count")

    @property
    def n_samples(self) -> int:
        return int(self.predictions.shape[0])


def _scored(domain_index: int, logits: torch.Tensor, labels: torch.Tensor | None) -> PredictionRecord:
    predictions = logits.argmax(dim=-1)
    accuracy = None
    if labels is not None:
        accuracy = float((predictions == labels).to(torch.float64).mean())
    return PredictionRecord(
        domain_index=domain_index,
        predictions=predictions,
        logits=logits,
        labels=labels,
        accuracy=accuracy,
    )


def predict_sequence(
    model: SyncModel,
    bank: HiddenStateBank,
    targets: DomainSequence,
    seed: int,
) -> list[PredictionRecord]:
    """Classify each target domain in order, advancing the bank in place.

    Every domain must directly follow the bank's current position. Per
    sample, a hidden state is drawn uniformly with replacement from the
    bank (seeded, so repeatable), the dynamic encoder advances it on the
    sample's features, and the advanced per-sample states become the new
    bank. The drift factor comes from the learned prior recurrence alone.

    The caller keeps ownership of the bank: pass a clone to leave the
    original snapshot untouched. Prefix runs match full runs exactly
    because each domain draws from its own derived seed.
    """
    if len(bank) == 0:
        raise ValidationError("hidden state bank is empty; train before predicting")
    if bank.drift_state is None or bank.drift_sample is None:
        raise ValidationError("bank lacks the drift recurrence; finalize training first")
    if targets.feature_dim != model.feature_dim:
        raise ValidationError(
            f"model expects {model.feature_dim} features, data has {targets.feature_dim}"
        )
    if targets.num_classes > model.num_classes:
        raise ValidationError(
            f"data has {targets.num_classes} classes, model supports {model.num_classes}"
        )

    records: list[PredictionRecord] = []
    for domain in targets.domains:
        t = domain.t
        if t != bank.domain_index + 1:
            raise SequencingError(
                f"bank is positioned after domain {bank.domain_index}; "
                f"cannot jump to domain {t}"
            )
        n = domain.n_samples
        gen = torch.Generator().manual_seed(derive_seed(seed, "predict", t))
        h, c = bank.draw(n, gen)
        state = RecurrentState(h, c, domain_index=t - 1)
        with torch.no_grad():
            post_dy, advanced = model.encode_dynamic(domain.features, state, t=t)
            post_st = model.encode_static(domain.features)
            phi_st, _ = model.mask_causal(post_st.mu, "static", noise_mode="deterministic")
            phi_dy, _ = model.mask_causal(post_dy.mu, "dynamic", noise_mode="deterministic")
            drift_state = model.advance_drift_prior(bank.drift_sample, bank.drift_state)
            drift_probs = model.prior_drift(drift_state).probs
            z_d = gumbel_categorical(
                torch.log(drift_probs.clamp_min(1e-12)), noise_mode="deterministic"
            )
            logits = model.classify(phi_st, phi_dy, z_d.expand(n, -1))
        records.append(_scored(t, logits, domain.labels))
        bank.replace_per_sample(advanced.h, advanced.c, domain_index=t)
        bank.drift_state = drift_state.detached()
        bank.drift_sample = z_d
    return records


def predict_erm(model: torch.nn.Module, targets: DomainSequence) -> list[PredictionRecord]:
    """Classify target domains with a history-free baseline model."""
    records = []
    with torch.no_grad():
        for domain in targets.domains:
            logits = model(domain.features)
            records.append(_scored(domain.t, logits, domain.labels))
    return records
