"""Loss stack: reconstruction ELBO terms, the mini-batch entropy-based mutual
information penalty, supervised contrastive conditional-MI terms, and the
classification/drift mechanism terms, combined into one weighted total.

Conventions shared by every term: mean over the mini-batch, sum over the
domain sequence. All functions are pure in their inputs and parameters.
"""

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from ._common import NonFiniteLossError, ValidationError
from .latent_model import CategoricalPosterior, GaussianPosterior

logger = logging.getLogger("syncdg.objectives")

_LOG_TWO_PI = math.log(2.0 * math.pi)
_PRIOR_EPS = 1e-8

LOSS_PART_NAMES = (
    "recon",
    "kl_static",
    "kl_dynamic",
    "nll_class",
    "kl_drift",
    "mi_penalty",
    "static_contrastive",
    "dynamic_contrastive",
)


@dataclass
class LossBreakdown:
    """Per-term record of one training step plus the weighted total.

    total = (recon + kl_static + kl_dynamic) + (nll_class + kl_drift)
            + alpha1 * mi_penalty
            + alpha2 * (static_contrastive + dynamic_contrastive)
    """

    recon: torch.Tensor
    kl_static: torch.Tensor
    kl_dynamic: torch.Tensor
    nll_class: torch.Tensor
    kl_drift: torch.Tensor
    mi_penalty: torch.Tensor
    static_contrastive: torch.Tensor
    dynamic_contrastive: torch.Tensor
    alpha1: float
    alpha2: float
    total: torch.Tensor

    CSV_FIELDS = LOSS_PART_NAMES + ("alpha1", "alpha2", "total")

    def as_floats(self) -> dict[str, float]:
        out = {}
        for name in self.CSV_FIELDS:
            value = getattr(self, name)
            out[name] = float(value.detach() if torch.is_tensor(value) else value)
        return out


def standard_normal_like(posterior: GaussianPosterior) -> GaussianPosterior:
    """Fixed N(0, I) prior matching the posterior's shape."""
    return GaussianPosterior(torch.zeros_like(posterior.mu), torch.ones_like(posterior.sigma2))


def gaussian_kl(q: GaussianPosterior, p: GaussianPosterior) -> torch.Tensor:
    """Closed-form diagonal-Gaussian KL, summed over dims, averaged over batch."""
    if q.mu.shape != p.mu.shape or q.sigma2.shape != p.sigma2.shape:
        raise ValidationError("posterior and prior must share shapes")
    if not bool((q.sigma2 > 0).all()) or not bool((p.sigma2 > 0).all()):
        raise ValidationError("variances must be strictly positive")
    per_dim = 0.5 * (
        torch.log(p.sigma2 / q.sigma2) + (q.sigma2 + (q.mu - p.mu) ** 2) / p.sigma2 - 1.0
    )
    return per_dim.sum(dim=-1).mean()


def categorical_kl(q: CategoricalPosterior, p: CategoricalPosterior) -> torch.Tensor:
    """KL between categorical rows with the 0*log 0 = 0 convention.

    Prior entries below 1e-8 where the posterior carries mass are clamped to
    1e-8 and the degeneracy is reported through the module logger.
    """
    if q.probs.shape != p.probs.shape:
        raise ValidationError("posterior and prior must share simplex sizes")
    if bool(((p.probs < _PRIOR_EPS) & (q.probs > _PRIOR_EPS)).any()):
        logger.warning(
            "categorical KL: prior has near-zero mass where the posterior has mass; "
            "clamping prior entries at %.0e", _PRIOR_EPS
        )
    p_safe = p.probs.clamp(min=_PRIOR_EPS)
    per_row = (torch.special.xlogy(q.probs, q.probs) - q.probs * torch.log(p_safe)).sum(dim=-1)
    return per_row.mean()


def _check_aligned(name: str, *seqs) -> None:
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise ValidationError(f"{name}: per-domain sequences are misaligned, lengths {sorted(lengths)}")
    if lengths == {0}:
        raise ValidationError(f"{name}: sequences must cover at least one domain")


def loss_feature_pattern(
    x_seq: Sequence[torch.Tensor],
    posteriors_st: Sequence[GaussianPosterior],
    posteriors_dy: Sequence[GaussianPosterior],
    priors_dy: Sequence[GaussianPosterior],
    samples_st: Sequence[torch.Tensor],
    samples_dy: Sequence[torch.Tensor],
    decoder,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reconstruction plus latent alignment over the whole source sequence.

    recon is 0.5 * squared error (unit-variance Gaussian likelihood without
    its constant), mean over batch, sum over domains. The static posterior
    aligns with N(0, I), the dynamic posterior with its learned prior.
    """
    _check_aligned(
        "loss_feature_pattern", x_seq, posteriors_st, posteriors_dy, priors_dy, samples_st, samples_dy
    )
    recon = None
    kl_static = None
    kl_dynamic = None
    for x, post_st, post_dy, prior_dy, z_st, z_dy in zip(
        x_seq, posteriors_st, posteriors_dy, priors_dy, samples_st, samples_dy
    ):
        x_hat = decoder(z_st, z_dy)
        if x_hat.shape != x.shape:
            raise ValidationError("decoder output does not match input features")
        step_recon = 0.5 * ((x_hat - x) ** 2).sum(dim=-1).mean()
        step_kl_st = gaussian_kl(post_st, standard_normal_like(post_st))
        step_kl_dy = gaussian_kl(post_dy, prior_dy)
        recon = step_recon if recon is None else recon + step_recon
        kl_static = step_kl_st if kl_static is None else kl_static + step_kl_st
        kl_dynamic = step_kl_dy if kl_dynamic is None else kl_dynamic + step_kl_dy
    return recon, kl_static, kl_dynamic


def mws_entropy(
    latent_samples: torch.Tensor, posterior: GaussianPosterior, dataset_size: int
) -> torch.Tensor:
    """Mini-batch weighted entropy estimate of the aggregate latent.

    Evaluates every sample under every posterior in the batch and returns
    -(1/B) sum_i log[(1/(B * dataset_size)) sum_j q(z_i | x_j)] using a
    numerically stable log-sum-exp.
    """
    if latent_samples.ndim != 2:
        raise ValidationError("latent_samples must be [batch, dim]")
    if latent_samples.shape != posterior.mu.shape:
        raise ValidationError("latent_samples and posterior must share shape")
    batch = latent_samples.shape[0]
    if batch < 1:
        raise ValidationError("batch must be non-empty")
    if dataset_size < batch:
        raise ValidationError(f"dataset_size {dataset_size} must be >= batch size {batch}")
    diff = latent_samples.unsqueeze(1) - posterior.mu.unsqueeze(0)
    var = posterior.sigma2.unsqueeze(0)
    log_density = (-0.5 * (_LOG_TWO_PI + torch.log(var) + diff**2 / var)).sum(dim=-1)
    log_qz = torch.logsumexp(log_density, dim=1) - math.log(batch * dataset_size)
    return -log_qz.mean()


def loss_mutual_info(
    mu_st: torch.Tensor,
    sigma2_st: torch.Tensor,
    mu_dy: torch.Tensor,
    sigma2_dy: torch.Tensor,
    samples_st: torch.Tensor,
    samples_dy: torch.Tensor,
    dataset_size: int,
) -> torch.Tensor:
    """Estimated mutual information between static and dynamic latents.

    H(static) + H(dynamic) - H(joint) from three mini-batch entropy
    estimates; the joint density is the product of the two diagonal
    Gaussians over concatenated coordinates. Covers one domain; callers
    sum the values across the sequence.
    """
    h_st = mws_entropy(samples_st, GaussianPosterior(mu_st, sigma2_st), dataset_size)
    h_dy = mws_entropy(samples_dy, GaussianPosterior(mu_dy, sigma2_dy), dataset_size)
    joint = GaussianPosterior(
        torch.cat([mu_st, mu_dy], dim=-1), torch.cat([sigma2_st, sigma2_dy], dim=-1)
    )
    h_joint = mws_entropy(torch.cat([samples_st, samples_dy], dim=-1), joint, dataset_size)
    return h_st + h_dy - h_joint


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if not bool((na > 0).all()) or not bool((nb > 0).all()):
        raise ValidationError("cosine similarity undefined for zero-norm vectors")
    return (a * b).sum(dim=-1) / (na * nb)


def contrastive_cmi(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: Sequence[torch.Tensor],
    tau_contrastive: float,
) -> torch.Tensor:
    """Mean log-ratio of the positive similarity against positive plus negatives.

    With l(., .) the cosine similarity and M aligned negative batches, returns
    mean_j log[exp(l(j, pos)/tau) / (exp(l(j, pos)/tau) + sum_i exp(l(j, neg_i)/tau))],
    a value in (-inf, 0).
    """
    if tau_contrastive <= 0:
        raise ValidationError(f"tau_contrastive must be positive, got {tau_contrastive}")
    if len(negatives) < 1:
        raise ValidationError("at least one negative batch is required")
    if anchors.shape != positives.shape:
        raise ValidationError("anchors and positives must share shape")
    l_pos = _cosine(anchors, positives) / tau_contrastive
    l_neg = torch.stack([_cosine(anchors, neg) / tau_contrastive for neg in negatives], dim=-1)
    logits = torch.cat([l_pos.unsqueeze(-1), l_neg], dim=-1)
    return (l_pos - torch.logsumexp(logits, dim=-1)).mean()


def _grouped_contrastive(
    anchors: torch.Tensor,
    anchor_labels: torch.Tensor,
    pool: torch.Tensor,
    pool_labels: torch.Tensor,
    tau_contrastive: float,
    pair_identity: bool,
    context: str,
) -> torch.Tensor | None:
    """Anchor-weighted mean of per-class contrastive values within one domain.

    Anchors of each class take same-label pool rows as positives (their own
    row when pair_identity, else cyclically assigned) and every
    different-label pool row as one negative batch. Classes without both a
    positive and a negative pool are skipped and logged.
    """
    values = []
    weights = []
    for cls in torch.unique(anchor_labels).tolist():
        a_sel = anchor_labels == cls
        n_anchors = int(a_sel.sum())
        pos_pool = pool[pool_labels == cls]
        neg_pool = pool[pool_labels != cls]
        if (not pair_identity and pos_pool.shape[0] == 0) or neg_pool.shape[0] == 0:
            logger.info("%s: class %s lacks positives or negatives, skipped", context, cls)
            continue
        anchor_rows = anchors[a_sel]
        if pair_identity:
            positive_rows = pool[a_sel]
        else:
            idx = torch.arange(n_anchors) % pos_pool.shape[0]
            positive_rows = pos_pool[idx]
        negative_batches = [neg_pool[j].expand(n_anchors, -1) for j in range(neg_pool.shape[0])]
        values.append(
            contrastive_cmi(anchor_rows, positive_rows, negative_batches, tau_contrastive) * n_anchors
        )
        weights.append(n_anchors)
    if not weights:
        return None
    return sum(values) / sum(weights)


def loss_static_causal(
    static_reps: Sequence[torch.Tensor],
    labels: Sequence[torch.Tensor],
    tau_contrastive: float,
) -> torch.Tensor:
    """Cross-domain contrastive term tying same-class static factors together.

    For each consecutive domain pair, masked static features at step t are
    anchors; same-label rows from step t-1 are positives and different-label
    rows are negatives. Returns the negated sum of the per-pair values, so
    lower means stronger cross-domain class alignment.
    """
    _check_aligned("loss_static_causal", static_reps, labels)
    if len(static_reps) < 2:
        raise ValidationError("loss_static_causal needs at least 2 domains")
    total = None
    for t in range(1, len(static_reps)):
        value = _grouped_contrastive(
            static_reps[t],
            labels[t],
            static_reps[t - 1],
            labels[t - 1],
            tau_contrastive,
            pair_identity=False,
            context=f"static causal t={t + 1}",
        )
        if value is None:
            logger.info("static causal: no usable class pairs between steps %d and %d", t, t + 1)
            continue
        total = value if total is None else total + value
    if total is None:
        return torch.zeros((), dtype=static_reps[0].dtype)
    return -total


def loss_dynamic_causal(
    dynamic_reps: Sequence[torch.Tensor],
    static_reps: Sequence[torch.Tensor],
    labels: Sequence[torch.Tensor],
    tau_contrastive: float,
) -> torch.Tensor:
    """Within-domain contrastive term aligning dynamic factors to static ones.

    Masked dynamic features anchor against the same sample's masked static
    features (positives) and different-label static rows (negatives). The
    static side is detached: the already-learned static factors steer the
    dynamic branch, never the reverse. Single-class domains are skipped.
    """
    _check_aligned("loss_dynamic_causal", dynamic_reps, static_reps, labels)
    total = None
    for t, (dyn, st, y) in enumerate(zip(dynamic_reps, static_reps, labels), start=1):
        if torch.unique(y).numel() < 2:
            logger.info("dynamic causal: domain step %d has a single class, skipped", t)
            continue
        value = _grouped_contrastive(
            dyn, y, st.detach(), y, tau_contrastive, pair_identity=True, context=f"dynamic causal t={t}"
        )
        if value is None:
            continue
        total = value if total is None else total + value
    if total is None:
        return torch.zeros((), dtype=dynamic_reps[0].dtype)
    return -total


def loss_mechanism(
    logits_seq: Sequence[torch.Tensor],
    labels_seq: Sequence[torch.Tensor],
    drift_posteriors: Sequence[CategoricalPosterior],
    drift_priors: Sequence[CategoricalPosterior],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Classification cross-entropy plus drift-state KL, summed over domains."""
    _check_aligned("loss_mechanism", logits_seq, labels_seq, drift_posteriors, drift_priors)
    nll = None
    kld = None
    for logits, y, q, p in zip(logits_seq, labels_seq, drift_posteriors, drift_priors):
        if int(y.max()) >= logits.shape[-1] or int(y.min()) < 0:
            raise ValidationError("label outside the classifier's class range")
        step_nll = F.cross_entropy(logits, y)
        step_kld = categorical_kl(q, p)
        nll = step_nll if nll is None else nll + step_nll
        kld = step_kld if kld is None else kld + step_kld
    return nll, kld


def total_loss(parts: Mapping[str, torch.Tensor], alpha1: float, alpha2: float) -> LossBreakdown:
    """Combine the eight raw terms into the weighted training objective.

    Raises NonFiniteLossError naming the first offending term if any input
    is NaN or infinite, so training can abort with a precise diagnosis.
    """
    missing = [name for name in LOSS_PART_NAMES if name not in parts]
    if missing:
        raise ValidationError(f"missing loss parts: {missing}")
    unknown = [name for name in parts if name not in LOSS_PART_NAMES]
    if unknown:
        raise ValidationError(f"unknown loss parts: {unknown}")
    for name in LOSS_PART_NAMES:
        value = float(parts[name].detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    evolve = (parts["recon"] + parts["kl_static"] + parts["kl_dynamic"]) + (
        parts["nll_class"] + parts["kl_drift"]
    )
    total = (
        evolve
        + alpha1 * parts["mi_penalty"]
        + alpha2 * (parts["static_contrastive"] + parts["dynamic_contrastive"])
    )
    return LossBreakdown(
        recon=parts["recon"],
        kl_static=parts["kl_static"],
        kl_dynamic=parts["kl_dynamic"],
        nll_class=parts["nll_class"],
        kl_drift=parts["kl_drift"],
        mi_penalty=parts["mi_penalty"],
        static_contrastive=parts["static_contrastive"],
        dynamic_contrastive=parts["dynamic_contrastive"],
        alpha1=alpha1,
        alpha2=alpha2,
        total=total,
    )
