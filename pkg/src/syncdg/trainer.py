"""Sequential training: epoch loop, per-domain forward pass, model selection.

One optimizer step per iteration covers the whole source sequence. Each
iteration draws index-aligned batches for every source domain, runs the
static, dynamic, and drift branches in domain order, assembles the full
loss, and backpropagates once through all modules. The dynamic encoder
state reached at the final source domain is banked for inference, and the
checkpoint with the best intermediate-domain average accuracy is retained.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from ._common import (
    NonFiniteLossError,
    ValidationError,
    derive_seed,
    float_repr,
    source_hash,
    write_text_atomic,
)
from .domain_stream import DomainSequence, sequence_batches
from .latent_model import (
    CHECKPOINT_VERSION,
    HiddenStateBank,
    SyncModel,
    save_checkpoint,
)
from .objectives import LossBreakdown, loss_dynamic_causal, loss_feature_pattern, loss_mechanism, loss_mutual_info, loss_static_causal, total_loss
from .predictor import predict_erm, predict_sequence
from .stochastic import NOISE_MODES, gumbel_categorical, reparameterize_gaussian

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "RunManifest",
    "TrainResult",
    "ErmModel",
    "train",
    "train_erm_baseline",
    "sequence_forward_losses",
    "save_erm_checkpoint",
    "load_erm_checkpoint",
]

LOSS_CSV_HEADER = ("epoch", "iteration") + LossBreakdown.CSV_FIELDS

_DATASET_DEFAULTS: dict[str, dict[str, float | int]] = {
    "circle": {
        "batch_size": 64,
        "epochs": 30,
        "learning_rate": 2e-3,
        "alpha1": 1.0,
        "alpha2": 0.02,
        "mask_ratio": 0.6,
        "latent_dim": 20,
    },
    "sine": {
        "batch_size": 64,
        "epochs": 50,
        "learning_rate": 2e-3,
        "alpha1": 1.0,
        "alpha2": 0.001,
        "mask_ratio": 0.6,
        "latent_dim": 32,
    },
}


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    Defaults correspond to the circle benchmark; use for_dataset to pick
    the per-dataset table, then override individual fields as needed.
    """

    dataset: str = "circle"
    batch_size: int = 64
    epochs: int = 30
    learning_rate: float = 2e-3
    alpha1: float = 1.0
    alpha2: float = 0.02
    mask_ratio: float = 0.6
    latent_dim: int = 20
    drift_states: int | None = None
    hidden_dim: int = 64
    tau_gumbel: float = 0.5
    tau_contrastive: float = 0.1
    grad_clip: float = 10.0
    kl_warmup_epochs: int = 0
    seed: int = 0
    device: str = "cpu"
    probe_samples: int = 512

    def __post_init__(self) -> None:
        problems = []
        for name in ("batch_size", "epochs", "latent_dim", "hidden_dim", "probe_samples"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("learning_rate", "alpha1", "alpha2", "tau_gumbel", "tau_contrastive", "grad_clip"):
            if float(getattr(self, name)) <= 0:
                problems.append(f"{name} must be > 0")
        if not 0.0 < self.mask_ratio <= 1.0:
            problems.append("mask_ratio must be in (0, 1]")
        if self.drift_states is not None and int(self.drift_states) < 2:
            problems.append("drift_states must be >= 2 when given")
        if int(self.kl_warmup_epochs) < 0:
            problems.append("kl_warmup_epochs must be >= 0")
        if self.device != "cpu":
            problems.append(f"unsupported device {self.device!r}; only cpu is available")
        if problems:
            raise ValidationError("; ".join(problems))

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "TrainConfig":
        """Built-in defaults for a dataset family, e.g. 'circle-gradual' -> circle row."""
        family = name.split("-")[0]
        if family not in _DATASET_DEFAULTS:
            known = ", ".join(sorted(_DATASET_DEFAULTS))
            raise ValidationError(f"no defaults for dataset {name!r}; known families: {known}")
        values: dict = {"dataset": name, **_DATASET_DEFAULTS[family]}
        unknown = set(overrides) - set(cls.field_names())
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        values.update(overrides)
        return cls(**values)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunManifest:
    """Append-only record of one training run."""

    method: str
    dataset: str
    config: dict
    seed: int
    code_hash: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    checkpoint_path: str | None = None
    runtime: dict = field(default_factory=dict)

    def add_epoch(self, entry: dict) -> None:
        expected = len(self.epochs) + 1
        if entry.get("epoch") != expected:
            raise ValidationError(f"expected epoch {expected}, got {entry.get('epoch')!r}")
        self.epochs.append(entry)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        return cls(**data)


@dataclass
class TrainResult:
    model: nn.Module
    bank: HiddenStateBank | None
    manifest: RunManifest
    loss_rows: list[dict[str, str]]


def sequence_forward_losses(
    model: SyncModel,
    batches: Sequence[tuple[torch.Tensor, torch.Tensor]],
    domain_sizes: Sequence[int],
    tau_contrastive: float,
    noise_mode: str = "stochastic",
    generator: torch.Generator | None = None,
):
    """Run one aligned pass over the source sequence and collect loss parts.

    Returns the loss-part mapping expected by total_loss plus the dynamic
    encoder state after the final domain (the bank entry). The drift factor
    is domain-level: one categorical draw per domain, inferred from the
    batch's label frequencies and shared by every sample in that domain.
    Deterministic mode replaces every sampling site with its noise-free
    counterpart: latents collapse to posterior means and discrete draws
    to argmaxes.
    """
    if noise_mode not in NOISE_MODES:
        raise ValidationError(f"noise_mode must be one of {NOISE_MODES}, got {noise_mode!r}")
    if len(batches) != len(domain_sizes):
        raise ValidationError("batches and domain_sizes must align")
    if len(batches) < 2:
        raise ValidationError("need at least 2 source domains")
    stochastic = noise_mode == "stochastic"
    batch_size = batches[0][0].shape[0]

    dyn_state = model.init_state(batch_size)
    dyn_prior_state = model.init_state(batch_size)
    drift_state = model.init_state(1)
    drift_prior_state = model.init_state(1)
    z_dy_prev = torch.zeros((batch_size, model.latent_dim), dtype=torch.float64)
    z_d_prev = torch.zeros((1, model.drift_states), dtype=torch.float64)

    xs, labels_seq, logits_seq = [], [], []
    posts_st, posts_dy, priors_dy = [], [], []
    samples_st, samples_dy = [], []
    drift_posts, drift_priors = [], []
    masked_st, masked_dy = [], []
    mi_total = torch.zeros((), dtype=torch.float64)

    for step, (x, y) in enumerate(batches, start=1):
        post_st = model.encode_static(x)
        post_dy, dyn_state = model.encode_dynamic(x, dyn_state, t=step)
        if stochastic:
            noise_st = torch.randn(post_st.mu.shape, dtype=torch.float64, generator=generator)
            noise_dy = torch.randn(post_dy.mu.shape, dtype=torch.float64, generator=generator)
        else:
            noise_st = torch.zeros_like(post_st.mu)
            noise_dy = torch.zeros_like(post_dy.mu)
        z_st = reparameterize_gaussian(post_st.mu, post_st.sigma2, noise_st)
        z_dy = reparameterize_gaussian(post_dy.mu, post_dy.sigma2, noise_dy)

        dyn_prior_state = model.advance_dynamic_prior(z_dy_prev, dyn_prior_state)
        prior_dy = model.prior_dynamic(dyn_prior_state)

        y_onehot = nn.functional.one_hot(y, model.num_classes).to(torch.float64)
        label_frequencies = y_onehot.mean(dim=0, keepdim=True)
        post_d, drift_state = model.encode_drift(label_frequencies, drift_state, t=step)
        z_d = gumbel_categorical(
            torch.log(post_d.probs.clamp_min(1e-12)),
            tau_gumbel=model.tau_gumbel,
            noise_mode=noise_mode,
            generator=generator,
        )
        drift_prior_state = model.advance_drift_prior(z_d_prev, drift_prior_state)
        prior_d = model.prior_drift(drift_prior_state)

        phi_st, _ = model.mask_causal(post_st.mu, "static", noise_mode=noise_mode, generator=generator)
        phi_dy, _ = model.mask_causal(post_dy.mu, "dynamic", noise_mode=noise_mode, generator=generator)
        logits = model.classify(phi_st, phi_dy, z_d.expand(x.shape[0], -1))

        mi_total = mi_total + loss_mutual_info(
            post_st.mu,
            post_st.sigma2,
            post_dy.mu,
            post_dy.sigma2,
            z_st,
            z_dy,
            dataset_size=domain_sizes[step - 1],
        )

        xs.append(x)
        labels_seq.append(y)
        logits_seq.append(logits)
        posts_st.append(post_st)
        posts_dy.append(post_dy)
        priors_dy.append(prior_dy)
        samples_st.append(z_st)
        samples_dy.append(z_dy)
        drift_posts.append(post_d)
        drift_priors.append(prior_d)
        masked_st.append(phi_st)
        masked_dy.append(phi_dy)
        z_dy_prev, z_d_prev = z_dy, z_d

    recon, kl_static, kl_dynamic = loss_feature_pattern(
        xs, posts_st, posts_dy, priors_dy, samples_st, samples_dy, decoder=model.decode
    )
    nll_class, kl_drift = loss_mechanism(logits_seq, labels_seq, drift_posts, drift_priors)
    static_con = loss_static_causal(masked_st, labels_seq, tau_contrastive)
    dynamic_con = loss_dynamic_causal(masked_dy, masked_st, labels_seq, tau_contrastive)

    parts = {
        "recon": recon,
        "kl_static": kl_static,
        "kl_dynamic": kl_dynamic,
        "nll_class": nll_class,
        "kl_drift": kl_drift,
        "mi_penalty": mi_total,
        "static_contrastive": static_con,
        "dynamic_contrastive": dynamic_con,
    }
    return parts, dyn_state


def _validate_pair(config: TrainConfig, source: DomainSequence, intermediate: DomainSequence) -> None:
    if len(source.domains) < 2:
        raise ValidationError("need at least 2 source domains to train")
    if len(intermediate.domains) < 1:
        raise ValidationError("model selection needs at least one intermediate domain")
    if source.feature_dim != intermediate.feature_dim:
        raise ValidationError(
            f"feature dims differ: source {source.feature_dim}, intermediate {intermediate.feature_dim}"
        )
    if intermediate.domains[0].t != source.domains[-1].t + 1:
        raise ValidationError(
            f"intermediate domains must directly follow the source block; "
            f"source ends at {source.domains[-1].t}, intermediate starts at {intermediate.domains[0].t}"
        )
    if config.drift_states is not None and config.drift_states < source.num_classes:
        logger.info(
            "drift_states %d below num_classes %d", config.drift_states, source.num_classes
        )


def _probe_slice(source: DomainSequence, cap: int) -> list[torch.Tensor]:
    """Fixed per-domain feature slices reused every epoch for the MI probe."""
    per = max(2, cap // len(source.domains))
    per = min(per, min(d.n_samples for d in source.domains))
    return [d.features[:per] for d in source.domains]


def _mi_probe(model: SyncModel, slices: list[torch.Tensor], domain_sizes: Sequence[int]) -> float:
    """Deterministic disentanglement estimate on the fixed probe slices."""
    total = 0.0
    with torch.no_grad():
        state = model.init_state(slices[0].shape[0])
        for idx, x in enumerate(slices, start=1):
            post_st = model.encode_static(x)
            post_dy, state = model.encode_dynamic(x, state, t=idx)
            total += float(
                loss_mutual_info(
                    post_st.mu,
                    post_st.sigma2,
                    post_dy.mu,
                    post_dy.sigma2,
                    post_st.mu,
                    post_dy.mu,
                    dataset_size=domain_sizes[idx - 1],
                )
            )
    return total


def _intermediate_average(model, bank: HiddenStateBank, intermediate: DomainSequence, seed: int) -> float:
    records = predict_sequence(model, bank.clone(), intermediate, seed=seed)
    return sum(r.accuracy for r in records) / len(records)


def format_loss_csv(rows: Sequence[dict[str, str]]) -> str:
    lines = [",".join(LOSS_CSV_HEADER)]
    for row in rows:
        lines.append(",".join(row[name] for name in LOSS_CSV_HEADER))
    return "\n".join(lines) + "\n"


def _loss_row(epoch: int, iteration: int, breakdown: LossBreakdown) -> dict[str, str]:
    row = {"epoch": str(epoch), "iteration": str(iteration)}
    for name, value in breakdown.as_floats().items():
        row[name] = float_repr(value)
    return row


def _epoch_mean(rows: Sequence[dict[str, str]]) -> dict[str, float]:
    names = LossBreakdown.CSV_FIELDS
    return {
        name: sum(float(row[name]) for row in rows) / len(rows) for name in names
    }


def _write_outputs(
    out_dir,
    model: SyncModel,
    bank: HiddenStateBank | None,
    manifest: RunManifest,
    loss_rows: Sequence[dict[str, str]],
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "model.pt"
    save_checkpoint(checkpoint, model, bank=bank, config=manifest.config)
    manifest.checkpoint_path = checkpoint.name
    write_text_atomic(out / "losses.csv", format_loss_csv(loss_rows))
    write_text_atomic(out / "manifest.json", manifest.to_json())


def train(
    config: TrainConfig,
    source: DomainSequence,
    intermediate: DomainSequence,
    out_dir=None,
) -> TrainResult:
    """Fit the full model on the source sequence, selecting by intermediate accuracy.

    Every epoch clears the hidden state bank, sweeps the source domains
    once per iteration, banks the final-domain encoder states, and scores
    the intermediate domains. The returned model and bank belong to the
    best-scoring epoch. A non-finite loss aborts training but still writes
    the best checkpoint seen so far when out_dir is given.
    """
    _validate_pair(config, source, intermediate)
    torch.manual_seed(derive_seed(config.seed, "init"))
    model = SyncModel(
        feature_dim=source.feature_dim,
        num_classes=source.num_classes,
        latent_dim=config.latent_dim,
        drift_states=config.drift_states,
        hidden_dim=config.hidden_dim,
        mask_ratio=config.mask_ratio,
        tau_gumbel=config.tau_gumbel,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    bank = HiddenStateBank()
    manifest = RunManifest(
        method="sync",
        dataset=source.name,
        config=config.as_dict(),
        seed=config.seed,
        code_hash=source_hash(),
    )
    loss_rows: list[dict[str, str]] = []
    domain_sizes = [d.n_samples for d in source.domains]
    replacement = min(domain_sizes) < config.batch_size
    if replacement:
        logger.info("smallest domain below batch_size; sampling batches with replacement")
    probe = _probe_slice(source, config.probe_samples)
    n_domains = len(source.domains)
    best: dict | None = None
    started = time.perf_counter()

    try:
        for epoch in range(1, config.epochs + 1):
            bank.clear()
            epoch_rows: list[dict[str, str]] = []
            for iteration, batches in enumerate(
                sequence_batches(
                    source, config.batch_size, config.seed, epoch=epoch, replacement=replacement
                ),
                start=1,
            ):
                gen = torch.Generator().manual_seed(
                    derive_seed(config.seed, "train", epoch, iteration)
                )
                parts, final_state = sequence_forward_losses(
                    model,
                    batches,
                    domain_sizes,
                    config.tau_contrastive,
                    noise_mode="stochastic",
                    generator=gen,
                )
                breakdown = total_loss(parts, config.alpha1, config.alpha2)
                objective = breakdown.total
                if config.kl_warmup_epochs > 0 and epoch <= config.kl_warmup_epochs:
                    # Warm-up: drop the Gaussian KL terms for the first half of
                    # the window, then ramp them in linearly, so the latents
                    # fill with input signal before being compressed. Logged
                    # losses stay unweighted and the final objective is intact.
                    hold = config.kl_warmup_epochs // 2
                    ramp = config.kl_warmup_epochs - hold
                    beta = max(0.0, (epoch - 1 - hold) / ramp)
                    objective = objective - (1.0 - beta) * (
                        parts["kl_static"] + parts["kl_dynamic"]
                    )
                optimizer.zero_grad()
                objective.backward()
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                bank.append(final_state)
                epoch_rows.append(_loss_row(epoch, iteration, breakdown))

            with torch.no_grad():
                drift_state, drift_sample = model.roll_drift_prior(n_domains)
            bank.drift_state = drift_state.detached()
            bank.drift_sample = drift_sample
            loss_rows.extend(epoch_rows)

            mi_value = _mi_probe(model, probe, domain_sizes)
            inter_avg = _intermediate_average(model, bank, intermediate, config.seed)
            is_best = best is None or inter_avg > best["avg"]
            if is_best:
                best = {
                    "avg": inter_avg,
                    "epoch": epoch,
                    "state": copy.deepcopy(model.state_dict()),
                    "bank": bank.clone(),
                }
            manifest.add_epoch(
                {
                    "epoch": epoch,
                    "losses": _epoch_mean(epoch_rows),
                    "mi_probe": mi_value,
                    "intermediate_avg": inter_avg,
                    "selected": is_best,
                }
            )
            logger.info(
                "epoch %d/%d total=%.4f mi=%.4f intermediate_avg=%.4f%s",
                epoch,
                config.epochs,
                manifest.epochs[-1]["losses"]["total"],
                mi_value,
                inter_avg,
                " *" if is_best else "",
            )
    except NonFiniteLossError:
        if best is not None:
            model.load_state_dict(best["state"])
            bank = best["bank"]
            manifest.best_epoch = best["epoch"]
        manifest.runtime = {"wall_clock_seconds": time.perf_counter() - started, "aborted": True}
        if out_dir is not None:
            _write_outputs(out_dir, model, bank, manifest, loss_rows)
        raise

    model.load_state_dict(best["state"])
    bank = best["bank"]
    manifest.best_epoch = best["epoch"]
    manifest.runtime = {"wall_clock_seconds": time.perf_counter() - started}
    if out_dir is not None:
        _write_outputs(out_dir, model, bank, manifest, loss_rows)
    return TrainResult(model=model, bank=bank, manifest=manifest, loss_rows=loss_rows)


class ErmModel(nn.Module):
    """History-free baseline: shared-width extractor plus a linear head."""

    def __init__(self, feature_dim: int, num_classes: int, latent_dim: int = 20, hidden_dim: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.extractor = nn.Sequential(
            nn.Linear(feature_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, latent_dim),
        )
        self.head = nn.Linear(latent_dim, num_classes)
        self.to(torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.feature_dim:
            raise ValidationError(f"expected {self.feature_dim} features, got {x.shape[-1]}")
        return self.head(self.extractor(x))

    def dims(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "latent_dim": self.latent_dim,
            "hidden_dim": self.hidden_dim,
        }


def save_erm_checkpoint(path, model: ErmModel, config: dict | None = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "erm",
            "dims": model.dims(),
            "state_dict": model.state_dict(),
            "config": dict(config or {}),
        },
        path,
    )


def load_erm_checkpoint(path) -> tuple[ErmModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    if payload.get("kind") != "erm":
        raise ValidationError(f"checkpoint holds a {payload.get('kind')!r} model, expected 'erm'")
    dims = payload["dims"]
    model = ErmModel(
        feature_dim=int(dims["feature_dim"]),
        num_classes=int(dims["num_classes"]),
        latent_dim=int(dims["latent_dim"]),
        hidden_dim=int(dims["hidden_dim"]),
    )
    model.load_state_dict(payload["state_dict"])
    return model, dict(payload.get("config", {}))


ERM_CSV_HEADER = ("epoch", "iteration", "nll_class")


def format_erm_csv(rows: Sequence[dict[str, str]]) -> str:
    lines = [",".join(ERM_CSV_HEADER)]
    for row in rows:
        lines.append(",".join(row[name] for name in ERM_CSV_HEADER))
    return "\n".join(lines) + "\n"


def train_erm_baseline(
    config: TrainConfig,
    source: DomainSequence,
    intermediate: DomainSequence,
    out_dir=None,
) -> TrainResult:
    """Fit the pooled cross-entropy baseline with the same budget and splits.

    Matches the main model's per-epoch sample count (iterations x domains
    batches of the same size) and its model-selection rule on intermediate
    domains, so comparisons isolate the representation, not the budget.
    """
    _validate_pair(config, source, intermediate)
    torch.manual_seed(derive_seed(config.seed, "erm-init"))
    model = ErmModel(
        feature_dim=source.feature_dim,
        num_classes=source.num_classes,
        latent_dim=config.latent_dim,
        hidden_dim=config.hidden_dim,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    manifest = RunManifest(
        method="erm",
        dataset=source.name,
        config=config.as_dict(),
        seed=config.seed,
        code_hash=source_hash(),
    )
    features = torch.cat([d.features for d in source.domains])
    labels = torch.cat([d.labels for d in source.domains])
    pool = features.shape[0]
    min_size = min(d.n_samples for d in source.domains)
    steps_per_epoch = max(1, math.ceil(min_size / config.batch_size)) * len(source.domains)
    loss_rows: list[dict[str, str]] = []
    best: dict | None = None
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        epoch_rows: list[dict[str, str]] = []
        for iteration in range(1, steps_per_epoch + 1):
            gen = torch.Generator().manual_seed(derive_seed(config.seed, "erm", epoch, iteration))
            idx = torch.randint(pool, (config.batch_size,), generator=gen)
            logits = model(features[idx])
            loss = nn.functional.cross_entropy(logits, labels[idx])
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            epoch_rows.append(
                {
                    "epoch": str(epoch),
                    "iteration": str(iteration),
                    "nll_class": float_repr(float(loss.detach())),
                }
            )
        loss_rows.extend(epoch_rows)
        records = predict_erm(model, intermediate)
        inter_avg = sum(r.accuracy for r in records) / len(records)
        is_best = best is None or inter_avg > best["avg"]
        if is_best:
            best = {"avg": inter_avg, "epoch": epoch, "state": copy.deepcopy(model.state_dict())}
        manifest.add_epoch(
            {
                "epoch": epoch,
                "losses": {
                    "nll_class": sum(float(r["nll_class"]) for r in epoch_rows) / len(epoch_rows)
                },
                "intermediate_avg": inter_avg,
                "selected": is_best,
            }
        )

    model.load_state_dict(best["state"])
    manifest.best_epoch = best["epoch"]
    manifest.runtime = {"wall_clock_seconds": time.perf_counter() - started}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_erm_checkpoint(out / "model.pt", model, config=manifest.config)
        manifest.checkpoint_path = "model.pt"
        write_text_atomic(out / "losses.csv", format_erm_csv(loss_rows))
        write_text_atomic(out / "manifest.json", manifest.to_json())
    return TrainResult(model=model, bank=None, manifest=manifest, loss_rows=loss_rows)
