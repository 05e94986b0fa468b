"""Network components for static/dynamic/drift latent modeling.

SyncModel bundles:

* a static encoder mapping each observation to a diagonal Gaussian over the
  time-invariant latent (prior fixed at N(0, I)),
* a dynamic encoder whose feature extractor feeds a single-layer LSTM cell,
  carrying information across consecutive domains,
* a learned recurrent prior over the dynamic latent, advanced on previously
  sampled latents,
* a recurrent drift encoder over one-hot labels plus a learned recurrent
  categorical drift prior,
* a decoder reconstructing observations from both latents,
* two causal maskers (score networks plus k-hot sampling) selecting the
  extractor-representation dimensions fed to the linear classifier.

Recurrent states are caller-owned values; every operation returns fresh
state objects instead of mutating inputs.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from ._common import SequencingError, ValidationError
from .stochastic import KHotMask, gumbel_khot

LOGVAR_RANGE = 8.0
CHECKPOINT_VERSION = 1


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian with strictly positive variances."""

    mu: torch.Tensor
    sigma2: torch.Tensor


@dataclass
class CategoricalPosterior:
    """Probability vector over drift states; rows sum to 1."""

    probs: torch.Tensor


@dataclass
class RecurrentState:
    """LSTM cell state plus the index of the last domain it consumed."""

    h: torch.Tensor
    c: torch.Tensor
    domain_index: int = 0

    @property
    def batch_size(self) -> int:
        return self.h.shape[0]

    def detached(self) -> "RecurrentState":
        return RecurrentState(self.h.detach().clone(), self.c.detach().clone(), self.domain_index)


@dataclass
class HiddenStateBank:
    """Pool of dynamic-encoder states carried into sequential inference.

    During training the bank collects one entry per iteration, each holding
    the batch state after the final source domain. During inference each
    processed sample stores its advanced state, and the pool is replaced
    wholesale after every domain. The bank also carries the drift prior's
    recurrence so consecutive prediction calls continue where the previous
    call stopped.
    """

    entries: list[RecurrentState] = field(default_factory=list)
    domain_index: int = 0
    drift_state: RecurrentState | None = None
    drift_sample: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries = []

    def append(self, state: RecurrentState) -> None:
        self.entries.append(state.detached())
        self.domain_index = state.domain_index

    @property
    def total_rows(self) -> int:
        return sum(e.batch_size for e in self.entries)

    def pooled(self) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.entries:
            raise ValidationError("hidden state bank is empty")
        h = torch.cat([e.h for e in self.entries], dim=0)
        c = torch.cat([e.c for e in self.entries], dim=0)
        return h, c

    def draw(self, n: int, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        """Draw n states uniformly with replacement from the pooled rows."""
        h, c = self.pooled()
        idx = torch.randint(h.shape[0], (n,), generator=generator)
        return h[idx], c[idx]

    def replace_per_sample(self, h: torch.Tensor, c: torch.Tensor, domain_index: int) -> None:
        """Replace all entries with one single-row entry per processed sample."""
        self.entries = [
            RecurrentState(h[i : i + 1].detach().clone(), c[i : i + 1].detach().clone(), domain_index)
            for i in range(h.shape[0])
        ]
        self.domain_index = domain_index

    def clone(self) -> "HiddenStateBank":
        bank = HiddenStateBank(
            entries=[e.detached() for e in self.entries],
            domain_index=self.domain_index,
        )
        if self.drift_state is not None:
            bank.drift_state = self.drift_state.detached()
        if self.drift_sample is not None:
            bank.drift_sample = self.drift_sample.detach().clone()
        return bank

    def to_payload(self) -> dict:
        payload = {
            "entry_h": [e.h for e in self.entries],
            "entry_c": [e.c for e in self.entries],
            "entry_t": [e.domain_index for e in self.entries],
            "domain_index": self.domain_index,
        }
        if self.drift_state is not None:
            payload["drift_h"] = self.drift_state.h
            payload["drift_c"] = self.drift_state.c
            payload["drift_t"] = self.drift_state.domain_index
        if self.drift_sample is not None:
            payload["drift_sample"] = self.drift_sample
        return payload

    @staticmethod
    def from_payload(payload: dict) -> "HiddenStateBank":
        bank = HiddenStateBank(domain_index=int(payload["domain_index"]))
        bank.entries = [
            RecurrentState(h.clone(), c.clone(), int(t))
            for h, c, t in zip(payload["entry_h"], payload["entry_c"], payload["entry_t"])
        ]
        if "drift_h" in payload:
            bank.drift_state = RecurrentState(
                payload["drift_h"].clone(), payload["drift_c"].clone(), int(payload["drift_t"])
            )
        if "drift_sample" in payload:
            bank.drift_sample = payload["drift_sample"].clone()
        return bank


def _extractor(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden_dim),
        nn.ReLU(),
        nn.Linear(hidden_dim, hidden_dim),
        nn.ReLU(),
        nn.Linear(hidden_dim, out_dim),
    )


def _score_network(latent_dim: int, hidden_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(latent_dim, hidden_dim),
        nn.ReLU(),
        nn.Linear(hidden_dim, hidden_dim),
        nn.ReLU(),
        nn.Linear(hidden_dim, latent_dim),
    )


def mask_cardinality(mask_ratio: float, latent_dim: int) -> int:
    """Number of surviving dimensions: round half up of ratio * dim, min 1."""
    return max(1, math.floor(mask_ratio * latent_dim + 0.5))


def _init_forget_bias(cell: nn.LSTMCell, value: float) -> None:
    """Bias the forget gate open so state carries across long domain chains."""
    h = cell.hidden_size
    for name in ("bias_ih", "bias_hh"):
        bias = getattr(cell, name)
        with torch.no_grad():
            bias[h : 2 * h].fill_(value / 2)


class SyncModel(nn.Module):
    """Static/dynamic/drift latent model with causal masking and a linear head."""

    def __init__(
        self,
        feature_dim: int,
        num_classes: int,
        latent_dim: int = 20,
        drift_states: int | None = None,
        hidden_dim: int = 64,
        mask_ratio: float = 0.6,
        tau_gumbel: float = 0.5,
        dtype=torch.float64,
    ):
        super().__init__()
        if feature_dim < 1 or num_classes < 2 or latent_dim < 1 or hidden_dim < 1:
            raise ValidationError("feature_dim, latent_dim, hidden_dim must be >= 1 and num_classes >= 2")
        if not 0 < mask_ratio <= 1:
            raise ValidationError(f"mask_ratio must lie in (0, 1], got {mask_ratio}")
        if tau_gumbel <= 0:
            raise ValidationError(f"tau_gumbel must be positive, got {tau_gumbel}")
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.drift_states = num_classes if drift_states is None else int(drift_states)
        if self.drift_states < 2:
            raise ValidationError("drift_states must be >= 2")
        self.hidden_dim = hidden_dim
        self.mask_ratio = mask_ratio
        self.tau_gumbel = tau_gumbel
        self.mask_k = mask_cardinality(mask_ratio, latent_dim)

        self.static_extractor = _extractor(feature_dim, hidden_dim, latent_dim)
        self.static_mu = nn.Linear(latent_dim, latent_dim)
        self.static_logvar = nn.Linear(latent_dim, latent_dim)

        self.dynamic_extractor = _extractor(feature_dim, hidden_dim, latent_dim)
        self.dynamic_cell = nn.LSTMCell(latent_dim, hidden_dim)
        self.dynamic_feature = nn.Linear(hidden_dim, latent_dim)
        self.dynamic_mu = nn.Linear(latent_dim, latent_dim)
        self.dynamic_logvar = nn.Linear(latent_dim, latent_dim)

        self.dynamic_prior_cell = nn.LSTMCell(latent_dim, hidden_dim)
        self.dynamic_prior_mu = nn.Linear(hidden_dim, latent_dim)
        self.dynamic_prior_logvar = nn.Linear(hidden_dim, latent_dim)

        self.drift_cell = nn.LSTMCell(num_classes, hidden_dim)
        self.drift_head = nn.Linear(hidden_dim, self.drift_states)
        self.drift_prior_cell = nn.LSTMCell(self.drift_states, hidden_dim)
        self.drift_prior_head = nn.Linear(hidden_dim, self.drift_states)

        self.decoder = nn.Sequential(
            nn.Linear(2 * latent_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, feature_dim),
        )
        self.static_masker = _score_network(latent_dim, hidden_dim)
        self.dynamic_masker = _score_network(latent_dim, hidden_dim)
        self.classifier = nn.Linear(2 * latent_dim + self.drift_states, num_classes)
        for cell in (self.dynamic_cell, self.dynamic_prior_cell, self.drift_cell, self.drift_prior_cell):
            _init_forget_bias(cell, 1.0)
        self.to(dtype)
        self._dtype = dtype

    # ---- state management -------------------------------------------------

    def init_state(self, batch_size: int) -> RecurrentState:
        """Zero state, the shared starting point of every recurrence."""
        zeros = torch.zeros((batch_size, self.hidden_dim), dtype=self._dtype)
        return RecurrentState(zeros, zeros.clone(), domain_index=0)

    @staticmethod
    def _check_sequence(state: RecurrentState, t: int | None) -> None:
        if t is not None and state.domain_index != t - 1:
            raise SequencingError(
                f"state consumed domain {state.domain_index}, cannot advance to domain {t}"
            )

    def _gaussian_from(self, rep: torch.Tensor, mu_head: nn.Linear, logvar_head: nn.Linear) -> GaussianPosterior:
        logvar = logvar_head(rep).clamp(-LOGVAR_RANGE, LOGVAR_RANGE)
        return GaussianPosterior(mu=mu_head(rep), sigma2=torch.exp(logvar))

    # ---- encoders ----------------------------------------------------------

    def encode_static(self, x: torch.Tensor) -> GaussianPosterior:
        """Per-sample posterior over the static latent; no recurrence involved."""
        self._check_features(x)
        return self._gaussian_from(self.static_extractor(x), self.static_mu, self.static_logvar)

    def encode_dynamic(
        self, x: torch.Tensor, state: RecurrentState, t: int | None = None
    ) -> tuple[GaussianPosterior, RecurrentState]:
        """Posterior over the dynamic latent given the recurrent state and x.

        The recurrent cell consumes the extractor output; all dependence on
        earlier domains flows through the carried (h, c) state, which is
        exactly what the bank stores and replays at inference time.
        """
        self._check_features(x)
        self._check_sequence(state, t)
        h, c = self.dynamic_cell(self.dynamic_extractor(x), (state.h, state.c))
        posterior = self._gaussian_from(self.dynamic_feature(h), self.dynamic_mu, self.dynamic_logvar)
        return posterior, RecurrentState(h, c, state.domain_index + 1)

    def encode_drift(
        self, y_onehot: torch.Tensor, state: RecurrentState, t: int | None = None
    ) -> tuple[CategoricalPosterior, RecurrentState]:
        """Categorical posterior over drift states given the label history."""
        if y_onehot.ndim != 2 or y_onehot.shape[-1] != self.num_classes:
            raise ValidationError(
                f"expected one-hot labels of width {self.num_classes}, got {tuple(y_onehot.shape)}"
            )
        self._check_sequence(state, t)
        h, c = self.drift_cell(y_onehot, (state.h, state.c))
        probs = torch.softmax(self.drift_head(h), dim=-1)
        return CategoricalPosterior(probs=probs), RecurrentState(h, c, state.domain_index + 1)

    # ---- learned priors ----------------------------------------------------

    def advance_dynamic_prior(self, z_prev: torch.Tensor, state: RecurrentState) -> RecurrentState:
        """Feed the previously sampled dynamic latent (zeros for the first step)."""
        if z_prev.shape[-1] != self.latent_dim:
            raise ValidationError(f"z_prev must have width {self.latent_dim}")
        h, c = self.dynamic_prior_cell(z_prev, (state.h, state.c))
        return RecurrentState(h, c, state.domain_index + 1)

    def prior_dynamic(self, state: RecurrentState) -> GaussianPosterior:
        """Prior over the dynamic latent for the step the state has reached."""
        return self._gaussian_from(state.h, self.dynamic_prior_mu, self.dynamic_prior_logvar)

    def advance_drift_prior(self, z_prev: torch.Tensor, state: RecurrentState) -> RecurrentState:
        """Feed the previously sampled drift state (zeros for the first step)."""
        if z_prev.shape[-1] != self.drift_states:
            raise ValidationError(f"z_prev must have width {self.drift_states}")
        h, c = self.drift_prior_cell(z_prev, (state.h, state.c))
        return RecurrentState(h, c, state.domain_index + 1)

    def prior_drift(self, state: RecurrentState) -> CategoricalPosterior:
        """Learned categorical prior for the step the state has reached."""
        return CategoricalPosterior(probs=torch.softmax(self.drift_prior_head(state.h), dim=-1))

    def roll_drift_prior(self, n_steps: int, batch_size: int = 1) -> tuple[RecurrentState, torch.Tensor]:
        """Advance the drift prior n_steps on its own argmax samples.

        Returns the final state and the last drift sample, ready to continue
        the recurrence at step n_steps + 1. Deterministic by construction.
        """
        state = self.init_state(batch_size)
        sample = torch.zeros((batch_size, self.drift_states), dtype=self._dtype)
        for _ in range(n_steps):
            state = self.advance_drift_prior(sample, state)
            probs = self.prior_drift(state).probs
            idx = probs.argmax(dim=-1, keepdim=True)
            sample = torch.zeros_like(probs).scatter(-1, idx, 1.0)
        return state, sample

    # ---- decoder / masking / classification --------------------------------

    def decode(self, z_st: torch.Tensor, z_dy: torch.Tensor) -> torch.Tensor:
        """Reconstruct observations from concatenated static and dynamic latents."""
        if z_st.shape[-1] != self.latent_dim or z_dy.shape[-1] != self.latent_dim:
            raise ValidationError(f"latents must have width {self.latent_dim}")
        return self.decoder(torch.cat([z_st, z_dy], dim=-1))

    def mask_causal(
        self,
        features: torch.Tensor,
        which: str,
        noise_mode: str = "stochastic",
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, KHotMask]:
        """Select the causal subset of latent dimensions and zero the rest.

        Stochastic mode multiplies by the straight-through mask (hard values,
        relaxed gradients); deterministic mode multiplies by the detached
        top-k mask so inference is reproducible and selection-stable.
        """
        if which not in ("static", "dynamic"):
            raise ValidationError(f"which must be 'static' or 'dynamic', got {which!r}")
        if features.shape[-1] != self.latent_dim:
            raise ValidationError(f"features must have width {self.latent_dim}")
        scores = (self.static_masker if which == "static" else self.dynamic_masker)(features)
        mask = gumbel_khot(scores, self.mask_k, self.tau_gumbel, noise_mode, generator)
        weights = mask.values if noise_mode == "stochastic" else mask.hard
        return features * weights, mask

    def classify(self, phi_st: torch.Tensor, phi_dy: torch.Tensor, z_d: torch.Tensor) -> torch.Tensor:
        """Linear class scores over [masked static, masked dynamic, drift sample]."""
        if phi_st.shape[-1] != self.latent_dim or phi_dy.shape[-1] != self.latent_dim:
            raise ValidationError(f"masked features must have width {self.latent_dim}")
        if z_d.shape[-1] != self.drift_states:
            raise ValidationError(f"drift sample must have width {self.drift_states}")
        return self.classifier(torch.cat([phi_st, phi_dy, z_d], dim=-1))

    def _check_features(self, x: torch.Tensor) -> None:
        if x.ndim != 2 or x.shape[-1] != self.feature_dim:
            raise ValidationError(
                f"expected feature batch of shape [n, {self.feature_dim}], got {tuple(x.shape)}"
            )

    def dims(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "latent_dim": self.latent_dim,
            "drift_states": self.drift_states,
            "hidden_dim": self.hidden_dim,
            "mask_ratio": self.mask_ratio,
            "tau_gumbel": self.tau_gumbel,
        }


def config_hash(dims: dict, config: dict | None) -> str:
    blob = json.dumps({"dims": dims, "config": config or {}}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(path, model: SyncModel, bank: HiddenStateBank | None = None, config: dict | None = None) -> None:
    """Persist parameters, dimensions, config snapshot, and the state bank."""
    dims = model.dims()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "sync",
        "dims": dims,
        "state_dict": model.state_dict(),
        "config": dict(config or {}),
        "config_hash": config_hash(dims, config),
        "bank": bank.to_payload() if bank is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SyncModel, HiddenStateBank | None, dict]:
    """Rebuild a model (and bank, if stored) from a checkpoint file."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    if payload.get("kind") != "sync":
        raise ValidationError(f"checkpoint holds a {payload.get('kind')!r} model, expected 'sync'")
    dims = payload["dims"]
    model = SyncModel(
        feature_dim=int(dims["feature_dim"]),
        num_classes=int(dims["num_classes"]),
        latent_dim=int(dims["latent_dim"]),
        drift_states=int(dims["drift_states"]),
        hidden_dim=int(dims["hidden_dim"]),
        mask_ratio=float(dims["mask_ratio"]),
        tau_gumbel=float(dims["tau_gumbel"]),
    )
    model.load_state_dict(payload["state_dict"])
    bank = HiddenStateBank.from_payload(payload["bank"]) if payload["bank"] is not None else None
    return model, bank, payload["config"]
