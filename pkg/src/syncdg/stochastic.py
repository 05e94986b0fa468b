"""Differentiable sampling primitives: Gaussian reparameterization, relaxed
categorical draws, and k-hot mask sampling without replacement.

All operations are pure given an explicit noise tensor or torch.Generator,
so callers own determinism. noise_mode selects between stochastic draws and
the deterministic test/inference path (zero noise, hard argmax selections).
"""

from dataclasses import dataclass

import torch

from ._common import ValidationError

NOISE_MODES = ("stochastic", "deterministic")
MASK_POSITION_PENALTY = -1e9


@dataclass
class KHotMask:
    """k-hot selection over N positions with three aligned views.

    hard: detached 0/1 tensor with exactly k ones.
    soft: relaxed mask, the elementwise max of the k per-draw softmaxes;
        differentiable with respect to the scores.
    values: straight-through combination whose value equals hard (so it sums
        to exactly k) while gradients flow through soft.
    """

    values: torch.Tensor
    soft: torch.Tensor
    hard: torch.Tensor
    k: int
    tau_gumbel: float


def _check_noise_mode(noise_mode: str) -> None:
    if noise_mode not in NOISE_MODES:
        raise ValidationError(f"noise_mode must be one of {NOISE_MODES}, got {noise_mode!r}")


def reparameterize_gaussian(mu: torch.Tensor, sigma2: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Return mu + sqrt(sigma2) * noise, differentiable in mu and sigma2."""
    if mu.shape != sigma2.shape or mu.shape != noise.shape:
        raise ValidationError(
            f"mu, sigma2, noise must share shape, got {tuple(mu.shape)}, "
            f"{tuple(sigma2.shape)}, {tuple(noise.shape)}"
        )
    if not bool((sigma2 > 0).all()):
        raise ValidationError("sigma2 must be strictly positive elementwise")
    return mu + torch.sqrt(sigma2) * noise


def sample_gumbel(shape, generator: torch.Generator | None = None, dtype=torch.float64) -> torch.Tensor:
    """Standard Gumbel(0, 1) noise via -log(-log(U)) with clamped uniforms."""
    u = torch.rand(shape, generator=generator, dtype=dtype)
    u = u.clamp(min=1e-12, max=1.0 - 1e-12)
    return -torch.log(-torch.log(u))


def _first_argmax(x: torch.Tensor) -> torch.Tensor:
    """Index of the first maximal entry along the last dim (stable tie-break)."""
    n = x.shape[-1]
    is_max = x == x.amax(dim=-1, keepdim=True)
    positions = torch.arange(n, device=x.device)
    return torch.where(is_max, positions, n).amin(dim=-1)


def gumbel_khot(
    scores: torch.Tensor,
    k: int,
    tau_gumbel: float = 0.5,
    noise_mode: str = "stochastic",
    generator: torch.Generator | None = None,
) -> KHotMask:
    """Sample a k-hot mask by k successive relaxed draws without replacement.

    Each draw applies a softmax at temperature tau_gumbel to the (optionally
    Gumbel-perturbed) scores, then pushes the selected position's score to a
    large negative value so it cannot be chosen again. The relaxed draws are
    combined by elementwise max; the hardened view keeps the k selected
    positions. In deterministic mode no noise is added, so the selection
    equals top-k by score with first-index tie-breaking.
    """
    _check_noise_mode(noise_mode)
    if scores.shape[-1] == 0:
        raise ValidationError("scores must be non-empty along the last dim")
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValidationError(f"k must satisfy 1 <= k <= {n}, got {k}")
    if tau_gumbel <= 0:
        raise ValidationError(f"tau_gumbel must be positive, got {tau_gumbel}")
    if noise_mode == "stochastic":
        work = scores + sample_gumbel(scores.shape, generator=generator, dtype=scores.dtype)
    else:
        work = scores
    soft_draws = []
    hard = torch.zeros_like(scores)
    for _ in range(k):
        soft_draws.append(torch.softmax(work / tau_gumbel, dim=-1))
        idx = _first_argmax(work).unsqueeze(-1)
        hard = hard.scatter(-1, idx, 1.0)
        work = work + torch.zeros_like(work).scatter(-1, idx, MASK_POSITION_PENALTY)
    soft = torch.stack(soft_draws, dim=0).amax(dim=0)
    hard = hard.detach()
    values = hard + (soft - soft.detach())
    return KHotMask(values=values, soft=soft, hard=hard, k=k, tau_gumbel=tau_gumbel)


def gumbel_categorical(
    logits: torch.Tensor,
    tau_gumbel: float = 0.5,
    noise_mode: str = "stochastic",
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Relaxed one-hot sample from a categorical distribution over the last dim.

    Stochastic mode returns softmax((logits + gumbel) / tau_gumbel), which is
    differentiable and whose argmax follows the categorical distribution
    softmax(logits). Deterministic mode returns a detached one-hot at the
    first argmax of the logits.
    """
    _check_noise_mode(noise_mode)
    if logits.shape[-1] == 0:
        raise ValidationError("logits must be non-empty along the last dim")
    if tau_gumbel <= 0:
        raise ValidationError(f"tau_gumbel must be positive, got {tau_gumbel}")
    if noise_mode == "stochastic":
        noisy = logits + sample_gumbel(logits.shape, generator=generator, dtype=logits.dtype)
        return torch.softmax(noisy / tau_gumbel, dim=-1)
    idx = _first_argmax(logits).unsqueeze(-1)
    return torch.zeros_like(logits).scatter(-1, idx, 1.0).detach()
