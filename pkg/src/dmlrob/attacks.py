"""White-box l-infinity PGD against embedding models.

The attack maximizes the divergence between the embeddings of the
perturbed batch and the frozen embeddings of the clean batch, stepping by
the sign of the input gradient and projecting onto the epsilon box
intersected with the input domain after every step. The ensemble variant
sums the input gradients of all member models before taking the sign, so
with a single model (or identical members) it reduces exactly to the
single-model attack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .losses import COSINE, divergence_rows, embed_divergence
from .model import backward, forward
from .rng import Rng


@dataclass
class AttackConfig:
    """Budget and iteration settings for the PGD attack.

    `step_size=None` resolves to 2.5 * epsilon / steps, which lets the
    iterate reach the box boundary with room to spare.
    """

    epsilon: float
    steps: int = 10
    step_size: float | None = None
    domain_lo: float = 0.0
    domain_hi: float = 1.0
    rand_start: bool = False
    divergence: str = COSINE

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.step_size is not None and self.steps > 0 and not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if np.any(np.asarray(self.domain_lo) > np.asarray(self.domain_hi)):
            raise ConfigError("domain_lo must be <= domain_hi")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.steps == 0:
            return 0.0
        return 2.5 * self.epsilon / self.steps

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "steps": self.steps,
            "step_size": self.step_size,
            "domain_lo": self.domain_lo,
            "domain_hi": self.domain_hi,
            "rand_start": self.rand_start,
            "divergence": self.divergence,
        }


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    x_clean: np.ndarray
    divergence: np.ndarray  # per-row divergence achieved at the final iterate

    def validate(self, cfg: AttackConfig) -> None:
        delta = np.abs(self.x_adv - self.x_clean)
        if np.any(delta > cfg.epsilon + 1e-12):
            raise ConfigError(f"perturbation exceeds budget: max {delta.max()}")
        if np.any(self.x_adv < np.asarray(cfg.domain_lo)) or np.any(
            self.x_adv > np.asarray(cfg.domain_hi)
        ):
            raise ConfigError("adversarial batch leaves the input domain")


def project_linf(x_cand: np.ndarray, x_clean: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Clamp the perturbation to the epsilon box, then clamp to the domain."""
    x_cand = np.asarray(x_cand, dtype=float)
    x_clean = np.asarray(x_clean, dtype=float)
    if x_cand.shape != x_clean.shape:
        raise ShapeError("x_cand", x_clean.shape, x_cand.shape)
    delta = np.clip(x_cand - x_clean, -cfg.epsilon, cfg.epsilon)
    return np.clip(x_clean + delta, cfg.domain_lo, cfg.domain_hi)


def pgd_ensemble(x: np.ndarray, models, cfg: AttackConfig, rng: Rng | None = None) -> AdversarialBatch:
    """Summed-gradient PGD against every model at once.

    Reference embeddings of the clean batch are computed once per model and
    held fixed across iterations; only the final iterate is returned.
    """
    if not models:
        raise ConfigError("ensemble attack needs at least one model")
    x_clean = np.array(x, dtype=float)
    refs = [forward(m, x_clean)[0] for m in models]
    x_adv = x_clean.copy()
    step = cfg.resolved_step_size()
    if cfg.rand_start and cfg.steps > 0 and cfg.epsilon > 0:
        if rng is None:
            raise ConfigError("rand_start requires an rng")
        x_adv = project_linf(
            x_adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x_adv.shape), x_clean, cfg
        )
    for _ in range(cfg.steps):
        summed = np.zeros_like(x_adv)
        for m, ref in zip(models, refs):
            e, trace = forward(m, x_adv)
            _, d_embed = embed_divergence(e, ref, cfg.divergence)
            _, d_x = backward(m, trace, d_embed)
            summed += d_x
        x_adv = project_linf(x_adv + step * np.sign(summed), x_clean, cfg)
    per_model = [divergence_rows(forward(m, x_adv)[0], ref, cfg.divergence) for m, ref in zip(models, refs)]
    batch = AdversarialBatch(x_adv=x_adv, x_clean=x_clean, divergence=np.mean(per_model, axis=0))
    batch.validate(cfg)
    return batch


def pgd_single(model, x: np.ndarray, cfg: AttackConfig, rng: Rng | None = None) -> AdversarialBatch:
    """PGD against one model; the ensemble attack with a single member."""
    return pgd_ensemble(x, [model], cfg, rng)
