"""Loss terms for policy fine-tuning on logged feedback.

The composite objective combines four parts:
  * labeled loss: class-summed binary cross-entropy on the weakly
    augmented positive-feedback examples against their logged sets;
  * pseudo-label loss: cross-entropy between hard pseudo labels obtained
    from the weak pass and the strong-pass predictions, restricted to
    confident classes of negative examples;
  * bandit loss: negative expected-feedback estimate in pseudoinverse
    form, crediting per-class importance ratios pi/rho on the classes the
    confidence masks leave to bandit learning;
  * KL control: per-class Bernoulli KL divergence from a frozen reference
    policy, keeping exploration near logged behavior.

Baselines: clipped joint-propensity inverse scoring (IPS), its
translated variant (BanditNet), and a fixed-threshold confidence mask
(FixMatch-style). Masks and pseudo labels are plain numpy arrays, so no
gradient ever flows through them; only probability tensors carry graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore
from .nncore import Tensor

DEFAULT_IPS_CLIP = 100.0
DEFAULT_TRANSLATION = 0.9
FIXED_CONFIDENCE = 0.95


class ObjectiveError(Exception):
    pass


@dataclass
class AugmentConfig:
    """Mix-up strengths; the mixing weight never drops below 0.5 so the
    anchor example stays dominant."""

    alpha_weak: float = 0.2
    alpha_strong: float = 2.0

    def __post_init__(self):
        if self.alpha_weak <= 0 or self.alpha_strong <= 0:
            raise ObjectiveError("mix-up alpha parameters must be positive")


@dataclass
class LossWeights:
    pseudo: float = 1.0
    bandit: float = 1.0
    kl: float = 1.0


# -- augmentation ----------------------------------------------------------------


def sample_mixup_lambda(alpha: float, rng: np.random.Generator, size: int) -> np.ndarray:
    if alpha <= 0:
        raise ObjectiveError(f"alpha must be positive, got {alpha}")
    b = rng.beta(alpha, alpha, size=size)
    return np.maximum(b, 1.0 - b)


def mixup_pair(state_a: np.ndarray, state_b: np.ndarray, lam: float) -> np.ndarray:
    if state_a.shape != state_b.shape:
        raise ObjectiveError("mix-up partners must have equal dimension")
    return lam * state_a + (1.0 - lam) * state_b


def mixup(
    state_a: np.ndarray, state_b: np.ndarray, alpha: float, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    lam = float(sample_mixup_lambda(alpha, rng, 1)[0])
    return mixup_pair(state_a, state_b, lam), lam


def mixup_batch(
    states: np.ndarray, alpha: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Mix every row with a uniformly drawn partner (never itself).

    A single-row batch is returned unchanged with lambda 1.
    """
    n = states.shape[0]
    if n <= 1:
        return states.copy(), np.ones(n)
    lam = sample_mixup_lambda(alpha, rng, n)
    partners = (np.arange(n) + 1 + rng.integers(0, n - 1, size=n)) % n
    mixed = lam[:, None] * states + (1.0 - lam[:, None]) * states[partners]
    return mixed, lam


# -- building blocks --------------------------------------------------------------


def bce_elementwise(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Per-entry binary cross-entropy against constant targets."""
    t = np.asarray(targets, dtype=np.float64)
    return -(t * nncore.log(probs) + (1.0 - t) * nncore.log(1.0 - probs))


def pseudo_labels(weak_probs: np.ndarray) -> np.ndarray:
    """Hard labels from the weak pass: 1 where probability exceeds 0.5."""
    return (np.asarray(weak_probs) > 0.5).astype(np.float64)


def unconfident_plus_mask(
    delta: np.ndarray, conf: np.ndarray, logged_mask: np.ndarray
) -> np.ndarray:
    """Classes handled by bandit learning.

    Positive rows contribute their logged classes (the taken decision,
    which carries propensities); negative rows contribute logged classes
    the thresholds left unconfident.
    """
    delta_col = np.asarray(delta).reshape(-1, 1)
    positives = (delta_col == 1) & logged_mask
    negatives = (delta_col == 0) & logged_mask & ~conf.astype(bool)
    return (positives | negatives).astype(np.float64)


# -- composite loss terms ----------------------------------------------------------


def loss_labeled(weak_probs: Tensor, target_mask: np.ndarray, delta: np.ndarray) -> Tensor:
    """Mean class-summed BCE over the positive-feedback rows."""
    pos = (np.asarray(delta) == 1).astype(np.float64)
    n_pos = pos.sum()
    if n_pos == 0:
        return Tensor(0.0)
    bce = bce_elementwise(weak_probs, target_mask.astype(np.float64))
    return nncore.tensor_sum(bce * pos[:, None]) * (1.0 / n_pos)


def loss_pseudo(strong_probs: Tensor, qhat: np.ndarray, conf: np.ndarray) -> Tensor:
    """Confidence-masked BCE against the hard pseudo labels."""
    conf = np.asarray(conf, dtype=np.float64)
    total = conf.sum()
    if total == 0:
        return Tensor(0.0)
    bce = bce_elementwise(strong_probs, qhat)
    return nncore.tensor_sum(bce * conf) * (1.0 / total)


def loss_bandit(
    probs: Tensor, rho: np.ndarray, delta: np.ndarray, mask: np.ndarray
) -> Tensor:
    """Negative pseudoinverse estimate of expected positive feedback.

    Each positive record contributes 1 plus the masked per-class
    importance-ratio excess (pi/rho - 1); the sum is normalized by the
    total masked class count. States are unaugmented by construction.
    """
    mask = np.asarray(mask, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    total = mask.sum()
    if total == 0:
        return Tensor(0.0)
    weights = delta[:, None] * mask
    ratio_excess = probs / rho - 1.0
    numerator = float(delta.sum()) + nncore.tensor_sum(ratio_excess * weights)
    return numerator * (-1.0 / total)


def bandit_value_estimate(
    probs: np.ndarray, rho: np.ndarray, delta: np.ndarray, mask: np.ndarray
) -> float:
    """Pseudoinverse value estimate: mean per-record estimated feedback.

    This is the quantity the bandit loss descends (up to the mask-count
    normalization and sign); exposed separately so estimator tests can
    compare it against exhaustive enumeration.
    """
    delta = np.asarray(delta, dtype=np.float64)
    contrib = (np.asarray(mask) * (probs / rho - 1.0)).sum(axis=1)
    return float(np.mean(delta * (1.0 + contrib)))


def loss_kl_control(probs: Tensor, ref_probs: np.ndarray) -> Tensor:
    """Mean per-class Bernoulli KL divergence from the frozen reference."""
    p0 = np.asarray(ref_probs, dtype=np.float64)
    n = probs.data.shape[0]
    kl = probs * (nncore.log(probs) - np.log(p0)) + (1.0 - probs) * (
        nncore.log(1.0 - probs) - np.log(1.0 - p0)
    )
    return nncore.tensor_sum(kl) * (1.0 / n)


def total_loss(
    labeled: Tensor, pseudo: Tensor, bandit: Tensor, kl: Tensor, weights: LossWeights
) -> Tensor:
    return labeled + weights.pseudo * pseudo + weights.bandit * bandit + weights.kl * kl


# -- baseline objectives -------------------------------------------------------------


def _log_importance_weights(probs: Tensor, rho: np.ndarray, logged_mask: np.ndarray) -> Tensor:
    """Row log-ratio of the joint per-class Bernoulli set decision."""
    z = np.asarray(logged_mask, dtype=np.float64)
    log_num = z * nncore.log(probs) + (1.0 - z) * nncore.log(1.0 - probs)
    log_den = z * np.log(rho) + (1.0 - z) * np.log(1.0 - rho)
    return nncore.tensor_sum(log_num - log_den, axis=1)


def loss_ips(
    probs: Tensor,
    rho: np.ndarray,
    delta: np.ndarray,
    logged_mask: np.ndarray,
    clip: float = DEFAULT_IPS_CLIP,
) -> Tensor:
    """Clipped inverse-propensity objective on the joint set decision."""
    delta = np.asarray(delta, dtype=np.float64)
    n = delta.shape[0]
    w = nncore.exp(_log_importance_weights(probs, rho, logged_mask))
    w = nncore.clip(w, 0.0, clip)
    return nncore.tensor_sum(w * delta) * (-1.0 / n)


def loss_banditnet(
    probs: Tensor,
    rho: np.ndarray,
    delta: np.ndarray,
    logged_mask: np.ndarray,
    translation: float = DEFAULT_TRANSLATION,
    clip: float = DEFAULT_IPS_CLIP,
) -> Tensor:
    """Translated IPS: rewards are shifted by a baseline before weighting."""
    delta = np.asarray(delta, dtype=np.float64)
    n = delta.shape[0]
    w = nncore.exp(_log_importance_weights(probs, rho, logged_mask))
    w = nncore.clip(w, 0.0, clip)
    return nncore.tensor_sum(w * (delta - translation)) * (-1.0 / n)


def fixmatch_mask(
    weak_probs: np.ndarray, delta: np.ndarray, tau: float = FIXED_CONFIDENCE
) -> np.ndarray:
    """Fixed-threshold confidence mask on negative rows."""
    p = np.asarray(weak_probs)
    outside = (p > tau) | (p < 1.0 - tau)
    return outside & (np.asarray(delta).reshape(-1, 1) == 0)
