"""Training losses and embedding-level mixup.

Every loss returns its value together with the exact gradient with respect
to the scores it was given; the batch mean is applied here and nowhere else.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    lambda_mix: float = 0.2
    lambda_mmd: float = 0.1
    mixup_alpha: float = 2.0
    mixup_enabled: bool = False
    scorereg_enabled: bool = False
    residual_enabled: bool = False
    feature_dropout_rate: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lambda_mix < 0 or self.lambda_mmd < 0:
            raise ValueError("lambda_mix and lambda_mmd must be >= 0")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be > 0")
        if not 0.0 <= self.feature_dropout_rate <= 1.0:
            raise ValueError("feature_dropout_rate must lie in [0, 1]")
        if self.batch_size < 1 or (self.mixup_enabled and self.batch_size < 2):
            raise ValueError("batch_size must be >= 2 when mixup is enabled")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        values = asdict(self)
        values.update(changes)
        return TrainConfig(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    skipped: bool = False


def bce_loss(scores, labels) -> LossValue:
    """Mean binary cross-entropy over batch and tasks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores shape {s.shape} != labels shape {y.shape}")
    if np.any(s <= 0.0) or np.any(s >= 1.0):
        raise ValueError("scores must lie strictly inside (0, 1); is the sigmoid missing?")
    n = s.size
    value = -np.sum(y * np.log(s) + (1.0 - y) * np.log1p(-s)) / n
    grad = (s - y) / (s * (1.0 - s)) / n
    return LossValue(float(value), grad)


def mmd_loss(scores, cold_flags) -> LossValue:
    """Squared distance between the warm and cold mean score vectors.

    A batch without warm or without cold rows yields ``skipped=True`` with a
    zero value and gradient.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        s = s.reshape(-1, 1)
    cold = np.asarray(cold_flags, dtype=bool).reshape(-1)
    if cold.shape[0] != s.shape[0]:
        raise ValueError(f"cold_flags length {cold.shape[0]} != batch {s.shape[0]}")
    n_cold = int(cold.sum())
    n_warm = s.shape[0] - n_cold
    if n_cold == 0 or n_warm == 0:
        return LossValue(0.0, np.zeros_like(s), skipped=True)
    diff = s[~cold].mean(axis=0) - s[cold].mean(axis=0)
    grad = np.where(cold[:, None], -2.0 * diff / n_cold, 2.0 * diff / n_warm)
    return LossValue(float(diff @ diff), grad)


@dataclass
class MixupDraw:
    partner: np.ndarray  # int index per row, never the row itself
    lam: np.ndarray  # one interpolation weight per row


@dataclass
class MixupBatch:
    embeddings: np.ndarray
    labels: np.ndarray
    draws: MixupDraw


def draw_mixup(batch_size: int, alpha: float, rng: np.random.Generator) -> MixupDraw:
    if batch_size < 2:
        raise ValueError("mixup needs a batch of at least 2 rows; disable mixup for this batch")
    # uniform over the other batch_size - 1 rows
    offset = rng.integers(1, batch_size, size=batch_size)
    partner = (np.arange(batch_size) + offset) % batch_size
    lam = rng.beta(alpha, alpha, size=batch_size)
    return MixupDraw(partner, lam)


def mix(values, draws: MixupDraw) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lam = draws.lam.reshape(-1, *([1] * (v.ndim - 1)))
    return lam * v + (1.0 - lam) * v[draws.partner]


def unmix_gradient(grad_mixed, draws: MixupDraw) -> np.ndarray:
    """Route a gradient w.r.t. mixed rows back to both interpolation endpoints."""
    g = np.asarray(grad_mixed, dtype=np.float64)
    lam = draws.lam[:, None]
    out = lam * g
    np.add.at(out, draws.partner, (1.0 - lam) * g)
    return out


def mixup_apply(embeddings, labels, alpha: float, rng: np.random.Generator, draws: MixupDraw | None = None) -> MixupBatch:
    """Interpolate each row with a random partner; originals are left untouched."""
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape[0] != y.shape[0]:
        raise ValueError("embeddings and labels disagree on batch size")
    if draws is None:
        draws = draw_mixup(z.shape[0], alpha, rng)
    return MixupBatch(mix(z, draws), mix(y, draws), draws)


@dataclass
class LossBreakdown:
    bce_main: float
    bce_mix: float
    mmd: float
    total: float
    mmd_skipped: bool = False


@dataclass
class CombinedLoss:
    breakdown: LossBreakdown
    grad_scores: np.ndarray
    grad_mixed_scores: np.ndarray | None
    grad_bce_main: np.ndarray


def combine(bce_main: float, bce_mix: float, mmd: float, config: TrainConfig) -> float:
    return bce_main + config.lambda_mix * bce_mix + config.lambda_mmd * mmd


def combined_loss(scores, mixed_scores, labels, mixed_labels, cold_flags, config: TrainConfig) -> CombinedLoss:
    """Main BCE + weighted mixup BCE + weighted MMD on the original scores.

    ``mixed_scores`` must be given iff mixup is enabled.  Gradients are with
    respect to ``scores`` and ``mixed_scores``; the caller backpropagates
    them through the two forward traces.
    """
    if (mixed_scores is not None) != config.mixup_enabled:
        raise ValueError("mixed scores must be supplied exactly when mixup is enabled")
    main = bce_loss(scores, labels)
    grad = main.grad.copy()
    bce_mix = 0.0
    grad_mix = None
    if config.mixup_enabled:
        mixed = bce_loss(mixed_scores, mixed_labels)
        bce_mix = mixed.value
        grad_mix = config.lambda_mix * mixed.grad
    mmd_value = 0.0
    skipped = False
    # a zero weight skips the term entirely so the run matches ScoreReg-off bit for bit
    if config.scorereg_enabled and config.lambda_mmd > 0:
        m = mmd_loss(scores, cold_flags)
        mmd_value, skipped = m.value, m.skipped
        grad = grad + config.lambda_mmd * m.grad
    total = combine(main.value, bce_mix, mmd_value, config)
    return CombinedLoss(
        LossBreakdown(main.value, bce_mix, mmd_value, total, skipped),
        grad,
        grad_mix,
        main.grad,
    )
