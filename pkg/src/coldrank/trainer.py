"""Seeded mini-batch training with per-step diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, backward, head_backward, head_forward, init_params, predict
from .objectives import LossBreakdown, TrainConfig, bce_loss, combined_loss, draw_mixup, mix, unmix_gradient
from .synthdata import Dataset

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

DIAGNOSTIC_COLUMNS = (
    "step", "bce_main", "bce_mix", "mmd", "total", "grad_norm_hist", "grad_norm_nonhist", "mmd_skipped",
)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str = "loss is NaN"):
        self.step = step
        super().__init__(f"training diverged at step {step}: {message}")


@dataclass
class TrainState:
    params: ModelParams
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        return cls(
            params,
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def optimizer_step(state: TrainState, grads: dict, learning_rate: float) -> TrainState:
    """One bias-corrected adaptive-moment update, in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(state.step + 1, f"non-finite gradient for {k}")
        if g.shape != state.params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {state.params[k].shape} for {k}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for k, g in grads.items():
        state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * g
        state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * g * g
        if learning_rate:
            state.params[k] = state.params[k] - learning_rate * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + ADAM_EPS)
    return state


def feature_dropout(x_hist, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero the whole historical block of each row with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    x = np.asarray(x_hist, dtype=np.float64)
    if rate == 0.0:
        return x
    drop = rng.random(x.shape[0]) < rate
    return np.where(drop[:, None], 0.0, x)


@dataclass
class StepDiagnostics:
    step: int
    loss: LossBreakdown
    grad_norm_hist: float
    grad_norm_nonhist: float

    @property
    def mmd_skipped(self) -> bool:
        return self.loss.mmd_skipped

    @property
    def grad_ratio(self) -> float | None:
        if self.grad_norm_hist > 0:
            return self.grad_norm_nonhist / self.grad_norm_hist
        return None

    def row(self) -> dict:
        return {
            "step": self.step,
            "bce_main": self.loss.bce_main,
            "bce_mix": self.loss.bce_mix,
            "mmd": self.loss.mmd,
            "total": self.loss.total,
            "grad_norm_hist": self.grad_norm_hist,
            "grad_norm_nonhist": self.grad_norm_nonhist,
            "mmd_skipped": int(self.loss.mmd_skipped),
        }


@dataclass
class BatchResult:
    loss: LossBreakdown
    grads: dict
    grad_norm_hist: float
    grad_norm_nonhist: float


def _mean_row_norm(g: np.ndarray) -> float:
    return float(np.mean(np.sqrt(np.sum(g * g, axis=1))))


def batch_loss_and_grads(
    params: ModelParams,
    model_config: ModelConfig,
    train_config: TrainConfig,
    x_hist,
    x_nonhist,
    labels,
    cold,
    mixup_draws=None,
    dropout_rng: np.random.Generator | None = None,
    with_diagnostics: bool = True,
) -> BatchResult:
    """Full objective and parameter gradients for one mini-batch.

    Diagnostic input-gradient norms come from the main BCE term on the clean
    (pre-dropout, pre-mixup) forward pass.
    """
    labels = np.asarray(labels, dtype=np.float64)
    x_in = x_hist
    if train_config.feature_dropout_rate > 0.0:
        x_in = feature_dropout(x_hist, train_config.feature_dropout_rate, dropout_rng)
    trace = predict(x_in, x_nonhist, params, model_config)

    mixed_trace = mixed_labels = None
    if train_config.mixup_enabled:
        mixed_trace = head_forward(mix(trace.augmented_embedding, mixup_draws), params, model_config)
        mixed_labels = mix(labels, mixup_draws)

    loss = combined_loss(
        trace.task_scores,
        None if mixed_trace is None else mixed_trace.scores,
        labels,
        mixed_labels,
        cold,
        train_config,
    )
    if not math.isfinite(loss.breakdown.total):
        raise DivergenceError(0)

    extra_params = extra_zbar = None
    if mixed_trace is not None:
        extra_params, d_mixed = head_backward(mixed_trace, loss.grad_mixed_scores, params, model_config)
        extra_zbar = unmix_gradient(d_mixed, mixup_draws)
    grads = backward(trace, loss.grad_scores, params, model_config, extra_zbar, extra_params)

    g_hist = g_nonhist = 0.0
    if with_diagnostics:
        if x_in is x_hist and not train_config.scorereg_enabled and not train_config.mixup_enabled:
            diag = grads
        else:
            clean = trace if x_in is x_hist else predict(x_hist, x_nonhist, params, model_config)
            diag = backward(clean, loss.grad_bce_main if clean is trace else _bce_grad(clean, labels), params, model_config)
        g_hist = _mean_row_norm(diag.x_hist)
        g_nonhist = _mean_row_norm(diag.x_nonhist)
    return BatchResult(loss.breakdown, grads.params, g_hist, g_nonhist)


def _bce_grad(trace, labels):
    return bce_loss(trace.task_scores, labels).grad


@dataclass
class TrainResult:
    final_params: ModelParams
    initial_params: ModelParams
    diagnostics: list[StepDiagnostics] = field(default_factory=list)

    @property
    def grad_ratio_mean(self) -> float | None:
        ratios = [d.grad_ratio for d in self.diagnostics if d.grad_ratio is not None]
        return float(np.mean(ratios)) if ratios else None

    @property
    def mmd_skips(self) -> int:
        return sum(d.mmd_skipped for d in self.diagnostics)


def _streams(seed: int):
    # independent streams so enabling one technique never shifts another's draws
    root = np.random.SeedSequence(seed)
    init, shuffle, dropout, mixup = root.spawn(4)
    return (
        np.random.default_rng(init),
        np.random.default_rng(shuffle),
        np.random.default_rng(dropout),
        np.random.default_rng(mixup),
    )


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    initial_params: ModelParams | None = None,
    diagnostics_every: int = 1,
) -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if model_config.residual_enabled != train_config.residual_enabled:
        model_config = model_config.replace(residual_enabled=train_config.residual_enabled)
    init_rng, shuffle_rng, dropout_rng, mixup_rng = _streams(train_config.seed)
    params = initial_params if initial_params is not None else init_params(model_config, init_rng)
    params = {k: v.copy() for k, v in params.items()}
    initial = {k: v.copy() for k, v in params.items()}
    state = TrainState.fresh(params)
    result = TrainResult(state.params, initial)

    n = len(dataset)
    bs = train_config.batch_size
    max_steps = train_config.max_steps
    done = False
    for _ in range(train_config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, bs):
            rows = order[start : start + bs]
            draws = None
            cfg = train_config
            if cfg.mixup_enabled:
                if rows.size < 2:
                    cfg = cfg.replace(mixup_enabled=False)
                else:
                    draws = draw_mixup(rows.size, cfg.mixup_alpha, mixup_rng)
            step = state.step + 1
            want_diag = diagnostics_every > 0 and (step - 1) % diagnostics_every == 0
            try:
                res = batch_loss_and_grads(
                    state.params, model_config, cfg,
                    dataset.x_hist[rows], dataset.x_nonhist[rows], dataset.labels[rows], dataset.is_cold[rows],
                    draws, dropout_rng, with_diagnostics=want_diag,
                )
            except DivergenceError as exc:
                raise DivergenceError(step, str(exc)) from None
            optimizer_step(state, res.grads, cfg.learning_rate)
            if want_diag:
                result.diagnostics.append(StepDiagnostics(step, res.loss, res.grad_norm_hist, res.grad_norm_nonhist))
            if max_steps is not None and state.step >= max_steps:
                done = True
                break
        if done:
            break
    result.final_params = state.params
    return result


def write_diagnostics_csv(path, diagnostics: list[StepDiagnostics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS)
        writer.writeheader()
        for d in diagnostics:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in d.row().items()})


def read_diagnostics_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [
            {k: (int(v) if k in ("step", "mmd_skipped") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
