"""Ranking metrics and the diagnostic analyses run on trained models."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .model import ModelConfig, ModelParams, predict
from .synthdata import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    utility_weights: tuple[float, ...] | None = None  # None -> all ones
    k: int = 3
    cold_age_threshold: int = 28
    variance_target: float = 0.9

    def __post_init__(self):
        if self.utility_weights is not None:
            u = np.asarray(self.utility_weights, dtype=np.float64)
            if not np.all(np.isfinite(u)) or np.any(u < 0) or not np.any(u > 0):
                raise ValueError("utility_weights must be finite, >= 0 and not all zero")
            object.__setattr__(self, "utility_weights", tuple(float(v) for v in u))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.variance_target <= 1.0:
            raise ValueError("variance_target must lie in (0, 1]")

    def weights(self, m: int) -> np.ndarray:
        if self.utility_weights is None:
            return np.ones(m)
        if len(self.utility_weights) != m:
            raise ValueError(f"utility_weights has {len(self.utility_weights)} entries, model has {m} tasks")
        return np.asarray(self.utility_weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["utility_weights"] is not None:
            d["utility_weights"] = list(d["utility_weights"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
        return cls(**data)


def final_score(task_scores, utility_weights) -> np.ndarray | float:
    """Utility-weighted ranking score: task scores times weights, summed over tasks."""
    s = np.asarray(task_scores, dtype=np.float64)
    u = np.asarray(utility_weights, dtype=np.float64)
    if s.shape[-1] != u.shape[0]:
        raise ValueError(f"task_scores has {s.shape[-1]} tasks but utility_weights has {u.shape[0]}")
    out = (s * u).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _top_k(scores: np.ndarray, item_ids: np.ndarray, k: int) -> np.ndarray:
    # score descending, then item_id ascending
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], item_ids[i]))
    return np.asarray(order[:k], dtype=np.int64)


def hits_at_k(dataset: Dataset, scores, task: int, k: int = 3, subset: str = "all") -> float:
    """Fraction of query groups whose top-k holds a positive for ``task``.

    With ``subset="cold"`` only cold positives count, and only groups that
    contain at least one cold positive enter the denominator.
    """
    if subset not in ("all", "cold"):
        raise ValueError(f"subset must be 'all' or 'cold', got {subset!r}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.shape[0] != len(dataset):
        raise ValueError("one score per instance is required")
    groups = dataset.group_rows()
    if not groups:
        raise ValueError("hits_at_k needs at least one query group")
    positive = dataset.labels[:, task] == 1
    if subset == "cold":
        positive = positive & dataset.is_cold
    hits = 0
    counted = 0
    for rows in groups:
        pos = positive[rows]
        if subset == "cold" and not pos.any():
            continue
        counted += 1
        top = _top_k(scores[rows], dataset.item_id[rows], k)
        hits += bool(pos[top].any())
    if counted == 0:
        return float("nan")
    return hits / counted


def pr_auc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve (average precision).

    Every distinct score is one threshold, so tied scores enter together.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("pr_auc needs at least one positive label")
    if n_pos == y.size:
        raise ValueError("pr_auc needs at least one negative label")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    # last index of each tie block
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


# ---------------------------------------------------------------------------
# model-level analyses
# ---------------------------------------------------------------------------


def score_dataset(params: ModelParams, config: ModelConfig, dataset: Dataset, batch_size: int = 4096):
    """Task scores and augmented embeddings for every row, computed in chunks."""
    scores, embeds = [], []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        tr = predict(dataset.x_hist[sl], dataset.x_nonhist[sl], params, config)
        scores.append(tr.task_scores)
        embeds.append(tr.augmented_embedding)
    if not scores:
        return np.zeros((0, config.num_tasks)), np.zeros((0, config.d_augmented))
    return np.concatenate(scores), np.concatenate(embeds)


def feature_means(dataset: Dataset) -> dict[str, np.ndarray]:
    return {"hist": dataset.x_hist.mean(axis=0), "nonhist": dataset.x_nonhist.mean(axis=0)}


def ablate_feature_delta(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    feature_group,
    train_means: dict[str, np.ndarray],
) -> np.ndarray:
    """PR-AUC change per task after replacing group(s) by their training mean.

    More negative means the group mattered more.
    """
    groups = [feature_group] if isinstance(feature_group, str) else list(feature_group)
    slices = config.group_slices()
    for g in groups:
        if g not in slices:
            raise KeyError(f"unknown feature group {g!r}; known: {sorted(slices)}")
    full, _ = score_dataset(params, config, dataset)
    x = {"hist": dataset.x_hist.copy(), "nonhist": dataset.x_nonhist.copy()}
    for g in groups:
        block, sl = slices[g]
        x[block][:, sl] = train_means[block][sl]
    ablated = Dataset(
        dataset.meta, dataset.query_id, dataset.item_id, x["hist"], x["nonhist"],
        dataset.labels, dataset.is_cold, dataset.item_age_days,
    )
    ablated_scores, _ = score_dataset(params, config, ablated)
    return np.array(
        [
            pr_auc(ablated_scores[:, t], dataset.labels[:, t]) - pr_auc(full[:, t], dataset.labels[:, t])
            for t in range(config.num_tasks)
        ]
    )


def score_gaps(scores, labels, is_cold) -> dict[str, list[float | None]]:
    """(warm mean - cold mean) / warm mean per task and label polarity; ``None`` for empty cells."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    cold = np.asarray(is_cold, dtype=bool)
    out: dict[str, list] = {"positive": [], "negative": []}
    for polarity, value in (("positive", 1), ("negative", 0)):
        for t in range(scores.shape[1]):
            sel = labels[:, t] == value
            warm = scores[sel & ~cold, t]
            cold_s = scores[sel & cold, t]
            if warm.size == 0 or cold_s.size == 0 or warm.mean() == 0:
                out[polarity].append(None)
                continue
            out[polarity].append(float((warm.mean() - cold_s.mean()) / warm.mean()))
    return out


def score_gap_report(params: ModelParams, config: ModelConfig, dataset: Dataset) -> dict:
    scores, _ = score_dataset(params, config, dataset)
    return score_gaps(scores, dataset.labels, cold_flags(dataset, None))


def cold_flags(dataset: Dataset, threshold: int | None) -> np.ndarray:
    """Cold membership: the stored flag, or ``item_age_days < threshold`` when given."""
    if threshold is None:
        return dataset.is_cold
    return dataset.item_age_days < threshold


@dataclass
class PCAResult:
    spectrum: np.ndarray
    effective_rank: int


def pca_effective_rank(embeddings, variance_target: float = 0.9) -> PCAResult:
    """Explained-variance spectrum of centred embeddings and the rank reaching ``variance_target``."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two embedding rows")
    x = x - x.mean(axis=0)
    cov = x.T @ x / (x.shape[0] - 1)
    eig = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = eig.sum()
    if total <= 0:
        log.warning("embeddings have zero variance; effective rank is 0")
        return PCAResult(np.zeros_like(eig), 0)
    spectrum = eig / total
    cum = np.cumsum(spectrum)
    # tolerate round-off right at the target
    rank = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    return PCAResult(spectrum, min(rank, spectrum.size))


@dataclass
class MetricsReport:
    hits_all: list[float]
    hits_cold: list[float]
    pr_auc_all: list[float]
    pr_auc_cold: list[float]
    score_gap: dict
    grad_ratio_mean: float | None
    pca_spectrum: list[float]
    effective_rank: int
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_pr_auc(scores, labels) -> float | None:
    labels = np.asarray(labels)
    if labels.size == 0 or labels.all() or not labels.any():
        return None
    return pr_auc(scores, labels)


def evaluate(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    eval_config: EvalConfig = EvalConfig(),
    grad_ratio_mean: float | None = None,
) -> MetricsReport:
    scores, embeds = score_dataset(params, config, dataset)
    u = eval_config.weights(config.num_tasks)
    ranking = final_score(scores, u)
    cold = cold_flags(dataset, eval_config.cold_age_threshold)
    scoped = dataset
    if not np.array_equal(cold, dataset.is_cold):
        scoped = Dataset(
            dataset.meta, dataset.query_id, dataset.item_id, dataset.x_hist, dataset.x_nonhist,
            dataset.labels, cold, dataset.item_age_days,
        )
        scoped._group_index = dataset.group_rows()
    m = config.num_tasks
    pca = pca_effective_rank(embeds, eval_config.variance_target)
    return MetricsReport(
        hits_all=[hits_at_k(scoped, ranking, t, eval_config.k, "all") for t in range(m)],
        hits_cold=[hits_at_k(scoped, ranking, t, eval_config.k, "cold") for t in range(m)],
        pr_auc_all=[_safe_pr_auc(scores[:, t], dataset.labels[:, t]) for t in range(m)],
        pr_auc_cold=[_safe_pr_auc(scores[cold, t], dataset.labels[cold, t]) for t in range(m)],
        score_gap=score_gaps(scores, dataset.labels, cold),
        grad_ratio_mean=grad_ratio_mean,
        pca_spectrum=pca.spectrum.tolist(),
        effective_rank=pca.effective_rank,
    )
