"""Seeded synthetic cold-start ranking data and its JSON Lines file format.

True relevance is a fixed function of the non-historical block (a linear
item-quality term plus a query x item bilinear term).  Warm items carry
historical features that are a noisy linear read-out of that relevance, so
they are the easiest predictor; cold items get an all-but-zero historical
block and, in the training split, suppressed positive labels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
COLD_HIST_NOISE = 1e-3  # |x_hist| bound for cold items
MAX_AGE_DAYS = 730


class DatasetFormatError(ValueError):
    """Malformed dataset line; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(DatasetFormatError):
    """A record is missing a field or a field has the wrong shape."""

    def __init__(self, field_name: str, message: str, line: int | None = None):
        self.field = field_name
        super().__init__(f"field {field_name!r}: {message}", line)


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GenSpec:
    num_queries: int = 1500
    eval_queries: int = 500
    items_per_query: int = 20
    cold_fraction: float = 0.3
    m: int = 3
    hist_groups: tuple[int, ...] = (16, 16, 16)
    nonhist_groups: tuple[int, ...] = (16, 16)
    cold_age_threshold: int = 28
    engagement_bias: float = 0.8
    label_base_rates: tuple[float, ...] = (0.35, 0.25, 0.3)
    noise_scale: float = 0.25
    relevance_scale: float = 2.5
    bilinear_weight: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("hist_groups", "nonhist_groups", "label_base_rates"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.num_queries < 1 or self.eval_queries < 1 or self.items_per_query < 1:
            raise ValueError("num_queries, eval_queries and items_per_query must be >= 1")
        if not 0.0 < self.cold_fraction < 1.0:
            raise ValueError(f"cold_fraction must lie in (0, 1), got {self.cold_fraction}")
        if not 0.0 <= self.engagement_bias < 1.0:
            raise ValueError(f"engagement_bias must lie in [0, 1), got {self.engagement_bias}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if len(self.label_base_rates) != self.m:
            raise ValueError("label_base_rates needs one entry per task")
        if any(not 0.0 < r < 1.0 for r in self.label_base_rates):
            raise ValueError("label_base_rates must lie in (0, 1)")
        if len(self.nonhist_groups) < 2:
            raise ValueError("need two non-historical groups (item content, query context)")
        if self.nonhist_groups[0] != self.nonhist_groups[1]:
            raise ValueError("item-content and query-context groups must have equal width")
        if self.cold_age_threshold < 1:
            raise ValueError("cold_age_threshold must be >= 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")

    @property
    def d_hist(self) -> int:
        return sum(self.hist_groups)

    @property
    def d_nonhist(self) -> int:
        return sum(self.nonhist_groups)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "GenSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generator spec keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Instance:
    query_id: str
    item_id: str
    x_hist: list[float]
    x_nonhist: list[float]
    labels: list[int]
    is_cold: bool
    item_age_days: int
    p_star: list[float] | None = None


@dataclass
class QueryGroup:
    query_id: str
    instances: list[Instance]


@dataclass
class Dataset:
    """Column-oriented split; rows of one query are contiguous."""

    meta: dict
    query_id: np.ndarray
    item_id: np.ndarray
    x_hist: np.ndarray
    x_nonhist: np.ndarray
    labels: np.ndarray
    is_cold: np.ndarray
    item_age_days: np.ndarray
    p_star: np.ndarray | None = None
    _group_index: list = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def m(self) -> int:
        return int(self.meta["m"])

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            dict(self.meta),
            self.query_id[rows],
            self.item_id[rows],
            self.x_hist[rows],
            self.x_nonhist[rows],
            self.labels[rows],
            self.is_cold[rows],
            self.item_age_days[rows],
            None if self.p_star is None else self.p_star[rows],
        )

    def group_rows(self) -> list[np.ndarray]:
        """Row indices of every query group, in order of first appearance."""
        if self._group_index is None:
            order: dict[str, list[int]] = {}
            for i, q in enumerate(self.query_id):
                order.setdefault(q, []).append(i)
            self._group_index = [np.asarray(v) for v in order.values()]
        return self._group_index

    def instances(self) -> list[Instance]:
        out = []
        for i in range(len(self)):
            out.append(
                Instance(
                    str(self.query_id[i]),
                    str(self.item_id[i]),
                    self.x_hist[i].tolist(),
                    self.x_nonhist[i].tolist(),
                    [int(v) for v in self.labels[i]],
                    bool(self.is_cold[i]),
                    int(self.item_age_days[i]),
                    None if self.p_star is None else self.p_star[i].tolist(),
                )
            )
        return out

    def query_groups(self) -> list[QueryGroup]:
        inst = self.instances()
        return [QueryGroup(inst[rows[0]].query_id, [inst[r] for r in rows]) for rows in self.group_rows()]

    @classmethod
    def from_instances(cls, meta: dict, instances: list[Instance]) -> "Dataset":
        m, dh, dnh = int(meta["m"]), int(meta["d_hist"]), int(meta["d_nonhist"])
        has_p = bool(instances) and all(i.p_star is not None for i in instances)
        return cls(
            dict(meta),
            np.array([i.query_id for i in instances], dtype=object),
            np.array([i.item_id for i in instances], dtype=object),
            np.array([i.x_hist for i in instances], dtype=np.float64).reshape(-1, dh),
            np.array([i.x_nonhist for i in instances], dtype=np.float64).reshape(-1, dnh),
            np.array([i.labels for i in instances], dtype=np.int64).reshape(-1, m),
            np.array([i.is_cold for i in instances], dtype=bool),
            np.array([i.item_age_days for i in instances], dtype=np.int64),
            np.array([i.p_star for i in instances], dtype=np.float64).reshape(-1, m) if has_p else None,
        )

    @classmethod
    def from_groups(cls, meta: dict, groups: list[QueryGroup]) -> "Dataset":
        return cls.from_instances(meta, [i for g in groups for i in g.instances])


@dataclass
class GeneratedData:
    train: Dataset
    eval: Dataset

    @property
    def truth(self) -> dict[str, np.ndarray]:
        return {"train": self.train.p_star, "eval": self.eval.p_star}


def _logit(p):
    return np.log(p) - np.log1p(-p)


class _World:
    """The fixed random functions shared by both splits."""

    def __init__(self, spec: GenSpec, rng: np.random.Generator):
        k = spec.nonhist_groups[0]
        m = spec.m
        shared_w = rng.standard_normal(k)
        shared_a = rng.standard_normal((k, k))
        self.w = np.stack([0.8 * shared_w + 0.6 * rng.standard_normal(k) for _ in range(m)]) / np.sqrt(k)
        self.a = np.stack([0.8 * shared_a + 0.6 * rng.standard_normal((k, k)) for _ in range(m)]) / k
        self.offset = _logit(np.asarray(spec.label_base_rates))
        # group g reads one engagement view (see HIST_VIEWS), mixed across tasks
        self.readouts = []
        for width in spec.hist_groups:
            mixing = rng.choice([-1.0, 1.0], size=(m, width)) * rng.uniform(0.5, 1.5, size=(m, width))
            self.readouts.append(mixing / np.sqrt(m))

    def relevance_parts(self, spec: GenSpec, query, content) -> tuple[np.ndarray, np.ndarray]:
        """Per-task item-quality and query-match terms in logit units."""
        lin = content @ self.w.T
        bil = np.einsum("ni,tij,nj->nt", query, self.a, content)
        scale = spec.relevance_scale
        return scale * np.sqrt(1.0 - spec.bilinear_weight**2) * lin, scale * spec.bilinear_weight * bil


# what each historical group summarises: item popularity, query-item
# co-engagement, overall recent engagement
HIST_VIEWS = ("item", "pair", "overall")


def _split(spec: GenSpec, world: _World, n_queries: int, name: str, biased: bool, rng) -> Dataset:
    k = spec.nonhist_groups[0]
    extra = spec.nonhist_groups[2:]
    n = n_queries * spec.items_per_query
    n_cold = int(round(spec.cold_fraction * n))
    if n_cold == 0:
        raise GenerationError(f"cold_fraction={spec.cold_fraction} yields no cold items in the {name} split")
    if n_cold == n:
        raise GenerationError(f"cold_fraction={spec.cold_fraction} yields no warm items in the {name} split")

    query = rng.standard_normal((n_queries, k))
    query_rows = np.repeat(query, spec.items_per_query, axis=0)
    content = rng.standard_normal((n, k))
    item_part, pair_part = world.relevance_parts(spec, query_rows, content)
    rel = item_part + pair_part
    p_star = 1.0 / (1.0 + np.exp(-(rel + world.offset)))

    is_cold = np.zeros(n, dtype=bool)
    is_cold[rng.permutation(n)[:n_cold]] = True
    age = np.where(
        is_cold,
        rng.integers(0, spec.cold_age_threshold, size=n),
        rng.integers(spec.cold_age_threshold, MAX_AGE_DAYS + 1, size=n),
    )

    views = {"item": item_part, "pair": pair_part, "overall": rel}
    blocks = []
    for g, mixing in enumerate(world.readouts):
        view = views[HIST_VIEWS[g % len(HIST_VIEWS)]]
        seen = view + spec.noise_scale * rng.standard_normal(view.shape)
        block = seen @ mixing / spec.relevance_scale
        block += 0.1 * spec.noise_scale * rng.standard_normal(block.shape)
        blocks.append(np.tanh(block))  # engagement rates are bounded
    x_hist = np.concatenate(blocks, axis=1)
    cold_noise = rng.uniform(-COLD_HIST_NOISE, COLD_HIST_NOISE, size=x_hist.shape)
    x_hist = np.where(is_cold[:, None], cold_noise, x_hist)

    # embeddings are shipped with unit expected norm
    extra_blocks = [rng.standard_normal((n, w)) / np.sqrt(w) for w in extra]
    x_nonhist = np.concatenate([content / np.sqrt(k), query_rows / np.sqrt(k), *extra_blocks], axis=1)

    keep = 1.0 - spec.engagement_bias * is_cold if biased else np.ones(n)
    labels = (rng.random(p_star.shape) < p_star * keep[:, None]).astype(np.int64)

    meta = {
        "version": FORMAT_VERSION,
        "m": spec.m,
        "d_hist": spec.d_hist,
        "d_nonhist": spec.d_nonhist,
        "cold_age_threshold": spec.cold_age_threshold,
        "seed": spec.seed,
        "split": name,
    }
    qids = np.array([f"{name}-q{q}" for q in range(n_queries)], dtype=object).repeat(spec.items_per_query)
    iids = np.array([f"{name}-i{i}" for i in range(n)], dtype=object)
    return Dataset(meta, qids, iids, x_hist, x_nonhist, labels, is_cold, age, p_star)


def generate(spec: GenSpec) -> GeneratedData:
    """Build train (biased logged labels) and eval (unbiased labels) splits."""
    rng = np.random.default_rng(spec.seed)
    world = _World(spec, rng)
    train = _split(spec, world, spec.num_queries, "train", True, rng)
    evaluation = _split(spec, world, spec.eval_queries, "eval", False, rng)
    return GeneratedData(train, evaluation)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

META_KEYS = ("version", "m", "d_hist", "d_nonhist", "cold_age_threshold", "seed")
RECORD_KEYS = ("query_id", "item_id", "x_hist", "x_nonhist", "labels", "item_age_days", "is_cold")


def write_dataset(path, data) -> None:
    """Write a Dataset (or ``(meta, groups)``) as JSON Lines, metadata first."""
    if not isinstance(data, Dataset):
        meta, groups = data
        data = Dataset.from_groups(meta, groups)
    lines = [json.dumps(data.meta, sort_keys=True)]
    for inst in data.instances():
        record = {
            "query_id": inst.query_id,
            "item_id": inst.item_id,
            "x_hist": inst.x_hist,
            "x_nonhist": inst.x_nonhist,
            "labels": inst.labels,
            "item_age_days": inst.item_age_days,
            "is_cold": inst.is_cold,
        }
        if inst.p_star is not None:
            record["p_star"] = inst.p_star
        lines.append(json.dumps(record))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_vector(record: dict, key: str, length: int, lineno: int, integral: bool = False) -> list:
    value = record[key]
    if not isinstance(value, list) or len(value) != length:
        got = len(value) if isinstance(value, list) else type(value).__name__
        raise SchemaError(key, f"expected a list of length {length}, got {got}", lineno)
    kinds = (int,) if integral else (int, float)
    if any(isinstance(v, bool) or not isinstance(v, kinds) for v in value):
        raise SchemaError(key, "entries must be numbers", lineno)
    return value


def read_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty file: missing metadata line", 1)
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed metadata: {exc.msg}", 1) from None
    if not isinstance(meta, dict):
        raise DatasetFormatError("metadata line must be a JSON object", 1)
    for key in META_KEYS:
        if key not in meta:
            raise SchemaError(key, "missing from metadata", 1)
    m, dh, dnh = int(meta["m"]), int(meta["d_hist"]), int(meta["d_nonhist"])
    instances = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed JSON: {exc.msg}", lineno) from None
        if not isinstance(record, dict):
            raise DatasetFormatError("record must be a JSON object", lineno)
        for key in RECORD_KEYS:
            if key not in record:
                raise SchemaError(key, "missing", lineno)
        x_hist = _check_vector(record, "x_hist", dh, lineno)
        x_nonhist = _check_vector(record, "x_nonhist", dnh, lineno)
        labels = _check_vector(record, "labels", m, lineno, integral=True)
        if any(v not in (0, 1) for v in labels):
            raise SchemaError("labels", "entries must be 0 or 1", lineno)
        if not isinstance(record["is_cold"], bool):
            raise SchemaError("is_cold", "must be a boolean", lineno)
        age = record["item_age_days"]
        if isinstance(age, bool) or not isinstance(age, int) or age < 0:
            raise SchemaError("item_age_days", "must be a non-negative integer", lineno)
        p_star = record.get("p_star")
        if p_star is not None:
            p_star = _check_vector(record, "p_star", m, lineno)
        instances.append(
            Instance(
                str(record["query_id"]),
                str(record["item_id"]),
                [float(v) for v in x_hist],
                [float(v) for v in x_nonhist],
                labels,
                record["is_cold"],
                age,
                None if p_star is None else [float(v) for v in p_star],
            )
        )
    return Dataset.from_instances(meta, instances)


# ---------------------------------------------------------------------------
# linear probes
# ---------------------------------------------------------------------------


def fit_probe(x, y, steps: int = 300, learning_rate: float = 0.05, seed: int = 0):
    """Logistic regression as a single affine+sigmoid layer, full-batch Adam."""
    from .numgrad import Dense
    from .objectives import bce_loss

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    rng = np.random.default_rng(seed)
    layer = Dense(0.01 * rng.standard_normal((x.shape[1], 1)), np.zeros(1), activation="sigmoid")
    m = {k: np.zeros_like(v) for k, v in layer.params.items()}
    v = {k: np.zeros_like(p) for k, p in layer.params.items()}
    for t in range(1, steps + 1):
        out, trace = layer.forward(x)
        out = np.clip(out, 1e-12, 1 - 1e-12)
        grads = layer.backward(trace, bce_loss(out, y).grad)
        for k, g in grads.weight_grads.items():
            m[k] = 0.9 * m[k] + 0.1 * g
            v[k] = 0.999 * v[k] + 0.001 * g * g
            layer.params[k] -= learning_rate * (m[k] / (1 - 0.9**t)) / (np.sqrt(v[k] / (1 - 0.999**t)) + 1e-8)
    return layer
