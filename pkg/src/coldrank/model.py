"""Multi-task ranker: summarization -> cross layers -> MLP -> (residual) -> MMoE.

Parameters live in a flat ``dict[str, ndarray]`` keyed ``"<submodule>.W"`` /
``"<submodule>.b"``; the optimizer and the gradient checks iterate over it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .numgrad import (
    ShapeError,
    affine_backward,
    affine_forward,
    concat_backward,
    concat_forward,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
    softmax_backward,
    softmax_forward,
)

ModelParams = dict  # str -> np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    hist_groups: tuple[int, ...] = (16, 16, 16)
    nonhist_groups: tuple[int, ...] = (16, 16)
    summarization_dims: tuple[int, ...] = (16, 16, 16, 16, 16)
    num_cross_layers: int = 2
    mlp_dims: tuple[int, ...] = (64, 32)
    num_experts: int = 4
    expert_dim: int = 16
    num_tasks: int = 3
    residual_enabled: bool = False
    residual_proj_dim: int = 8

    def __post_init__(self):
        for name in ("hist_groups", "nonhist_groups", "summarization_dims", "mlp_dims"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not self.hist_groups or not self.nonhist_groups:
            raise ValueError("need at least one historical and one non-historical group")
        if len(self.summarization_dims) != len(self.hist_groups) + len(self.nonhist_groups):
            raise ValueError("summarization_dims needs one entry per feature group")
        dims = (
            list(self.hist_groups) + list(self.nonhist_groups) + list(self.summarization_dims)
            + list(self.mlp_dims) + [self.num_experts, self.expert_dim, self.num_tasks, self.residual_proj_dim]
        )
        if any(d < 1 for d in dims):
            raise ValueError("all dimensions must be >= 1")
        if not self.mlp_dims:
            raise ValueError("mlp_dims must be non-empty")
        if self.num_cross_layers < 0:
            raise ValueError("num_cross_layers must be >= 0")
        if self.residual_proj_dim > self.d_nonhist:
            raise ValueError("residual_proj_dim must not exceed d_nonhist")

    @property
    def d_hist(self) -> int:
        return sum(self.hist_groups)

    @property
    def d_nonhist(self) -> int:
        return sum(self.nonhist_groups)

    @property
    def d_summary(self) -> int:
        return sum(self.summarization_dims)

    @property
    def d_interaction(self) -> int:
        return self.mlp_dims[-1]

    @property
    def d_augmented(self) -> int:
        return self.d_interaction + (self.residual_proj_dim if self.residual_enabled else 0)

    @property
    def group_names(self) -> list[str]:
        return [f"hist{i}" for i in range(len(self.hist_groups))] + [
            f"nonhist{i}" for i in range(len(self.nonhist_groups))
        ]

    def group_slices(self) -> dict[str, tuple[str, slice]]:
        """Map group name -> (input block, column slice)."""
        out = {}
        start = 0
        for i, w in enumerate(self.hist_groups):
            out[f"hist{i}"] = ("hist", slice(start, start + w))
            start += w
        start = 0
        for i, w in enumerate(self.nonhist_groups):
            out[f"nonhist{i}"] = ("nonhist", slice(start, start + w))
            start += w
        return out

    def replace(self, **changes) -> "ModelConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ModelConfig(**values)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def _layer_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Ordered (d_in, d_out) for every affine submodule."""
    shapes: dict[str, tuple[int, int]] = {}
    widths = list(config.hist_groups) + list(config.nonhist_groups)
    for name, d_in, d_out in zip(config.group_names, widths, config.summarization_dims):
        shapes[f"sum_{name}"] = (d_in, d_out)
    d = config.d_summary
    for l in range(config.num_cross_layers):
        shapes[f"cross{l}"] = (d, d)
    d_in = d
    for k, d_out in enumerate(config.mlp_dims):
        shapes[f"mlp{k}"] = (d_in, d_out)
        d_in = d_out
    if config.residual_enabled:
        shapes["residual"] = (config.d_nonhist, config.residual_proj_dim)
    d_aug = config.d_augmented
    for e in range(config.num_experts):
        shapes[f"expert{e}"] = (d_aug, config.expert_dim)
    for t in range(config.num_tasks):
        shapes[f"gate{t}"] = (d_aug, config.num_experts)
    for t in range(config.num_tasks):
        shapes[f"head{t}"] = (config.expert_dim, 1)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in a fixed submodule order."""
    params: ModelParams = {}
    for name, (d_in, d_out) in _layer_shapes(config).items():
        limit = np.sqrt(6.0 / (d_in + d_out))
        params[f"{name}.W"] = rng.uniform(-limit, limit, size=(d_in, d_out))
        params[f"{name}.b"] = np.zeros(d_out)
    return params


def count_params(config: ModelConfig) -> dict:
    by_submodule = {name: d_in * d_out + d_out for name, (d_in, d_out) in _layer_shapes(config).items()}
    return {"total": sum(by_submodule.values()), "by_submodule": by_submodule}


def residual_overhead(config: ModelConfig) -> float:
    on = count_params(config.replace(residual_enabled=True))["total"]
    off = count_params(config.replace(residual_enabled=False))["total"]
    return on / off - 1.0


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class HeadTrace:
    """Trace of the prediction module F on one batch of augmented embeddings."""

    input: np.ndarray
    expert_traces: list = field(default_factory=list)
    experts: list = field(default_factory=list)
    gate_traces: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    head_traces: list = field(default_factory=list)
    scores: np.ndarray | None = None


@dataclass
class ForwardTrace:
    interaction_out: np.ndarray
    augmented_embedding: np.ndarray
    task_scores: np.ndarray
    head: HeadTrace
    cache: dict


def _check_inputs(x_hist, x_nonhist, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    x_hist = np.asarray(x_hist, dtype=np.float64)
    x_nonhist = np.asarray(x_nonhist, dtype=np.float64)
    if x_hist.ndim != 2 or x_hist.shape[1] != config.d_hist:
        raise ShapeError(f"x_hist must be (batch, {config.d_hist}), got {x_hist.shape}")
    if x_nonhist.ndim != 2 or x_nonhist.shape[1] != config.d_nonhist:
        raise ShapeError(f"x_nonhist must be (batch, {config.d_nonhist}), got {x_nonhist.shape}")
    if x_hist.shape[0] != x_nonhist.shape[0]:
        raise ShapeError(f"batch sizes differ: {x_hist.shape[0]} vs {x_nonhist.shape[0]}")
    return x_hist, x_nonhist


def _interaction(x_hist, x_nonhist, params: ModelParams, config: ModelConfig):
    cache: dict = {}
    blocks = []
    sum_traces = []
    slices = config.group_slices()
    for name in config.group_names:
        block, sl = slices[name]
        x = (x_hist if block == "hist" else x_nonhist)[:, sl]
        pre, aff = affine_forward(x, params[f"sum_{name}.W"], params[f"sum_{name}.b"])
        out, mask = relu_forward(pre)
        blocks.append(out)
        sum_traces.append((aff, mask))
    x0, widths = concat_forward(blocks)
    cache["summarization"] = sum_traces
    cache["summary_widths"] = widths
    cache["x0"] = x0

    x = x0
    cross = []
    for l in range(config.num_cross_layers):
        u, aff = affine_forward(x, params[f"cross{l}.W"], params[f"cross{l}.b"])
        cross.append((aff, u))
        x = x0 * u + x
    cache["cross"] = cross

    mlp = []
    h = x
    for k in range(len(config.mlp_dims)):
        pre, aff = affine_forward(h, params[f"mlp{k}.W"], params[f"mlp{k}.b"])
        h, mask = relu_forward(pre)
        mlp.append((aff, mask))
    cache["mlp"] = mlp
    return h, cache


def interaction_forward(x_hist, x_nonhist, params: ModelParams, config: ModelConfig) -> np.ndarray:
    x_hist, x_nonhist = _check_inputs(x_hist, x_nonhist, config)
    return _interaction(x_hist, x_nonhist, params, config)[0]


def head_forward(zbar, params: ModelParams, config: ModelConfig) -> HeadTrace:
    """MMoE over the augmented embedding; returns per-task probabilities in ``scores``."""
    zbar = np.asarray(zbar, dtype=np.float64)
    if zbar.ndim != 2 or zbar.shape[1] != config.d_augmented:
        raise ShapeError(f"augmented embedding must be (batch, {config.d_augmented}), got {zbar.shape}")
    tr = HeadTrace(input=zbar)
    for e in range(config.num_experts):
        pre, aff = affine_forward(zbar, params[f"expert{e}.W"], params[f"expert{e}.b"])
        out, mask = relu_forward(pre)
        tr.expert_traces.append((aff, mask))
        tr.experts.append(out)
    scores = np.empty((zbar.shape[0], config.num_tasks))
    for t in range(config.num_tasks):
        logits, aff = affine_forward(zbar, params[f"gate{t}.W"], params[f"gate{t}.b"])
        gate, _ = softmax_forward(logits)
        tr.gate_traces.append(aff)
        tr.gates.append(gate)
        mix = sum(gate[:, e : e + 1] * tr.experts[e] for e in range(config.num_experts))
        logit, h_aff = affine_forward(mix, params[f"head{t}.W"], params[f"head{t}.b"])
        tr.head_traces.append(h_aff)
        scores[:, t] = sigmoid_forward(logit)[0][:, 0]
    tr.scores = scores
    return tr


def predict(x_hist, x_nonhist, params: ModelParams, config: ModelConfig) -> ForwardTrace:
    x_hist, x_nonhist = _check_inputs(x_hist, x_nonhist, config)
    z, cache = _interaction(x_hist, x_nonhist, params, config)
    if config.residual_enabled:
        pre, aff = affine_forward(x_nonhist, params["residual.W"], params["residual.b"])
        proj, mask = relu_forward(pre)
        zbar, widths = concat_forward([z, proj])
        cache["residual"] = (aff, mask, widths)
    else:
        zbar = z
    head = head_forward(zbar, params, config)
    cache["batch"] = x_hist.shape[0]
    return ForwardTrace(z, zbar, head.scores, head, cache)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _add(grads: dict, name: str, layer_grad) -> None:
    for key, g in layer_grad.weight_grads.items():
        k = f"{name}.{key}"
        if k in grads:
            grads[k] = grads[k] + g
        else:
            grads[k] = g


def head_backward(trace: HeadTrace, upstream_task_grads, params: ModelParams, config: ModelConfig):
    """Backprop dL/dscores through F. Returns ``(param_grads, grad_wrt_augmented_embedding)``."""
    g_scores = np.asarray(upstream_task_grads, dtype=np.float64)
    if g_scores.shape != trace.scores.shape:
        raise ShapeError(f"task gradient shape {g_scores.shape} != scores shape {trace.scores.shape}")
    grads: dict = {}
    d_zbar = np.zeros_like(trace.input)
    d_experts = [np.zeros_like(e) for e in trace.experts]
    for t in range(config.num_tasks):
        s = trace.scores[:, t : t + 1]
        d_logit = sigmoid_backward(s, g_scores[:, t : t + 1])
        hg = affine_backward(trace.head_traces[t], d_logit)
        _add(grads, f"head{t}", hg)
        d_mix = hg.input_grad
        gate = trace.gates[t]
        d_gate = np.empty_like(gate)
        for e in range(config.num_experts):
            d_gate[:, e] = np.sum(d_mix * trace.experts[e], axis=1)
            d_experts[e] += gate[:, e : e + 1] * d_mix
        d_gate_logits = softmax_backward(gate, d_gate)
        gg = affine_backward(trace.gate_traces[t], d_gate_logits)
        _add(grads, f"gate{t}", gg)
        d_zbar += gg.input_grad
    for e in range(config.num_experts):
        aff, mask = trace.expert_traces[e]
        eg = affine_backward(aff, relu_backward(mask, d_experts[e]))
        _add(grads, f"expert{e}", eg)
        d_zbar += eg.input_grad
    return grads, d_zbar


@dataclass
class Gradients:
    params: dict
    x_hist: np.ndarray
    x_nonhist: np.ndarray


def backward(
    trace: ForwardTrace,
    upstream_task_grads,
    params: ModelParams,
    config: ModelConfig,
    extra_zbar_grad=None,
    extra_param_grads: dict | None = None,
) -> Gradients:
    """Exact gradients for every parameter and both input blocks.

    ``extra_zbar_grad`` / ``extra_param_grads`` let a second branch that
    shares this trace's embedding (the mixup branch) join the same backward.
    """
    if trace.cache.get("batch") != trace.task_scores.shape[0] or (
        trace.augmented_embedding.shape[1] != config.d_augmented
    ):
        raise ShapeError("stale trace: shapes do not match the current config")
    grads, d_zbar = head_backward(trace.head, upstream_task_grads, params, config)
    if extra_param_grads:
        for k, g in extra_param_grads.items():
            grads[k] = grads[k] + g if k in grads else g
    if extra_zbar_grad is not None:
        d_zbar = d_zbar + extra_zbar_grad

    cache = trace.cache
    batch = trace.task_scores.shape[0]
    d_nonhist = np.zeros((batch, config.d_nonhist))
    d_hist = np.zeros((batch, config.d_hist))

    if config.residual_enabled:
        aff, mask, widths = cache["residual"]
        d_z, d_proj = concat_backward(widths, d_zbar)
        rg = affine_backward(aff, relu_backward(mask, d_proj))
        _add(grads, "residual", rg)
        d_nonhist += rg.input_grad
    else:
        d_z = d_zbar

    g = d_z
    for k in reversed(range(len(config.mlp_dims))):
        aff, mask = cache["mlp"][k]
        lg = affine_backward(aff, relu_backward(mask, g))
        _add(grads, f"mlp{k}", lg)
        g = lg.input_grad

    # x_{l+1} = x0 * u_l + x_l,  u_l = x_l W_l + b_l
    x0 = cache["x0"]
    d_x0 = np.zeros_like(x0)
    for l in reversed(range(config.num_cross_layers)):
        aff, u = cache["cross"][l]
        d_x0 += g * u
        cg = affine_backward(aff, g * x0)
        _add(grads, f"cross{l}", cg)
        g = g + cg.input_grad
    d_x0 += g

    slices = config.group_slices()
    pieces = concat_backward(cache["summary_widths"], d_x0)
    for name, piece, (aff, mask) in zip(config.group_names, pieces, cache["summarization"]):
        sg = affine_backward(aff, relu_backward(mask, piece))
        _add(grads, f"sum_{name}", sg)
        block, sl = slices[name]
        if block == "hist":
            d_hist[:, sl] += sg.input_grad
        else:
            d_nonhist[:, sl] += sg.input_grad

    for k, v in params.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return Gradients(grads, d_hist, d_nonhist)
