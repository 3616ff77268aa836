import numpy as np
import pytest

from coldrank.model import ModelConfig, backward, init_params, predict
from coldrank.numgrad import numeric_gradient, relative_error
from coldrank.objectives import TrainConfig, draw_mixup
from coldrank.trainer import batch_loss_and_grads

# every submodule present, but small enough to check every coordinate
SMALL = ModelConfig(
    hist_groups=(2, 2, 2),
    nonhist_groups=(2, 2),
    summarization_dims=(3, 3, 3, 3, 3),
    num_cross_layers=2,
    mlp_dims=(6, 5),
    num_experts=3,
    expert_dim=4,
    num_tasks=3,
    residual_proj_dim=2,
)


def jittered_params(config, rng):
    # nonzero biases keep ReLUs away from the all-dead corner
    params = init_params(config, rng)
    return {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}


def random_batch(config, rng, batch=8):
    x_hist = rng.standard_normal((batch, config.d_hist))
    x_nonhist = rng.standard_normal((batch, config.d_nonhist))
    labels = rng.integers(0, 2, size=(batch, config.num_tasks))
    cold = np.arange(batch) % 3 == 0
    return x_hist, x_nonhist, labels, cold


def combined_gradcheck(seed, config=SMALL, **train_overrides):
    """Max relative error of every parameter gradient of the full objective."""
    rng = np.random.default_rng(seed)
    tc = TrainConfig(
        mixup_enabled=True, scorereg_enabled=True, residual_enabled=True, lambda_mmd=1.0, lambda_mix=0.5,
        **train_overrides,
    )
    config = config.replace(residual_enabled=tc.residual_enabled)
    params = jittered_params(config, rng)
    xh, xn, y, cold = random_batch(config, rng)
    draws = draw_mixup(len(y), tc.mixup_alpha, rng) if tc.mixup_enabled else None
    analytic = batch_loss_and_grads(params, config, tc, xh, xn, y, cold, draws, with_diagnostics=False).grads

    def total():
        return batch_loss_and_grads(params, config, tc, xh, xn, y, cold, draws, with_diagnostics=False).loss.total

    return max(relative_error(analytic[k], numeric_gradient(total, params[k])) for k in params)


def model_input_gradcheck(seed, config=SMALL):
    rng = np.random.default_rng(seed)
    params = jittered_params(config, rng)
    xh, xn, _, _ = random_batch(config, rng)
    up = rng.standard_normal((len(xh), config.num_tasks))
    grads = backward(predict(xh, xn, params, config), up, params, config)

    def probe():
        return float(np.sum(predict(xh, xn, params, config).task_scores * up))

    return max(
        relative_error(grads.x_hist, numeric_gradient(probe, xh)),
        relative_error(grads.x_nonhist, numeric_gradient(probe, xn)),
        *(relative_error(grads.params[k], numeric_gradient(probe, params[k])) for k in params),
    )


@pytest.fixture
def small_config():
    return SMALL


# --- acceptance summary -----------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one PASS/FAIL line per acceptance criterion; printed after the run."""

    def log(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
