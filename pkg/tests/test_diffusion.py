import numpy as np
import pytest

from app.models.denoiser import init_denoiser
from app.schemas import BaseTrainingConfig, ModelConfig
from app.services.diffusion_service import (
    DiffusionTrainer,
    ScheduleError,
    StepCoefficients,
    build_schedule,
    ddim_coefficients,
    ddim_step,
    forward_diffuse,
    sample,
)
from app.utils.datasets import generate_dataset
from app.utils.tensor_core import Tape, Tensor, backward, check_parameters, mean, no_grad, square, stop_gradient, sum_


def test_default_step_list(schedule):
    assert len(schedule.step_list) == 50
    assert schedule.step_list[0] == 981
    assert schedule.step_list[-1] == 1
    assert all(a - b == 20 for a, b in zip(schedule.step_list, schedule.step_list[1:]))


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_tables(kind):
    s = build_schedule(1000, kind, 50)
    assert abs(s.alpha_bar[0] - 1.0) < 1e-12
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
    assert np.allclose(s.alpha, 1.0 - s.beta)


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        build_schedule(1000, "quadratic", 50)
    with pytest.raises(ScheduleError):
        build_schedule(10, "linear", 50)


def test_forward_diffuse_limits(schedule, rng):
    x0 = rng.standard_normal((4, 2))
    noise = rng.standard_normal((4, 2))
    assert np.array_equal(forward_diffuse(x0, 0, noise, schedule), x0)
    terminal = forward_diffuse(np.zeros((4, 2)), schedule.T, noise, schedule)
    assert np.allclose(terminal, noise, atol=1e-2)


def test_forward_diffuse_shape_mismatch(schedule):
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((2, 2)), 10, np.zeros((3, 2)), schedule)


def test_forward_marginal_mean(schedule):
    rng = np.random.default_rng(0)
    n = 100_000
    x0 = np.full((n, 1), 0.8)
    x_t = forward_diffuse(x0, 300, rng.standard_normal((n, 1)), schedule)
    expected = np.sqrt(schedule.alpha_bar[300]) * 0.8
    assert abs(x_t.mean() - expected) < 4 / np.sqrt(n)


def test_deterministic_coefficients(schedule):
    pairs = list(zip(schedule.step_list, schedule.step_list[1:] + (0,)))
    assert all(ddim_coefficients(schedule, a, b, 0.0).c == 0.0 for a, b in pairs)
    identity = ddim_coefficients(schedule, 501, 501)
    assert (identity.a, identity.b, identity.c) == (1.0, 0.0, 0.0)


@pytest.mark.parametrize("t_from, t_to, eta", [(981, 961, 0.0), (501, 481, 0.0), (741, 501, 0.0),
                                               (261, 1, 0.5), (21, 1, 1.0), (1, 0, 0.0)])
def test_coefficient_form_matches_x0_form(schedule, rng, t_from, t_to, eta):
    x_t = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    z = rng.standard_normal((3, 2))
    c = ddim_coefficients(schedule, t_from, t_to, eta)
    affine_form = c.a * x_t + c.b * eps + c.c * z

    ab_f, ab_t = schedule.alpha_bar[t_from], schedule.alpha_bar[t_to]
    sigma = eta * np.sqrt((1 - ab_t) / (1 - ab_f)) * np.sqrt(1 - ab_f / ab_t)
    x0_hat = (x_t - np.sqrt(1 - ab_f) * eps) / np.sqrt(ab_f)
    textbook = np.sqrt(ab_t) * x0_hat + np.sqrt(1 - ab_t - sigma ** 2) * eps + sigma * z
    assert np.allclose(affine_form, textbook, atol=1e-10)


def test_identity_step_returns_input(rng):
    x = rng.standard_normal((2, 3))
    out = ddim_step(Tensor(x), Tensor(rng.standard_normal((2, 3))), StepCoefficients(5, 5, 1.0, 0.0, 0.0))
    assert np.array_equal(out.data, x)


def test_true_noise_lands_on_forward_marginal(schedule, rng):
    x0 = rng.standard_normal((5, 2))
    noise = rng.standard_normal((5, 2))
    x_t = forward_diffuse(x0, 501, noise, schedule)
    out = ddim_step(Tensor(x_t), Tensor(noise), ddim_coefficients(schedule, 501, 481))
    assert np.allclose(out.data, forward_diffuse(x0, 481, noise, schedule), atol=1e-10)


def test_stopped_eps_branch_gradient_is_carry(schedule, rng):
    x = Tensor.parameter(rng.standard_normal((1, 3)), "x")
    coeffs = ddim_coefficients(schedule, 501, 481)
    with Tape() as tape:
        eps = square(stop_gradient(x))
        out = sum_(ddim_step(x, eps, coeffs))
    assert np.allclose(backward(tape, out, [x])["x"], coeffs.a)


def _gaussian_ddim(schedule, x_T, s):
    x = x_T
    for t_from, t_to in schedule.chain_pairs():
        ab = schedule.alpha_bar[t_from]
        eps = x * np.sqrt(1 - ab) / (ab * s ** 2 + 1 - ab)
        c = ddim_coefficients(schedule, t_from, t_to)
        x = c.a * x + c.b * eps
    return x


def test_ddim_converges_with_more_steps():
    # exact eps for N(0, s^2) data; the probability-flow endpoint is x_T * s / sqrt(ab s^2 + 1 - ab)
    s = 0.5
    x_T = np.linspace(-2, 2, 9)
    errors = []
    for steps in (25, 50, 200):
        sched = build_schedule(1000, "linear", steps)
        ab = sched.alpha_bar[sched.step_list[0]]
        exact = x_T * s / np.sqrt(ab * s ** 2 + 1 - ab)
        errors.append(np.mean((_gaussian_ddim(sched, x_T, s) - exact) ** 2))
    assert errors[0] > errors[1] > errors[2]


def test_sample_is_deterministic(denoiser, schedule, rng):
    x_T = rng.standard_normal((6, 2))
    condition = np.array([0, 1, 0, 1, 0, 1])
    with no_grad():
        a = sample(denoiser, condition, x_T, schedule, 2.0)
        b = sample(denoiser, condition, x_T, schedule, 2.0)
    assert a.data.tobytes() == b.data.tobytes()


def test_stochastic_sample_depends_on_seed(denoiser, schedule, rng):
    x_T = rng.standard_normal((3, 2))
    with no_grad():
        a = sample(denoiser, None, x_T, schedule, 0.0, eta=1.0, seed=1)
        b = sample(denoiser, None, x_T, schedule, 0.0, eta=1.0, seed=2)
    assert not np.allclose(a.data, b.data)


def test_sample_gradient_on_short_chain(tiny_model, rng):
    toy = build_schedule(8, "linear", 4)
    params = init_denoiser(2, 2, tiny_model, rng)
    x_T = rng.standard_normal((3, 2)) + 0.3
    condition = np.array([0, 1, 1])

    def objective():
        return mean(square(sample(params, condition, x_T, toy, 1.5)))

    assert check_parameters(objective, params.parameters(), coords=20, rng=rng) < 1e-3


def test_zero_step_training_reports_initial_loss(schedule, tiny_model):
    dataset = generate_dataset("points2d", 200, seed=0)
    config = BaseTrainingConfig(steps=0, batch_size=32)
    result = DiffusionTrainer(schedule, tiny_model, config, seed=0).train(dataset)
    assert result.losses == []
    assert np.isfinite(result.final_loss)
    assert result.final_loss == result.initial_loss

    one_step = DiffusionTrainer(schedule, tiny_model, config.model_copy(update={"steps": 1}), seed=0).train(dataset)
    assert one_step.losses[0] == result.initial_loss


@pytest.mark.slow
def test_trained_model_samples_requested_mode(schedule):
    dataset = generate_dataset("points2d", 10000, seed=0)
    result = DiffusionTrainer(schedule, ModelConfig(), BaseTrainingConfig(), seed=0).train(dataset)
    x_T = np.random.default_rng(5).standard_normal((1000, 2))
    with no_grad():
        x0 = sample(result.params, np.zeros(1000, dtype=np.int64), x_T, schedule, 2.0).data
    points = x0 * dataset.norm_std + dataset.norm_mean
    distance = np.linalg.norm(points - np.array([-1.5, 0.0]), axis=1)
    assert np.mean(distance <= 3 * 0.3) >= 0.95
