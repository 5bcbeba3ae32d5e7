"""
Noise schedules, forward diffusion and deterministic DDIM sampling
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from app.models.denoiser import Condition, DenoiserParams, denoise_eps, init_denoiser, network_forward
from app.models.lora import LoraStack
from app.schemas import BaseTrainingConfig, ModelConfig, ScheduleConfig, ScheduleKind
from app.utils.datasets import LabeledDataset
from app.utils.optim import AdamW
from app.utils.rng import stream
from app.utils.tensor_core import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    mean,
    mul,
    no_grad,
    square,
    sub,
)

logger = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


class ScheduleError(ValueError):
    """Invalid schedule kind, horizon or step count"""


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Schedule tables indexed by t = 0..T

    Index 0 is the clean data (alpha_bar = 1, beta = 0); step_list holds the
    DDIM timesteps in descending order.
    """
    T: int
    kind: ScheduleKind
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    step_list: Tuple[int, ...]

    @property
    def chain(self) -> Tuple[int, ...]:
        """step_list followed by the terminal timestep 0"""
        return self.step_list + (0,)

    def successor(self, t: int) -> int:
        chain = self.chain
        try:
            i = chain.index(t)
        except ValueError:
            raise ScheduleError(f"Timestep {t} is not on the DDIM chain") from None
        if i + 1 >= len(chain):
            raise ScheduleError("t = 0 has no successor")
        return chain[i + 1]

    def chain_pairs(self, t_from: Optional[int] = None, t_to: int = 0) -> List[Tuple[int, int]]:
        """
        Consecutive (t_from, t_to) DDIM pairs between two chain timesteps

        Args:
            t_from: Starting timestep (defaults to the first DDIM step)
            t_to: Final timestep

        Returns:
            Pairs in execution order; empty when t_from == t_to
        """
        chain = self.chain
        start = chain[0] if t_from is None else t_from
        if start not in chain or t_to not in chain:
            raise ScheduleError(f"({start}, {t_to}) are not both on the DDIM chain")
        i, j = chain.index(start), chain.index(t_to)
        if j < i:
            raise ScheduleError(f"Cannot run the chain upwards from {start} to {t_to}")
        return list(zip(chain[i:j], chain[i + 1:j + 1]))


@dataclass(frozen=True)
class StepCoefficients:
    """x_to = a * x_from + b * eps + c * noise"""
    t_from: int
    t_to: int
    a: float
    b: float
    c: float


def _linear_betas(T: int) -> np.ndarray:
    scale = 1000.0 / T
    return np.linspace(1e-4 * scale, 2e-2 * scale, T)


def _cosine_betas(T: int) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    return 1.0 - alpha_bar[1:] / alpha_bar[:-1]


def build_schedule(T: int, kind: Union[ScheduleKind, str] = ScheduleKind.LINEAR, step_count: int = 50) -> NoiseSchedule:
    """
    Build beta / alpha / alpha_bar tables and the DDIM timestep list

    Args:
        T: Diffusion horizon
        kind: 'linear' or 'cosine'
        step_count: Number of DDIM steps

    Returns:
        NoiseSchedule
    """
    try:
        kind = ScheduleKind(kind)
    except ValueError:
        raise ScheduleError(f"Unknown schedule kind: {kind}") from None
    if T < 2:
        raise ScheduleError("T must be at least 2")
    if step_count < 2:
        raise ScheduleError("step_count must be at least 2")
    if step_count > T:
        raise ScheduleError(f"step_count {step_count} exceeds T = {T}")

    betas = _linear_betas(T) if kind == ScheduleKind.LINEAR else _cosine_betas(T)
    betas = np.clip(betas, 1e-12, MAX_BETA)
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)

    stride = T // step_count
    step_list = tuple(1 + stride * j for j in reversed(range(step_count)))
    logger.debug("Built %s schedule T=%d with %d DDIM steps", kind.value, T, step_count)
    return NoiseSchedule(T=T, kind=kind, beta=beta, alpha=alpha, alpha_bar=alpha_bar, step_list=step_list)


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    return build_schedule(config.T, config.kind, config.step_count)


def forward_diffuse(x0: np.ndarray, t: Union[int, np.ndarray], noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """
    x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise

    Args:
        x0: Clean samples (batch, d)
        t: Timestep, scalar or one per row
        noise: Standard normal noise, same shape as x0
        schedule: Noise schedule

    Returns:
        Noisy samples
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeError("forward_diffuse", x0.shape, noise.shape)
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ScheduleError(f"Timestep outside [0, {schedule.T}]")
    ab = schedule.alpha_bar[t]
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def ddim_coefficients(schedule: NoiseSchedule, t_from: int, t_to: int, eta: float = 0.0) -> StepCoefficients:
    """
    Affine coefficients of one DDIM update from t_from to t_to

    t_to == t_from gives the identity (1, 0, 0).

    Args:
        schedule: Noise schedule
        t_from: Current timestep
        t_to: Target timestep (<= t_from)
        eta: Stochasticity; 0 is deterministic

    Returns:
        StepCoefficients
    """
    if not 0 <= t_to <= t_from <= schedule.T:
        raise ScheduleError(f"Invalid DDIM step {t_from} -> {t_to}")
    if t_to == t_from:
        return StepCoefficients(t_from, t_to, 1.0, 0.0, 0.0)
    ab_from = float(schedule.alpha_bar[t_from])
    ab_to = float(schedule.alpha_bar[t_to])
    sigma = eta * np.sqrt((1.0 - ab_to) / (1.0 - ab_from)) * np.sqrt(1.0 - ab_from / ab_to)
    a = np.sqrt(ab_to / ab_from)
    b = np.sqrt(max(1.0 - ab_to - sigma ** 2, 0.0)) - a * np.sqrt(1.0 - ab_from)
    return StepCoefficients(t_from, t_to, float(a), float(b), float(sigma))


def ddim_step(x_t: Tensor, eps_pred: Tensor, coeffs: StepCoefficients, noise: Optional[np.ndarray] = None) -> Tensor:
    """
    x_to = a x_t + b eps_pred (+ c noise)

    Args:
        x_t: Current sample
        eps_pred: Predicted noise
        coeffs: Step coefficients
        noise: Fresh noise; required when c != 0

    Returns:
        Sample at coeffs.t_to
    """
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    eps_pred = eps_pred if isinstance(eps_pred, Tensor) else Tensor(eps_pred)
    if x_t.shape != eps_pred.shape:
        raise ShapeError("ddim_step", x_t.shape, eps_pred.shape)
    if not (np.all(np.isfinite(x_t.data)) and np.all(np.isfinite(eps_pred.data))):
        raise NonFiniteError("ddim_step")
    out = add(mul(x_t, coeffs.a), mul(eps_pred, coeffs.b))
    if coeffs.c != 0.0:
        if noise is None:
            raise ValueError("Stochastic DDIM step needs noise")
        out = add(out, coeffs.c * np.asarray(noise, dtype=np.float64))
    return out


def run_ddim(
    params: DenoiserParams,
    x: Tensor,
    t_from: int,
    t_to: int,
    schedule: NoiseSchedule,
    condition: Condition,
    guidance_scale: float,
    eta: float = 0.0,
    seed: int = 0,
    stack: Optional[LoraStack] = None,
    activation: Optional[Callable[[int], Iterable[int]]] = None
) -> Tensor:
    """
    Run consecutive DDIM steps from t_from down to t_to

    Args:
        params: Denoiser
        x: Sample at t_from
        t_from: First chain timestep
        t_to: Last chain timestep
        schedule: Noise schedule
        condition: Class ids or None
        guidance_scale: CFG scale
        eta: Stochasticity
        seed: Seed for per-step noise when eta > 0
        stack: LoRA stack
        activation: Maps a timestep to its active adapter indices

    Returns:
        Sample at t_to
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    for t_cur, t_next in schedule.chain_pairs(t_from, t_to):
        active = tuple(activation(t_cur)) if activation is not None else ()
        eps = denoise_eps(params, x, t_cur, condition, guidance_scale, stack=stack, active=active)
        coeffs = ddim_coefficients(schedule, t_cur, t_next, eta)
        noise = None
        if coeffs.c != 0.0:
            noise = stream(seed, "sample", step=t_cur).standard_normal(x.shape)
        x = ddim_step(x, eps, coeffs, noise)
    return x


def sample(
    params: DenoiserParams,
    condition: Condition,
    x_T: Union[Tensor, np.ndarray],
    schedule: NoiseSchedule,
    guidance_scale: float,
    eta: float = 0.0,
    seed: int = 0,
    stack: Optional[LoraStack] = None,
    activation: Optional[Callable[[int], Iterable[int]]] = None
) -> Tensor:
    """
    Full DDIM chain from step_list[0] to 0

    Differentiable when executed under a Tape. With eta = 0 the result is a
    deterministic function of (params, condition, x_T).
    """
    return run_ddim(params, x_T, schedule.step_list[0], 0, schedule, condition, guidance_scale,
                    eta=eta, seed=seed, stack=stack, activation=activation)


@dataclass
class BaseTrainingResult:
    params: DenoiserParams
    losses: List[float]
    initial_loss: float

    @property
    def final_loss(self) -> float:
        """Mean loss over the last tenth of training; the initial loss when no step ran"""
        if not self.losses:
            return self.initial_loss
        tail = self.losses[-max(1, len(self.losses) // 10):]
        return float(np.mean(tail))


class DiffusionTrainer:
    """
    Trains the base denoiser with the epsilon-prediction objective

    Labels are dropped to the null class with probability cond_dropout so
    that one network serves both CFG branches.
    """

    def __init__(self, schedule: NoiseSchedule, model_config: ModelConfig, training: BaseTrainingConfig, seed: int):
        self.schedule = schedule
        self.model_config = model_config
        self.training = training
        self.seed = seed

    def _batch_loss(self, params: DenoiserParams, dataset: LabeledDataset, step: int) -> Tensor:
        rng = stream(self.seed, "base", step)
        idx = rng.integers(0, len(dataset), size=self.training.batch_size)
        t = rng.integers(1, self.schedule.T + 1, size=self.training.batch_size)
        noise = rng.standard_normal((self.training.batch_size, dataset.data_dim))
        labels = np.where(rng.random(self.training.batch_size) < self.training.cond_dropout,
                          params.null_class, dataset.y[idx])
        x_t = forward_diffuse(dataset.x[idx], t, noise, self.schedule)
        pred = network_forward(params, Tensor(x_t), t, labels)
        return mean(square(sub(pred, noise)))

    def train(self, dataset: LabeledDataset, progress: bool = False) -> BaseTrainingResult:
        """
        Initialize and train a denoiser on a dataset

        Args:
            dataset: Normalized training data
            progress: Show a tqdm progress bar

        Returns:
            BaseTrainingResult with the trained parameters and per-step losses
        """
        params = init_denoiser(dataset.data_dim, dataset.num_classes, self.model_config,
                               stream(self.seed, "init", lane=0))
        optimizer = AdamW(params.parameters(), lr=self.training.lr, weight_decay=self.training.weight_decay)
        losses: List[float] = []
        with no_grad():
            initial_loss = self._batch_loss(params, dataset, 0).item()

        for step in tqdm(range(self.training.steps), desc="train-base", disable=not progress):
            with Tape() as tape:
                loss = self._batch_loss(params, dataset, step)
            grads = backward(tape, loss, params.parameters())
            optimizer.step(grads)
            losses.append(loss.item())

            if (step + 1) % self.training.log_every == 0:
                logger.info("train-base step %d loss %.5f", step + 1, float(np.mean(losses[-self.training.log_every:])))

        return BaseTrainingResult(params=params, losses=losses, initial_loss=initial_loss)
